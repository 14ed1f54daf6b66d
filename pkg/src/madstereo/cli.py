"""Command-line entry point: pretrain | adapt | eval | infer | compare | gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from PIL import Image

from . import experiments
from .config import RunConfig
from .data.io import colorize, read_image, write_pfm
from .data.synthetic import iter_sequence
from .gradcheck import run_suite
from .network import build_network, forward, load_checkpoint, save_checkpoint
from .training import evaluate, pretrain

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
HELDOUT_OFFSET = 1_000_003      # keeps held-out frames disjoint from training seeds


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    cfg.validate()
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return cfg


def _load_net(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ValueError("a checkpoint is required (--checkpoint or 'checkpoint' in the config)")
    return load_checkpoint(cfg.checkpoint)


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2))


def cmd_pretrain(cfg: RunConfig) -> dict:
    net = build_network(cfg.network_config(), cfg.seed)
    scene = cfg.scene_spec("pretrain_scene")
    curve = pretrain(net, scene, cfg.pretrain_iterations, cfg.resolution, cfg.pretrain_lr, cfg.seed)
    out = Path(cfg.out)
    save_checkpoint(net, out / "checkpoint.bin")
    experiments.write_table(out / "pretrain_curve.csv", curve, ["iteration", "loss", "epe"])
    heldout = iter_sequence(20, cfg.resolution, replace(scene, scene_length=1), cfg.seed + HELDOUT_OFFSET)
    summary = {"iterations": cfg.pretrain_iterations, "heldout": evaluate(net, heldout),
               "checksum": net.checksum()}
    _write_json(out / "pretrain_summary.json", summary)
    return summary


def cmd_adapt(cfg: RunConfig) -> dict:
    net = _load_net(cfg)
    out = Path(cfg.out)
    reports = experiments.run_adaptation(net, experiments.frame_source(cfg), cfg.mode, cfg.lr, cfg.seed,
                                         out / "frames.csv")
    summary = experiments.summarize(reports, cfg.curve_points)
    summary["mode"] = cfg.mode
    _write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    net = _load_net(cfg)
    metrics = evaluate(net, experiments.frame_source(cfg))
    _write_json(Path(cfg.out) / "metrics.json", metrics)
    return metrics


def cmd_infer(cfg: RunConfig, left_path, right_path) -> dict:
    net = _load_net(cfg)
    left, right = read_image(left_path), read_image(right_path)
    disp = forward(net, left, right).full.data[0, 0]
    out = Path(cfg.out)
    write_pfm(out / "disparity.pfm", disp)
    Image.fromarray(colorize(disp)).save(out / "disparity_color.png")
    return {"disparity": str(out / "disparity.pfm"), "mean": float(disp.mean())}


def cmd_compare(cfg: RunConfig) -> list[dict]:
    base = _load_net(cfg)
    state = base.state()

    def fresh():
        net = build_network(base.config)
        net.load_state(state)
        return net

    return experiments.compare(fresh, cfg, out_dir=cfg.out)


def cmd_gradcheck(cfg: RunConfig) -> bool:
    results = run_suite(seed=cfg.seed)
    rows = [{"op": r.name, "error": r.error, "tolerance": r.tolerance, "passed": r.passed}
            for r in results]
    experiments.write_table(Path(cfg.out) / "gradcheck.csv", rows, ["op", "error", "tolerance", "passed"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:20s} {r.error:.3e} < {r.tolerance:.0e}")
    return all(r.passed for r in results)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madstereo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "adapt", "eval", "infer", "compare", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name in ("adapt", "eval", "infer", "compare"):
            p.add_argument("--checkpoint")
        if name == "adapt":
            p.add_argument("--mode")
        if name == "infer":
            p.add_argument("--left", required=True)
            p.add_argument("--right", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = _config(args)
        if args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(cfg) else EXIT_NUMERICAL
        if args.command == "infer":
            result = cmd_infer(cfg, args.left, args.right)
        else:
            result = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
                      "compare": cmd_compare}[args.command](cfg)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if isinstance(result, dict):
        printable = {k: v for k, v in result.items() if k != "running_d1"}
        print(json.dumps(printable, default=float))
    else:
        for row in result:
            print(json.dumps(row))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
