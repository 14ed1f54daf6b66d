"""Run orchestration, per-frame CSV logs and summaries."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import RunConfig
from .controller import AdaptationMode, Controller, StepReport
from .data.frames import StereoFrame, central_crop
from .data.io import load_sequence
from .data.synthetic import iter_sequence
from .network import Network

REPORT_FIELDS = ["frame_idx", "mode", "epe_before", "d1_before", "loss_full_res",
                 "selected_module", "forward_ms", "adapt_ms"]
COMPARE_FIELDS = ["mode", "runs", "d1_all", "d1_all_std", "epe", "epe_std", "fps"]
_RANDOMISED = (AdaptationMode.MAD_FULL, AdaptationMode.MAD_RAND)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)        # shortest string that parses back to the same float
    return str(value)


def report_row(report: StepReport) -> list[str]:
    return [_cell(getattr(report, name)) for name in REPORT_FIELDS]


def _parse(name: str, text: str):
    if text == "":
        return None
    if name in ("frame_idx", "selected_module"):
        return int(text)
    if name == "mode":
        return text
    return float(text)


def read_reports(path) -> list[StepReport]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [StepReport(**{k: _parse(k, row[k]) for k in REPORT_FIELDS}) for row in reader]


class ReportWriter:
    """Append-only CSV; every row is flushed as soon as it is written."""

    def __init__(self, path):
        self.path = Path(path)
        self._f = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._f)
        self._w.writerow(REPORT_FIELDS)
        self._f.flush()

    def write(self, report: StepReport):
        self._w.writerow(report_row(report))
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def frame_source(cfg: RunConfig, seed: int | None = None) -> Iterator[StereoFrame]:
    """Frames for a run: a manifest (looped ``repeat`` times) or the generator."""
    seed = cfg.seed if seed is None else seed
    for _ in range(cfg.repeat):
        if cfg.manifest is not None:
            frames: Iterable[StereoFrame] = load_sequence(cfg.manifest)
        else:
            frames = iter_sequence(cfg.length, cfg.resolution, cfg.scene_spec(), seed)
        for frame in frames:
            if cfg.crop is not None:
                frame = central_crop(frame, *cfg.crop)
            yield frame


def run_adaptation(net: Network, frames: Iterable[StereoFrame], mode, lr: float = 1e-4,
                   seed: int = 0, csv_path=None, controller_hook=None) -> list[StepReport]:
    ctl = Controller(net, mode, lr=lr, seed=seed)
    if controller_hook is not None:
        ctl.after_metrics = controller_hook
    writer = ReportWriter(csv_path) if csv_path is not None else None
    reports = []
    try:
        for frame in frames:
            r = ctl.step(frame)
            reports.append(r)
            if writer is not None:
                writer.write(r)
    finally:
        if writer is not None:
            writer.close()
    return reports


def _nanmean(values) -> float:
    arr = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
    return float(np.nanmean(arr)) if np.any(np.isfinite(arr)) else math.nan


def running_mean(values) -> np.ndarray:
    arr = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
    ok = np.isfinite(arr)
    counts = np.cumsum(ok)
    sums = np.cumsum(np.where(ok, arr, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def summarize(reports: list[StepReport], curve_points: int = 50) -> dict:
    """Mean EPE / D1, median FPS and running-mean D1 samples."""
    totals = np.array([r.forward_ms + r.adapt_ms for r in reports])
    curve = running_mean([r.d1_before for r in reports])
    n = len(reports)
    idx = sorted({min(n - 1, int(round(i))) for i in np.linspace(0, n - 1, min(curve_points, n))}) if n else []
    return {
        "frames": n,
        "mean_epe": _nanmean([r.epe_before for r in reports]),
        "mean_d1_all": _nanmean([r.d1_before for r in reports]),
        "mean_loss": _nanmean([r.loss_full_res for r in reports]),
        "median_fps": float(1000.0 / np.median(totals)) if n else math.nan,
        "median_ms": float(np.median(totals)) if n else math.nan,
        "running_d1": [[i, float(curve[i])] for i in idx],
    }


def compare(net_factory, cfg: RunConfig, modes=None, out_dir=None) -> list[dict]:
    """Every mode on the same frames; randomised MAD variants repeat over seeds.

    ``net_factory()`` must return a fresh copy of the starting network.
    """
    modes = [AdaptationMode(m) for m in (modes or list(AdaptationMode))]
    frames = list(frame_source(cfg))
    rows = []
    for mode in modes:
        seeds = range(cfg.compare_seeds) if mode in _RANDOMISED else range(1)
        d1s, epes, fps = [], [], []
        for s in seeds:
            csv_path = None
            if out_dir is not None:
                csv_path = Path(out_dir) / f"{mode.value.lower()}_seed{cfg.seed + s}.csv"
            reports = run_adaptation(net_factory(), frames, mode, cfg.lr, cfg.seed + s, csv_path)
            summary = summarize(reports)
            d1s.append(summary["mean_d1_all"])
            epes.append(summary["mean_epe"])
            fps.append(summary["median_fps"])
        rows.append({
            "mode": mode.value,
            "runs": len(d1s),
            "d1_all": float(np.mean(d1s)),
            "d1_all_std": float(np.std(d1s)),
            "epe": float(np.mean(epes)),
            "epe_std": float(np.std(epes)),
            "fps": float(np.median(fps)),
        })
    if out_dir is not None:
        write_table(Path(out_dir) / "compare.csv", rows, COMPARE_FIELDS)
    return rows


def write_table(path, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row[k]) for k in columns})
