"""End-to-end acceptance checks at desk scale.

The adaptation experiments (criteria 4 to 7) share one set of runs: a single
pretrained checkpoint, then every mode over the same 3000-frame domain-B
sequence for each of five seeds.  The first 1000 frames of each run are the
1000-frame experiment, since generation is prefix-deterministic.  A full pass
takes a couple of hours on one CPU core.
"""

import time

import numpy as np
import pytest

from madstereo import gradcheck
from madstereo.controller import (
    AdaptationHistogram,
    AdaptationMode,
    Controller,
    ControllerState,
    sample_module,
    update_histogram,
)
from madstereo.data import SceneSpec, domain_a, domain_b, iter_sequence
from madstereo.loss import reprojection_loss
from madstereo.network import NetworkConfig, build_network, count_parameters
from madstereo.training import pretrain

RESOLUTION = (96, 160)
PRETRAIN_ITERATIONS = 2000
PRETRAIN_LR = 1e-3
ADAPT_LR = 1e-4
SEEDS = range(5)
LONG_RUN = 3000
SHORT_RUN = 1000
MODES = list(AdaptationMode)


# --------------------------------------------------------------------------
# shared experiment

@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    base = build_network(NetworkConfig.desk(), seed=0)
    pretrain(base, domain_a(), PRETRAIN_ITERATIONS, RESOLUTION, lr=PRETRAIN_LR, seed=0)
    pretrain_s = time.perf_counter() - t0
    state = base.state()

    runs = {}
    for seed in SEEDS:
        for mode in MODES:
            net = build_network(base.config)
            net.load_state(state)
            ctl = Controller(net, mode, lr=ADAPT_LR, seed=seed)
            epe, d1, wall = [], [], []
            start = time.perf_counter()
            short_s = None
            frames = iter_sequence(LONG_RUN, RESOLUTION, domain_b(), 1000 + seed)
            for i, frame in enumerate(frames):
                t = time.perf_counter()
                r = ctl.step(frame)
                wall.append(time.perf_counter() - t)
                epe.append(r.epe_before)
                d1.append(r.d1_before)
                if i + 1 == SHORT_RUN:
                    short_s = time.perf_counter() - start
            runs[seed, mode] = {"epe": np.array(epe), "d1": np.array(d1),
                                "wall": np.array(wall), "short_s": short_s}
    return {"pretrain_s": pretrain_s, "runs": runs}


# --------------------------------------------------------------------------
# 1

def test_gradient_suite(criterion_log):
    t0 = time.perf_counter()
    results = gradcheck.run_suite()
    elapsed = time.perf_counter() - t0
    network = [r for r in results if r.tolerance == gradcheck.NETWORK_TOLERANCE]
    ops = [r for r in results if r.tolerance == gradcheck.OP_TOLERANCE]
    worst_op = max(ops, key=lambda r: r.error)
    passed = (all(r.error < 1e-5 for r in ops) and all(r.error < 1e-4 for r in network)
              and len(network) == 1 and elapsed < 120)
    criterion_log(1, "gradient suite", passed,
                  f"{len(ops)} ops worst {worst_op.name}={worst_op.error:.1e}, "
                  f"micro network {network[0].error:.1e}, {elapsed:.0f}s")
    assert passed


# --------------------------------------------------------------------------
# 2

def _transcribed_update(bins, prev2, prev, loss_t, idx):
    l_exp = 2 * prev - prev2
    gamma = l_exp - loss_t
    out = [0.99 * b for b in bins]
    out[idx] = out[idx] + 0.01 * gamma
    return out


def test_mad_arithmetic_oracle(criterion_log):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(10_000):
        p = int(rng.integers(1, 9))
        bins = rng.normal(0, 3, p)
        prev2, prev, loss_t = (float(v) for v in rng.uniform(0, 5, 3))
        idx = int(rng.integers(p))
        out = update_histogram(AdaptationHistogram(bins.copy()), ControllerState(prev, prev2, idx, 2), loss_t)
        if out.bins.tolist() != _transcribed_update(bins.tolist(), prev2, prev, loss_t, idx):
            mismatches += 1

    hist = AdaptationHistogram(np.array([0.8, -0.3, 0.1, 0.0, 1.2]))
    draws = 100_000
    counts = np.bincount([sample_module(hist, rng) for _ in range(draws)], minlength=5)
    p = hist.probabilities()
    z = np.abs(counts / draws - p) / np.sqrt(p * (1 - p) / draws)
    passed = mismatches == 0 and bool(np.all(z < 3))
    criterion_log(2, "MAD arithmetic oracle", passed,
                  f"{mismatches} mismatches in 10k updates, max |z| {z.max():.2f} over 100k draws")
    assert passed


# --------------------------------------------------------------------------
# 3

def test_generator_loss_consistency(criterion_log):
    worst, not_increasing = 0.0, 0
    families = ("dots", "perlin", "stripes", "blobs")
    count = 0
    for k, family in enumerate(families):
        spec = SceneSpec(texture_family=family, scene_length=5)
        for frame in iter_sequence(25, RESOLUTION, spec, 300 + k):
            valid = frame.valid_mask

            def loss_at(d):
                return float(reprojection_loss(frame.left, frame.right, d).per_pixel.data[valid].mean())

            base = loss_at(frame.gt_disparity)
            worst = max(worst, base)
            if not (loss_at(frame.gt_disparity + 1) > base and loss_at(frame.gt_disparity - 1) > base):
                not_increasing += 1
            count += 1
    passed = count == 100 and worst < 1e-3 and not_increasing == 0
    criterion_log(3, "generator/loss consistency", passed,
                  f"{count} frames, worst valid-pixel loss {worst:.2e}, {not_increasing} non-increasing perturbations")
    assert passed


# --------------------------------------------------------------------------
# 4

def test_domain_shift_adaptation(experiment, criterion_log):
    runs = experiment["runs"]
    ok, details, runtime = 0, [], experiment["pretrain_s"]
    for seed in SEEDS:
        none, full = runs[seed, AdaptationMode.NONE], runs[seed, AdaptationMode.FULL]
        d1_none, d1_full = none["d1"][:SHORT_RUN], full["d1"][:SHORT_RUN]
        tail_none = d1_none[-200:].mean()
        tail_full = d1_full[-200:].mean()
        good = d1_none.mean() > 3 * d1_full.mean() and tail_full <= 0.5 * tail_none
        ok += good
        runtime += none["short_s"] + full["short_s"]
        details.append(f"s{seed}:{d1_none.mean():.1f}/{d1_full.mean():.1f}"
                       f"(tail {tail_none:.1f}/{tail_full:.1f}){'+' if good else '-'}")
    passed = ok >= 4 and runtime <= 30 * 60
    criterion_log(4, "domain-shift adaptation NONE vs FULL", passed,
                  f"{ok}/5 seeds, runtime {runtime / 60:.1f} min; D1 none/full " + " ".join(details))
    assert passed


# --------------------------------------------------------------------------
# 5

def test_mad_convergence(experiment, criterion_log):
    runs = experiment["runs"]
    ok, details = 0, []
    for seed in SEEDS:
        tail = {m: runs[seed, m]["epe"][-500:].mean()
                for m in (AdaptationMode.NONE, AdaptationMode.FULL, AdaptationMode.MAD_FULL)}
        mad, full, none = tail[AdaptationMode.MAD_FULL], tail[AdaptationMode.FULL], tail[AdaptationMode.NONE]
        good = mad <= 1.5 * full and none >= 2 * mad
        ok += good
        details.append(f"s{seed}:{none:.2f}/{full:.2f}/{mad:.2f}{'+' if good else '-'}")
    passed = ok >= 4
    criterion_log(5, "MAD_FULL convergence", passed,
                  f"{ok}/5 seeds; final-500 EPE none/full/mad " + " ".join(details))
    assert passed


# --------------------------------------------------------------------------
# 6

def test_strategy_ordering(experiment, criterion_log):
    runs = experiment["runs"]
    d1 = {m: float(np.mean([runs[s, m]["d1"].mean() for s in SEEDS])) for m in MODES}
    M = AdaptationMode
    best_mad = max(d1[M.MAD_SEQ], d1[M.MAD_RAND], d1[M.MAD_FULL])
    chain = [d1[M.NONE], d1[M.LAST_LAYER], d1[M.REFINEMENT], d1[M.D2_REFINEMENT], best_mad]
    passed = all(a >= b for a, b in zip(chain, chain[1:]))
    criterion_log(6, "strategy ordering", passed,
                  "mean D1 " + ", ".join(f"{m.value}={d1[m]:.2f}" for m in MODES))
    assert passed


# --------------------------------------------------------------------------
# 7

def test_throughput_ordering(experiment, criterion_log):
    runs = experiment["runs"]
    med = {m: float(np.median(np.concatenate([runs[s, m]["wall"] for s in SEEDS])))
           for m in (AdaptationMode.NONE, AdaptationMode.MAD_FULL, AdaptationMode.FULL)}
    none, mad, full = med[AdaptationMode.NONE], med[AdaptationMode.MAD_FULL], med[AdaptationMode.FULL]
    passed = none < mad < full and full >= 1.8 * none
    criterion_log(7, "throughput ordering", passed,
                  f"median ms/frame none {1e3 * none:.1f}, mad {1e3 * mad:.1f}, full {1e3 * full:.1f} "
                  f"(full/none {full / none:.2f})")
    assert passed


# --------------------------------------------------------------------------
# 8

def test_protocol_integrity(criterion_log):
    net = build_network(NetworkConfig.desk(), seed=3)
    ctl = Controller(net, AdaptationMode.MAD_FULL, lr=ADAPT_LR, seed=3)
    seen = {}
    ctl.after_metrics = lambda c, frame: seen.__setitem__("at_metrics", c.net.checksum())
    violations, frames = 0, 0
    for frame in iter_sequence(200, RESOLUTION, domain_b(), 77):
        before = net.checksum()
        ctl.step(frame)
        after = net.checksum()
        if seen["at_metrics"] != before or after == before:
            violations += 1
        frames += 1
    passed = frames == 200 and violations == 0
    criterion_log(8, "protocol integrity", passed,
                  f"{frames} frames, {violations} frames where metrics saw post-update weights or no update happened")
    assert passed


# --------------------------------------------------------------------------
# 9

def _hand_count(cfg):
    def conv(ci, co):
        return 9 * ci * co + co

    total, c_in = 0, 3
    for c in cfg.feature_channels:
        total += conv(c_in, c) + conv(c, c)
        c_in = c
    corr = 2 * cfg.correlation_radius + 1
    for k in range(cfg.lowest_decoder_level, cfg.levels + 1):
        c_in = corr + cfg.feature_channels[k - 1] + (0 if k == cfg.levels else 1)
        for c in cfg.decoder_channels:
            total += conv(c_in, c)
            c_in = c
    c_in = cfg.decoder_channels[-2] + 1 + cfg.feature_channels[cfg.lowest_decoder_level - 1]
    for c in cfg.refinement_channels:
        total += conv(c_in, c)
        c_in = c
    return total


def test_parameter_count(criterion_log):
    cfg = NetworkConfig.canonical()
    n = count_parameters(build_network(cfg))
    hand = _hand_count(cfg)
    passed = n == hand and 3.0e6 <= n <= 4.5e6
    criterion_log(9, "parameter count", passed, f"count_parameters {n:,}, hand count {hand:,}")
    assert passed
