"""Finite-difference checks for every differentiable op and a micro network."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

OP_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple]   # -> (op, probes)
    tolerance: float = OP_TOLERANCE
    epsilon: float = 1e-6


@dataclass
class GradResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _var(rng, shape, low=None, high=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, shape)
    return Tensor(data, requires_grad=True)


def _conv(stride, dilation):
    def build(rng):
        x = _var(rng, (1, 2, 9, 9))
        w = Parameter(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = Parameter(rng.standard_normal(3))
        return (lambda: ad.conv2d(x, w, b, stride, dilation, dilation)), [x]
    return build


def _unary(fn, low=None, high=None):
    def build(rng):
        x = _var(rng, (1, 2, 4, 5), low, high)
        return (lambda: fn(x)), [x]
    return build


def _leaky(rng):
    data = rng.standard_normal((1, 2, 4, 5))
    data[np.abs(data) < 0.05] = 0.5          # keep probes away from the kink
    x = Tensor(data, requires_grad=True)
    return (lambda: ad.leaky_relu(x, 0.2)), [x]


def _binary(fn):
    def build(rng):
        a = _var(rng, (1, 2, 3, 4))
        b = _var(rng, (1, 2, 3, 4), 0.5, 2.0)
        return (lambda: fn(a, b)), [a, b]
    return build


def _warp(rng):
    src = _var(rng, (1, 2, 3, 10))
    # fractional disparities stay clear of the sampling kinks at integers
    disp = Tensor(rng.integers(0, 3, (1, 1, 3, 10)) + rng.uniform(0.2, 0.8, (1, 1, 3, 10)),
                  requires_grad=True)
    return (lambda: ad.warp_horizontal(src, disp)), [src, disp]


def _correlation(rng):
    a, b = _var(rng, (1, 3, 4, 7)), _var(rng, (1, 3, 4, 7))
    return (lambda: ad.correlation1d(a, b, 2)), [a, b]


def _structure(rng):
    a, b = _var(rng, (1, 2, 5, 6)), _var(rng, (1, 3, 5, 6))

    def op():
        joined = ad.concat([a, b])
        return ad.crop(ad.take(joined, 1, 1, 4), 4, 5)
    return op, [a, b]


def _ssim_loss(rng):
    from .loss import reprojection_loss

    left, right = Tensor(rng.random((1, 3, 6, 12))), Tensor(rng.random((1, 3, 6, 12)))
    disp = Tensor(rng.uniform(1.2, 1.8, (1, 1, 6, 12)), requires_grad=True)
    return (lambda: reprojection_loss(left, right, disp).scalar), [disp]


def _micro_network(rng):
    from .network import NetworkConfig, build_network, forward

    cfg = NetworkConfig(levels=3, feature_channels=[2, 3, 3], decoder_channels=[3, 2, 1],
                        refinement_channels=[3, 2, 1], refinement_dilations=[1, 2, 1])
    net = build_network(cfg, int(rng.integers(1 << 30)))
    net.decoders[3][-1].bias.data[...] = 0.3
    left, right = _var(rng, (1, 3, 8, 16), 0, 1), _var(rng, (1, 3, 8, 16), 0, 1)
    return (lambda: forward(net, left, right).full), [left, right]


CASES: list[GradCase] = [
    GradCase("conv2d", _conv(1, 1)),
    GradCase("conv2d_stride2", _conv(2, 1)),
    GradCase("conv2d_dilated", _conv(1, 2)),
    GradCase("leaky_relu", _leaky),
    GradCase("bilinear_upsample", _unary(lambda x: ad.bilinear_upsample(x, 2))),
    GradCase("box_filter", _unary(lambda x: ad.box_filter(x, 3))),
    GradCase("absolute", _unary(ad.absolute, 0.1, 2.0)),
    GradCase("mean", _unary(ad.mean)),
    GradCase("channel_mean", _unary(ad.channel_mean)),
    GradCase("add_mul_div", _binary(lambda a, b: ad.divide(a * b - a, b + 1.0))),
    GradCase("concat_take_crop", _structure),
    GradCase("warp_horizontal", _warp),
    GradCase("correlation1d", _correlation),
    GradCase("photometric_loss", _ssim_loss),
    GradCase("micro_network", _micro_network, NETWORK_TOLERANCE),
]


def run_suite(cases=None, seed: int = 0) -> list[GradResult]:
    results = []
    with ad.precision(np.float64):
        for i, case in enumerate(CASES if cases is None else cases):
            rng = np.random.default_rng([seed, i])
            t0 = time.perf_counter()
            op, probes = case.build(rng)
            err = ad.check_gradients(op, probes, epsilon=case.epsilon, seed=seed)
            results.append(GradResult(case.name, err, case.tolerance, time.perf_counter() - t0))
    return results
