"""Unsupervised photometric reprojection loss (SSIM + L1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

C1 = 0.01 ** 2
C2 = 0.03 ** 2
SSIM_WEIGHT = 0.85
L1_WEIGHT = 0.15


@dataclass
class LossValue:
    scalar: Tensor
    per_pixel: Tensor

    @property
    def value(self) -> float:
        return float(self.scalar.data)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=ad.get_dtype()))


def ssim_map(a, b, window: int = 3) -> Tensor:
    """Per-pixel SSIM from box-filtered local statistics."""
    a, b = _t(a), _t(b)
    mu_a = ad.box_filter(a, window)
    mu_b = ad.box_filter(b, window)
    var_a = ad.box_filter(a * a, window) - mu_a * mu_a
    var_b = ad.box_filter(b * b, window) - mu_b * mu_b
    cov = ad.box_filter(a * b, window) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + C1) * (cov * 2.0 + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return ad.divide(num, den)


def photometric_error(left, reconstructed, window: int = 3) -> LossValue:
    left, reconstructed = _t(left), _t(reconstructed)
    dssim = (1.0 - ssim_map(left, reconstructed, window)) * 0.5
    l1 = ad.absolute(left - reconstructed)
    per_pixel = ad.channel_mean(dssim * SSIM_WEIGHT + l1 * L1_WEIGHT)
    return LossValue(ad.mean(per_pixel), per_pixel)


def reprojection_loss(left, right, disparity, window: int = 3) -> LossValue:
    """Compare ``left`` with ``right`` warped by a full-resolution disparity."""
    left, right, disparity = _t(left), _t(right), _t(disparity)
    return photometric_error(left, ad.warp_horizontal(right, disparity), window)


def upsample_disparity(y: Tensor, level: int, height: int, width: int) -> Tensor:
    """Bring a level-``level`` disparity to full resolution in full-scale pixels."""
    if level == 0:
        return y
    factor = 2 ** level
    return ad.crop(ad.bilinear_upsample(y, factor), height, width) * float(factor)


def module_loss(left, right, y_theta, level: int, window: int = 3) -> LossValue:
    left, right = _t(left), _t(right)
    _, _, h, w = left.shape
    return reprojection_loss(left, right, upsample_disparity(_t(y_theta), level, h, w), window)
