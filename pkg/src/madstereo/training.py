"""Supervised pretraining on generated frames with ground truth."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data.frames import StereoFrame
from .data.metrics import d1_all, epe
from .data.synthetic import SceneSpec, iter_sequence
from .loss import upsample_disparity
from .network import Adam, Network, apply_update, backward_full, forward

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


def multiscale_l1(pyr, frame: StereoFrame) -> Tensor:
    """Masked L1 on the full output and every level; weight halves per coarser level."""
    gt = Tensor(frame.gt_disparity.astype(ad.get_dtype()))
    mask = frame.mask().astype(ad.get_dtype())
    scale = mask.size / max(mask.sum(), 1.0)
    _, _, h, w = frame.left.shape
    lowest = min(pyr.scaled)
    total = ad.mean(ad.absolute(pyr.full - gt) * mask) * scale
    for k, y in pyr.scaled.items():
        weight = 0.5 ** (k - lowest + 1)
        err = ad.absolute(upsample_disparity(y, k, h, w) - gt) * mask
        total = total + ad.mean(err) * (scale * weight)
    return total


def pretrain(net: Network, scene: SceneSpec, iterations: int, resolution, lr: float = 1e-4,
             seed: int = 0, log_every: int = 100, callback=None) -> list[dict]:
    """Train every parameter on fresh frames; returns the training curve."""
    opt = Adam(lr)
    # a new scene every frame gives the most varied supervision
    frames = iter_sequence(iterations, resolution, replace(scene, scene_length=1), seed)
    curve, window = [], []
    for it, frame in enumerate(frames):
        pyr = forward(net, frame.left, frame.right)
        loss = multiscale_l1(pyr, frame)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(f"pretraining loss became {value} at iteration {it}")
        backward_full(net, loss)
        apply_update(net, opt)
        window.append((value, epe(pyr.full.data, frame.gt_disparity, frame.mask())))
        if (it + 1) % log_every == 0 or it + 1 == iterations:
            lv, ev = np.mean(window, axis=0)
            curve.append({"iteration": it + 1, "loss": float(lv), "epe": float(ev)})
            logger.info("pretrain %d loss %.4f epe %.3f", it + 1, lv, ev)
            if callback is not None:
                callback(curve[-1])
            window = []
    return curve


def evaluate(net: Network, frames) -> dict:
    """Mean EPE / D1-all without adaptation."""
    e, d = [], []
    for frame in frames:
        pyr = forward(net, frame.left, frame.right)
        e.append(epe(pyr.full.data, frame.gt_disparity, frame.mask()))
        d.append(d1_all(pyr.full.data, frame.gt_disparity, frame.mask()))
    return {"epe": float(np.mean(e)), "d1_all": float(np.mean(d)), "frames": len(e)}
