"""Disparity error metrics over valid pixels."""

import numpy as np


def _errors(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask {mask.shape} and ground truth {gt.shape} differ")
    return np.abs(pred - gt)[mask]


def epe(pred, gt, mask=None) -> float:
    """Mean absolute disparity error; NaN when no pixel is valid."""
    err = _errors(pred, gt, mask)
    return float(err.mean()) if err.size else float("nan")


def d1_all(pred, gt, mask=None, threshold: float = 3.0) -> float:
    """Percentage of valid pixels with error strictly above ``threshold``."""
    err = _errors(pred, gt, mask)
    return float(100.0 * np.count_nonzero(err > threshold) / err.size) if err.size else float("nan")
