"""Stereo frame container and cropping."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class StereoFrame:
    left: np.ndarray                 # (1, 3, h, w) in [0, 1]
    right: np.ndarray
    gt_disparity: np.ndarray | None = None   # (1, 1, h, w) pixels
    valid_mask: np.ndarray | None = None     # (1, 1, h, w) bool

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")

    @property
    def height(self) -> int:
        return self.left.shape[2]

    @property
    def width(self) -> int:
        return self.left.shape[3]

    def mask(self) -> np.ndarray | None:
        """Metric mask: explicit validity, or every pixel when only gt is present."""
        if self.gt_disparity is None:
            return None
        if self.valid_mask is None:
            return np.ones(self.gt_disparity.shape, dtype=bool)
        return self.valid_mask


def central_crop(frame: StereoFrame, target_h: int, target_w: int, multiple: int = 1) -> StereoFrame:
    """Crop the same centred window from every field; odd remainders favour top/left."""
    h, w = frame.height, frame.width
    if target_h > h or target_w > w:
        raise ValueError(f"crop {target_h}x{target_w} larger than frame {h}x{w}")
    if target_h % multiple or target_w % multiple:
        raise ValueError(f"crop {target_h}x{target_w} not divisible by {multiple}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    win = (slice(None), slice(None), slice(top, top + target_h), slice(left, left + target_w))

    def cut(a):
        return None if a is None else a[win].copy()

    return replace(frame, left=cut(frame.left), right=cut(frame.right),
                   gt_disparity=cut(frame.gt_disparity), valid_mask=cut(frame.valid_mask))
