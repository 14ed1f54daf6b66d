"""PFM / 16-bit PNG disparity files, 8-bit images and sequence manifests."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .frames import StereoFrame


def write_pfm(path, data: np.ndarray):
    """Write an (h, w) or (h, w, 3) float map, little-endian, rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM needs (h, w) or (h, w, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().rstrip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file (header {kind!r})")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise ValueError(f"{path}: malformed PFM dimensions")
        w, h = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise ValueError(f"{path}: malformed PFM scale") from exc
        if scale == 0:
            raise ValueError(f"{path}: PFM scale must be non-zero")
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != count:
        raise ValueError(f"{path}: expected {count} values, found {data.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_disparity_png(path, disparity: np.ndarray, valid: np.ndarray | None = None):
    """16-bit PNG storing round(256 * d); 0 marks invalid pixels."""
    d = np.asarray(disparity, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(d)
    valid = np.asarray(valid, dtype=bool)
    if np.any(d[valid] < 0):
        raise ValueError("negative disparity cannot be stored")
    if np.any(d[valid] >= 256):
        raise ValueError("disparity >= 256 overflows the 16-bit encoding")
    out = np.zeros(d.shape, dtype=np.uint16)
    out[valid] = np.round(d[valid] * 256.0).astype(np.uint16)
    Image.fromarray(out).save(path)


def read_disparity_png(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (disparity, valid_mask)."""
    raw = np.asarray(Image.open(path)).astype(np.float64)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel disparity PNG")
    valid = raw > 0
    return (raw / 256.0).astype(np.float32), valid


def write_image(path, image: np.ndarray):
    """Save a (1, 3, h, w) or (3, h, w) image in [0, 1] as 8-bit PNG."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)).save(path)


def read_image(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return img.transpose(2, 0, 1)[None]


def colorize(disparity: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Map a disparity map to an 8-bit RGB array for viewing."""
    from matplotlib import colormaps

    d = np.asarray(disparity, dtype=np.float64).squeeze()
    vmax = float(np.nanmax(d)) if vmax is None else vmax
    norm = np.clip(d / max(vmax, 1e-6), 0, 1)
    return (colormaps["magma"](norm)[..., :3] * 255).astype(np.uint8)


def save_sequence(frames, directory) -> Path:
    """Write frames as PNG pairs plus PFM/PNG disparity and a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(frames):
        e = {"left": f"{i:06d}_left.png", "right": f"{i:06d}_right.png"}
        write_image(directory / e["left"], fr.left)
        write_image(directory / e["right"], fr.right)
        if fr.gt_disparity is not None:
            e["disparity"] = f"{i:06d}_disp.pfm"
            gt = fr.gt_disparity[0, 0].copy()
            if fr.valid_mask is not None:
                gt[~fr.valid_mask[0, 0]] = np.inf
            write_pfm(directory / e["disparity"], gt)
        entries.append(e)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"frames": entries}, indent=1))
    return manifest


def _read_gt(path: Path):
    if path.suffix == ".pfm":
        d = read_pfm(path)
        valid = np.isfinite(d)
        d = np.where(valid, d, 0).astype(np.float32)
    else:
        d, valid = read_disparity_png(path)
    return d[None, None], valid[None, None]


def load_sequence(manifest):
    """Yield frames listed in a manifest, in order."""
    manifest = Path(manifest)
    spec = json.loads(manifest.read_text())
    root = manifest.parent
    for e in spec["frames"]:
        gt = valid = None
        if e.get("disparity"):
            gt, valid = _read_gt(root / e["disparity"])
        yield StereoFrame(read_image(root / e["left"]), read_image(root / e["right"]), gt, valid)
