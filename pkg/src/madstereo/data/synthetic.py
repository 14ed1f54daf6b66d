"""Layered piecewise-planar stereo scenes with exact ground truth.

A scene is a background plane plus a few rectangles, each carrying its own
texture.  The right view is rendered from the scene; the left view is then
resampled from the right view at ``x - d(x)`` on every pixel whose
correspondence is visible, so warping the right image by the ground truth
reproduces the left image exactly there.  Pixels whose match is hidden or
falls outside the right image are rendered from the texture directly and
flagged invalid, as are their immediate neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .frames import StereoFrame

TEXTURE_FAMILIES = ("dots", "perlin", "stripes", "blobs")


@dataclass
class DomainShiftSpec:
    gamma: float = 1.0
    brightness_offset: float = 0.0
    channel_mix: list = field(default_factory=lambda: np.eye(3).tolist())
    noise_sigma: float = 0.0
    texture_family: str | None = None

    def validate(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if np.asarray(self.channel_mix).shape != (3, 3):
            raise ValueError("channel_mix must be 3x3")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.texture_family is not None and self.texture_family not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {self.texture_family!r}")

    def is_identity(self) -> bool:
        return (self.gamma == 1.0 and self.brightness_offset == 0.0 and self.noise_sigma == 0.0
                and np.array_equal(np.asarray(self.channel_mix, dtype=float), np.eye(3)))


@dataclass
class SceneSpec:
    texture_family: str = "dots"
    background_disparity: tuple = (1.0, 5.0)
    background_gradient: tuple = (0.0, 3.0)   # extra disparity from top to bottom row
    num_objects: tuple = (2, 6)
    object_disparity: tuple = (5.0, 12.0)
    object_size: tuple = (0.15, 0.4)          # fraction of image width/height
    slant_probability: float = 0.3
    max_slant: float = 2.0                    # disparity change across a slanted rectangle
    speed: float = 1.5                        # max horizontal object motion, px/frame
    scene_length: int = 50                    # frames before a new scene is drawn
    shift: DomainShiftSpec | None = None

    @property
    def family(self) -> str:
        if self.shift is not None and self.shift.texture_family is not None:
            return self.shift.texture_family
        return self.texture_family

    def max_disparity(self) -> float:
        bg = self.background_disparity[1] + self.background_gradient[1]
        obj = self.object_disparity[1] + self.max_slant if self.num_objects[1] > 0 else 0.0
        return max(bg, obj)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        if data.get("shift") is not None:
            data["shift"] = DomainShiftSpec(**data["shift"])
        for key in ("background_disparity", "background_gradient", "num_objects",
                    "object_disparity", "object_size"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def domain_a() -> SceneSpec:
    """Source domain used for supervised pretraining."""
    return SceneSpec()


def domain_b() -> SceneSpec:
    """Target domain: different texture statistics, photometry and depth range."""
    return SceneSpec(
        background_disparity=(4.0, 10.0),
        background_gradient=(0.0, 6.0),
        object_disparity=(10.0, 24.0),
        shift=DomainShiftSpec(
            gamma=1.8,
            brightness_offset=-0.05,
            channel_mix=[[0.2, 0.7, 0.1], [0.1, 0.2, 0.7], [0.7, 0.1, 0.2]],
            noise_sigma=0.01,
            texture_family="blobs",
        ),
    )


# --------------------------------------------------------------------------
# textures, (3, h, tw) in [0, 1]


def _normalize(t):
    lo = t.min(axis=(1, 2), keepdims=True)
    hi = t.max(axis=(1, 2), keepdims=True)
    return (t - lo) / np.maximum(hi - lo, 1e-6)


def make_texture(family: str, h: int, tw: int, rng: np.random.Generator) -> np.ndarray:
    if family == "dots":
        # 2 px dots so the pattern survives the stride-4 feature grid
        t = (rng.random((3, -(-h // 2), tw // 2)) < 0.5).astype(np.float64)
        t = np.repeat(np.repeat(t, 2, axis=1), 2, axis=2)[:, :h, :tw]
        t = ndimage.gaussian_filter(t, (0, 0.6, 0.6), mode="wrap")
    elif family == "perlin":
        t = np.zeros((3, h, tw))
        amp = 1.0
        for cell in (16, 8, 4, 2):
            gh, gw = -(-h // cell) + 1, -(-tw // cell) + 1
            grid = rng.random((3, gh, gw))
            t += amp * ndimage.zoom(grid, (1, cell, cell), order=3, mode="grid-wrap")[:, :h, :tw]
            amp *= 0.6
    elif family == "stripes":
        yy, xx = np.mgrid[0:h, 0:tw]
        t = np.zeros((3, h, tw))
        for c in range(3):
            for _ in range(3):
                fx = rng.integers(4, 24) / tw
                fy = rng.uniform(-0.1, 0.1)
                t[c] += np.sin(2 * np.pi * (fx * xx * rng.choice([1, 2, 3]) + fy * yy) + rng.uniform(0, 2 * np.pi))
        t += 0.5 * rng.standard_normal((3, h, tw))
        t = ndimage.gaussian_filter(t, (0, 0.5, 0.5), mode="wrap")
    elif family == "blobs":
        t = ndimage.gaussian_filter(rng.standard_normal((3, h, tw)), (0, 1.5, 1.5), mode="wrap")
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return _normalize(t)


def _sample(tex: np.ndarray, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample texture rows at continuous column ``u`` with wrap-around."""
    tw = tex.shape[2]
    u = np.mod(u, tw)
    i0 = np.floor(u).astype(np.int64) % tw
    i1 = (i0 + 1) % tw
    f = u - np.floor(u)
    return tex[:, rows, i0] * (1 - f) + tex[:, rows, i1] * f


# --------------------------------------------------------------------------
# scenes


@dataclass
class _Layer:
    p0: float
    px: float
    py: float
    box: tuple | None          # (x0, x1, y0, y1) in left coordinates, None = everywhere
    texture: np.ndarray
    tex_offset: float
    velocity: float

    def at(self, t: int) -> "_Layer":
        dx = self.velocity * t
        box = self.box
        if box is not None:
            box = (box[0] + dx, box[1] + dx, box[2], box[3])
        return replace(self, p0=self.p0 - self.px * dx, box=box, tex_offset=self.tex_offset + dx)

    def disparity(self, x, y):
        return self.p0 + self.px * x + self.py * y

    def covers(self, x, y):
        if self.box is None:
            return np.ones(np.broadcast(x, y).shape, dtype=bool)
        x0, x1, y0, y1 = self.box
        return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


def _draw_scene(spec: SceneSpec, h: int, w: int, rng: np.random.Generator):
    tw = 2 * w
    base = rng.uniform(*spec.background_disparity)
    grad = rng.uniform(*spec.background_gradient)
    layers = [_Layer(base, 0.0, grad / max(h - 1, 1), None, make_texture(spec.family, h, tw, rng), 0.0, 0.0)]
    # the background only scrolls its texture; its geometry stays fixed
    bg_scroll = rng.uniform(-0.5, 0.5) * spec.speed
    n_obj = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    for _ in range(n_obj):
        ow = max(4, int(rng.uniform(*spec.object_size) * w))
        oh = max(4, int(rng.uniform(*spec.object_size) * h))
        x0 = rng.uniform(-0.1 * w, w - 0.5 * ow)
        y0 = int(rng.integers(0, max(h - oh, 1)))
        d = rng.uniform(*spec.object_disparity)
        slant = rng.uniform(-spec.max_slant, spec.max_slant) if rng.random() < spec.slant_probability else 0.0
        px = slant / ow
        layers.append(_Layer(d - px * x0, px, 0.0, (x0, x0 + ow, y0, y0 + oh),
                             make_texture(spec.family, h, tw, rng), x0,
                             rng.uniform(-spec.speed, spec.speed)))
    return layers, bg_scroll


def render_frame(layers: list[_Layer], h: int, w: int, shade=None) -> StereoFrame:
    """Render one pair; ``shade`` recolours the right view before the left is resampled."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rows = yy.astype(np.int64)

    # right view: for each right pixel find the front-most surface
    best_r = np.full((h, w), -np.inf)
    rid = np.full((h, w), -1)
    right = np.zeros((3, h, w))
    for i, L in enumerate(layers):
        xl = (xx + L.p0 + L.py * yy) / (1.0 - L.px)
        d = L.disparity(xl, yy)
        sel = L.covers(xl, yy) & (d > best_r)
        best_r[sel] = d[sel]
        rid[sel] = i
        tex = _sample(L.texture, rows, xl - L.tex_offset)
        right[:, sel] = tex[:, sel]

    # left view geometry
    best_l = np.full((h, w), -np.inf)
    lid = np.full((h, w), -1)
    direct = np.zeros((3, h, w))
    for i, L in enumerate(layers):
        d = L.disparity(xx, yy)
        sel = L.covers(xx, yy) & (d > best_l)
        best_l[sel] = d[sel]
        lid[sel] = i
        tex = _sample(L.texture, rows, xx - L.tex_offset)
        direct[:, sel] = tex[:, sel]

    if shade is not None:
        right, direct = shade(right), shade(direct)

    pos = xx - best_l
    inside = (pos >= 0) & (pos <= w - 1)
    pc = np.clip(pos, 0, w - 1)
    i0 = np.minimum(np.floor(pc).astype(np.int64), w - 2)
    i1 = i0 + 1
    frac = pc - i0
    valid = inside & (rid[rows, i0] == lid) & ((rid[rows, i1] == lid) | (frac == 0))
    warped = right[:, rows, i0] * (1 - frac) + right[:, rows, i1] * frac
    left = np.where(valid[None], warped, direct)
    # a pixel next to an occlusion still sees wrong content in its SSIM window
    valid = ndimage.binary_erosion(valid, np.ones((3, 3), dtype=bool), border_value=1)

    f32 = np.float32
    return StereoFrame(left[None].astype(f32), right[None].astype(f32),
                       best_l[None, None].astype(f32), valid[None, None])


def _recolour(img: np.ndarray, spec: DomainShiftSpec) -> np.ndarray:
    """Channel mix plus offset, clamp, then gamma; noise is added separately."""
    mix = np.asarray(spec.channel_mix, dtype=np.float64)
    x = np.einsum("ij,...jhw->...ihw", mix, img) + spec.brightness_offset
    return np.clip(x, 0.0, 1.0) ** spec.gamma


def apply_domain_shift(frame: StereoFrame, spec: DomainShiftSpec, rng=None) -> StereoFrame:
    """Same photometric transform on both views; geometry untouched."""
    spec.validate()
    if spec.is_identity():
        return frame
    if spec.noise_sigma > 0 and rng is None:
        rng = np.random.default_rng(0)

    def tf(img):
        x = _recolour(img.astype(np.float64), spec)
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, x.shape)
        return np.clip(x, 0.0, 1.0).astype(np.float32)

    return replace(frame, left=tf(frame.left), right=tf(frame.right))


def iter_sequence(length: int, resolution, scene_spec: SceneSpec, rng):
    """Yield ``length`` frames; prefixes of longer runs are identical for equal seeds."""
    h, w = resolution
    if scene_spec.max_disparity() >= w / 4:
        raise ValueError(f"scene disparity up to {scene_spec.max_disparity()} exceeds w/4 = {w / 4}")
    if scene_spec.background_disparity[0] < 0:
        raise ValueError("disparities must be non-negative")
    if scene_spec.shift is not None:
        scene_spec.shift.validate()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    layers = bg_scroll = None
    for t in range(length):
        step = t % scene_spec.scene_length
        if step == 0:
            layers, bg_scroll = _draw_scene(scene_spec, h, w, rng)
        moved = [layers[0].at(0)]
        moved[0] = replace(moved[0], tex_offset=bg_scroll * step)
        moved += [L.at(step) for L in layers[1:]]
        shift = scene_spec.shift
        if shift is None or shift.is_identity():
            yield render_frame(moved, h, w)
            continue
        # recolouring before resampling keeps the pair exactly consistent; only noise breaks it
        frame = render_frame(moved, h, w, lambda img: _recolour(img, shift))
        if shift.noise_sigma > 0:
            frame = apply_domain_shift(frame, DomainShiftSpec(noise_sigma=shift.noise_sigma), rng)
        yield frame


def generate_sequence(length: int, resolution, scene_spec: SceneSpec, rng) -> list[StereoFrame]:
    return list(iter_sequence(length, resolution, scene_spec, rng))
