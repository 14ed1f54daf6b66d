"""Pyramidal stereo network split into independently trainable modules."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor

CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    levels: int = 6
    feature_channels: list = field(default_factory=lambda: [16, 32, 64, 96, 128, 192])
    decoder_channels: list = field(default_factory=lambda: [128, 128, 96, 64, 1])
    refinement_channels: list = field(default_factory=lambda: [128, 128, 128, 96, 64, 32, 1])
    refinement_dilations: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 1, 1])
    correlation_radius: int = 2
    leaky_slope: float = 0.2
    lowest_decoder_level: int = 2
    # decoders predict a correction added to the upsampled coarser disparity
    residual_decoders: bool = True

    @classmethod
    def canonical(cls) -> "NetworkConfig":
        return cls()

    @classmethod
    def desk(cls) -> "NetworkConfig":
        return cls(
            feature_channels=[4, 8, 16, 24, 32, 48],
            decoder_channels=[32, 32, 24, 16, 1],
            refinement_channels=[32, 32, 32, 24, 16, 8, 1],
        )

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.feature_channels) != self.levels:
            raise ValueError(
                f"feature_channels has {len(self.feature_channels)} entries, expected levels={self.levels}")
        if not self.decoder_channels or self.decoder_channels[-1] != 1:
            raise ValueError("last decoder_channels entry must be 1")
        if not self.refinement_channels or self.refinement_channels[-1] != 1:
            raise ValueError("last refinement_channels entry must be 1")
        if len(self.refinement_dilations) != len(self.refinement_channels):
            raise ValueError("refinement_dilations and refinement_channels differ in length")
        if not 1 <= self.lowest_decoder_level <= self.levels:
            raise ValueError("lowest_decoder_level must lie in [1, levels]")
        if self.correlation_radius < 1:
            raise ValueError("correlation_radius must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if any(c < 1 for c in self.feature_channels + self.decoder_channels + self.refinement_channels):
            raise ValueError("channel counts must be positive")

    @property
    def module_ids(self) -> list[int]:
        return list(range(self.lowest_decoder_level, self.levels + 1))

    def check_input(self, height: int, width: int):
        """Reject resolutions the pyramid cannot reproduce exactly at full scale.

        Levels below ``lowest_decoder_level`` must tile the image exactly so
        the final x2^lowest upsample lands on the input grid.  Coarser levels
        round up (stride-2 convolution with padding 1) and upsampled maps are
        cropped back onto the finer grid.
        """
        m = 2 ** self.lowest_decoder_level
        if height % m or width % m:
            raise ShapeError(f"input {height}x{width} is not divisible by {m}")


@dataclass
class Conv:
    weight: Parameter
    bias: Parameter
    stride: int = 1
    dilation: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.dilation)


@dataclass
class DisparityPyramid:
    """Outputs of one forward pass.

    ``scaled[k]`` is the decoder output at level ``k`` in that level's pixel
    units.  ``refined`` is the lowest decoder output plus the refinement
    residual, and ``full`` its x2^k upsample at input resolution.
    """

    scaled: dict
    refined: Tensor
    full: Tensor

    def level_output(self, module: int) -> Tensor:
        """Prediction a module's own loss is computed on."""
        lowest = min(self.scaled)
        return self.refined if module == lowest else self.scaled[module]


class Network:
    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: list[Parameter] = []
        rng = np.random.default_rng(seed)
        cfg = config
        lowest = cfg.lowest_decoder_level

        self.features: dict[int, list[Conv]] = {}
        c_in = 3
        for k in range(1, cfg.levels + 1):
            c = cfg.feature_channels[k - 1]
            owner = max(k, lowest)
            self.features[k] = [
                self._conv(rng, f"F{k}.0", c_in, c, owner, stride=2),
                self._conv(rng, f"F{k}.1", c, c, owner),
            ]
            c_in = c

        ncorr = 2 * cfg.correlation_radius + 1
        self.decoders: dict[int, list[Conv]] = {}
        for k in range(cfg.levels, lowest - 1, -1):
            c_in = ncorr + cfg.feature_channels[k - 1] + (0 if k == cfg.levels else 1)
            layers = []
            for i, c in enumerate(cfg.decoder_channels):
                layers.append(self._conv(rng, f"D{k}.{i}", c_in, c, k,
                                         output=(i == len(cfg.decoder_channels) - 1)))
                c_in = c
            self.decoders[k] = layers

        hidden = cfg.decoder_channels[-2] if len(cfg.decoder_channels) > 1 else 0
        c_in = hidden + 1 + cfg.feature_channels[lowest - 1]
        self.refinement: list[Conv] = []
        for i, (c, d) in enumerate(zip(cfg.refinement_channels, cfg.refinement_dilations)):
            self.refinement.append(self._conv(rng, f"R.{i}", c_in, c, lowest, dilation=d,
                                              output=(i == len(cfg.refinement_channels) - 1)))
            c_in = c

    def _conv(self, rng, name, c_in, c_out, owner, stride=1, dilation=1, output=False) -> Conv:
        fan_in = c_in * 9
        std = np.sqrt((0.1 if output else 2.0) / fan_in)
        w = Parameter(rng.standard_normal((c_out, c_in, 3, 3)) * std, f"{name}.weight", owner)
        b = Parameter(np.zeros(c_out), f"{name}.bias", owner)
        self.params += [w, b]
        return Conv(w, b, stride, dilation)

    @property
    def module_ids(self) -> list[int]:
        return self.config.module_ids

    def module_parameters(self, module: int) -> list[Parameter]:
        if module not in self.module_ids:
            raise KeyError(f"unknown module {module}; valid ids are {self.module_ids}")
        return [p for p in self.params if p.owner == module]

    def layer_parameters(self, group: str) -> list[Parameter]:
        """Parameters of a named layer group: 'last_layer', 'refinement' or 'd2_refinement'."""
        refine = [p for conv in self.refinement for p in (conv.weight, conv.bias)]
        if group == "last_layer":
            return refine[-2:]
        if group == "refinement":
            return refine
        if group == "d2_refinement":
            lowest = self.config.lowest_decoder_level
            return [p for conv in self.decoders[lowest] for p in (conv.weight, conv.bias)] + refine
        raise KeyError(f"unknown layer group {group!r}")

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays):
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} arrays, got {len(arrays)}")
        for p, a in zip(self.params, arrays):
            if a.shape != p.shape:
                raise ShapeError(f"{p.name}: shape {a.shape} != {p.shape}")
            p.data[...] = a

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha1()
        for p in self.params:
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    return Network(config, seed)


def count_parameters(net: Network) -> int:
    return int(sum(p.data.size for p in net.params))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ad.get_dtype()))


def forward(net: Network, left, right) -> DisparityPyramid:
    """Run both towers, the coarse-to-fine decoders and the refinement block."""
    cfg = net.config
    left, right = _as_tensor(left), _as_tensor(right)
    if left.shape != right.shape:
        raise ShapeError(f"left {left.shape} and right {right.shape} differ")
    if len(left.shape) != 4 or left.shape[1] != 3:
        raise ShapeError(f"expected (n, 3, h, w) images, got {left.shape}")
    n, _, height, width = left.shape
    cfg.check_input(height, width)
    slope = cfg.leaky_slope
    lowest = cfg.lowest_decoder_level

    # zero-centred input keeps early features texture-driven rather than brightness-driven
    x = ad.concat([left, right], axis=0) - 0.5
    lefts, rights = {}, {}
    for k in range(1, cfg.levels + 1):
        with ad.node_scope(max(k, lowest)):
            for conv in net.features[k]:
                x = ad.leaky_relu(conv(x), slope)
            lefts[k] = ad.take(x, 0, 0, n)
            rights[k] = ad.take(x, 0, n, 2 * n)

    scaled = {}
    hidden = None
    for k in range(cfg.levels, lowest - 1, -1):
        with ad.node_scope(k):
            fl, fr = lefts[k], rights[k]
            if k == cfg.levels:
                corr = ad.correlation1d(fl, fr, cfg.correlation_radius)
                h = ad.concat([corr, fl])
                up = None
            else:
                _, _, hk, wk = fl.shape
                up = ad.crop(ad.bilinear_upsample(scaled[k + 1], 2), hk, wk) * 2.0
                warped = ad.warp_horizontal(fr, up)
                corr = ad.correlation1d(fl, warped, cfg.correlation_radius)
                h = ad.concat([corr, fl, up])
            layers = net.decoders[k]
            for conv in layers[:-1]:
                h = ad.leaky_relu(conv(h), slope)
            hidden = h
            y = layers[-1](h)
            if up is not None and cfg.residual_decoders:
                y = y + up
            scaled[k] = y

    with ad.node_scope(lowest):
        parts = [scaled[lowest], lefts[lowest]]
        if len(cfg.decoder_channels) > 1:
            parts.insert(0, hidden)
        h = ad.concat(parts)
        for conv in net.refinement[:-1]:
            h = ad.leaky_relu(conv(h), slope)
        refined = scaled[lowest] + net.refinement[-1](h)
        factor = 2 ** lowest
        full = ad.bilinear_upsample(refined, factor) * float(factor) if factor > 1 else refined
    return DisparityPyramid(scaled, refined, full)


def backward_module(net: Network, loss: Tensor, module: int, grad=None):
    """Back-propagate ``loss`` through module ``module``'s layers only.

    The graph is cut wherever a node belongs to another module, so neither
    coarser modules (through the upsampled disparity) nor finer feature
    blocks are visited, and only this module's parameters accumulate.
    """
    params = net.module_parameters(module)
    ad.backward(loss, grad, targets=params, tags={module})


def backward_full(net: Network, loss: Tensor, grad=None):
    ad.backward(loss, grad, targets=net.params)


def backward_params(net: Network, loss: Tensor, params, grad=None):
    """Back-propagate into an arbitrary parameter subset (others frozen)."""
    ad.backward(loss, grad, targets=params)


class Adam:
    """Adaptive moment estimation with per-parameter step counters."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[int, list] = {}

    def step(self, params):
        for p in params:
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, t = st
            t += 1
            st[2] = t
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.zero_grad()


def apply_update(net: Network, optimizer: Adam, modules=None, params=None):
    """Step ``optimizer`` on the listed modules (or explicit params) and reset their grads."""
    if params is None:
        ids = net.module_ids if modules is None else modules
        params = [p for m in ids for p in net.module_parameters(m)]
    optimizer.step(params)


# --------------------------------------------------------------------------
# checkpoint: version byte, u32 header length, JSON header, float32 LE params


def save_checkpoint(net: Network, path):
    header = json.dumps({
        "config": net.config.to_dict(),
        "parameters": [{"name": p.name, "shape": list(p.shape)} for p in net.params],
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(bytes([CHECKPOINT_VERSION]))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for p in net.params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if not raw or raw[0] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    (size,) = struct.unpack_from("<I", raw, 1)
    header = json.loads(raw[5:5 + size].decode("utf-8"))
    net = Network(NetworkConfig.from_dict(header["config"]))
    offset = 5 + size
    arrays = []
    for entry, p in zip(header["parameters"], net.params):
        if entry["name"] != p.name or tuple(entry["shape"]) != p.shape:
            raise ValueError(f"{path}: parameter {entry['name']} does not match the config")
        count = int(np.prod(entry["shape"]))
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        arrays.append(a.astype(ad.get_dtype()))
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing parameter data")
    net.load_state(arrays)
    return net
