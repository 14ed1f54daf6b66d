"""Run configuration: everything a command needs besides the checkpoint."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .controller import AdaptationMode
from .data.synthetic import SceneSpec, domain_a, domain_b
from .network import NetworkConfig

SCENE_PRESETS = {"domain_a": domain_a, "domain_b": domain_b}


@dataclass
class RunConfig:
    network: dict = field(default_factory=lambda: NetworkConfig.desk().to_dict())
    mode: str = "FULL"
    # frames come from a manifest if given, otherwise from the generator
    manifest: str | None = None
    scene: str | dict = "domain_b"
    pretrain_scene: str | dict = "domain_a"
    resolution: tuple = (96, 160)
    length: int = 1000
    repeat: int = 1
    crop: tuple | None = None
    seed: int = 0
    lr: float = 1e-4
    pretrain_lr: float = 1e-3
    pretrain_iterations: int = 2000
    checkpoint: str | None = None
    out: str = "runs"
    compare_seeds: int = 5
    curve_points: int = 50

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("resolution", "crop"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("resolution", "crop"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.network)

    def scene_spec(self, which: str = "scene") -> SceneSpec:
        value = getattr(self, which)
        if isinstance(value, str):
            if value not in SCENE_PRESETS:
                raise ValueError(f"unknown scene preset {value!r}; choose from {sorted(SCENE_PRESETS)}")
            return SCENE_PRESETS[value]()
        return SceneSpec.from_dict(value)

    def validate(self):
        AdaptationMode(self.mode)
        self.network_config().validate()
        self.scene_spec("scene")
        self.scene_spec("pretrain_scene")
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ValueError(f"bad resolution {self.resolution}")
        if self.crop is not None and len(self.crop) != 2:
            raise ValueError(f"bad crop {self.crop}")
        for name in ("length", "repeat", "compare_seeds", "curve_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pretrain_iterations < 0:
            raise ValueError("pretrain_iterations must be >= 0")
        if self.lr < 0 or self.pretrain_lr < 0:
            raise ValueError("learning rates must be non-negative")
