from .frames import StereoFrame, central_crop
from .metrics import d1_all, epe
from .synthetic import (
    DomainShiftSpec,
    SceneSpec,
    apply_domain_shift,
    domain_a,
    domain_b,
    generate_sequence,
    iter_sequence,
)

__all__ = [
    "StereoFrame",
    "central_crop",
    "d1_all",
    "epe",
    "DomainShiftSpec",
    "SceneSpec",
    "apply_domain_shift",
    "domain_a",
    "domain_b",
    "generate_sequence",
    "iter_sequence",
]
