"""Online adaptation controller: measure, pick a module, update."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import loss as photometric
from .autodiff import Tensor
from .data.frames import StereoFrame
from .data.metrics import d1_all, epe
from .network import (
    Adam,
    Network,
    apply_update,
    backward_full,
    backward_module,
    backward_params,
    forward,
)

DECAY = 0.99
REWARD_RATE = 0.01


class AdaptationMode(str, enum.Enum):
    NONE = "NONE"
    FULL = "FULL"
    MAD_FULL = "MAD_FULL"
    MAD_RAND = "MAD_RAND"
    MAD_SEQ = "MAD_SEQ"
    LAST_LAYER = "LAST_LAYER"
    REFINEMENT = "REFINEMENT"
    D2_REFINEMENT = "D2_REFINEMENT"

    @property
    def is_mad(self) -> bool:
        return self.name.startswith("MAD_")


_LAYER_GROUPS = {
    AdaptationMode.LAST_LAYER: "last_layer",
    AdaptationMode.REFINEMENT: "refinement",
    AdaptationMode.D2_REFINEMENT: "d2_refinement",
}


@dataclass
class AdaptationHistogram:
    bins: np.ndarray

    @classmethod
    def zeros(cls, p: int) -> "AdaptationHistogram":
        return cls(np.zeros(p, dtype=np.float64))

    def probabilities(self) -> np.ndarray:
        z = self.bins - self.bins.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass
class ControllerState:
    loss_prev: float | None = None
    loss_prev2: float | None = None
    last_module: int | None = None     # index into the module list
    frame_index: int = 0


def sample_module(hist: AdaptationHistogram, rng: np.random.Generator) -> int:
    """Draw a bin index from softmax(bins)."""
    return int(rng.choice(len(hist.bins), p=hist.probabilities()))


def update_histogram(hist: AdaptationHistogram, state: ControllerState, loss_t: float) -> AdaptationHistogram:
    """Reward the previously trained module by how much it beat linear extrapolation."""
    expected = 2.0 * state.loss_prev - state.loss_prev2
    gamma = expected - loss_t
    bins = hist.bins * DECAY
    bins[state.last_module] += REWARD_RATE * gamma
    return AdaptationHistogram(bins)


@dataclass
class StepReport:
    frame_idx: int
    mode: str
    epe_before: float | None
    d1_before: float | None
    loss_full_res: float
    selected_module: int | None
    forward_ms: float
    adapt_ms: float
    disparity: np.ndarray | None = field(default=None, repr=False, compare=False)


def step_timing(report: StepReport) -> tuple[float, float]:
    return report.forward_ms, report.adapt_ms


class Controller:
    """Owns the network, optimizer, histogram and bookkeeping for one run."""

    def __init__(self, net: Network, mode: AdaptationMode | str, lr: float = 1e-4, seed: int = 0,
                 keep_disparity: bool = False):
        self.net = net
        self.mode = AdaptationMode(mode)
        self.optimizer = Adam(lr)
        self.rng = np.random.default_rng(seed)
        self.modules = list(net.module_ids)
        self.hist = AdaptationHistogram.zeros(len(self.modules))
        self.state = ControllerState()
        self.keep_disparity = keep_disparity
        # test hook: called between metric computation and the update
        self.after_metrics = None

    def _select(self) -> int:
        p = len(self.modules)
        if self.mode is AdaptationMode.MAD_FULL:
            return sample_module(self.hist, self.rng)
        if self.mode is AdaptationMode.MAD_RAND:
            return int(self.rng.integers(p))
        return self.state.frame_index % p

    def step(self, frame: StereoFrame) -> StepReport:
        net = self.net
        t0 = time.perf_counter()
        pyr = forward(net, frame.left, frame.right)
        left, right = Tensor(frame.left), Tensor(frame.right)
        loss_full = photometric.reprojection_loss(left, right, pyr.full)
        loss_t = loss_full.value
        t1 = time.perf_counter()

        epe_b = d1_b = None
        if frame.gt_disparity is not None:
            mask = frame.mask()
            epe_b = epe(pyr.full.data, frame.gt_disparity, mask)
            d1_b = d1_all(pyr.full.data, frame.gt_disparity, mask)
        if self.after_metrics is not None:
            self.after_metrics(self, frame)
        if not np.isfinite(loss_t):
            raise FloatingPointError(f"non-finite loss at frame {self.state.frame_index}")

        t2 = time.perf_counter()
        selected = None
        mode = self.mode
        if mode is AdaptationMode.FULL:
            backward_full(net, loss_full.scalar)
            apply_update(net, self.optimizer)
        elif mode.is_mad:
            st = self.state
            if mode is AdaptationMode.MAD_FULL and st.loss_prev is not None:
                self.hist = update_histogram(self.hist, st, loss_t)
            idx = self._select()
            module = self.modules[idx]
            lvl = module
            y = pyr.level_output(module)
            ml = photometric.module_loss(left, right, y, lvl)
            backward_module(net, ml.scalar, module)
            apply_update(net, self.optimizer, [module])
            st.last_module = idx
            selected = module
        elif mode in _LAYER_GROUPS:
            params = net.layer_parameters(_LAYER_GROUPS[mode])
            backward_params(net, loss_full.scalar, params)
            apply_update(net, self.optimizer, params=params)
        t3 = time.perf_counter()

        st = self.state
        if st.loss_prev is None:
            st.loss_prev2 = st.loss_prev = loss_t
        else:
            st.loss_prev2, st.loss_prev = st.loss_prev, loss_t
        report = StepReport(st.frame_index, mode.value, epe_b, d1_b, loss_t, selected,
                            1000 * (t1 - t0), 1000 * (t3 - t2),
                            pyr.full.data.copy() if self.keep_disparity else None)
        st.frame_index += 1
        return report


def adapt_step(controller: Controller, frame: StereoFrame) -> StepReport:
    return controller.step(frame)
