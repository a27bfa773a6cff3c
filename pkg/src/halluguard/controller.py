"""Adaptive confidence-threshold control.

Two update laws are provided:

* proportional: ``tau <- clamp(tau + gain * (h_t - h_target))``
* bump: ``tau <- clamp(tau + delta)`` whenever the frame's grounding score
  falls below ``gamma_threshold``; otherwise unchanged.

The pure functions :func:`update_proportional` and :func:`update_bump` map a
frozen :class:`ControllerState` to the next one. :class:`Controller` is the
single-writer owner used by the pipeline; it adds the bounded history ring.

:func:`stability_analysis` evaluates the linearised error recursion
``e_{t+1} = (1 - beta * gain) * e_t`` around an operating point.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, NamedTuple

from .errors import GammaOutOfRange, HRateOutOfRange, NonPositiveInput, ValidationError

RECOMMENDED_GAIN = (0.01, 0.1)
MARGINAL_TOL = 1e-9


class ControllerMode(str, Enum):
    PROPORTIONAL = "Proportional"
    BUMP = "Bump"
    STATIC = "Static"


@dataclass(frozen=True)
class ControllerConfig:
    gain: float = 0.05
    h_target: float = 0.1
    tau_init: float = 0.5
    tau_min: float = 0.05
    tau_max: float = 0.95
    mode: ControllerMode = ControllerMode.PROPORTIONAL
    delta: float = 0.01
    gamma_threshold: float = 0.85
    decay: float = 0.0
    history_capacity: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "mode", ControllerMode(self.mode))
        if not (0.0 <= self.tau_min < self.tau_init < self.tau_max <= 1.0):
            raise ValidationError(
                "need 0 <= tau_min < tau_init < tau_max <= 1, got "
                f"{self.tau_min}, {self.tau_init}, {self.tau_max}"
            )
        if not (0.0 <= self.h_target < 1.0):
            raise ValidationError(f"h_target {self.h_target} outside [0, 1)")
        # a static run never touches the gain
        if self.mode is not ControllerMode.STATIC and not (0.0 < self.gain <= 2.0):
            raise ValidationError(f"gain {self.gain} outside (0, 2]")
        if self.mode is ControllerMode.BUMP and self.delta <= 0.0:
            raise ValidationError(f"bump delta {self.delta} must be positive")
        if not (0.0 <= self.decay < 1.0):
            raise ValidationError(f"decay {self.decay} outside [0, 1)")
        if self.history_capacity < 1:
            raise ValidationError("history_capacity must be >= 1")

    @property
    def gain_in_recommended_range(self) -> bool:
        lo, hi = RECOMMENDED_GAIN
        return lo <= self.gain <= hi


@dataclass(frozen=True)
class ControllerState:
    tau: float
    step: int = 0
    last_h: float = 0.0
    last_error: float = 0.0

    @classmethod
    def initial(cls, cfg: ControllerConfig) -> "ControllerState":
        return cls(tau=cfg.tau_init, step=0, last_h=cfg.h_target, last_error=0.0)


class HistoryRecord(NamedTuple):
    t: int
    tau: float
    h_t: float
    e_t: float


def clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def next_threshold(
    tau: float,
    h_t: float,
    gain: float,
    h_target: float,
    lo: float = -math.inf,
    hi: float = math.inf,
) -> float:
    """One proportional step. Unbounded unless ``lo``/``hi`` are given."""
    return clamp(tau + gain * (h_t - h_target), lo, hi)


def update_proportional(state: ControllerState, h_t: float, cfg: ControllerConfig) -> ControllerState:
    if not (0.0 <= h_t <= 1.0):
        raise HRateOutOfRange(f"hallucination rate {h_t!r} outside [0, 1]")
    tau = next_threshold(state.tau, h_t, cfg.gain, cfg.h_target, cfg.tau_min, cfg.tau_max)
    return ControllerState(tau=tau, step=state.step + 1, last_h=h_t, last_error=h_t - cfg.h_target)


def update_bump(state: ControllerState, gamma: float, cfg: ControllerConfig) -> ControllerState:
    if not (0.0 <= gamma <= 1.0):
        raise GammaOutOfRange(f"grounding score {gamma!r} outside [0, 1]")
    tau = state.tau
    if cfg.decay:
        tau = tau * (1.0 - cfg.decay)
    if gamma < cfg.gamma_threshold:
        tau = tau + cfg.delta
    tau = clamp(tau, cfg.tau_min, cfg.tau_max)
    h = 1.0 - gamma
    return ControllerState(tau=tau, step=state.step + 1, last_h=h, last_error=h - cfg.h_target)


def update_static(state: ControllerState, h_t: float, cfg: ControllerConfig) -> ControllerState:
    if not (0.0 <= h_t <= 1.0):
        raise HRateOutOfRange(f"hallucination rate {h_t!r} outside [0, 1]")
    return replace(state, step=state.step + 1, last_h=h_t, last_error=h_t - cfg.h_target)


class Controller:
    """Stateful owner of a :class:`ControllerState` plus its history ring.

    Only the pipeline loop should call :meth:`observe`; anyone may read
    :attr:`state`, which is an immutable snapshot.
    """

    def __init__(self, cfg: ControllerConfig | None = None, state: ControllerState | None = None):
        self.cfg = cfg or ControllerConfig()
        self.state = state or ControllerState.initial(self.cfg)
        self.history: deque[HistoryRecord] = deque(maxlen=self.cfg.history_capacity)

    @property
    def tau(self) -> float:
        return self.state.tau

    def observe(self, h_t: float, gamma: float) -> ControllerState:
        """Feed one frame's measurements and advance the law for ``cfg.mode``.

        ``h_t`` is the windowed hallucination estimate, ``gamma`` the
        frame's grounding score; bump mode uses only ``gamma``.
        """
        mode = self.cfg.mode
        if mode is ControllerMode.PROPORTIONAL:
            new = update_proportional(self.state, h_t, self.cfg)
        elif mode is ControllerMode.BUMP:
            new = update_bump(self.state, gamma, self.cfg)
        else:
            new = update_static(self.state, h_t, self.cfg)
        self._record(new)
        return new

    def _record(self, new: ControllerState) -> None:
        self.state = new
        self.history.append(HistoryRecord(new.step, new.tau, new.last_h, new.last_error))

    def snapshot(self) -> tuple[ControllerState, tuple[HistoryRecord, ...]]:
        return self.state, tuple(self.history)


def history_table(records: Iterable[HistoryRecord], sep: str = "\t") -> str:
    """Render history as a delimited table: ``t, tau, h_t, e_t`` at 6 decimals."""
    lines = [sep.join(("t", "tau", "h_t", "e_t"))]
    for r in records:
        lines.append(sep.join((str(r.t), f"{r.tau:.6f}", f"{r.h_t:.6f}", f"{r.e_t:.6f}")))
    return "\n".join(lines) + "\n"


# -- stability ---------------------------------------------------------------


class Stability(str, Enum):
    STABLE = "Stable"
    MARGINAL = "Marginal"
    UNSTABLE = "Unstable"


@dataclass(frozen=True)
class StabilityReport:
    beta: float
    loop_gain: float
    classification: Stability
    predicted_frames_to_eps: int | None  # None = unbounded
    oscillatory: bool = False

    @property
    def contraction(self) -> float:
        return abs(1.0 - self.loop_gain)


def classify(loop_gain: float) -> Stability:
    if abs(loop_gain - 2.0) <= MARGINAL_TOL:
        return Stability.MARGINAL
    if 0.0 < loop_gain < 2.0:
        return Stability.STABLE
    return Stability.UNSTABLE


def frames_to_eps(rho: float, e0_mag: float, eps: float) -> int:
    """Smallest t with ``e0_mag * rho**t <= eps`` for ``0 <= rho < 1``."""
    if e0_mag <= eps:
        return 0
    if rho == 0.0:
        return 1
    return math.ceil(math.log(eps / e0_mag) / math.log(rho))


def stability_analysis(beta: float, gain: float, e0_mag: float, eps: float) -> StabilityReport:
    for name, v in (("beta", beta), ("gain", gain), ("e0_mag", e0_mag), ("eps", eps)):
        if not (v > 0.0):
            raise NonPositiveInput(f"{name} must be > 0, got {v!r}")
    lg = beta * gain
    cls = classify(lg)
    if cls is not Stability.STABLE:
        return StabilityReport(beta, lg, cls, None, oscillatory=lg > 1.0)
    rho = abs(1.0 - lg)
    return StabilityReport(beta, lg, cls, frames_to_eps(rho, e0_mag, eps), oscillatory=lg > 1.0)


def residual_bound(h_target: float, delta_resid: float) -> float:
    """Worst-case post-convergence hallucination rate ``h_target + delta``."""
    if delta_resid < 0.0:
        raise ValidationError(f"residual {delta_resid} must be >= 0")
    return h_target + delta_resid


def iterate_plant(
    plant: Callable[[float], float],
    gain: float,
    h_target: float,
    tau0: float,
    steps: int,
    lo: float = -math.inf,
    hi: float = math.inf,
) -> list[HistoryRecord]:
    """Drive a deterministic plant ``h = plant(tau)`` with the proportional law.

    Record ``t`` holds the threshold in force at step ``t`` and the error it
    produced, so ``records[0]`` is the initial error.
    """
    out = []
    tau = tau0
    for t in range(steps + 1):
        h = plant(tau)
        out.append(HistoryRecord(t, tau, h, h - h_target))
        tau = next_threshold(tau, h, gain, h_target, lo, hi)
    return out
