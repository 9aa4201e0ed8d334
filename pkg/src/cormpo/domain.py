"""Core domain types, the physiological reward stack, and clinical metrics.

Everything here is a pure function over value types: hemodynamic state
windows (one hour sampled every 10 minutes, 12 features), integer pump
support levels (P2..P9), and trajectories of both.  The reward stack
combines four smooth hemodynamic penalty terms with two action-level
shaping metrics (ACP, the action change penalty, and WS, the weaning
score) conditioned on hemodynamic stability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

# Fixed feature order for every 6x12 state window.
FEATURES = (
    "map",            # mean arterial pressure (mmHg)
    "pump_speed",     # mean pump speed (rpm)
    "motor_current",  # mean motor current (mA)
    "pump_flow",      # mean pump flow (L/min)
    "lvp",            # left ventricular pressure (mmHg)
    "lvedp",          # left ventricular end-diastolic pressure (mmHg)
    "hr",             # heart rate (bpm)
    "sbp",            # systolic blood pressure (mmHg)
    "dbp",            # diastolic blood pressure (mmHg)
    "pulsatility",    # arterial pulse amplitude (mmHg)
    "tau_lv",         # LV relaxation constant (ms)
    "ese_lv",         # LV elastance estimate (mmHg/mL)
)

N_STEPS = 6
N_FEATURES = 12
WINDOW_SHAPE = (N_STEPS, N_FEATURES)

IDX_MAP = FEATURES.index("map")
IDX_HR = FEATURES.index("hr")
IDX_PULSAT = FEATURES.index("pulsatility")

PLEVEL_MIN = 2
PLEVEL_MAX = 9
N_ACTIONS = PLEVEL_MAX - PLEVEL_MIN + 1


class InvalidInputError(ValueError):
    """Raised when a domain operation receives malformed input."""


@dataclass(frozen=True)
class StateWindow:
    """One hour of patient state: 6 time steps x 12 hemodynamic features."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.shape != WINDOW_SHAPE:
            raise InvalidInputError(
                f"state window must have shape {WINDOW_SHAPE}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("state window entries must be finite")
        object.__setattr__(self, "values", arr)


WindowLike = Union[StateWindow, np.ndarray, Sequence[Sequence[float]]]


def window_values(window: WindowLike) -> np.ndarray:
    """Coerce a window-like object to a validated (6, 12) float array."""
    if isinstance(window, StateWindow):
        return window.values
    return StateWindow(np.asarray(window)).values


@dataclass(frozen=True)
class PLevel:
    """Discrete pump support level in {2, ..., 9}."""

    level: int

    def __post_init__(self) -> None:
        if not (PLEVEL_MIN <= int(self.level) <= PLEVEL_MAX):
            raise InvalidInputError(
                f"p-level must be in [{PLEVEL_MIN}, {PLEVEL_MAX}], got {self.level}"
            )
        object.__setattr__(self, "level", int(self.level))


PLevelLike = Union[PLevel, int]


def plevel_value(action: PLevelLike) -> int:
    if isinstance(action, PLevel):
        return action.level
    return PLevel(int(action)).level


def plevel_to_index(action: PLevelLike) -> int:
    """Map P2..P9 to array index 0..7."""
    return plevel_value(action) - PLEVEL_MIN


def index_to_plevel(index: int) -> int:
    if not (0 <= index < N_ACTIONS):
        raise InvalidInputError(f"action index out of range: {index}")
    return index + PLEVEL_MIN


@dataclass(frozen=True)
class Transition:
    state: StateWindow
    action: PLevel
    reward: float
    next_state: StateWindow
    done: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise InvalidInputError("transition reward must be finite")


@dataclass(frozen=True)
class Trajectory:
    """Ordered states plus the actions taken between them (len(actions) = len(states) - 1)."""

    states: tuple
    actions: tuple

    def __post_init__(self) -> None:
        states = tuple(window_values(s) for s in self.states)
        actions = tuple(plevel_value(a) for a in self.actions)
        if len(states) != len(actions) + 1:
            raise InvalidInputError(
                f"trajectory needs len(states) == len(actions) + 1, "
                f"got {len(states)} states / {len(actions)} actions"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class RewardConfig:
    """Weights and normalization constants for shaped rewards.

    ``znorm_mean``/``znorm_std`` are the raw physiological-reward statistics
    of the training split; they are computed once and frozen here so shaped
    rewards are reproducible across stages.
    """

    lambda1: float = 0.0   # ACP weight
    lambda2: float = 0.0   # WS weight
    znorm_mean: float = 0.0
    znorm_std: float = 1.0
    clip: float = 2.0

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInputError("shaping weights must be >= 0")
        if self.znorm_std <= 0:
            raise InvalidInputError("znorm_std must be > 0")
        if self.clip <= 0:
            raise InvalidInputError("clip must be > 0")


class StabilityMode(str, Enum):
    CLINICAL = "clinical"
    GRADIENT = "gradient"


@dataclass(frozen=True)
class StabilityThresholds:
    """Hemodynamic stability limits.

    Clinical mode checks safety floors on the worst in-window sample;
    gradient mode checks that MAP/HR/pulsatility trends stay below
    per-step absolute slope bounds.
    """

    mode: StabilityMode = StabilityMode.CLINICAL
    map_floor: float = 60.0       # mmHg
    hr_floor: float = 50.0        # bpm
    pulsat_floor: float = 10.0    # mmHg
    map_slope: float = 1.36       # mmHg per 10-minute step
    hr_slope: float = 2.16        # bpm per step
    pulsat_slope: float = 1.95    # mmHg per step

    def __post_init__(self) -> None:
        for name in ("map_floor", "hr_floor", "pulsat_floor",
                     "map_slope", "hr_slope", "pulsat_slope"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be > 0")


CLINICAL_THRESHOLDS = StabilityThresholds(mode=StabilityMode.CLINICAL)
GRADIENT_THRESHOLDS = StabilityThresholds(mode=StabilityMode.GRADIENT)


# ---------------------------------------------------------------------------
# Physiological penalty stack
# ---------------------------------------------------------------------------

def _relu(x: float) -> float:
    return x if x > 0.0 else 0.0


def heart_rate_penalty(hr: float) -> float:
    """Quadratic penalty around the 75 bpm optimum; zero inside its plateau."""
    return _relu((hr - 75.0) ** 2 / 250.0 - 1.0)


def low_map_penalty(map_value: float) -> float:
    """Linear penalty once MAP falls below the 60 mmHg floor."""
    return _relu(7.0 * (60.0 - map_value) / 20.0)


def pulsatility_penalty(pulsat: float) -> float:
    """Two-sided penalty keeping pulsatility inside [20, 50] mmHg."""
    return _relu(7.0 * (20.0 - pulsat) / 20.0) + _relu((pulsat - 50.0) / 20.0)


def hypertension_penalty(map_value: float) -> float:
    """Linear penalty for elevated mean MAP above 106 mmHg."""
    return _relu((map_value - 106.0) / 18.0)


def physiological_reward(window: WindowLike) -> float:
    """Negated sum of the four hemodynamic penalties over one window.

    Minimum MAP/HR/pulsatility and mean MAP are taken over the 6 rows.
    Always <= 0; equals 0 when every vital sits in its safe band.
    """
    arr = window_values(window)
    min_map = float(arr[:, IDX_MAP].min())
    mean_map = float(arr[:, IDX_MAP].mean())
    min_hr = float(arr[:, IDX_HR].min())
    min_pulsat = float(arr[:, IDX_PULSAT].min())
    total = (
        low_map_penalty(min_map)
        + hypertension_penalty(mean_map)
        + heart_rate_penalty(min_hr)
        + pulsatility_penalty(min_pulsat)
    )
    return -total


def normalize_reward(raw: float, cfg: RewardConfig) -> float:
    """Z-score a raw reward with the frozen stats and clip to [-clip, clip]."""
    z = (raw - cfg.znorm_mean) / cfg.znorm_std
    return float(min(max(z, -cfg.clip), cfg.clip))


# ---------------------------------------------------------------------------
# Action-level metrics
# ---------------------------------------------------------------------------

ACP_GATE = 2.0  # consecutive-step change magnitude above which a pair counts


def action_change_penalty(actions: Sequence[PLevelLike], gated: bool = True) -> float:
    """Accumulated magnitude of consecutive P-level changes.

    With ``gated`` (the default) a pair contributes only when its absolute
    change exceeds 2 levels; the ungated variant sums every change.
    """
    levels = [plevel_value(a) for a in actions]
    if not levels:
        raise InvalidInputError("action sequence must be nonempty")
    total = 0.0
    for prev, curr in zip(levels, levels[1:]):
        delta = abs(curr - prev)
        if gated and delta <= ACP_GATE:
            continue
        total += delta
    return total


def ols_slope(series: np.ndarray) -> float:
    """Least-squares slope of a series against its sample index."""
    y = np.asarray(series, dtype=np.float64)
    t = np.arange(y.size, dtype=np.float64)
    t_centered = t - t.mean()
    denom = float(np.dot(t_centered, t_centered))
    return float(np.dot(t_centered, y - y.mean()) / denom)


def is_stable(window: WindowLike, thresholds: StabilityThresholds = CLINICAL_THRESHOLDS) -> bool:
    """Hemodynamic stability of one window under the configured mode."""
    arr = window_values(window)
    if thresholds.mode is StabilityMode.CLINICAL:
        return bool(
            arr[:, IDX_MAP].min() > thresholds.map_floor
            and arr[:, IDX_HR].min() > thresholds.hr_floor
            and arr[:, IDX_PULSAT].min() > thresholds.pulsat_floor
        )
    return bool(
        abs(ols_slope(arr[:, IDX_MAP])) < thresholds.map_slope
        and abs(ols_slope(arr[:, IDX_HR])) < thresholds.hr_slope
        and abs(ols_slope(arr[:, IDX_PULSAT])) < thresholds.pulsat_slope
    )


def weaned(a_curr: PLevelLike, a_next: PLevelLike) -> float:
    """Per-step weaning credit: -1 for any increase, +1/+2 for a one- or
    two-level decrease, 0 otherwise."""
    curr = plevel_value(a_curr)
    nxt = plevel_value(a_next)
    if nxt > curr:
        return -1.0
    drop = curr - nxt
    if drop in (1, 2):
        return float(drop)
    return 0.0


def weaning_score(traj: Trajectory, thresholds: StabilityThresholds = CLINICAL_THRESHOLDS) -> float:
    """Stability-conditioned average of the weaning credit over a trajectory.

    Consecutive action pairs (a_i, a_{i+1}) are scored when the state s_i at
    which the change is decided is stable; an empty stable set scores 0.
    """
    if len(traj.states) < 2:
        raise InvalidInputError("trajectory must contain at least 2 states")
    numer = 0.0
    denom = 0
    for i in range(len(traj.actions) - 1):
        if is_stable(traj.states[i], thresholds):
            numer += weaned(traj.actions[i], traj.actions[i + 1])
            denom += 1
    if denom == 0:
        return 0.0
    return numer / denom


def shaped_reward(phys: float, acp_term: float, ws_term: float, cfg: RewardConfig) -> float:
    """Combine the physiological reward with per-transition shaping terms."""
    for name, value in (("phys", phys), ("acp_term", acp_term), ("ws_term", ws_term)):
        if not math.isfinite(value):
            raise InvalidInputError(f"{name} must be finite")
    return phys - cfg.lambda1 * acp_term + cfg.lambda2 * ws_term


def transition_shaping_terms(
    state: WindowLike,
    prev_action: PLevelLike,
    action: PLevelLike,
    thresholds: StabilityThresholds = CLINICAL_THRESHOLDS,
    gated: bool = True,
) -> tuple[float, float]:
    """Per-transition (ACP, WS) terms for the change prev_action -> action.

    The ACP term is the change magnitude when it exceeds the gate (always
    the magnitude when ungated); the WS term is the weaning credit gated on
    stability of the state where the change is applied.
    """
    delta = abs(plevel_value(action) - plevel_value(prev_action))
    if gated and delta <= ACP_GATE:
        acp_term = 0.0
    else:
        acp_term = float(delta)
    ws_term = weaned(prev_action, action) if is_stable(state, thresholds) else 0.0
    return acp_term, ws_term
