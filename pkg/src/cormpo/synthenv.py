"""Ground-truth stochastic hemodynamic generator.

A hidden per-patient recovery level in [0, 1] drives all vitals through a
fixed observation map; pump support (P-level) shifts them linearly.  The
map is tuned so that a recovered patient tolerates minimum support while an
unrecovered one destabilizes there, which is exactly the structure a
weaning policy has to learn.  All coefficients are fixed constants so that
datasets are bit-reproducible under a seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .data import Dataset, compute_stats
from .domain import (
    CLINICAL_THRESHOLDS,
    IDX_PULSAT,
    N_FEATURES,
    N_STEPS,
    PLEVEL_MAX,
    PLEVEL_MIN,
    InvalidInputError,
    is_stable,
    physiological_reward,
)

# Per-feature Gaussian step noise (same order as domain.FEATURES).
DEFAULT_STEP_NOISE = (
    1.5,    # map
    50.0,   # pump_speed
    5.0,    # motor_current
    0.05,   # pump_flow
    2.0,    # lvp
    1.0,    # lvedp
    2.0,    # hr
    1.8,    # sbp
    1.8,    # dbp
    1.2,    # pulsatility
    1.0,    # tau_lv
    0.05,   # ese_lv
)

# Mean-reversion rate for the slow ventricular features (per 10-minute step).
_AR_PHI = 0.5
_AR_FEATURES = {"lvp": 4, "lvedp": 5, "tau_lv": 10, "ese_lv": 11}

# Beat-to-beat variability scales mildly with native heart activity:
# lively (high-pulsatility) circulation fluctuates a bit more than
# pump-dominated circulation.  Applied to the pressure/rate channels only.
_VITALITY_CHANNELS = (0, 6, 7, 8, 9)  # map, hr, sbp, dbp, pulsatility
_VITALITY_NOISE_FLOOR = 0.8
_VITALITY_NOISE_GAIN = 0.01  # per mmHg of mean pulsatility


@dataclass
class GeneratorConfig:
    n_trajectories: int = 5000
    horizon: int = 6
    step_noise: tuple = DEFAULT_STEP_NOISE
    recovery_drift: float = 0.02
    recovery_noise: float = 0.015
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trajectories <= 0:
            raise InvalidInputError("n_trajectories must be > 0")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        noise = tuple(float(x) for x in self.step_noise)
        if len(noise) != N_FEATURES:
            raise InvalidInputError(f"step_noise must have {N_FEATURES} entries")
        self.step_noise = noise


@dataclass
class NoiseConfig:
    sigma: float = 0.2
    fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.fraction <= 1.0):
            raise InvalidInputError("fraction must be in [0, 1]")
        if self.sigma < 0:
            raise InvalidInputError("sigma must be >= 0")


@dataclass
class PatientLatent:
    """Hidden cardiac recovery plus the patient's private random stream."""

    recovery: float
    rng: np.random.Generator

    def __post_init__(self) -> None:
        self.recovery = float(min(max(self.recovery, 0.0), 1.0))


def _vital_means(recovery: float, plevel: int) -> dict:
    q = plevel - PLEVEL_MIN
    mean_map = 52.0 + 28.0 * recovery + 1.5 * q
    pulsat = 6.0 + 32.0 * recovery - 1.4 * q
    return {
        "map": mean_map,
        "hr": 98.0 - 28.0 * recovery - 0.6 * q,
        "pulsatility": pulsat,
        "pump_speed": 20000.0 + 2000.0 * q,
        "motor_current": 300.0 + 45.0 * q,
        "pump_flow": 1.0 + 0.45 * q,
        # slow ventricular features relax toward these setpoints
        "lvp": 70.0 + 20.0 * recovery,
        "lvedp": 22.0 - 12.0 * recovery,
        "tau_lv": 45.0 - 15.0 * recovery,
        "ese_lv": 1.2 + 1.3 * recovery,
    }


def _generate_window(
    rng: np.random.Generator,
    recovery: float,
    plevel: int,
    ar_tail: np.ndarray | None,
    noise: np.ndarray,
) -> np.ndarray:
    """Six 10-minute rows from the observation map.

    ``ar_tail`` carries the previous window's last values for the
    mean-reverting features; None starts them at their setpoints.
    """
    means = _vital_means(recovery, plevel)
    window = np.empty((N_STEPS, N_FEATURES), dtype=np.float64)
    ar_values = {
        name: (means[name] if ar_tail is None else float(ar_tail[idx]))
        for name, idx in _AR_FEATURES.items()
    }
    scale = noise.copy()
    vitality = _VITALITY_NOISE_FLOOR + _VITALITY_NOISE_GAIN * max(means["pulsatility"], 0.0)
    scale[list(_VITALITY_CHANNELS)] *= vitality
    for row in range(N_STEPS):
        eps = rng.standard_normal(N_FEATURES) * scale
        map_v = means["map"] + eps[0]
        pulsat_v = means["pulsatility"] + eps[9]
        window[row, 0] = map_v
        window[row, 1] = means["pump_speed"] + eps[1]
        window[row, 2] = means["motor_current"] + eps[2]
        window[row, 3] = means["pump_flow"] + eps[3]
        window[row, 6] = means["hr"] + eps[6]
        window[row, 7] = map_v + pulsat_v / 2.0 + eps[7]
        window[row, 8] = map_v - pulsat_v / 2.0 + eps[8]
        window[row, 9] = pulsat_v
        for name, idx in _AR_FEATURES.items():
            prev = ar_values[name]
            value = prev + _AR_PHI * (means[name] - prev) + eps[idx]
            ar_values[name] = value
            window[row, idx] = value
    return window


def init_patient(
    seed: int | np.random.SeedSequence, cfg: GeneratorConfig | None = None
) -> tuple[PatientLatent, np.ndarray, int]:
    """Sample a fresh patient: latent recovery, initial window, initial P-level."""
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(seed)
    recovery = float(rng.uniform(0.1, 0.9))
    plevel = int(rng.integers(4, PLEVEL_MAX + 1))
    window = _generate_window(
        rng, recovery, plevel, None, np.asarray(cfg.step_noise, dtype=np.float64)
    )
    return PatientLatent(recovery=recovery, rng=rng), window, plevel


def env_step(
    latent: PatientLatent,
    state: np.ndarray,
    action: int,
    cfg: GeneratorConfig | None = None,
) -> tuple[np.ndarray, PatientLatent]:
    """Advance one hour under the chosen support level."""
    cfg = cfg or GeneratorConfig()
    rng = latent.rng
    xi = rng.standard_normal()
    recovery = min(max(latent.recovery + cfg.recovery_drift + cfg.recovery_noise * xi, 0.0), 1.0)
    window = _generate_window(
        rng,
        recovery,
        int(action),
        np.asarray(state, dtype=np.float64)[-1],
        np.asarray(cfg.step_noise, dtype=np.float64),
    )
    return window, PatientLatent(recovery=recovery, rng=rng)


def scripted_expert(state: np.ndarray, current: int) -> int:
    """Deterministic weaning rule: step down when comfortably stable, step
    back up when unstable, otherwise hold."""
    current = int(current)
    stable = is_stable(state, CLINICAL_THRESHOLDS)
    min_pulsat = float(np.asarray(state)[:, IDX_PULSAT].min())
    if stable and min_pulsat > 15.0:
        return max(current - 1, PLEVEL_MIN)
    if not stable:
        return min(current + 1, PLEVEL_MAX)
    return current


PolicyFn = Callable[[np.ndarray, int, np.random.Generator], int]


def expert_policy(window: np.ndarray, current: int, rng: np.random.Generator) -> int:
    return scripted_expert(window, current)


def noisy_expert_policy(epsilon: float) -> PolicyFn:
    """Expert with epsilon-uniform exploration; the behavior policy used to
    give the offline dataset action coverage."""

    def policy(window: np.ndarray, current: int, rng: np.random.Generator) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(PLEVEL_MIN, PLEVEL_MAX + 1))
        return scripted_expert(window, current)

    return policy


def generate_dataset(cfg: GeneratorConfig, policy: PolicyFn = expert_policy) -> Dataset:
    """Roll ``n_trajectories`` seeded episodes under ``policy``.

    Rewards are raw physiological rewards of the current window; shaping is
    applied later at buffer construction.  Episode seeds are spawned from
    the master seed so generation order does not matter.
    """
    n_rows = cfg.n_trajectories * cfg.horizon
    states = np.empty((n_rows, N_STEPS, N_FEATURES), dtype=np.float64)
    next_states = np.empty_like(states)
    actions = np.empty(n_rows, dtype=np.int64)
    rewards = np.empty(n_rows, dtype=np.float64)
    dones = np.zeros(n_rows, dtype=bool)
    traj_ids = np.empty(n_rows, dtype=np.int64)
    ts = np.empty(n_rows, dtype=np.int64)

    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trajectories)
    row = 0
    for ep, child in enumerate(children):
        latent, window, plevel = init_patient(child, cfg)
        rng = latent.rng
        for t in range(cfg.horizon):
            action = int(policy(window, plevel, rng))
            next_window, latent = env_step(latent, window, action, cfg)
            states[row] = window
            actions[row] = action
            rewards[row] = physiological_reward(window)
            next_states[row] = next_window
            dones[row] = t == cfg.horizon - 1
            traj_ids[row] = ep
            ts[row] = t
            row += 1
            window = next_window
            plevel = action
    stats = compute_stats(states, actions, rewards, next_states, dones)
    gen_meta = asdict(cfg)
    gen_meta["step_noise"] = list(cfg.step_noise)  # JSON-stable form
    meta = {
        "kind": "synthetic",
        "generator": gen_meta,
        "normalization": stats.to_dict(),
    }
    return Dataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        dones=dones,
        traj_ids=traj_ids,
        ts=ts,
        meta=meta,
    )


def inject_noise(dataset: Dataset, cfg: NoiseConfig) -> Dataset:
    """Perturb a seeded subset of next-state windows with Gaussian noise.

    Noise is drawn in z-normalized feature units (so sigma is comparable
    across features) and mapped back to raw units.  The input dataset is
    left untouched; its normalization stats are carried over so downstream
    consumers keep using the clean-data scale.
    """
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    n_sel = int(np.floor(cfg.fraction * n))
    stats = dataset.stats
    next_states = dataset.next_states.copy()
    selected = np.array([], dtype=np.int64)
    if n_sel > 0:
        selected = np.sort(rng.choice(n, size=n_sel, replace=False))
        noise = rng.standard_normal((n_sel, N_STEPS, N_FEATURES)) * cfg.sigma
        perturbed_z = stats.normalize_windows(next_states[selected]) + noise
        next_states[selected] = stats.denormalize_windows(perturbed_z)
    meta = dict(dataset.meta)
    meta["noise"] = {**asdict(cfg), "n_perturbed": int(n_sel)}
    return Dataset(
        states=dataset.states.copy(),
        actions=dataset.actions.copy(),
        rewards=dataset.rewards.copy(),
        next_states=next_states,
        dones=dataset.dones.copy(),
        traj_ids=dataset.traj_ids.copy(),
        ts=dataset.ts.copy(),
        meta=meta,
    )
