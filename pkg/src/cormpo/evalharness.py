"""Policy evaluation in the twin (or the oracle generator) plus reporting.

Episodes roll the policy for a fixed horizon from generator-sampled start
states.  Reported metrics per episode: mean normalized physiological reward
over the visited successor windows, the gated action change penalty over
the episode's action sequence, and the gradient-stability weaning score.
Aggregation is mean and std across evaluation seeds of per-seed episode
means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    GRADIENT_THRESHOLDS,
    PLEVEL_MIN,
    InvalidInputError,
    RewardConfig,
    Trajectory,
    action_change_penalty,
    normalize_reward,
    physiological_reward,
    weaning_score,
)
from .nets import derive_seed
from .orl import PolicyModel
from .synthenv import GeneratorConfig, env_step, init_patient
from .twin import TwinModel


class UndefinedDropError(ValueError):
    """Raised when the clean-reward denominator of a drop is zero."""


@dataclass
class EvalReport:
    algo: str
    seeds: list
    n_episodes: int
    horizon: int
    reward_per_seed: list
    acp_per_seed: list
    ws_per_seed: list
    reward_mean: float = 0.0
    reward_std: float = 0.0
    acp_mean: float = 0.0
    acp_std: float = 0.0
    ws_mean: float = 0.0
    ws_std: float = 0.0
    ws_exceeded_unit: bool = False
    env: str = "twin"
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("reward", "acp", "ws"):
            values = np.asarray(getattr(self, f"{name}_per_seed"), dtype=np.float64)
            setattr(self, f"{name}_mean", float(values.mean()) if values.size else 0.0)
            setattr(self, f"{name}_std", float(values.std()) if values.size else 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        keep = {k: v for k, v in d.items() if not k.endswith("_mean") and not k.endswith("_std")}
        return cls(**keep)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _episode_metrics(traj: Trajectory, reward_cfg: RewardConfig) -> tuple[float, float, float]:
    rewards = [
        normalize_reward(physiological_reward(s), reward_cfg) for s in traj.states[1:]
    ]
    acp = action_change_penalty(traj.actions)
    ws = weaning_score(traj, GRADIENT_THRESHOLDS)
    return float(np.mean(rewards)), acp, ws


def _policy_actions(
    policy,
    windows: np.ndarray,
    currents: np.ndarray,
    rng: np.random.Generator,
    stochastic: bool = True,
) -> np.ndarray:
    if isinstance(policy, PolicyModel):
        if stochastic:
            return policy.act_batch(windows, rng)
        probs = policy.probs_batch(windows)
        return np.argmax(probs, axis=1) + PLEVEL_MIN
    return np.asarray(
        [int(policy(windows[i], int(currents[i]), rng)) for i in range(len(windows))],
        dtype=np.int64,
    )


def _init_episodes(seed_children, gen_cfg: GeneratorConfig):
    latents, windows, levels = [], [], []
    for child in seed_children:
        latent, window, level = init_patient(child, gen_cfg)
        latents.append(latent)
        windows.append(window)
        levels.append(level)
    return latents, np.asarray(windows), np.asarray(levels, dtype=np.int64)


def _rollout_seed_trajectories_twin(
    policy,
    twin: TwinModel,
    gen_cfg: GeneratorConfig,
    seed: int,
    n_episodes: int,
    horizon: int,
    stochastic: bool,
    stochastic_policy: bool = True,
) -> list[Trajectory]:
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    _, windows, currents = _init_episodes(children, gen_cfg)
    action_rng = np.random.default_rng(derive_seed(seed, 501))
    states_hist = [windows.copy()]
    action_hist = []
    for t in range(horizon):
        actions = _policy_actions(policy, windows, currents, action_rng, stochastic_policy)
        dropout_seed = derive_seed(seed, 502, t) if stochastic else None
        windows = twin.predict_batch(windows, actions, dropout_seed=dropout_seed)
        states_hist.append(windows.copy())
        action_hist.append(actions)
        currents = actions
    trajectories = []
    for ep in range(n_episodes):
        trajectories.append(
            Trajectory(
                states=tuple(states_hist[t][ep] for t in range(horizon + 1)),
                actions=tuple(int(action_hist[t][ep]) for t in range(horizon)),
            )
        )
    return trajectories


def _rollout_seed_trajectories_oracle(
    policy,
    gen_cfg: GeneratorConfig,
    seed: int,
    n_episodes: int,
    horizon: int,
    stochastic_policy: bool = True,
) -> list[Trajectory]:
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    action_rng = np.random.default_rng(derive_seed(seed, 501))
    trajectories = []
    for child in children:
        latent, window, current = init_patient(child, gen_cfg)
        states = [window]
        actions = []
        for _ in range(horizon):
            action = int(_policy_actions(policy, window[None], np.asarray([current]), action_rng, stochastic_policy)[0])
            window, latent = env_step(latent, window, action, gen_cfg)
            states.append(window)
            actions.append(action)
            current = action
        trajectories.append(Trajectory(states=tuple(states), actions=tuple(actions)))
    return trajectories


def evaluate_policy(
    policy,
    twin: TwinModel | None,
    gen_cfg: GeneratorConfig,
    reward_cfg: RewardConfig,
    n_episodes: int = 1000,
    horizon: int = 6,
    seeds: tuple = (0, 1, 2, 3, 4),
    env: str = "twin",
    stochastic_twin: bool = True,
    stochastic_policy: bool = True,
    algo: str = "policy",
) -> EvalReport:
    """Evaluate a policy over ``n_episodes`` per seed.

    ``policy`` is a PolicyModel or a callable
    ``(window, current_level, rng) -> level``.  ``env`` selects the twin
    forecaster or the ground-truth oracle generator as the rollout
    dynamics; start states always come from the generator.  A PolicyModel
    acts by sampling its categorical distribution unless
    ``stochastic_policy`` is False (argmax deployment, the imitation-
    learning convention).
    """
    if env not in ("twin", "oracle"):
        raise InvalidInputError(f"unknown evaluation environment: {env}")
    if env == "twin" and twin is None:
        raise InvalidInputError("twin evaluation requires a twin model")
    reward_per_seed, acp_per_seed, ws_per_seed = [], [], []
    ws_exceeded = False
    for seed in seeds:
        if env == "twin":
            trajectories = _rollout_seed_trajectories_twin(
                policy, twin, gen_cfg, int(seed), n_episodes, horizon,
                stochastic_twin, stochastic_policy,
            )
        else:
            trajectories = _rollout_seed_trajectories_oracle(
                policy, gen_cfg, int(seed), n_episodes, horizon, stochastic_policy
            )
        rewards, acps, wss = [], [], []
        for traj in trajectories:
            r, a, w = _episode_metrics(traj, reward_cfg)
            rewards.append(r)
            acps.append(a)
            wss.append(w)
            if w > 1.0:
                ws_exceeded = True
        reward_per_seed.append(float(np.mean(rewards)))
        acp_per_seed.append(float(np.mean(acps)))
        ws_per_seed.append(float(np.mean(wss)))
    return EvalReport(
        algo=algo,
        seeds=[int(s) for s in seeds],
        n_episodes=n_episodes,
        horizon=horizon,
        reward_per_seed=reward_per_seed,
        acp_per_seed=acp_per_seed,
        ws_per_seed=ws_per_seed,
        ws_exceeded_unit=ws_exceeded,
        env=env,
    )


def reward_drop(noiseless: EvalReport, noisy: EvalReport) -> float:
    """Percentage reward drop between the clean and noisy settings."""
    clean = noiseless.reward_mean
    if clean == 0.0:
        raise UndefinedDropError("clean reward is zero; drop percentage undefined")
    return 100.0 * (clean - noisy.reward_mean) / abs(clean)


def report_table(reports: dict[str, EvalReport]) -> str:
    """Human-readable mean +/- std table, rows ordered by algorithm name."""
    lines = [f"{'algo':<10} {'reward':>18} {'acp':>18} {'ws':>18}"]
    for name in sorted(reports):
        r = reports[name]
        lines.append(
            f"{name:<10} "
            f"{r.reward_mean:>10.4f} ± {r.reward_std:<6.4f}"
            f"{r.acp_mean:>10.4f} ± {r.acp_std:<6.4f}"
            f"{r.ws_mean:>10.4f} ± {r.ws_std:<6.4f}"
        )
    return "\n".join(lines)


def write_report_csv(reports: dict[str, EvalReport], path: Path | str) -> None:
    """One row per algo/metric/seed, deterministically ordered."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algo", "metric", "seed", "value"])
        for name in sorted(reports):
            r = reports[name]
            for metric, values in (
                ("reward", r.reward_per_seed),
                ("acp", r.acp_per_seed),
                ("ws", r.ws_per_seed),
            ):
                for seed, value in zip(r.seeds, values):
                    writer.writerow([name, metric, seed, repr(float(value))])


def read_report_csv(path: Path | str) -> dict:
    rows = {}
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["algo"], row["metric"], int(row["seed"]))
            rows[key] = float(row["value"])
    return rows
