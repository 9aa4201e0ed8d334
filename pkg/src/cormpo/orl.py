"""Offline policy learning: shaped replay buffers, a probabilistic dynamics
ensemble, discrete soft actor-critic, and the BC/MBPO/MOPO/CORMPO variants.

The model-based algorithms share one loop: shape the offline buffer, train
the ensemble, then interleave short-horizon model rollouts with SAC updates
on mixed real/synthetic batches.  They differ only in the penalty applied
to synthetic rewards: none (MBPO), the max-aleatoric ensemble heuristic
(MOPO), or the density regularizer from the guardian (CORMPO).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import MAGIC_ENSEMBLE, MAGIC_POLICY, read_container, write_container
from .data import Dataset, NormalizationStats
from .domain import (
    ACP_GATE,
    CLINICAL_THRESHOLDS,
    IDX_HR,
    IDX_MAP,
    IDX_PULSAT,
    N_ACTIONS,
    N_FEATURES,
    N_STEPS,
    PLEVEL_MIN,
    InvalidInputError,
    RewardConfig,
    StabilityThresholds,
    index_to_plevel,
    plevel_to_index,
)
from .guardian import DensityModel
from .nets import DTYPE, MLP, derive_seed, flatten_state_dict, load_state_dict_arrays, torch_generator
from .twin import TrainingFailureError

STATE_DIM = N_STEPS * N_FEATURES

ALGORITHMS = ("bc", "mbpo", "mopo", "cormpo")

# soft log-variance bounds for the ensemble's Gaussian heads
_LOGVAR_MAX = 4.0
_LOGVAR_MIN = -10.0


@dataclass
class ORLConfig:
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    gamma: float = 0.99
    target_update: float = 0.005
    target_entropy: float = -1.0
    temperature_lr: float = 3e-4
    init_temperature: float = 0.2
    dynamics_lr: float = 1e-3
    ensemble_size: int = 7
    n_elites: int = 5
    holdout_ratio: float = 0.2
    dynamics_epochs: int = 20
    epochs: int = 100
    steps_per_epoch: int = 1000
    batch_size: int = 256
    rollout_horizon: int = 5
    rollout_batch: int = 10000
    rollout_frequency: int = 1000
    rollout_retain_rounds: int = 5
    real_ratio: float = 0.05
    eval_episodes: int = 1000
    mopo_lambda: float = 1.0
    sanity_box: float = 10.0     # |z| bound that terminates model rollouts
    actor_hidden: tuple = (128, 128)
    critic_hidden: tuple = (128, 128)
    dynamics_hidden: tuple = (200, 200)
    bc_epochs: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise InvalidInputError("gamma must be in (0, 1)")
        if self.ensemble_size < 1:
            raise InvalidInputError("ensemble size must be >= 1")
        self.n_elites = min(self.n_elites, self.ensemble_size)
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        self.dynamics_hidden = tuple(int(h) for h in self.dynamics_hidden)


class ReplayBuffer:
    """Flat transition storage in z-normalized feature space."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.states = np.zeros((capacity, STATE_DIM), dtype=np.float64)
        self.actions = np.zeros(capacity, dtype=np.int64)   # action indices 0..7
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.next_states = np.zeros((capacity, STATE_DIM), dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=np.float64)
        self.size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self.size

    def add_batch(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        next_states: np.ndarray,
        dones: np.ndarray,
    ) -> None:
        for i in range(len(actions)):
            j = self._cursor
            self.states[j] = states[i]
            self.actions[j] = actions[i]
            self.rewards[j] = rewards[i]
            self.next_states[j] = next_states[i]
            self.dones[j] = dones[i]
            self._cursor = (self._cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)

    def gather(self, idx: np.ndarray) -> dict[str, torch.Tensor]:
        return {
            "states": torch.as_tensor(self.states[idx], dtype=DTYPE),
            "actions": torch.as_tensor(self.actions[idx]),
            "rewards": torch.as_tensor(self.rewards[idx], dtype=DTYPE),
            "next_states": torch.as_tensor(self.next_states[idx], dtype=DTYPE),
            "dones": torch.as_tensor(self.dones[idx], dtype=DTYPE),
        }


def _clinical_stability_mask(states: np.ndarray, thr: StabilityThresholds) -> np.ndarray:
    mins = states[:, :, (IDX_MAP, IDX_HR, IDX_PULSAT)].min(axis=1)
    return (
        (mins[:, 0] > thr.map_floor)
        & (mins[:, 1] > thr.hr_floor)
        & (mins[:, 2] > thr.pulsat_floor)
    )


def shaping_terms_for_dataset(
    dataset: Dataset,
    thresholds: StabilityThresholds = CLINICAL_THRESHOLDS,
    gated: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-transition (ACP, WS) terms using each trajectory's previous action.

    The first transition of a trajectory uses its own action as the previous
    one, contributing zero to both terms.
    """
    dataset.validate_grouping()
    prev = dataset.actions.copy()
    for _, idx in dataset.iter_trajectories():
        prev[idx[1:]] = dataset.actions[idx[:-1]]
        prev[idx[0]] = dataset.actions[idx[0]]
    delta = dataset.actions - prev
    magnitude = np.abs(delta).astype(np.float64)
    acp = np.where(magnitude > ACP_GATE, magnitude, 0.0) if gated else magnitude
    weaned = np.select(
        [delta > 0, (delta == -1) | (delta == -2)],
        [-1.0, -delta.astype(np.float64)],
        default=0.0,
    )
    stable = _clinical_stability_mask(dataset.states, thresholds)
    return acp, np.where(stable, weaned, 0.0)


def build_shaped_buffer(
    dataset: Dataset,
    reward_cfg: RewardConfig,
    thresholds: StabilityThresholds = CLINICAL_THRESHOLDS,
    gated: bool = True,
) -> ReplayBuffer:
    """Shape, z-normalize, and clip rewards; store transitions in z space."""
    acp, ws = shaping_terms_for_dataset(dataset, thresholds, gated)
    shaped_raw = dataset.rewards - reward_cfg.lambda1 * acp + reward_cfg.lambda2 * ws
    shaped = np.clip(
        (shaped_raw - reward_cfg.znorm_mean) / reward_cfg.znorm_std,
        -reward_cfg.clip,
        reward_cfg.clip,
    )
    stats = dataset.stats
    buffer = ReplayBuffer(capacity=len(dataset))
    buffer.add_batch(
        stats.normalize_windows(dataset.states).reshape(len(dataset), -1),
        np.asarray([plevel_to_index(a) for a in dataset.actions], dtype=np.int64),
        shaped,
        stats.normalize_windows(dataset.next_states).reshape(len(dataset), -1),
        dataset.dones.astype(np.float64),
    )
    return buffer


def reward_config_from_dataset(
    dataset: Dataset, lambda1: float = 0.0, lambda2: float = 0.0, clip: float = 2.0
) -> RewardConfig:
    stats = dataset.stats
    return RewardConfig(
        lambda1=lambda1,
        lambda2=lambda2,
        znorm_mean=stats.reward_mean,
        znorm_std=stats.reward_std,
        clip=clip,
    )


# ---------------------------------------------------------------------------
# Dynamics ensemble
# ---------------------------------------------------------------------------

def _soft_clamp_logvar(logvar: torch.Tensor) -> torch.Tensor:
    logvar = _LOGVAR_MAX - torch.nn.functional.softplus(_LOGVAR_MAX - logvar)
    return _LOGVAR_MIN + torch.nn.functional.softplus(logvar - _LOGVAR_MIN)


class DynamicsMember(torch.nn.Module):
    """Gaussian next-state-and-reward model with mean and log-variance heads."""

    def __init__(self, hidden: tuple, gen: torch.Generator) -> None:
        super().__init__()
        self.body = MLP(STATE_DIM + N_ACTIONS, hidden, 2 * (STATE_DIM + 1), gen)

    def forward(self, states: torch.Tensor, action_onehot: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.body(torch.cat([states, action_onehot], dim=-1))
        mean, logvar = out.chunk(2, dim=-1)
        return mean, _soft_clamp_logvar(logvar)


def gaussian_nll(mean: torch.Tensor, logvar: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    inv_var = torch.exp(-logvar)
    return torch.mean(torch.sum((target - mean) ** 2 * inv_var + logvar, dim=-1))


def _onehot_idx(actions_idx: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.one_hot(actions_idx, N_ACTIONS).to(DTYPE)


@dataclass
class DynamicsEnsemble:
    members: list
    elites: list
    holdout_losses: list
    initial_holdout_losses: list
    hidden: tuple

    def predict_all(
        self, states: torch.Tensor, actions_idx: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked (M, B, 73) means and log-variances from every member."""
        a = _onehot_idx(actions_idx)
        means, logvars = [], []
        with torch.no_grad():
            for member in self.members:
                mean, logvar = member(states, a)
                means.append(mean)
                logvars.append(logvar)
        return torch.stack(means), torch.stack(logvars)

    def save(self, path: Path | str) -> None:
        tensors = {}
        for i, member in enumerate(self.members):
            for k, v in flatten_state_dict(member).items():
                tensors[f"member{i}.{k}"] = v
        meta = {
            "n_members": len(self.members),
            "elites": list(self.elites),
            "holdout_losses": list(self.holdout_losses),
            "initial_holdout_losses": list(self.initial_holdout_losses),
            "hidden": list(self.hidden),
        }
        write_container(path, MAGIC_ENSEMBLE, tensors, meta)

    @classmethod
    def load(cls, path: Path | str) -> "DynamicsEnsemble":
        tensors, meta = read_container(path, expect_magic=MAGIC_ENSEMBLE)
        hidden = tuple(meta["hidden"])
        members = []
        for i in range(meta["n_members"]):
            member = DynamicsMember(hidden, torch_generator(0))
            load_state_dict_arrays(member, tensors, prefix=f"member{i}.")
            members.append(member)
        return cls(
            members=members,
            elites=list(meta["elites"]),
            holdout_losses=list(meta["holdout_losses"]),
            initial_holdout_losses=list(meta["initial_holdout_losses"]),
            hidden=hidden,
        )


def train_dynamics_ensemble(buffer: ReplayBuffer, cfg: ORLConfig) -> DynamicsEnsemble:
    """Train each member on its own bootstrap resample; elites by holdout NLL."""
    if len(buffer) == 0:
        raise InvalidInputError("replay buffer must be nonempty")
    n = len(buffer)
    states = torch.as_tensor(buffer.states[:n], dtype=DTYPE)
    actions = torch.as_tensor(buffer.actions[:n])
    targets = torch.cat(
        [
            torch.as_tensor(buffer.next_states[:n], dtype=DTYPE),
            torch.as_tensor(buffer.rewards[:n], dtype=DTYPE).unsqueeze(1),
        ],
        dim=1,
    )
    split_rng = np.random.default_rng(derive_seed(cfg.seed, 201))
    perm = split_rng.permutation(n)
    n_holdout = max(1, int(round(cfg.holdout_ratio * n)))
    holdout_idx = perm[:n_holdout]
    train_idx = perm[n_holdout:]
    a_onehot = _onehot_idx(actions)

    def holdout_loss(member: DynamicsMember) -> float:
        with torch.no_grad():
            mean, logvar = member(states[holdout_idx], a_onehot[holdout_idx])
            return float(gaussian_nll(mean, logvar, targets[holdout_idx]).item())

    members, losses, initial_losses = [], [], []
    for m in range(cfg.ensemble_size):
        member = DynamicsMember(cfg.dynamics_hidden, torch_generator(derive_seed(cfg.seed, 202, m)))
        initial_losses.append(holdout_loss(member))
        boot_rng = np.random.default_rng(derive_seed(cfg.seed, 203, m))
        boot = train_idx[boot_rng.integers(0, len(train_idx), size=len(train_idx))]
        optimizer = torch.optim.Adam(member.parameters(), lr=cfg.dynamics_lr)
        for epoch in range(cfg.dynamics_epochs):
            order = boot[np.random.default_rng(derive_seed(cfg.seed, 204, m, epoch)).permutation(len(boot))]
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                mean, logvar = member(states[idx], a_onehot[idx])
                loss = gaussian_nll(mean, logvar, targets[idx])
                if not torch.isfinite(loss):
                    raise TrainingFailureError("dynamics member loss is not finite", epoch)
                loss.backward()
                optimizer.step()
        members.append(member)
        losses.append(holdout_loss(member))
    elites = list(np.argsort(losses)[: cfg.n_elites])
    return DynamicsEnsemble(
        members=members,
        elites=[int(e) for e in elites],
        holdout_losses=losses,
        initial_holdout_losses=initial_losses,
        hidden=cfg.dynamics_hidden,
    )


def mopo_penalty(ensemble: DynamicsEnsemble, states_z: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Max over members of the predicted next-state standard-deviation norm."""
    states = torch.as_tensor(np.atleast_2d(states_z), dtype=DTYPE)
    idx = torch.as_tensor([plevel_to_index(int(a)) for a in np.atleast_1d(levels)])
    _, logvars = ensemble.predict_all(states, idx)
    std = torch.exp(0.5 * logvars[:, :, :STATE_DIM])
    norms = torch.linalg.vector_norm(std, dim=-1)  # (M, B)
    return norms.max(dim=0).values.numpy()


# ---------------------------------------------------------------------------
# Discrete soft actor-critic
# ---------------------------------------------------------------------------

class PolicyModel:
    """Categorical actor over the 8 support levels plus clipped double critics."""

    def __init__(
        self,
        stats: NormalizationStats,
        actor_hidden: tuple = (128, 128),
        critic_hidden: tuple = (128, 128),
        init_temperature: float = 0.2,
        init_seed: int = 0,
    ) -> None:
        self.stats = stats
        self.actor_hidden = tuple(actor_hidden)
        self.critic_hidden = tuple(critic_hidden)
        gen = torch_generator(derive_seed(init_seed, 301))
        self.actor = MLP(STATE_DIM, actor_hidden, N_ACTIONS, gen)
        self.critic1 = MLP(STATE_DIM, critic_hidden, N_ACTIONS, gen)
        self.critic2 = MLP(STATE_DIM, critic_hidden, N_ACTIONS, gen)
        self.target1 = MLP(STATE_DIM, critic_hidden, N_ACTIONS, gen)
        self.target2 = MLP(STATE_DIM, critic_hidden, N_ACTIONS, gen)
        self.target1.load_state_dict(self.critic1.state_dict())
        self.target2.load_state_dict(self.critic2.state_dict())
        self.log_alpha = torch.tensor(math.log(init_temperature), dtype=DTYPE, requires_grad=True)

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.exp().item())

    def log_probs(self, states_z: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.actor(states_z), dim=-1)

    def probs_batch(self, windows: np.ndarray) -> np.ndarray:
        """Action probabilities for raw (B, 6, 12) windows."""
        windows = np.asarray(windows, dtype=np.float64)
        squeeze = windows.ndim == 2
        if squeeze:
            windows = windows[None]
        z = self.stats.normalize_windows(windows).reshape(len(windows), -1)
        with torch.no_grad():
            probs = torch.softmax(self.actor(torch.as_tensor(z, dtype=DTYPE)), dim=-1).numpy()
        return probs[0] if squeeze else probs

    def act(self, window: np.ndarray, rng: np.random.Generator) -> int:
        probs = self.probs_batch(window)
        return index_to_plevel(int(np.searchsorted(np.cumsum(probs), rng.random(), side="right")))

    def act_greedy(self, window: np.ndarray) -> int:
        return index_to_plevel(int(np.argmax(self.probs_batch(window))))

    def act_batch(self, windows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        probs = self.probs_batch(windows)
        draws = rng.random((len(probs), 1))
        idx = (np.cumsum(probs, axis=1) > draws).argmax(axis=1)
        return idx + PLEVEL_MIN

    def as_policy_fn(self, stochastic: bool = True):
        def policy(window: np.ndarray, current: int, rng: np.random.Generator) -> int:
            if stochastic:
                return self.act(window, rng)
            return self.act_greedy(window)

        return policy

    def save(self, path: Path | str) -> None:
        tensors = {}
        for name, module in (
            ("actor", self.actor),
            ("critic1", self.critic1),
            ("critic2", self.critic2),
            ("target1", self.target1),
            ("target2", self.target2),
        ):
            for k, v in flatten_state_dict(module).items():
                tensors[f"{name}.{k}"] = v
        tensors["log_alpha"] = self.log_alpha.detach().numpy().reshape(1)
        tensors["stats.feature_mean"] = self.stats.feature_mean
        tensors["stats.feature_std"] = self.stats.feature_std
        meta = {
            "actor_hidden": list(self.actor_hidden),
            "critic_hidden": list(self.critic_hidden),
            "stats_scalars": {
                "action_mean": self.stats.action_mean,
                "action_std": self.stats.action_std,
                "reward_mean": self.stats.reward_mean,
                "reward_std": self.stats.reward_std,
            },
        }
        write_container(path, MAGIC_POLICY, tensors, meta)

    @classmethod
    def load(cls, path: Path | str) -> "PolicyModel":
        tensors, meta = read_container(path, expect_magic=MAGIC_POLICY)
        scalars = meta["stats_scalars"]
        stats = NormalizationStats(
            feature_mean=tensors["stats.feature_mean"],
            feature_std=tensors["stats.feature_std"],
            action_mean=scalars["action_mean"],
            action_std=scalars["action_std"],
            reward_mean=scalars["reward_mean"],
            reward_std=scalars["reward_std"],
        )
        model = cls(
            stats=stats,
            actor_hidden=tuple(meta["actor_hidden"]),
            critic_hidden=tuple(meta["critic_hidden"]),
        )
        for name, module in (
            ("actor", model.actor),
            ("critic1", model.critic1),
            ("critic2", model.critic2),
            ("target1", model.target1),
            ("target2", model.target2),
        ):
            load_state_dict_arrays(module, tensors, prefix=f"{name}.")
        with torch.no_grad():
            model.log_alpha.copy_(torch.as_tensor(float(tensors["log_alpha"][0]), dtype=DTYPE))
        return model


def sac_target_values(policy: PolicyModel, batch: dict, cfg: ORLConfig) -> torch.Tensor:
    """Entropy-regularized TD targets from the clipped double target critics."""
    with torch.no_grad():
        alpha = policy.log_alpha.exp()
        next_log_probs = policy.log_probs(batch["next_states"])
        next_probs = next_log_probs.exp()
        q_next = torch.minimum(policy.target1(batch["next_states"]), policy.target2(batch["next_states"]))
        v_next = torch.sum(next_probs * (q_next - alpha * next_log_probs), dim=-1)
        return batch["rewards"] + cfg.gamma * (1.0 - batch["dones"]) * v_next


def critic_loss(policy: PolicyModel, batch: dict, targets: torch.Tensor) -> torch.Tensor:
    actions = batch["actions"].unsqueeze(1)
    q1 = policy.critic1(batch["states"]).gather(1, actions).squeeze(1)
    q2 = policy.critic2(batch["states"]).gather(1, actions).squeeze(1)
    return torch.mean((q1 - targets) ** 2) + torch.mean((q2 - targets) ** 2)


def actor_loss(policy: PolicyModel, batch: dict) -> torch.Tensor:
    log_probs = policy.log_probs(batch["states"])
    probs = log_probs.exp()
    alpha = policy.log_alpha.exp().detach()
    with torch.no_grad():
        q_min = torch.minimum(policy.critic1(batch["states"]), policy.critic2(batch["states"]))
    return torch.mean(torch.sum(probs * (alpha * log_probs - q_min), dim=-1))


def temperature_loss(policy: PolicyModel, batch: dict, cfg: ORLConfig) -> torch.Tensor:
    with torch.no_grad():
        log_probs = policy.log_probs(batch["states"])
        expected_log_pi = torch.sum(log_probs.exp() * log_probs, dim=-1).mean()
    return -policy.log_alpha * (expected_log_pi + cfg.target_entropy)


class SACTrainer:
    def __init__(self, policy: PolicyModel, cfg: ORLConfig) -> None:
        self.policy = policy
        self.cfg = cfg
        self.critic_opt = torch.optim.Adam(
            list(policy.critic1.parameters()) + list(policy.critic2.parameters()),
            lr=cfg.critic_lr,
        )
        self.actor_opt = torch.optim.Adam(policy.actor.parameters(), lr=cfg.actor_lr)
        self.alpha_opt = torch.optim.Adam([policy.log_alpha], lr=cfg.temperature_lr)

    def update(self, batch: dict) -> dict:
        cfg = self.cfg
        policy = self.policy
        targets = sac_target_values(policy, batch, cfg)
        c_loss = critic_loss(policy, batch, targets)
        if not torch.isfinite(c_loss):
            raise TrainingFailureError("critic loss is not finite", -1)
        self.critic_opt.zero_grad()
        c_loss.backward()
        self.critic_opt.step()

        a_loss = actor_loss(policy, batch)
        if not torch.isfinite(a_loss):
            raise TrainingFailureError("actor loss is not finite", -1)
        self.actor_opt.zero_grad()
        a_loss.backward()
        self.actor_opt.step()

        t_loss = temperature_loss(policy, batch, cfg)
        self.alpha_opt.zero_grad()
        t_loss.backward()
        self.alpha_opt.step()

        with torch.no_grad():
            for target, critic in (
                (policy.target1, policy.critic1),
                (policy.target2, policy.critic2),
            ):
                for tp, cp in zip(target.parameters(), critic.parameters()):
                    tp.mul_(1.0 - cfg.target_update).add_(cfg.target_update * cp)
        return {
            "critic_loss": float(c_loss.item()),
            "actor_loss": float(a_loss.item()),
            "alpha": policy.alpha,
        }


def sac_update(policy: PolicyModel, batch: dict, cfg: ORLConfig, trainer: SACTrainer | None = None) -> dict:
    """One gradient step for critics, actor, and temperature."""
    trainer = trainer or SACTrainer(policy, cfg)
    return trainer.update(batch)


# ---------------------------------------------------------------------------
# Model rollouts and the end-to-end algorithms
# ---------------------------------------------------------------------------

PenaltyFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def guardian_penalty_fn(guardian: DensityModel, lam: float) -> PenaltyFn:
    """lambda * u(s, a) on z-space states; exact guardian decomposition."""

    def penalty(states_z: np.ndarray, levels: np.ndarray) -> np.ndarray:
        queries = np.concatenate(
            [states_z, guardian.stats.normalize_actions(levels.astype(np.float64))[:, None]],
            axis=1,
        )
        u, _, _ = guardian.regularizer_from_log_density(guardian.log_density_vectors(queries))
        return lam * u

    return penalty


def mopo_penalty_fn(ensemble: DynamicsEnsemble, lam: float) -> PenaltyFn:
    def penalty(states_z: np.ndarray, levels: np.ndarray) -> np.ndarray:
        return lam * mopo_penalty(ensemble, states_z, levels)

    return penalty


def model_rollout(
    ensemble: DynamicsEnsemble,
    real_buffer: ReplayBuffer,
    policy: PolicyModel,
    penalty_fn: PenaltyFn | None,
    horizon: int,
    cfg: ORLConfig,
    seed: int,
    out_buffer: ReplayBuffer,
) -> dict:
    """Roll the policy in the ensemble from real start states.

    Each particle samples a random elite member per step; a particle ends
    early if its prediction leaves the sanity box, and the offending
    transition is discarded.  Returns penalty statistics for logging.
    """
    rng = np.random.default_rng(seed)
    start = real_buffer.sample_indices(cfg.rollout_batch, rng)
    states = real_buffer.states[start].copy()
    penalties: list[np.ndarray] = []
    n_added = 0
    for _ in range(horizon):
        if len(states) == 0:
            break
        with torch.no_grad():
            probs = torch.softmax(policy.actor(torch.as_tensor(states, dtype=DTYPE)), dim=-1).numpy()
        draws = rng.random((len(states), 1))
        action_idx = (np.cumsum(probs, axis=1) > draws).argmax(axis=1)
        levels = action_idx + PLEVEL_MIN

        member_choice = np.asarray(ensemble.elites)[rng.integers(0, len(ensemble.elites), size=len(states))]
        means, logvars = ensemble.predict_all(
            torch.as_tensor(states, dtype=DTYPE), torch.as_tensor(action_idx)
        )
        mean = means.numpy()[member_choice, np.arange(len(states))]
        std = np.exp(0.5 * logvars.numpy()[member_choice, np.arange(len(states))])
        noise = rng.standard_normal(mean.shape)
        sampled = mean + std * noise
        next_states = sampled[:, :STATE_DIM]
        rewards = mean[:, STATE_DIM]
        if penalty_fn is not None:
            pen = penalty_fn(states, levels)
            rewards = rewards - pen
            penalties.append(pen)
        keep = np.all(np.abs(next_states) <= cfg.sanity_box, axis=1)
        out_buffer.add_batch(
            states[keep],
            action_idx[keep],
            rewards[keep],
            next_states[keep],
            np.zeros(int(keep.sum())),
        )
        n_added += int(keep.sum())
        states = next_states[keep]
    all_pen = np.concatenate(penalties) if penalties else np.zeros(0)
    return {
        "n_added": n_added,
        "mean_penalty": float(all_pen.mean()) if all_pen.size else 0.0,
        "ood_fraction": float(np.mean(all_pen > 0)) if all_pen.size else 0.0,
    }


def _mixed_batch(
    real: ReplayBuffer, synthetic: ReplayBuffer, cfg: ORLConfig, rng: np.random.Generator
) -> dict:
    n_real = math.ceil(cfg.real_ratio * cfg.batch_size)
    n_syn = cfg.batch_size - n_real
    if len(synthetic) == 0:
        n_real, n_syn = cfg.batch_size, 0
    real_part = real.gather(real.sample_indices(n_real, rng))
    if n_syn == 0:
        return real_part
    syn_part = synthetic.gather(synthetic.sample_indices(n_syn, rng))
    return {k: torch.cat([real_part[k], syn_part[k]], dim=0) for k in real_part}


def train_bc(
    dataset: Dataset, cfg: ORLConfig, reward_cfg: RewardConfig
) -> tuple[PolicyModel, list]:
    """Behavioral cloning: cross-entropy imitation of the dataset actions."""
    buffer = build_shaped_buffer(dataset, reward_cfg)
    policy = PolicyModel(
        dataset.stats,
        actor_hidden=cfg.actor_hidden,
        critic_hidden=cfg.critic_hidden,
        init_temperature=cfg.init_temperature,
        init_seed=cfg.seed,
    )
    optimizer = torch.optim.Adam(policy.actor.parameters(), lr=cfg.actor_lr)
    states = torch.as_tensor(buffer.states[: len(buffer)], dtype=DTYPE)
    actions = torch.as_tensor(buffer.actions[: len(buffer)])
    log: list[dict] = []
    for epoch in range(cfg.bc_epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 401, epoch)).permutation(len(buffer))
        total, batches = 0.0, 0
        for startpos in range(0, len(order), cfg.batch_size):
            idx = order[startpos : startpos + cfg.batch_size]
            optimizer.zero_grad()
            loss = torch.nn.functional.cross_entropy(policy.actor(states[idx]), actions[idx])
            if not torch.isfinite(loss):
                raise TrainingFailureError("behavioral cloning loss is not finite", epoch)
            loss.backward()
            optimizer.step()
            total += float(loss.item())
            batches += 1
        log.append({"epoch": epoch + 1, "bc_loss": total / max(batches, 1)})
    return policy, log


def train_policy(
    algo: str,
    dataset: Dataset,
    orl_cfg: ORLConfig,
    reward_cfg: RewardConfig,
    guardian: DensityModel | None = None,
    cormpo_lambda: float | None = None,
) -> tuple[PolicyModel, list]:
    """Train one of bc / mbpo / mopo / cormpo on an offline dataset.

    Returns the policy and a per-epoch training log.  With identical seeds
    the entire run is deterministic; cormpo with lambda = 0 reduces to mbpo
    because the zero penalty leaves every random stream untouched.
    """
    algo = algo.lower()
    if algo not in ALGORITHMS:
        raise InvalidInputError(f"unknown algorithm: {algo}")
    if algo == "bc":
        return train_bc(dataset, orl_cfg, reward_cfg)
    if algo == "cormpo" and guardian is None:
        raise InvalidInputError("cormpo requires a fitted density guardian")

    buffer = build_shaped_buffer(dataset, reward_cfg)
    ensemble = train_dynamics_ensemble(buffer, orl_cfg)
    if algo == "mopo":
        penalty_fn: PenaltyFn | None = mopo_penalty_fn(ensemble, orl_cfg.mopo_lambda)
    elif algo == "cormpo":
        if cormpo_lambda is None:
            cormpo_lambda = float(guardian.fit_info.get("config", {}).get("lam", 0.0))
        penalty_fn = guardian_penalty_fn(guardian, cormpo_lambda)
    else:
        penalty_fn = None

    policy = PolicyModel(
        dataset.stats,
        actor_hidden=orl_cfg.actor_hidden,
        critic_hidden=orl_cfg.critic_hidden,
        init_temperature=orl_cfg.init_temperature,
        init_seed=orl_cfg.seed,
    )
    trainer = SACTrainer(policy, orl_cfg)
    synthetic = ReplayBuffer(
        capacity=max(1, orl_cfg.rollout_batch * orl_cfg.rollout_horizon * orl_cfg.rollout_retain_rounds)
    )
    batch_rng = np.random.default_rng(derive_seed(orl_cfg.seed, 402))
    log: list[dict] = []
    global_step = 0
    rollout_round = 0
    for epoch in range(orl_cfg.epochs):
        epoch_stats: dict[str, float] = {"critic_loss": 0.0, "actor_loss": 0.0}
        rollout_info: dict = {}
        for _ in range(orl_cfg.steps_per_epoch):
            if global_step % orl_cfg.rollout_frequency == 0:
                rollout_info = model_rollout(
                    ensemble,
                    buffer,
                    policy,
                    penalty_fn,
                    orl_cfg.rollout_horizon,
                    orl_cfg,
                    derive_seed(orl_cfg.seed, 403, rollout_round),
                    synthetic,
                )
                rollout_round += 1
            batch = _mixed_batch(buffer, synthetic, orl_cfg, batch_rng)
            stats = trainer.update(batch)
            epoch_stats["critic_loss"] += stats["critic_loss"]
            epoch_stats["actor_loss"] += stats["actor_loss"]
            global_step += 1
        log.append({
            "epoch": epoch + 1,
            "critic_loss": epoch_stats["critic_loss"] / orl_cfg.steps_per_epoch,
            "actor_loss": epoch_stats["actor_loss"] / orl_cfg.steps_per_epoch,
            "alpha": policy.alpha,
            "mean_penalty": rollout_info.get("mean_penalty", 0.0),
            "ood_fraction": rollout_info.get("ood_fraction", 0.0),
            "synthetic_size": len(synthetic),
        })
    return policy, log
