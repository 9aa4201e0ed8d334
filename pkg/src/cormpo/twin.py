"""Probabilistic digital twin: attention-based next-window forecaster.

The network encodes the one-hour window with self-attention, concatenates
the pooled representation with the one-hot support level, and decodes the
full next 6x12 window in one shot through two fully connected layers.
Predictive uncertainty comes from retaining dropout in the decoder and
resampling its mask per forward pass.  A flattened-input MLP with the same
training loop serves as the accuracy baseline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import MAGIC_TWIN, read_container, write_container
from .data import Dataset, NormalizationStats
from .domain import (
    IDX_MAP,
    N_ACTIONS,
    N_FEATURES,
    N_STEPS,
    InvalidInputError,
    Trajectory,
    ols_slope,
    plevel_to_index,
)
from .nets import (
    DTYPE,
    SelfAttentionEncoderLayer,
    derive_seed,
    flatten_state_dict,
    linear,
    load_state_dict_arrays,
    seeded_dropout,
    sinusoidal_positional_encoding,
    torch_generator,
)

TREND_SLOPE_THRESHOLD = 2.0  # MAP slope class boundary (units per step)


class TrainingFailureError(RuntimeError):
    """Raised when a training loop produces a non-finite loss."""

    def __init__(self, message: str, epoch: int) -> None:
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class TwinParams:
    arch: str = "transformer"          # "transformer" or "mlp"
    n_encoder_layers: int = 3
    n_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 128
    decoder_hidden: int = 128
    dropout_p: float = 0.1
    mlp_hidden: tuple = (512, 256, 128)
    mlp_dropout_p: float = 0.2

    def __post_init__(self) -> None:
        if self.arch not in ("transformer", "mlp"):
            raise InvalidInputError(f"unknown twin arch: {self.arch}")
        if self.model_dim % self.n_heads != 0:
            raise InvalidInputError("model_dim must be divisible by n_heads")
        if not (0.0 <= self.dropout_p < 1.0):
            raise InvalidInputError("dropout_p must be in [0, 1)")
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))


@dataclass(frozen=True)
class TwinTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 30
    holdout_ratio: float = 0.2
    patience: int = 5
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.holdout_ratio < 1.0):
            raise InvalidInputError("holdout_ratio must be in (0, 1)")


@dataclass
class TwinEvalReport:
    mae_all: float
    mae_map: float
    mae_static_pl: float
    mae_changing_pl: float
    trend_accuracy: float
    crps: float

    def to_dict(self) -> dict:
        return asdict(self)


class TransformerTwinNet(nn.Module):
    def __init__(self, params: TwinParams, gen: torch.Generator) -> None:
        super().__init__()
        self.embed = linear(N_FEATURES, params.model_dim, gen)
        self.register_buffer(
            "positional", sinusoidal_positional_encoding(N_STEPS, params.model_dim)
        )
        self.layers = nn.ModuleList(
            SelfAttentionEncoderLayer(params.model_dim, params.n_heads, params.ff_dim, gen)
            for _ in range(params.n_encoder_layers)
        )
        self.dropout_p = params.dropout_p
        self.dec1 = linear(params.model_dim + N_ACTIONS, params.decoder_hidden, gen)
        # zero output head: the untrained twin predicts the feature means
        self.dec2 = linear(params.decoder_hidden, N_STEPS * N_FEATURES, gen, zero=True)

    def encode(self, window_z: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x = self.embed(window_z) + self.positional
        attentions = []
        for layer in self.layers:
            x, attn = layer(x)
            attentions.append(attn)
        return x.mean(dim=1), attentions

    def forward(
        self,
        window_z: torch.Tensor,
        action_onehot: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        pooled, _ = self.encode(window_z)
        h = torch.relu(self.dec1(torch.cat([pooled, action_onehot], dim=-1)))
        h = seeded_dropout(h, self.dropout_p, dropout_gen)
        out = self.dec2(h)
        return out.reshape(-1, N_STEPS, N_FEATURES)


class MLPTwinNet(nn.Module):
    def __init__(self, params: TwinParams, gen: torch.Generator) -> None:
        super().__init__()
        dims = [N_STEPS * N_FEATURES + N_ACTIONS, *params.mlp_hidden]
        self.hidden_layers = nn.ModuleList(
            linear(dims[i], dims[i + 1], gen) for i in range(len(dims) - 1)
        )
        self.out = linear(dims[-1], N_STEPS * N_FEATURES, gen, zero=True)
        self.dropout_p = params.mlp_dropout_p

    def forward(
        self,
        window_z: torch.Tensor,
        action_onehot: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        x = torch.cat([window_z.reshape(window_z.shape[0], -1), action_onehot], dim=-1)
        for layer in self.hidden_layers:
            x = torch.relu(layer(x))
            x = seeded_dropout(x, self.dropout_p, dropout_gen)
        return self.out(x).reshape(-1, N_STEPS, N_FEATURES)


def _build_net(params: TwinParams, init_seed: int) -> nn.Module:
    gen = torch_generator(init_seed)
    if params.arch == "transformer":
        return TransformerTwinNet(params, gen)
    return MLPTwinNet(params, gen)


def _onehot(levels: np.ndarray) -> torch.Tensor:
    idx = torch.as_tensor([plevel_to_index(int(a)) for a in np.atleast_1d(levels)])
    return torch.nn.functional.one_hot(idx, N_ACTIONS).to(DTYPE)


@dataclass
class TwinModel:
    """Trained forecaster plus its frozen normalization statistics."""

    params: TwinParams
    net: nn.Module
    stats: NormalizationStats
    history: list = field(default_factory=list)

    def _forward_batch(
        self,
        windows: np.ndarray,
        levels: np.ndarray,
        dropout_gen: torch.Generator | None,
    ) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        squeeze = windows.ndim == 2
        if squeeze:
            windows = windows[None]
            levels = np.atleast_1d(levels)
        if windows.shape[1:] != (N_STEPS, N_FEATURES):
            raise InvalidInputError(
                f"expected windows of shape (B, {N_STEPS}, {N_FEATURES}), got {windows.shape}"
            )
        xz = torch.as_tensor(self.stats.normalize_windows(windows), dtype=DTYPE)
        with torch.no_grad():
            out_z = self.net(xz, _onehot(levels), dropout_gen).numpy()
        out = self.stats.denormalize_windows(out_z)
        return out[0] if squeeze else out

    def predict(
        self, window: np.ndarray, plevel: int, dropout_seed: int | None = None
    ) -> np.ndarray:
        """Raw-units forecast of the next window; deterministic when
        ``dropout_seed`` is None, one stochastic decoder draw otherwise."""
        gen = torch_generator(dropout_seed) if dropout_seed is not None else None
        return self._forward_batch(window, np.asarray([plevel]), gen)

    def predict_batch(
        self, windows: np.ndarray, levels: np.ndarray, dropout_seed: int | None = None
    ) -> np.ndarray:
        gen = torch_generator(dropout_seed) if dropout_seed is not None else None
        return self._forward_batch(windows, levels, gen)

    def sample(self, window: np.ndarray, plevel: int, n: int = 50, seed: int = 0) -> np.ndarray:
        """n Monte Carlo dropout forecasts, each with an independently
        derived mask seed; shape (n, 6, 12)."""
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        return np.stack([
            self.predict(window, plevel, dropout_seed=derive_seed(seed, i)) for i in range(n)
        ])

    def sample_batch(
        self, windows: np.ndarray, levels: np.ndarray, n: int, seed: int
    ) -> np.ndarray:
        """(n, B, 6, 12) stack of per-sample-seeded forecasts."""
        return np.stack([
            self._forward_batch(windows, levels, torch_generator(derive_seed(seed, i)))
            for i in range(n)
        ])

    def rollout(
        self,
        s0: np.ndarray,
        policy,
        horizon: int,
        seed: int = 0,
        init_plevel: int | None = None,
        stochastic: bool = True,
    ) -> Trajectory:
        """Autoregressive rollout; ``policy(window, current_level, rng) -> level``."""
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        rng = np.random.default_rng(derive_seed(seed, 0))
        window = np.asarray(s0, dtype=np.float64)
        current = int(init_plevel) if init_plevel is not None else 5
        states = [window]
        actions = []
        for t in range(horizon):
            action = int(policy(window, current, rng))
            dropout_seed = derive_seed(seed, 1, t) if stochastic else None
            window = self.predict(window, action, dropout_seed=dropout_seed)
            states.append(window)
            actions.append(action)
            current = action
        return Trajectory(states=tuple(states), actions=tuple(actions))

    def save(self, path: Path | str) -> None:
        tensors = {f"net.{k}": v for k, v in flatten_state_dict(self.net).items()}
        tensors["stats.feature_mean"] = self.stats.feature_mean
        tensors["stats.feature_std"] = self.stats.feature_std
        meta = {
            "params": asdict(self.params),
            "stats_scalars": {
                "action_mean": self.stats.action_mean,
                "action_std": self.stats.action_std,
                "reward_mean": self.stats.reward_mean,
                "reward_std": self.stats.reward_std,
            },
            "history": self.history,
        }
        write_container(path, MAGIC_TWIN, tensors, meta)

    @classmethod
    def load(cls, path: Path | str) -> "TwinModel":
        tensors, meta = read_container(path, expect_magic=MAGIC_TWIN)
        params_d = dict(meta["params"])
        params_d["mlp_hidden"] = tuple(params_d.get("mlp_hidden", ()))
        params = TwinParams(**params_d)
        net = _build_net(params, init_seed=0)
        load_state_dict_arrays(net, tensors, prefix="net.")
        scalars = meta["stats_scalars"]
        stats = NormalizationStats(
            feature_mean=tensors["stats.feature_mean"],
            feature_std=tensors["stats.feature_std"],
            action_mean=scalars["action_mean"],
            action_std=scalars["action_std"],
            reward_mean=scalars["reward_mean"],
            reward_std=scalars["reward_std"],
        )
        return cls(params=params, net=net, stats=stats, history=list(meta.get("history", [])))


def twin_train(
    dataset: Dataset, params: TwinParams | None = None, cfg: TwinTrainConfig | None = None
) -> TwinModel:
    """Fit the forecaster by MSE on z-normalized windows.

    The holdout split, weight init, minibatch order, and dropout masks all
    derive from ``cfg.seed``, so identical seeds give identical weights.
    """
    params = params or TwinParams()
    cfg = cfg or TwinTrainConfig()
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    stats = dataset.stats
    x = torch.as_tensor(stats.normalize_windows(dataset.states), dtype=DTYPE)
    y = torch.as_tensor(stats.normalize_windows(dataset.next_states), dtype=DTYPE)
    a = _onehot(dataset.actions)

    n = len(dataset)
    rng = np.random.default_rng(derive_seed(cfg.seed, 101))
    perm = rng.permutation(n)
    n_holdout = max(1, int(round(cfg.holdout_ratio * n))) if n > 1 else 0
    holdout_idx = perm[:n_holdout]
    train_idx = perm[n_holdout:] if n_holdout < n else perm

    net = _build_net(params, init_seed=derive_seed(cfg.seed, 102))
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    dropout_gen = torch_generator(derive_seed(cfg.seed, 103))

    def holdout_mse() -> float:
        if len(holdout_idx) == 0:
            return float("nan")
        with torch.no_grad():
            pred = net(x[holdout_idx], a[holdout_idx], None)
            return float(torch.mean((pred - y[holdout_idx]) ** 2).item())

    history: list[dict] = [{"epoch": 0, "holdout_mse": holdout_mse()}]
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_mse = history[0]["holdout_mse"]
    best_epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[np.random.default_rng(derive_seed(cfg.seed, 104, epoch)).permutation(len(train_idx))]
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            pred = net(x[idx], a[idx], dropout_gen)
            loss = torch.mean((pred - y[idx]) ** 2)
            if not torch.isfinite(loss):
                raise TrainingFailureError("twin training loss is not finite", epoch)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            optimizer.step()
            epoch_loss += float(loss.item())
            n_batches += 1
        mse = holdout_mse()
        history.append({
            "epoch": epoch,
            "train_mse": epoch_loss / max(n_batches, 1),
            "holdout_mse": mse,
        })
        if math.isnan(best_mse) or (not math.isnan(mse) and mse < best_mse):
            best_mse = mse
            best_epoch = epoch
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        elif epoch - best_epoch >= cfg.patience:
            break
    net.load_state_dict(best_state)
    return TwinModel(params=params, net=net, stats=stats, history=history)


def mlp_baseline_train(
    dataset: Dataset, cfg: TwinTrainConfig | None = None, params: TwinParams | None = None
) -> TwinModel:
    """Flattened-input MLP trained with the identical loop and budget."""
    base = params or TwinParams()
    mlp_params = TwinParams(
        arch="mlp",
        mlp_hidden=base.mlp_hidden,
        mlp_dropout_p=base.mlp_dropout_p,
        dropout_p=base.dropout_p,
    )
    return twin_train(dataset, mlp_params, cfg)


# ---------------------------------------------------------------------------
# Forecast scoring
# ---------------------------------------------------------------------------

def crps(samples, y: float) -> float:
    """Empirical CRPS: E|x - y| - 0.5 E|x - x'| with the pair term averaged
    over all ordered sample pairs (including i = j)."""
    xs = np.asarray(samples, dtype=np.float64).reshape(-1)
    if xs.size == 0:
        raise InvalidInputError("samples must be nonempty")
    term_obs = float(np.mean(np.abs(xs - y)))
    term_pair = float(np.mean(np.abs(xs[:, None] - xs[None, :])))
    return term_obs - 0.5 * term_pair


def crps_batch(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized CRPS along axis 0 of ``samples``; matches ``crps`` cellwise.

    Uses the sorted-sample identity sum_{i,j}|x_i - x_j| =
    2 * sum_k (2k - n - 1) x_(k) to stay O(n log n) per cell.
    """
    xs = np.asarray(samples, dtype=np.float64)
    n = xs.shape[0]
    term_obs = np.mean(np.abs(xs - y[None]), axis=0)
    xs_sorted = np.sort(xs, axis=0)
    coeff = (2.0 * np.arange(1, n + 1) - n - 1.0).reshape(n, *([1] * (xs.ndim - 1)))
    term_pair = 2.0 * np.sum(coeff * xs_sorted, axis=0) / (n * n)
    return term_obs - 0.5 * term_pair


def trend_class(map_series: np.ndarray) -> int:
    """MAP trend class from the least-squares slope: +1 rising, -1 falling, 0 flat."""
    slope = ols_slope(np.asarray(map_series, dtype=np.float64))
    if slope >= TREND_SLOPE_THRESHOLD:
        return 1
    if slope <= -TREND_SLOPE_THRESHOLD:
        return -1
    return 0


def _previous_actions(dataset: Dataset) -> np.ndarray:
    """Per-transition previous action; a trajectory's first transition uses
    its own action (so it counts as an unchanged support level)."""
    prev = dataset.actions.copy()
    for _, idx in dataset.iter_trajectories():
        prev[idx[1:]] = dataset.actions[idx[:-1]]
        prev[idx[0]] = dataset.actions[idx[0]]
    return prev


def twin_eval(
    model: TwinModel,
    test_dataset: Dataset,
    n_crps_samples: int = 50,
    seed: int = 0,
) -> TwinEvalReport:
    """Accuracy and calibration metrics on a held-out transition set.

    Cross-feature aggregates (mae_all, the static/changing split, CRPS) are
    computed in standardized feature units so no single wide-scale channel
    dominates the average; mae_map stays in raw mmHg.
    """
    if len(test_dataset) == 0:
        raise InvalidInputError("test dataset must be nonempty")
    pred = model.predict_batch(test_dataset.states, test_dataset.actions)
    truth = test_dataset.next_states
    abs_err_raw = np.abs(pred - truth)
    abs_err_z = abs_err_raw / model.stats.feature_std

    mae_all = float(abs_err_z.mean())
    mae_map = float(abs_err_raw[:, :, IDX_MAP].mean())

    prev_actions = _previous_actions(test_dataset)
    static_mask = prev_actions == test_dataset.actions
    mae_static = float(abs_err_z[static_mask].mean()) if static_mask.any() else 0.0
    mae_changing = float(abs_err_z[~static_mask].mean()) if (~static_mask).any() else 0.0

    pred_classes = np.array([trend_class(p[:, IDX_MAP]) for p in pred])
    true_classes = np.array([trend_class(t[:, IDX_MAP]) for t in truth])
    trend_accuracy = float(np.mean(pred_classes == true_classes))

    samples = model.sample_batch(
        test_dataset.states, test_dataset.actions, n_crps_samples, seed
    )
    crps_value = float(
        (crps_batch(samples, truth) / model.stats.feature_std).mean()
    )
    return TwinEvalReport(
        mae_all=mae_all,
        mae_map=mae_map,
        mae_static_pl=mae_static,
        mae_changing_pl=mae_changing,
        trend_accuracy=trend_accuracy,
        crps=crps_value,
    )


def noise_baseline_crps(
    model: TwinModel,
    test_dataset: Dataset,
    n_samples: int = 50,
    seed: int = 0,
) -> float:
    """CRPS of a naive forecaster: the twin's deterministic mean prediction
    dressed with climatological per-feature Gaussian noise (the marginal
    standard deviation of the test windows), ignoring state-dependent
    uncertainty.  Standardized units, matching ``twin_eval``."""
    pred = model.predict_batch(test_dataset.states, test_dataset.actions)
    truth = test_dataset.next_states
    noise_std = truth.reshape(-1, N_FEATURES).std(axis=0)
    rng = np.random.default_rng(derive_seed(seed, 7))
    samples = pred[None] + rng.standard_normal((n_samples, *pred.shape)) * noise_std
    return float((crps_batch(samples, truth) / model.stats.feature_std).mean())


def rollout_error_profile(
    model: TwinModel, dataset: Dataset, max_trajectories: int = 100, seed: int = 0
) -> dict:
    """Autoregressive error growth along recorded trajectories.

    Replays each trajectory's true action sequence from its first window,
    feeding predictions back in, and reports mean absolute error per step
    together with the running cumulative sum.
    """
    per_step: list[list[float]] = []
    for count, (_, idx) in enumerate(dataset.iter_trajectories()):
        if count >= max_trajectories:
            break
        window = dataset.states[idx[0]]
        errors = []
        for step, row in enumerate(idx):
            action = int(dataset.actions[row])
            window = model.predict(
                window, action, dropout_seed=derive_seed(seed, count, step)
            )
            errors.append(float(np.abs(window - dataset.next_states[row]).mean()))
        per_step.append(errors)
    arr = np.asarray(per_step, dtype=np.float64)
    mean_per_step = arr.mean(axis=0)
    return {
        "per_step_mae": mean_per_step.tolist(),
        "cumulative_mae": np.cumsum(mean_per_step).tolist(),
    }
