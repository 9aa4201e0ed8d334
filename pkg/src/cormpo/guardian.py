"""KDE-based epistemic-uncertainty safeguard over state-action pairs.

A query is embedded as the z-normalized flattened window plus the
z-normalized support level (73 dims).  Its score is the log of a Gaussian
kernel density averaged over the k nearest reference points; the threshold
tau is a percentile of validation scores; the regularizer u = tau - log p
penalizes low-density queries and grants a bonus inside the support.

The Gaussian normalizing constant is omitted on purpose: tau is a
percentile of the same score, so the constant cancels everywhere u is
used.  Scores are therefore comparable only across runs with identical
bandwidth and dimension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from sklearn.neighbors import NearestNeighbors

from .checkpoint import MAGIC_GUARDIAN, read_container, write_container
from .data import Dataset, NormalizationStats
from .domain import InvalidInputError, N_FEATURES, N_STEPS

LOG_DENSITY_FLOOR = math.log(1e-300)
EMBED_DIM = N_STEPS * N_FEATURES + 1


class UnfittedModelError(RuntimeError):
    """Raised when querying a guardian whose threshold is not set."""


@dataclass
class GuardianConfig:
    percentile: float = 20.0   # validation-score percentile defining tau
    lam: float = 0.005         # reward penalty coefficient
    bandwidth: float = 1.0
    k: int = 100
    split_seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.percentile < 100.0):
            raise InvalidInputError("percentile must be in (0, 100)")
        if self.lam < 0:
            raise InvalidInputError("lambda must be >= 0")
        if self.bandwidth <= 0:
            raise InvalidInputError("bandwidth must be > 0")
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")


@dataclass
class DensityModel:
    """Immutable fitted KDE; safe to share across concurrent readers."""

    points: np.ndarray               # (N, 73) z-normalized references
    bandwidth: float
    k: int
    stats: NormalizationStats
    tau: float | None = None
    fit_info: dict = field(default_factory=dict)
    _index: NearestNeighbors | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != EMBED_DIM:
            raise InvalidInputError(f"reference points must have shape (N, {EMBED_DIM})")
        if not (1 <= self.k <= len(pts)):
            raise InvalidInputError("need 1 <= k <= number of reference points")
        object.__setattr__(self, "points", pts)
        if self._index is None:
            index = NearestNeighbors(n_neighbors=self.k, algorithm="brute")
            index.fit(pts)
            object.__setattr__(self, "_index", index)

    # -- embedding ----------------------------------------------------------

    def embed(self, windows: np.ndarray, levels: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 2:
            windows = windows[None]
            levels = np.atleast_1d(levels)
        z = self.stats.normalize_windows(windows).reshape(len(windows), -1)
        az = self.stats.normalize_actions(np.asarray(levels, dtype=np.float64))
        return np.concatenate([z, az[:, None]], axis=1)

    # -- scoring ------------------------------------------------------------

    def log_density_vectors(self, queries: np.ndarray) -> np.ndarray:
        """Log mean Gaussian kernel over each query's k nearest references."""
        queries = np.asarray(queries, dtype=np.float64)
        squeeze = queries.ndim == 1
        if squeeze:
            queries = queries[None]
        dist, _ = self._index.kneighbors(queries, n_neighbors=self.k)
        scores = -(dist.astype(np.float64) ** 2) / (2.0 * self.bandwidth**2)
        log_p = logsumexp(scores, axis=1) - math.log(self.k)
        log_p = np.maximum(log_p, LOG_DENSITY_FLOOR)
        return log_p[0] if squeeze else log_p

    def log_density(self, state: np.ndarray, action: int) -> float:
        return float(self.log_density_vectors(self.embed(state, np.asarray([action])))[0])

    def log_density_batch(self, windows: np.ndarray, levels: np.ndarray) -> np.ndarray:
        return self.log_density_vectors(self.embed(windows, levels))

    # -- regularizer --------------------------------------------------------

    def regularizer_from_log_density(self, log_p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.tau is None:
            raise UnfittedModelError("density threshold tau is not set")
        u = self.tau - np.asarray(log_p, dtype=np.float64)
        return u, np.maximum(u, 0.0), np.minimum(u, 0.0)

    def regularizer(self, state: np.ndarray, action: int) -> tuple[float, float, float]:
        u, up, um = self.regularizer_from_log_density(self.log_density(state, action))
        return float(u), float(up), float(um)

    def regularizer_batch(self, windows: np.ndarray, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.regularizer_from_log_density(self.log_density_batch(windows, levels))

    # -- persistence --------------------------------------------------------

    def save(self, path: Path | str) -> None:
        tensors = {
            "points": self.points,
            "stats.feature_mean": self.stats.feature_mean,
            "stats.feature_std": self.stats.feature_std,
        }
        meta = {
            "bandwidth": self.bandwidth,
            "k": self.k,
            "tau": self.tau,
            "fit_info": self.fit_info,
            "stats_scalars": {
                "action_mean": self.stats.action_mean,
                "action_std": self.stats.action_std,
                "reward_mean": self.stats.reward_mean,
                "reward_std": self.stats.reward_std,
            },
        }
        write_container(path, MAGIC_GUARDIAN, tensors, meta)

    @classmethod
    def load(cls, path: Path | str) -> "DensityModel":
        tensors, meta = read_container(path, expect_magic=MAGIC_GUARDIAN)
        scalars = meta["stats_scalars"]
        stats = NormalizationStats(
            feature_mean=tensors["stats.feature_mean"],
            feature_std=tensors["stats.feature_std"],
            action_mean=scalars["action_mean"],
            action_std=scalars["action_std"],
            reward_mean=scalars["reward_mean"],
            reward_std=scalars["reward_std"],
        )
        return cls(
            points=tensors["points"],
            bandwidth=float(meta["bandwidth"]),
            k=int(meta["k"]),
            stats=stats,
            tau=None if meta["tau"] is None else float(meta["tau"]),
            fit_info=dict(meta.get("fit_info", {})),
        )


def threshold_from_scores(scores: np.ndarray, percentile: float) -> float:
    """Linear-interpolation percentile of a score sample."""
    return float(np.percentile(np.asarray(scores, dtype=np.float64), percentile))


def select_threshold(model: DensityModel, validation_vectors: np.ndarray, percentile: float) -> float:
    """Set tau to the given percentile of validation log-densities."""
    if len(validation_vectors) == 0:
        raise InvalidInputError("validation set must be nonempty")
    log_p = model.log_density_vectors(validation_vectors)
    tau = threshold_from_scores(log_p, percentile)
    model.tau = tau
    return tau


def guardian_fit(dataset: Dataset, cfg: GuardianConfig | None = None) -> DensityModel:
    """Fit the density model on an 80% split and pick tau on a 10% split.

    Deterministic for a fixed split seed.  The remaining 10% of the data is
    deliberately left out of both roles.
    """
    cfg = cfg or GuardianConfig()
    n = len(dataset)
    if n < cfg.k:
        raise InvalidInputError(f"dataset of size {n} is smaller than k={cfg.k}")
    rng = np.random.default_rng(cfg.split_seed)
    perm = rng.permutation(n)
    n_train = int(round(0.8 * n))
    n_val = max(1, int(round(0.1 * n)))
    if n_train < cfg.k:
        raise InvalidInputError(f"training split of size {n_train} is smaller than k={cfg.k}")
    train_idx = perm[:n_train]
    val_idx = perm[n_train : n_train + n_val]

    stats = dataset.stats
    model = DensityModel(
        points=np.ascontiguousarray(
            np.concatenate(
                [
                    stats.normalize_windows(dataset.states[train_idx]).reshape(len(train_idx), -1),
                    stats.normalize_actions(dataset.actions[train_idx].astype(np.float64))[:, None],
                ],
                axis=1,
            )
        ),
        bandwidth=cfg.bandwidth,
        k=cfg.k,
        stats=stats,
    )
    val_vectors = model.embed(dataset.states[val_idx], dataset.actions[val_idx])
    tau = select_threshold(model, val_vectors, cfg.percentile)
    val_u = tau - model.log_density_vectors(val_vectors)
    model.fit_info = {
        "config": asdict(cfg),
        "n_train": int(n_train),
        "n_val": int(len(val_idx)),
        "tau": tau,
        "val_ood_fraction": float(np.mean(val_u > 0)),
    }
    return model


def brute_force_log_density(
    reference: np.ndarray, queries: np.ndarray, bandwidth: float
) -> np.ndarray:
    """O(N^2) full-sum KDE oracle used to validate the kNN-truncated scorer."""
    reference = np.asarray(reference, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    d2 = (
        np.sum(queries**2, axis=1)[:, None]
        + np.sum(reference**2, axis=1)[None, :]
        - 2.0 * queries @ reference.T
    )
    d2 = np.maximum(d2, 0.0)
    scores = -d2 / (2.0 * bandwidth**2)
    return np.maximum(logsumexp(scores, axis=1) - math.log(len(reference)), LOG_DENSITY_FLOOR)


def penalized_reward(r: float, u: float, lam: float) -> float:
    """Density-regularized reward r - lambda * u (a bonus when u < 0)."""
    if not (math.isfinite(r) and math.isfinite(u) and math.isfinite(lam)):
        raise InvalidInputError("penalized_reward requires finite inputs")
    return r - lam * u
