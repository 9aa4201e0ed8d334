"""Exactly solvable tabular MDPs for numeric verification of the
conservative value bound and the optimality gap of density-penalized
model-based training.

All quantities are computed in closed form: state values by linear solve,
discounted occupancy measures by the adjoint solve, optimal policies by
enumeration over deterministic policies.  Instances are constructed so the
density-dependent model-error condition holds by design: the learned
dynamics mix the true row with a point mass until the total-variation
distance hits min(1, (C * u_plus + eps) / (2c)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .domain import InvalidInputError


@dataclass
class TabularMDP:
    """Small MDP plus its learned-dynamics counterpart and regularizer table.

    ``true_dynamics`` / ``learned_dynamics``: (S, A, S) row-stochastic.
    ``rewards``: (S, A) with |r| <= reward_bound.  ``regularizer``: the u
    table; ``penalty_coef`` is lambda = discount * c * model_error_coef
    with c = reward_bound / (1 - discount).
    """

    true_dynamics: np.ndarray
    learned_dynamics: np.ndarray
    rewards: np.ndarray
    init_dist: np.ndarray
    discount: float
    regularizer: np.ndarray
    model_error_coef: float
    approx_error: float
    reward_bound: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        s, a, s2 = self.true_dynamics.shape
        if s != s2 or self.learned_dynamics.shape != (s, a, s):
            raise InvalidInputError("dynamics must have shape (S, A, S)")
        for name in ("true_dynamics", "learned_dynamics"):
            arr = getattr(self, name)
            if not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-12) or (arr < -1e-15).any():
                raise InvalidInputError(f"{name} rows must be probability vectors")
        if not np.allclose(self.init_dist.sum(), 1.0, atol=1e-12):
            raise InvalidInputError("init_dist must sum to 1")
        if not (0.0 < self.discount < 1.0):
            raise InvalidInputError("discount must be in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.true_dynamics.shape[0]

    @property
    def n_actions(self) -> int:
        return self.true_dynamics.shape[1]

    @property
    def value_scale(self) -> float:
        """c = reward_bound / (1 - discount), the value-function sup bound."""
        return self.reward_bound / (1.0 - self.discount)

    @property
    def penalty_coef(self) -> float:
        return self.discount * self.value_scale * self.model_error_coef

    @property
    def penalized_rewards(self) -> np.ndarray:
        return self.rewards - self.penalty_coef * self.regularizer

    @property
    def u_plus(self) -> np.ndarray:
        return np.maximum(self.regularizer, 0.0)

    @property
    def u_minus(self) -> np.ndarray:
        return np.minimum(self.regularizer, 0.0)


def _policy_matrices(dynamics: np.ndarray, rewards: np.ndarray, policy: np.ndarray):
    transition = np.einsum("sa,sat->st", policy, dynamics)
    reward_vec = np.sum(policy * rewards, axis=1)
    return transition, reward_vec


def state_values(dynamics: np.ndarray, rewards: np.ndarray, policy: np.ndarray, discount: float) -> np.ndarray:
    """Exact V^pi via (I - gamma P_pi) V = r_pi."""
    transition, reward_vec = _policy_matrices(dynamics, rewards, policy)
    n = len(reward_vec)
    try:
        return np.linalg.solve(np.eye(n) - discount * transition, reward_vec)
    except np.linalg.LinAlgError as exc:  # unreachable for discount < 1
        raise RuntimeError("singular policy-evaluation system") from exc


def occupancy_measure(dynamics: np.ndarray, policy: np.ndarray, init_dist: np.ndarray, discount: float) -> np.ndarray:
    """Unnormalized discounted state-action occupancy; sums to 1/(1-gamma)."""
    transition, _ = _policy_matrices(dynamics, np.zeros_like(policy), policy)
    n = len(init_dist)
    state_occ = np.linalg.solve(np.eye(n) - discount * transition.T, init_dist)
    return policy * state_occ[:, None]


def exact_return(
    mdp: TabularMDP, policy: np.ndarray, dynamics: np.ndarray | None = None, rewards: np.ndarray | None = None
) -> dict:
    """Expected discounted return plus values and occupancy, all exact."""
    dynamics = mdp.true_dynamics if dynamics is None else dynamics
    rewards = mdp.rewards if rewards is None else rewards
    values = state_values(dynamics, rewards, policy, mdp.discount)
    rho = occupancy_measure(dynamics, policy, mdp.init_dist, mdp.discount)
    return {
        "return": float(mdp.init_dist @ values),
        "values": values,
        "occupancy": rho,
    }


def value_gap_table(mdp: TabularMDP, values_true: np.ndarray) -> np.ndarray:
    """G(s, a): expected V under learned minus under true dynamics."""
    return np.einsum("sat,t->sa", mdp.learned_dynamics - mdp.true_dynamics, values_true)


def telescoping_residual(mdp: TabularMDP, policy: np.ndarray) -> float:
    """|eta_learned - eta_true - gamma * sum(rho_learned * G)|, exactly zero
    in theory for any policy."""
    true_side = exact_return(mdp, policy)
    learned_side = exact_return(mdp, policy, dynamics=mdp.learned_dynamics)
    gap = value_gap_table(mdp, true_side["values"])
    identity_rhs = mdp.discount * float(np.sum(learned_side["occupancy"] * gap))
    return abs((learned_side["return"] - true_side["return"]) - identity_rhs)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    p = rng.gamma(1.0, size=(n_states, n_actions))
    return p / p.sum(axis=1, keepdims=True)


def deterministic_policies(n_states: int, n_actions: int):
    for choice in product(range(n_actions), repeat=n_states):
        policy = np.zeros((n_states, n_actions))
        policy[np.arange(n_states), choice] = 1.0
        yield policy


def make_instance(
    seed: int,
    n_states: int = 6,
    n_actions: int = 3,
    discount: float = 0.9,
    reward_bound: float = 1.0,
    model_error_coef: float = 0.3,
    approx_error: float = 0.01,
    u_low: float = -0.5,
    u_high: float = 1.5,
    zero_u_fraction: float = 0.3,
) -> TabularMDP:
    """Random instance with the model-error condition satisfied by design."""
    rng = np.random.default_rng(seed)
    dirichlet = rng.gamma(1.0, size=(n_states, n_actions, n_states))
    true_dynamics = dirichlet / dirichlet.sum(axis=-1, keepdims=True)
    rewards = rng.uniform(-reward_bound, reward_bound, size=(n_states, n_actions))
    mu = rng.gamma(1.0, size=n_states)
    init_dist = mu / mu.sum()
    regularizer = rng.uniform(u_low, u_high, size=(n_states, n_actions))
    regularizer[rng.random((n_states, n_actions)) < zero_u_fraction] = 0.0

    c = reward_bound / (1.0 - discount)
    u_plus = np.maximum(regularizer, 0.0)
    tv_target = np.minimum(1.0, (model_error_coef * u_plus + approx_error) / (2.0 * c))
    learned = true_dynamics.copy()
    for s in range(n_states):
        for a in range(n_actions):
            row = true_dynamics[s, a]
            sink = int(np.argmin(row))
            headroom = 1.0 - row[sink]
            if headroom <= 0.0:
                continue
            weight = min(1.0, tv_target[s, a] / headroom)
            mixed = (1.0 - weight) * row
            mixed[sink] += weight
            learned[s, a] = mixed
    mdp = TabularMDP(
        true_dynamics=true_dynamics,
        learned_dynamics=learned,
        rewards=rewards,
        init_dist=init_dist,
        discount=discount,
        regularizer=regularizer,
        model_error_coef=model_error_coef,
        approx_error=approx_error,
        reward_bound=reward_bound,
        meta={"seed": seed},
    )
    if not assumption_holds(mdp):
        raise RuntimeError(f"instance construction violated the model-error condition (seed {seed})")
    return mdp


def assumption_holds(mdp: TabularMDP, atol: float = 1e-12) -> bool:
    """Check 2c * TV(learned, true) <= C * u_plus + eps for every (s, a)."""
    tv = 0.5 * np.abs(mdp.learned_dynamics - mdp.true_dynamics).sum(axis=-1)
    bound = mdp.model_error_coef * mdp.u_plus + mdp.approx_error
    return bool(np.all(2.0 * mdp.value_scale * tv <= bound + atol))


def verify_conservative_value_bound(
    instances: list[TabularMDP],
    n_policies: int = 5,
    policy_seed: int = 0,
    slack_tol: float = 1e-9,
    telescoping_tol: float = 1e-10,
) -> dict:
    """Check, for random policies on each instance, that the true return is
    never below the penalized-model return minus the guaranteed gap, and
    that the telescoping identity holds exactly."""
    rng = np.random.default_rng(policy_seed)
    violations = 0
    telescoping_violations = 0
    construction_errors = 0
    slacks: list[float] = []
    residuals: list[float] = []
    for mdp in instances:
        if not assumption_holds(mdp):
            construction_errors += 1
            continue
        lam = mdp.penalty_coef
        gamma = mdp.discount
        c = mdp.value_scale
        for _ in range(n_policies):
            policy = random_policy(rng, mdp.n_states, mdp.n_actions)
            eta_true = exact_return(mdp, policy)["return"]
            penalized = exact_return(
                mdp, policy, dynamics=mdp.learned_dynamics, rewards=mdp.penalized_rewards
            )
            rho_learned = penalized["occupancy"]
            # normalized occupancy expectation of |u_-|
            beta = lam * (1.0 - gamma) * float(np.sum(rho_learned * np.abs(mdp.u_minus)))
            rhs = penalized["return"] - (gamma * c * mdp.approx_error + beta) / (1.0 - gamma)
            slack = eta_true - rhs
            slacks.append(slack)
            if slack < -slack_tol:
                violations += 1
            residual = telescoping_residual(mdp, policy)
            residuals.append(residual)
            if residual > telescoping_tol:
                telescoping_violations += 1
    return {
        "instances": len(instances),
        "checks": len(slacks),
        "violations": violations,
        "telescoping_violations": telescoping_violations,
        "construction_errors": construction_errors,
        "min_slack": float(np.min(slacks)) if slacks else 0.0,
        "max_slack": float(np.max(slacks)) if slacks else 0.0,
        "max_telescoping_residual": float(np.max(residuals)) if residuals else 0.0,
    }


def verify_optimality_gap(
    instances: list[TabularMDP],
    delta_fractions: tuple = (0.0, 0.5, 1.0),
    slack_tol: float = 1e-9,
) -> dict:
    """Enumerate deterministic policies and check the optimality-gap bound
    of the penalized-model maximizer at several model-error budgets."""
    violations = 0
    construction_errors = 0
    checks = 0
    slacks: list[float] = []
    for mdp in instances:
        if not assumption_holds(mdp):
            construction_errors += 1
            continue
        lam = mdp.penalty_coef
        gamma = mdp.discount
        c = mdp.value_scale
        policies = list(deterministic_policies(mdp.n_states, mdp.n_actions))
        eta_true = np.empty(len(policies))
        eta_penalized = np.empty(len(policies))
        budget = np.empty(len(policies))
        for i, policy in enumerate(policies):
            eta_true[i] = exact_return(mdp, policy)["return"]
            penalized = exact_return(
                mdp, policy, dynamics=mdp.learned_dynamics, rewards=mdp.penalized_rewards
            )
            eta_penalized[i] = penalized["return"]
            budget[i] = float(np.sum(penalized["occupancy"] * mdp.u_plus))
        best_idx = int(np.argmax(eta_penalized))
        lhs = eta_true[best_idx]
        delta_min = float(np.min(budget))
        delta_max = float(np.max(budget))
        u_minus_sup = float(np.max(np.abs(mdp.u_minus)))
        for frac in delta_fractions:
            delta = delta_min + frac * (delta_max - delta_min)
            feasible = budget <= delta + 1e-12
            if not feasible.any():
                raise RuntimeError("empty feasible set at delta >= delta_min")
            rhs = (
                float(np.max(eta_true[feasible]))
                - 2.0 * lam * delta
                - gamma * c * mdp.approx_error / (1.0 - gamma)
                - lam * u_minus_sup / (1.0 - gamma)
            )
            slack = lhs - rhs
            slacks.append(slack)
            checks += 1
            if slack < -slack_tol:
                violations += 1
    return {
        "instances": len(instances),
        "checks": checks,
        "violations": violations,
        "construction_errors": construction_errors,
        "min_slack": float(np.min(slacks)) if slacks else 0.0,
        "max_slack": float(np.max(slacks)) if slacks else 0.0,
    }


def run_bound_suite(
    n_value_bound_instances: int = 100,
    n_gap_instances: int = 50,
    seed: int = 0,
) -> dict:
    """Full verification suite with spec-scale defaults."""
    value_instances = [
        make_instance(seed=seed * 100_003 + i, n_states=6, n_actions=3)
        for i in range(n_value_bound_instances)
    ]
    gap_instances = [
        make_instance(seed=seed * 100_003 + 50_000 + i, n_states=4, n_actions=3)
        for i in range(n_gap_instances)
    ]
    value_bound = verify_conservative_value_bound(value_instances, policy_seed=seed)
    gap = verify_optimality_gap(gap_instances)
    return {
        "value_bound": value_bound,
        "optimality_gap": gap,
        "instances": value_bound["instances"] + gap["instances"],
        "violations": (
            value_bound["violations"]
            + value_bound["telescoping_violations"]
            + gap["violations"]
        ),
        "max_slack": max(value_bound["max_slack"], gap["max_slack"]),
    }
