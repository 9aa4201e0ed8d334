"""Acceptance gate: every release criterion at its stated tolerance.

Each criterion prints one PASS/FAIL line (run with ``pytest -s`` to see
them live).  The desk-scale benchmark (criteria 5-6) trains every
algorithm on the noisy 500-trajectory dataset over 3 seeds and evaluates
200 episodes per seed in the ground-truth generator; it is deterministic
end to end.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from cormpo.cli import main as cli_main
from cormpo.domain import (
    RewardConfig,
    action_change_penalty,
    heart_rate_penalty,
    hypertension_penalty,
    low_map_penalty,
    normalize_reward,
    physiological_reward,
    pulsatility_penalty,
    shaped_reward,
    weaned,
)
from cormpo.evalharness import EvalReport, evaluate_policy, reward_drop
from cormpo.guardian import (
    GuardianConfig,
    brute_force_log_density,
    guardian_fit,
    penalized_reward,
)
from cormpo.nets import finite_difference_grad_check, torch_generator
from cormpo.orl import (
    ORLConfig,
    PolicyModel,
    actor_loss,
    critic_loss,
    reward_config_from_dataset,
    sac_target_values,
    train_policy,
)
from cormpo.synthenv import (
    GeneratorConfig,
    NoiseConfig,
    generate_dataset,
    inject_noise,
    noisy_expert_policy,
)
from cormpo.tabular import run_bound_suite
from cormpo.twin import (
    TransformerTwinNet,
    TwinParams,
    TwinTrainConfig,
    mlp_baseline_train,
    noise_baseline_crps,
    twin_eval,
    twin_train,
)

from conftest import make_window


def report_criterion(number: int, description: str, ok: bool) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {number} {status}: {description}")
    assert ok, f"acceptance criterion {number} failed: {description}"


# ---------------------------------------------------------------------------
# Desk-scale benchmark (shared by criteria 5 and 6)
# ---------------------------------------------------------------------------

DESK_GEN = GeneratorConfig(n_trajectories=500, horizon=6, seed=7)
DESK_NOISE = NoiseConfig(sigma=0.2, fraction=0.8, seed=11)
DESK_ORL = dict(
    epochs=4,
    steps_per_epoch=200,
    rollout_frequency=200,
    rollout_batch=800,
    rollout_horizon=5,
    dynamics_epochs=12,
    ensemble_size=5,
    n_elites=4,
    dynamics_hidden=(128, 128),
    bc_epochs=12,
)
DESK_TRAIN_SEEDS = (0, 1, 2)
DESK_EVAL_SEEDS = (100, 101, 102)
DESK_EPISODES = 200
BEHAVIOR_EPSILON = 0.25
CORMPO_NOISY = {"lambda1": 0.0, "lambda2": 0.0, "lam": 0.3}
CORMPO_CLEAN = {"lambda1": 0.5, "lambda2": 0.3, "lam": 0.005}


def _evaluate_three_seeds(policies, gen_cfg, reward_cfg, algo, deterministic=False):
    rewards, acps, wss = [], [], []
    for policy, seed in zip(policies, DESK_EVAL_SEEDS):
        rep = evaluate_policy(
            policy,
            None,
            gen_cfg,
            reward_cfg,
            n_episodes=DESK_EPISODES,
            horizon=6,
            seeds=(seed,),
            env="oracle",
            stochastic_policy=not deterministic,
            algo=algo,
        )
        rewards += rep.reward_per_seed
        acps += rep.acp_per_seed
        wss += rep.ws_per_seed
    return EvalReport(
        algo=algo,
        seeds=list(DESK_EVAL_SEEDS),
        n_episodes=DESK_EPISODES,
        horizon=6,
        reward_per_seed=rewards,
        acp_per_seed=acps,
        ws_per_seed=wss,
        env="oracle",
    )


@pytest.fixture(scope="session")
def desk_benchmark():
    clean = generate_dataset(DESK_GEN, noisy_expert_policy(BEHAVIOR_EPSILON))
    noisy = inject_noise(clean, DESK_NOISE)
    guardian_noisy = guardian_fit(
        noisy, GuardianConfig(percentile=20.0, k=100, lam=CORMPO_NOISY["lam"], split_seed=0)
    )
    guardian_clean = guardian_fit(
        clean, GuardianConfig(percentile=20.0, k=100, lam=CORMPO_CLEAN["lam"], split_seed=0)
    )
    reward_cfg_eval = reward_config_from_dataset(clean)

    def train_three(dataset, algo, guardian, shaping):
        policies = []
        for seed in DESK_TRAIN_SEEDS:
            cfg = ORLConfig(**DESK_ORL, seed=seed)
            rcfg = reward_config_from_dataset(
                dataset,
                shaping["lambda1"] if algo == "cormpo" else 0.0,
                shaping["lambda2"] if algo == "cormpo" else 0.0,
            )
            policy, _ = train_policy(
                algo,
                dataset,
                cfg,
                rcfg,
                guardian=guardian if algo == "cormpo" else None,
                cormpo_lambda=shaping["lam"],
            )
            policies.append(policy)
        return policies

    reports_noisy = {}
    for algo in ("bc", "mbpo", "mopo", "cormpo"):
        policies = train_three(noisy, algo, guardian_noisy, CORMPO_NOISY)
        reports_noisy[algo] = _evaluate_three_seeds(
            policies, DESK_GEN, reward_cfg_eval, algo, deterministic=(algo == "bc")
        )

    reports_clean = {}
    for algo in ("mopo", "cormpo"):
        policies = train_three(clean, algo, guardian_clean, CORMPO_CLEAN)
        reports_clean[algo] = _evaluate_three_seeds(policies, DESK_GEN, reward_cfg_eval, algo)

    return {
        "noisy": reports_noisy,
        "clean": reports_clean,
        "drops": {
            algo: reward_drop(reports_clean[algo], reports_noisy[algo])
            for algo in ("mopo", "cormpo")
        },
    }


# ---------------------------------------------------------------------------
# Criterion 1: formula exactness at 1e-9
# ---------------------------------------------------------------------------

class TestCriterion1FormulaExactness:
    def test_formulas(self):
        tol = 1e-9
        checks = []

        def close(a, b):
            checks.append(abs(a - b) <= tol)

        # penalty stack
        close(heart_rate_penalty(100.0), 1.5)
        close(heart_rate_penalty(75.0), 0.0)
        close(low_map_penalty(40.0), 7.0)
        close(low_map_penalty(70.0), 0.0)
        close(pulsatility_penalty(10.0), 3.5)
        close(pulsatility_penalty(70.0), 1.0)
        close(pulsatility_penalty(30.0), 0.0)
        close(hypertension_penalty(124.0), 1.0)

        safe = make_window(map_=80.0, hr=75.0, pulsat=30.0)
        safe[0, 0] = 70.0
        close(physiological_reward(safe), 0.0)
        low_map = make_window()
        low_map[2, 0] = 40.0
        close(physiological_reward(low_map), -7.0)
        close(physiological_reward(make_window(hr=100.0)), -1.5)
        close(physiological_reward(make_window(pulsat=10.0)), -3.5)

        # ACP
        close(action_change_penalty([5, 5, 5, 5]), 0.0)
        close(action_change_penalty([5, 2]), 3.0)
        close(action_change_penalty([5, 4, 3]), 0.0)

        # Weaned
        close(weaned(5, 6), -1.0)
        close(weaned(5, 4), 1.0)
        close(weaned(5, 5), 0.0)
        close(weaned(5, 3), 2.0)

        # normalization
        cfg = RewardConfig(znorm_mean=-3.0, znorm_std=2.0)
        close(normalize_reward(-3.0, cfg), 0.0)
        close(normalize_reward(-3.0 + 20.0, cfg), 2.0)
        close(normalize_reward(-5.0, cfg), -1.0)

        # reward shaping
        close(shaped_reward(1.0, 3.0, 1.0, RewardConfig(lambda1=0.5, lambda2=0.3)), -0.2)
        close(shaped_reward(0.5, 0.0, 1.0, RewardConfig(lambda1=1.0, lambda2=0.0)), 0.5)

        # density regularizer decomposition and penalization
        from cormpo.guardian import DensityModel
        from cormpo.data import NormalizationStats

        stats = NormalizationStats(np.zeros(12), np.ones(12), 0.0, 1.0, 0.0, 1.0)
        model = DensityModel(
            points=np.zeros((3, 73)), bandwidth=1.0, k=1, stats=stats, tau=0.0
        )
        for log_p, expected in ((0.0, (0.0, 0.0, 0.0)), (-3.0, (3.0, 3.0, 0.0)), (2.0, (-2.0, 0.0, -2.0))):
            u, up, um = model.regularizer_from_log_density(np.asarray([log_p]))
            close(u[0], expected[0])
            close(up[0], expected[1])
            close(um[0], expected[2])
        close(penalized_reward(1.0, 10.0, 0.005), 0.95)
        close(penalized_reward(1.0, -2.0, 0.08), 1.16)
        close(penalized_reward(1.0, 5.0, 0.0), 1.0)

        report_criterion(
            1,
            f"formula exactness: {len(checks)} hand-derived values reproduced to 1e-9",
            all(checks),
        )


# ---------------------------------------------------------------------------
# Criterion 2: KDE oracle equivalence
# ---------------------------------------------------------------------------

class TestCriterion2KDEOracle:
    def test_oracle_equivalence(self):
        gen = GeneratorConfig(n_trajectories=334, horizon=6, seed=13)
        dataset = generate_dataset(gen, noisy_expert_policy(BEHAVIOR_EPSILON))
        n_points = 2000
        subset = dataset.subset(np.arange(n_points))
        subset.meta = dict(dataset.meta)
        stats = subset.stats
        points = np.concatenate(
            [
                stats.normalize_windows(subset.states).reshape(n_points, -1),
                stats.normalize_actions(subset.actions.astype(np.float64))[:, None],
            ],
            axis=1,
        )
        from cormpo.guardian import DensityModel

        model = DensityModel(points=points, bandwidth=1.0, k=n_points, stats=stats)
        queries = np.concatenate(
            [points[:400], points[:100] + 0.35 * np.random.default_rng(0).standard_normal((100, 73))]
        )
        ann = model.log_density_vectors(queries)
        brute = brute_force_log_density(points, queries, 1.0)
        max_err = float(np.max(np.abs(ann - brute)))
        report_criterion(
            2,
            f"k=N log-density matches brute-force KDE on {n_points} points "
            f"(max abs err {max_err:.2e} <= 1e-6)",
            max_err <= 1e-6,
        )


# ---------------------------------------------------------------------------
# Criterion 3: gradient checks
# ---------------------------------------------------------------------------

class TestCriterion3Gradients:
    def test_gradient_checks(self, small_dataset):
        params = TwinParams(model_dim=8, n_heads=1, ff_dim=12, decoder_hidden=8)
        net = TransformerTwinNet(params, torch_generator(5))
        with torch.no_grad():
            net.dec2.weight.uniform_(-0.1, 0.1, generator=torch_generator(6))
            net.dec2.bias.uniform_(-0.1, 0.1, generator=torch_generator(7))
        rng = np.random.default_rng(2)
        x = torch.as_tensor(rng.standard_normal((2, 6, 12)))
        a = torch.zeros((2, 8), dtype=torch.float64)
        a[:, 3] = 1.0
        y = torch.as_tensor(rng.standard_normal((2, 6, 12)))
        twin_err = finite_difference_grad_check(
            lambda: torch.mean((net(x, a, None) - y) ** 2), list(net.parameters())
        )

        policy = PolicyModel(small_dataset.stats, actor_hidden=(8,), critic_hidden=(8,))
        batch = {
            "states": torch.as_tensor(rng.standard_normal((6, 72))),
            "actions": torch.as_tensor(rng.integers(0, 8, 6)),
            "rewards": torch.as_tensor(np.clip(rng.standard_normal(6), -2, 2)),
            "next_states": torch.as_tensor(rng.standard_normal((6, 72))),
            "dones": torch.as_tensor((rng.random(6) < 0.2).astype(np.float64)),
        }
        targets = sac_target_values(policy, batch, ORLConfig())
        critic_err = finite_difference_grad_check(
            lambda: critic_loss(policy, batch, targets),
            list(policy.critic1.parameters()) + list(policy.critic2.parameters()),
        )
        actor_err = finite_difference_grad_check(
            lambda: actor_loss(policy, batch), list(policy.actor.parameters())
        )
        worst = max(twin_err, critic_err, actor_err)
        report_criterion(
            3,
            f"finite-difference gradient checks (twin {twin_err:.2e}, critic "
            f"{critic_err:.2e}, actor {actor_err:.2e}; all <= 1e-4)",
            worst <= 1e-4,
        )


# ---------------------------------------------------------------------------
# Criterion 4: bound verification
# ---------------------------------------------------------------------------

class TestCriterion4Bounds:
    def test_bound_suite(self):
        result = run_bound_suite(n_value_bound_instances=100, n_gap_instances=50, seed=0)
        vb = result["value_bound"]
        gap = result["optimality_gap"]
        ok = (
            vb["violations"] == 0
            and vb["telescoping_violations"] == 0
            and vb["construction_errors"] == 0
            and vb["min_slack"] >= -1e-9
            and vb["max_telescoping_residual"] <= 1e-9
            and gap["violations"] == 0
            and gap["min_slack"] >= -1e-9
            and gap["checks"] == 150
        )
        report_criterion(
            4,
            "value bound (100 instances x 5 policies) and optimality gap "
            f"(50 instances x 3 deltas) verified with zero violations "
            f"(telescoping residual {vb['max_telescoping_residual']:.2e})",
            ok,
        )


# ---------------------------------------------------------------------------
# Criteria 5 and 6: desk-scale benchmark directions
# ---------------------------------------------------------------------------

class TestCriterion5Benchmark:
    def test_directional_reproduction(self, desk_benchmark):
        r = desk_benchmark["noisy"]
        cormpo, mbpo, mopo, bc = r["cormpo"], r["mbpo"], r["mopo"], r["bc"]
        conditions = {
            "cormpo reward >= mbpo": cormpo.reward_mean >= mbpo.reward_mean,
            "cormpo reward >= mopo": cormpo.reward_mean >= mopo.reward_mean,
            "cormpo acp strictly lowest": cormpo.acp_mean < min(mbpo.acp_mean, mopo.acp_mean),
            "bc acp near zero": bc.acp_mean <= 0.25,
            "bc reward < cormpo": bc.reward_mean < cormpo.reward_mean,
        }
        detail = ", ".join(
            f"{algo}: r={rep.reward_mean:.3f} acp={rep.acp_mean:.3f} ws={rep.ws_mean:.3f}"
            for algo, rep in sorted(r.items())
        )
        print(f"  desk benchmark (noisy, oracle eval): {detail}")
        report_criterion(
            5,
            "directional reproduction on the noisy desk benchmark: "
            + "; ".join(f"{k}={'ok' if v else 'VIOLATED'}" for k, v in conditions.items()),
            all(conditions.values()),
        )


class TestCriterion6Robustness:
    def test_reward_drop_ordering(self, desk_benchmark):
        drops = desk_benchmark["drops"]
        report_criterion(
            6,
            f"robustness: cormpo drop {drops['cormpo']:.2f}% <= mopo drop {drops['mopo']:.2f}%",
            drops["cormpo"] <= drops["mopo"],
        )


# ---------------------------------------------------------------------------
# Criterion 7: twin quality direction
# ---------------------------------------------------------------------------

class TestCriterion7TwinQuality:
    def test_twin_beats_baselines(self):
        train = generate_dataset(
            GeneratorConfig(n_trajectories=1000, horizon=6, seed=17),
            noisy_expert_policy(BEHAVIOR_EPSILON),
        )
        test = generate_dataset(
            GeneratorConfig(n_trajectories=150, horizon=6, seed=99),
            noisy_expert_policy(BEHAVIOR_EPSILON),
        )
        test.meta["normalization"] = train.meta["normalization"]
        cfg = TwinTrainConfig(max_epochs=25, patience=5, seed=1)
        twin = twin_train(train, TwinParams(), cfg)
        mlp = mlp_baseline_train(train, cfg)
        twin_report = twin_eval(twin, test, n_crps_samples=50, seed=0)
        mlp_report = twin_eval(mlp, test, n_crps_samples=50, seed=0)
        baseline = noise_baseline_crps(twin, test, n_samples=50, seed=0)
        conditions = {
            "twin mae < mlp mae": twin_report.mae_all < mlp_report.mae_all,
            "trend acc >= 0.8": twin_report.trend_accuracy >= 0.8,
            "twin crps < noise baseline": twin_report.crps < baseline,
        }
        report_criterion(
            7,
            f"twin quality: mae {twin_report.mae_all:.4f} vs mlp {mlp_report.mae_all:.4f}, "
            f"trend {twin_report.trend_accuracy:.3f}, crps {twin_report.crps:.4f} vs "
            f"noise baseline {baseline:.4f}",
            all(conditions.values()),
        )


# ---------------------------------------------------------------------------
# Criterion 8: byte-identical pipeline reruns
# ---------------------------------------------------------------------------

class TestCriterion8Reproducibility:
    def test_cli_stages_byte_identical(self, tmp_path):
        def run_pipeline(base: Path) -> dict:
            base.mkdir(parents=True, exist_ok=True)
            a = lambda *argv: cli_main([str(x) for x in argv])
            assert a("gen-data", "--n", 40, "--seed", 5, "--out", base / "clean.jsonl") == 0
            assert a("inject-noise", "--data", base / "clean.jsonl", "--seed", 11,
                     "--out", base / "noisy.jsonl") == 0
            assert a("train-twin", "--data", base / "clean.jsonl", "--epochs", 2,
                     "--model-dim", 16, "--heads", 2, "--layers", 2, "--seed", 1,
                     "--out", base / "twin.ckpt", "--log", base / "twin_log.jsonl") == 0
            assert a("fit-guardian", "--data", base / "noisy.jsonl", "--k", 50,
                     "--percentile", 20, "--seed", 0, "--out", base / "guardian.ckpt") == 0
            assert a("train-policy", "--algo", "cormpo", "--data", base / "noisy.jsonl",
                     "--guardian", base / "guardian.ckpt", "--lam", 0.1,
                     "--epochs", 1, "--steps-per-epoch", 20, "--rollout-frequency", 20,
                     "--rollout-batch", 30, "--rollout-horizon", 2, "--dynamics-epochs", 1,
                     "--ensemble-size", 2, "--n-elites", 2, "--seed", 3,
                     "--out", base / "policy.ckpt", "--log", base / "policy_log.jsonl") == 0
            assert a("evaluate", "--policy", base / "policy.ckpt", "--twin", base / "twin.ckpt",
                     "--episodes", 5, "--horizon", 3, "--seeds", "0,1", "--algo", "cormpo",
                     "--out", base / "eval.json") == 0
            assert a("verify-bounds", "--instances", 5, "--gap-instances", 3,
                     "--out", base / "bounds.json") == 0
            names = [
                "clean.jsonl", "clean.jsonl.meta.json", "noisy.jsonl", "noisy.jsonl.meta.json",
                "twin.ckpt", "twin.ckpt.json", "twin_log.jsonl", "guardian.ckpt",
                "guardian.ckpt.json", "policy.ckpt", "policy.ckpt.json", "policy_log.jsonl",
                "eval.json", "bounds.json",
            ]
            return {name: (base / name).read_bytes() for name in names}

        first = run_pipeline(tmp_path / "run1")
        second = run_pipeline(tmp_path / "run2")
        differing = [name for name in first if first[name] != second[name]]
        report_criterion(
            8,
            "byte-identical rerun of every pipeline stage "
            + (f"(differing: {differing})" if differing else f"({len(first)} artifacts compared)"),
            not differing,
        )
