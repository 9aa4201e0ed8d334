"""Generator, expert, dataset I/O, and noise-injection tests."""

import numpy as np
import pytest

from cormpo.data import load_dataset, save_dataset
from cormpo.domain import CLINICAL_THRESHOLDS, IDX_MAP, is_stable
from cormpo.synthenv import (
    DEFAULT_STEP_NOISE,
    GeneratorConfig,
    NoiseConfig,
    _generate_window,
    env_step,
    generate_dataset,
    init_patient,
    inject_noise,
    scripted_expert,
)

from conftest import make_window


class TestInitPatient:
    def test_deterministic_given_seed(self):
        latent1, window1, p1 = init_patient(42)
        latent2, window2, p2 = init_patient(42)
        assert latent1.recovery == latent2.recovery
        assert p1 == p2
        np.testing.assert_array_equal(window1, window2)

    def test_recovery_sample_mean(self):
        draws = [init_patient(seed)[0].recovery for seed in range(1000)]
        assert 0.45 <= float(np.mean(draws)) <= 0.55

    def test_recovery_range_and_plevel_range(self):
        for seed in range(200):
            latent, _, plevel = init_patient(seed)
            assert 0.1 <= latent.recovery <= 0.9
            assert 4 <= plevel <= 9


class TestEnvStep:
    def test_recovered_patient_stable_at_min_support(self):
        maps = []
        for i in range(1000):
            rng = np.random.default_rng(10_000 + i)
            window = _generate_window(rng, 1.0, 2, None, np.asarray(DEFAULT_STEP_NOISE))
            maps.append(window[:, IDX_MAP].mean())
        assert abs(float(np.mean(maps)) - 80.0) < 1.0

    def test_unrecovered_patient_unstable_at_min_support(self):
        maps = []
        for i in range(1000):
            rng = np.random.default_rng(20_000 + i)
            window = _generate_window(rng, 0.0, 2, None, np.asarray(DEFAULT_STEP_NOISE))
            maps.append(window[:, IDX_MAP].mean())
        assert abs(float(np.mean(maps)) - 52.0) < 1.0

    def test_deterministic_given_seed(self):
        cfg = GeneratorConfig()
        outs = []
        for _ in range(2):
            latent, window, plevel = init_patient(3, cfg)
            nxt, _ = env_step(latent, window, plevel, cfg)
            outs.append(nxt)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_map_nondecreasing_in_support(self):
        means = []
        for level in range(2, 10):
            vals = []
            for i in range(400):
                rng = np.random.default_rng(1000 * level + i)
                vals.append(
                    _generate_window(rng, 0.5, level, None, np.asarray(DEFAULT_STEP_NOISE))[:, IDX_MAP].mean()
                )
            means.append(np.mean(vals))
        assert all(b > a for a, b in zip(means, means[1:]))

    def test_weaning_learnability(self):
        stable_hi, stable_lo = [], []
        for i in range(4000):
            rng = np.random.default_rng(60_000 + i)
            hi = _generate_window(rng, 0.85, 2, None, np.asarray(DEFAULT_STEP_NOISE))
            lo = _generate_window(rng, 0.15, 2, None, np.asarray(DEFAULT_STEP_NOISE))
            stable_hi.append(is_stable(hi, CLINICAL_THRESHOLDS))
            stable_lo.append(is_stable(lo, CLINICAL_THRESHOLDS))
        assert float(np.mean(stable_hi)) > 0.9
        assert float(np.mean(stable_lo)) < 0.1


class TestScriptedExpert:
    def test_weans_when_comfortably_stable(self):
        assert scripted_expert(make_window(map_=80, hr=75, pulsat=30), 5) == 4

    def test_escalates_when_unstable(self):
        assert scripted_expert(make_window(map_=50), 5) == 6

    def test_floor_and_cap(self):
        assert scripted_expert(make_window(), 2) == 2
        assert scripted_expert(make_window(map_=50), 9) == 9

    def test_holds_in_marginal_zone(self):
        # stable but pulsatility at 12: too thin a margin to wean
        assert scripted_expert(make_window(pulsat=12.0), 5) == 5


class TestGenerateDataset:
    def test_transition_count(self):
        ds = generate_dataset(GeneratorConfig(n_trajectories=10, horizon=6, seed=0))
        assert len(ds) == 60
        assert set(np.unique(ds.ts)) == set(range(6))

    def test_byte_identical_reruns(self, tmp_path):
        paths = []
        for run in range(2):
            ds = generate_dataset(GeneratorConfig(n_trajectories=12, horizon=6, seed=5))
            path = tmp_path / f"run{run}.jsonl"
            save_dataset(ds, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_plevels_in_range_and_finite(self, small_dataset):
        assert small_dataset.actions.min() >= 2
        assert small_dataset.actions.max() <= 9
        assert np.all(np.isfinite(small_dataset.states))
        assert np.all(np.isfinite(small_dataset.next_states))

    def test_expert_weans_over_time_on_stable_episodes(self):
        ds = generate_dataset(GeneratorConfig(n_trajectories=400, horizon=6, seed=9))
        mean_level_by_t = []
        for t in range(6):
            mask = ds.ts == t
            mean_level_by_t.append(float(ds.actions[mask].mean()))
        # pure expert data: support decreases with episode position on average
        assert all(b < a for a, b in zip(mean_level_by_t, mean_level_by_t[1:]))

    def test_roundtrip_through_jsonl(self, small_dataset, tmp_path):
        path = tmp_path / "ds.jsonl"
        save_dataset(small_dataset, path)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.states, small_dataset.states)
        np.testing.assert_array_equal(loaded.actions, small_dataset.actions)
        np.testing.assert_array_equal(loaded.rewards, small_dataset.rewards)
        np.testing.assert_array_equal(loaded.next_states, small_dataset.next_states)
        assert loaded.meta == small_dataset.meta

    def test_grouping_validation(self, small_dataset):
        small_dataset.validate_grouping()
        broken = small_dataset.subset(np.arange(len(small_dataset)))
        broken.ts[1] = 5  # duplicate step index inside trajectory 0
        with pytest.raises(Exception):
            broken.validate_grouping()


class TestInjectNoise:
    def test_zero_fraction_is_identity(self, small_dataset):
        out = inject_noise(small_dataset, NoiseConfig(sigma=0.2, fraction=0.0, seed=1))
        np.testing.assert_array_equal(out.next_states, small_dataset.next_states)

    def test_zero_sigma_is_identity(self, small_dataset):
        out = inject_noise(small_dataset, NoiseConfig(sigma=0.0, fraction=1.0, seed=1))
        np.testing.assert_allclose(out.next_states, small_dataset.next_states, atol=1e-12)

    def test_exact_perturbation_count(self, small_dataset):
        out = inject_noise(small_dataset, NoiseConfig(sigma=0.2, fraction=0.8, seed=1))
        changed = np.any(out.next_states != small_dataset.next_states, axis=(1, 2))
        assert changed.sum() == int(np.floor(0.8 * len(small_dataset)))
        assert out.meta["noise"]["n_perturbed"] == changed.sum()

    def test_original_untouched(self, small_dataset):
        before = small_dataset.next_states.copy()
        inject_noise(small_dataset, NoiseConfig(sigma=0.5, fraction=1.0, seed=2))
        np.testing.assert_array_equal(small_dataset.next_states, before)

    def test_states_and_rewards_carried_over(self, small_noisy_dataset, small_dataset):
        np.testing.assert_array_equal(small_noisy_dataset.states, small_dataset.states)
        np.testing.assert_array_equal(small_noisy_dataset.rewards, small_dataset.rewards)
