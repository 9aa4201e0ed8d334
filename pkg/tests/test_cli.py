"""End-to-end CLI tests over small artifacts; every stage is checked for
byte-identical reruns where the acceptance gate needs it."""

import json

import pytest

from cormpo.cli import main
from cormpo.data import load_dataset
from cormpo.evalharness import EvalReport


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 120, "--seed", 7, "--epsilon", "0.25",
               "--out", base / "clean.jsonl") == 0
    assert run("inject-noise", "--data", base / "clean.jsonl", "--sigma", "0.2",
               "--fraction", "0.8", "--seed", 11, "--out", base / "noisy.jsonl") == 0
    assert run("train-twin", "--data", base / "clean.jsonl", "--epochs", 3,
               "--model-dim", 16, "--heads", 2, "--layers", 2, "--seed", 1,
               "--out", base / "twin.ckpt") == 0
    assert run("fit-guardian", "--data", base / "noisy.jsonl", "--k", 60,
               "--percentile", 20, "--lam", 0.1, "--seed", 0,
               "--out", base / "guardian.ckpt") == 0
    return base


class TestGenData:
    def test_identical_seeds_identical_files(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--n", 15, "--seed", 7, "--out", tmp_path / f"{name}.jsonl") == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.jsonl.meta.json").read_bytes() == (tmp_path / "b.jsonl.meta.json").read_bytes()

    def test_dataset_loads(self, workdir):
        ds = load_dataset(workdir / "clean.jsonl")
        assert len(ds) == 720


class TestTwinStage:
    def test_checkpoint_exists_with_sidecar(self, workdir):
        assert (workdir / "twin.ckpt").exists()
        manifest = json.loads((workdir / "twin.ckpt.json").read_text())
        assert manifest["format"] == "CTWN"

    def test_eval_twin_writes_report(self, workdir, tmp_path, capsys):
        out = tmp_path / "twin_report.json"
        assert run("eval-twin", "--twin", workdir / "twin.ckpt", "--data", workdir / "clean.jsonl",
                   "--crps-samples", 8, "--out", out) == 0
        report = json.loads(out.read_text())
        assert set(report) >= {"mae_all", "mae_map", "trend_accuracy", "crps", "noise_baseline_crps"}


class TestPolicyStage:
    def test_cormpo_lambda_zero_matches_mbpo(self, workdir, tmp_path):
        common = ["--data", workdir / "noisy.jsonl", "--epochs", 1, "--steps-per-epoch", 25,
                  "--rollout-frequency", 25, "--rollout-batch", 40, "--rollout-horizon", 2,
                  "--dynamics-epochs", 1, "--ensemble-size", 2, "--n-elites", 2, "--seed", 3]
        assert run("train-policy", "--algo", "mbpo", *common, "--out", tmp_path / "mbpo.ckpt") == 0
        assert run("train-policy", "--algo", "cormpo", "--guardian", workdir / "guardian.ckpt",
                   "--lam", 0.0, *common, "--out", tmp_path / "cormpo0.ckpt") == 0
        eval_args = ["--twin", workdir / "twin.ckpt", "--episodes", 6, "--seeds", "0", "--horizon", 3]
        assert run("evaluate", "--policy", tmp_path / "mbpo.ckpt", *eval_args,
                   "--algo", "x", "--out", tmp_path / "m.json") == 0
        assert run("evaluate", "--policy", tmp_path / "cormpo0.ckpt", *eval_args,
                   "--algo", "x", "--out", tmp_path / "c.json") == 0
        m = EvalReport.load(tmp_path / "m.json")
        c = EvalReport.load(tmp_path / "c.json")
        assert m.reward_per_seed == c.reward_per_seed
        assert m.acp_per_seed == c.acp_per_seed

    def test_cormpo_without_guardian_fails_validation(self, workdir, tmp_path):
        code = run("train-policy", "--algo", "cormpo", "--data", workdir / "noisy.jsonl",
                   "--epochs", 1, "--steps-per-epoch", 1, "--out", tmp_path / "x.ckpt")
        assert code == 1

    def test_training_log_emitted(self, workdir, tmp_path):
        log = tmp_path / "train.jsonl"
        assert run("train-policy", "--algo", "bc", "--data", workdir / "noisy.jsonl",
                   "--bc-epochs", 2, "--seed", 0, "--out", tmp_path / "bc.ckpt",
                   "--log", log) == 0
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 2
        assert "bc_loss" in records[0]


class TestVerifyBounds:
    def test_zero_violations_json(self, tmp_path, capsys):
        out = tmp_path / "bounds.json"
        assert run("verify-bounds", "--instances", 8, "--gap-instances", 4, "--out", out) == 0
        payload = json.loads(out.read_text())
        assert payload["violations"] == 0


class TestReportCommand:
    def test_table_and_csv(self, tmp_path):
        r1 = EvalReport(algo="a", seeds=[0], n_episodes=5, horizon=6,
                        reward_per_seed=[0.5], acp_per_seed=[1.0], ws_per_seed=[0.1])
        r2 = EvalReport(algo="b", seeds=[0], n_episodes=5, horizon=6,
                        reward_per_seed=[0.4], acp_per_seed=[2.0], ws_per_seed=[0.0])
        r1.save(tmp_path / "a.json")
        r2.save(tmp_path / "b.json")
        assert run("report", "--inputs", f"a={tmp_path/'a.json'}", f"b={tmp_path/'b.json'}",
                   "--out-csv", tmp_path / "out.csv", "--out-txt", tmp_path / "out.txt",
                   "--drop-pair", "a,b") == 0
        assert (tmp_path / "out.csv").exists()
        assert (tmp_path / "out.txt").read_text().splitlines()[1].startswith("a")


class TestErrors:
    def test_unknown_flag_exits_one(self):
        assert run("gen-data", "--does-not-exist", "1", "--out", "x") == 1

    def test_unknown_subcommand_exits_one(self):
        assert run("frobnicate") == 1

    def test_missing_file_is_validation_error(self, tmp_path):
        assert run("train-twin", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "t.ckpt") == 1

    def test_bad_config_section_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"nonsense": {}}))
        assert run("gen-data", "--config", cfg, "--n", 5, "--out", tmp_path / "d.jsonl") == 1

    def test_config_flag_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"generator": {"n_trajectories": 4, "seed": 3}}))
        assert run("gen-data", "--config", cfg, "--out", tmp_path / "d.jsonl") == 0
        assert len(load_dataset(tmp_path / "d.jsonl")) == 24
        # flag overrides file value
        assert run("gen-data", "--config", cfg, "--n", 2, "--out", tmp_path / "d2.jsonl") == 0
        assert len(load_dataset(tmp_path / "d2.jsonl")) == 12
