"""Command-line entry point wiring the full pipeline.

One subcommand per pipeline stage; every stage is deterministic given its
seed and rereads/rewrites only the documented file formats, so reruns with
identical inputs produce byte-identical artifacts.  Configuration comes
from an optional JSON file with per-stage sections; explicit flags win
over file values.  ``CORMPO_LOG`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import __version__
from .checkpoint import CheckpointError
from .data import load_dataset, save_dataset
from .domain import InvalidInputError, RewardConfig
from .evalharness import (
    EvalReport,
    evaluate_policy,
    report_table,
    reward_drop,
    write_report_csv,
)
from .guardian import DensityModel, GuardianConfig, guardian_fit
from .orl import ORLConfig, PolicyModel, reward_config_from_dataset, train_policy
from .synthenv import (
    GeneratorConfig,
    NoiseConfig,
    expert_policy,
    generate_dataset,
    inject_noise,
    noisy_expert_policy,
)
from .tabular import run_bound_suite
from .twin import (
    TrainingFailureError,
    TwinModel,
    TwinParams,
    TwinTrainConfig,
    mlp_baseline_train,
    noise_baseline_crps,
    twin_eval,
    twin_train,
)

log = logging.getLogger("cormpo")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

CONFIG_SECTIONS = ("generator", "noise", "twin", "guardian", "orl", "eval", "serve")


def _setup_logging() -> None:
    level = os.environ.get("CORMPO_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise InvalidInputError("config file must contain a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise InvalidInputError(f"unknown config sections: {sorted(unknown)}")
    for section, value in cfg.items():
        if not isinstance(value, dict):
            raise InvalidInputError(f"config section {section!r} must be an object")
    return cfg


def _section_config(cls, section: dict, overrides: dict):
    """Build a dataclass config from file section plus CLI overrides."""
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise InvalidInputError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _write_json(path: str, payload: dict) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: str, records: list) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_gen_data(args, config) -> int:
    gen_cfg = _section_config(
        GeneratorConfig,
        config.get("generator", {}),
        {"n_trajectories": args.n, "horizon": args.horizon, "seed": args.seed},
    )
    policy = noisy_expert_policy(args.epsilon) if args.epsilon > 0 else expert_policy
    dataset = generate_dataset(gen_cfg, policy)
    dataset.meta["behavior_epsilon"] = args.epsilon
    save_dataset(dataset, args.out)
    log.info("wrote %d transitions to %s", len(dataset), args.out)
    return EXIT_OK


def cmd_inject_noise(args, config) -> int:
    noise_cfg = _section_config(
        NoiseConfig,
        config.get("noise", {}),
        {"sigma": args.sigma, "fraction": args.fraction, "seed": args.seed},
    )
    dataset = load_dataset(args.data)
    save_dataset(inject_noise(dataset, noise_cfg), args.out)
    log.info("perturbed %s -> %s", args.data, args.out)
    return EXIT_OK


def cmd_train_twin(args, config) -> int:
    section = dict(config.get("twin", {}))
    train_keys = {f.name for f in fields(TwinTrainConfig)}
    train_section = {k: v for k, v in section.items() if k in train_keys}
    param_section = {k: v for k, v in section.items() if k not in train_keys}
    params = _section_config(
        TwinParams,
        param_section,
        {
            "arch": args.arch,
            "model_dim": args.model_dim,
            "n_heads": args.heads,
            "n_encoder_layers": args.layers,
            "dropout_p": args.dropout,
        },
    )
    train_cfg = _section_config(
        TwinTrainConfig,
        train_section,
        {
            "learning_rate": args.lr,
            "batch_size": args.batch_size,
            "max_epochs": args.epochs,
            "holdout_ratio": args.holdout,
            "patience": args.patience,
            "seed": args.seed,
        },
    )
    dataset = load_dataset(args.data)
    if params.arch == "mlp":
        model = mlp_baseline_train(dataset, train_cfg, params)
    else:
        model = twin_train(dataset, params, train_cfg)
    model.save(args.out)
    best = min(e["holdout_mse"] for e in model.history)
    log.info("twin (%s) saved to %s, best holdout MSE %.6f", params.arch, args.out, best)
    if args.log:
        _write_jsonl(args.log, model.history)
    return EXIT_OK


def cmd_eval_twin(args, config) -> int:
    model = TwinModel.load(args.twin)
    dataset = load_dataset(args.data)
    report = twin_eval(model, dataset, n_crps_samples=args.crps_samples, seed=args.seed or 0)
    payload = report.to_dict()
    payload["noise_baseline_crps"] = noise_baseline_crps(
        model, dataset, n_samples=args.crps_samples, seed=args.seed or 0
    )
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        _write_json(args.out, payload)
    return EXIT_OK


def cmd_fit_guardian(args, config) -> int:
    guardian_cfg = _section_config(
        GuardianConfig,
        config.get("guardian", {}),
        {
            "percentile": args.percentile,
            "lam": args.lam,
            "bandwidth": args.bandwidth,
            "k": args.k,
            "split_seed": args.seed,
        },
    )
    dataset = load_dataset(args.data)
    model = guardian_fit(dataset, guardian_cfg)
    model.save(args.out)
    print(f"tau={model.tau!r} val_ood_fraction={model.fit_info['val_ood_fraction']!r}")
    return EXIT_OK


def cmd_train_policy(args, config) -> int:
    orl_cfg = _section_config(
        ORLConfig,
        config.get("orl", {}),
        {
            "epochs": args.epochs,
            "steps_per_epoch": args.steps_per_epoch,
            "batch_size": args.batch_size,
            "rollout_horizon": args.rollout_horizon,
            "rollout_batch": args.rollout_batch,
            "rollout_frequency": args.rollout_frequency,
            "dynamics_epochs": args.dynamics_epochs,
            "ensemble_size": args.ensemble_size,
            "n_elites": args.n_elites,
            "mopo_lambda": args.mopo_lambda,
            "bc_epochs": args.bc_epochs,
            "seed": args.seed,
        },
    )
    dataset = load_dataset(args.data)
    reward_cfg = reward_config_from_dataset(dataset, args.lambda1, args.lambda2)
    guardian = DensityModel.load(args.guardian) if args.guardian else None
    policy, train_log = train_policy(
        args.algo, dataset, orl_cfg, reward_cfg, guardian=guardian, cormpo_lambda=args.lam
    )
    policy.save(args.out)
    if args.log:
        _write_jsonl(args.log, train_log)
    log.info("policy (%s) saved to %s", args.algo, args.out)
    return EXIT_OK


def cmd_evaluate(args, config) -> int:
    eval_section = dict(config.get("eval", {}))
    n_episodes = args.episodes if args.episodes is not None else eval_section.get("episodes", 1000)
    horizon = args.horizon if args.horizon is not None else eval_section.get("horizon", 6)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else tuple(
        eval_section.get("seeds", (0, 1, 2, 3, 4))
    )
    gen_cfg = _section_config(GeneratorConfig, config.get("generator", {}), {})
    twin = TwinModel.load(args.twin) if args.twin else None
    if args.expert:
        policy = expert_policy
        algo = "expert"
        if twin is None and args.env == "twin":
            raise InvalidInputError("--twin required for twin-environment evaluation")
        stats_source = twin.stats if twin is not None else None
    else:
        policy = PolicyModel.load(args.policy)
        algo = args.algo or Path(args.policy).stem
        stats_source = policy.stats
    if stats_source is None:
        raise InvalidInputError("no normalization statistics available for evaluation")
    reward_cfg = RewardConfig(
        znorm_mean=stats_source.reward_mean, znorm_std=stats_source.reward_std
    )
    report = evaluate_policy(
        policy,
        twin,
        gen_cfg,
        reward_cfg,
        n_episodes=n_episodes,
        horizon=horizon,
        seeds=seeds,
        env=args.env,
        stochastic_twin=not args.deterministic_twin,
        stochastic_policy=not args.greedy,
        algo=algo,
    )
    print(report_table({algo: report}))
    if args.out:
        report.save(args.out)
    return EXIT_OK


def cmd_verify_bounds(args, config) -> int:
    result = run_bound_suite(
        n_value_bound_instances=args.instances,
        n_gap_instances=args.gap_instances,
        seed=args.seed or 0,
    )
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        _write_json(args.out, result)
    return EXIT_OK if result["violations"] == 0 else EXIT_RUNTIME


def cmd_report(args, config) -> int:
    reports = {}
    for item in args.inputs:
        if "=" not in item:
            raise InvalidInputError(f"--inputs entries must be name=path, got {item!r}")
        name, path = item.split("=", 1)
        reports[name] = EvalReport.load(path)
    table = report_table(reports)
    print(table)
    if args.out_csv:
        write_report_csv(reports, args.out_csv)
    if args.out_txt:
        Path(args.out_txt).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out_txt).write_text(table + "\n", encoding="utf-8")
    if args.drop_pair:
        clean_name, noisy_name = args.drop_pair.split(",")
        drop = reward_drop(reports[clean_name], reports[noisy_name])
        print(f"reward drop {clean_name} -> {noisy_name}: {drop:.3f}%")
    return EXIT_OK


def cmd_serve(args, config) -> int:
    import uvicorn

    from .service import build_app

    serve_section = dict(config.get("serve", {}))
    gen_cfg = _section_config(GeneratorConfig, config.get("generator", {}), {})
    app = build_app(
        twin_path=args.twin,
        guardian_path=args.guardian,
        policy_path=args.policy,
        gen_cfg=gen_cfg,
        session_timeout_s=args.session_timeout or serve_section.get("session_timeout_s", 1800.0),
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cormpo",
        description="Density-regularized, clinically-aware model-based offline RL lab",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with per-stage sections")
        p.add_argument("--seed", type=int, default=None, help="stage seed (default 0)")
        p.add_argument("--threads", type=int, default=1, help="torch thread cap (default 1)")

    p = sub.add_parser("gen-data", help="generate a synthetic offline dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of trajectories (default 5000)")
    p.add_argument("--horizon", type=int, default=None, help="episode length in hours (default 6)")
    p.add_argument("--epsilon", type=float, default=0.25,
                   help="behavior-policy exploration rate (default 0.25)")
    p.add_argument("--out", required=True, help="output JSONL dataset path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("inject-noise", help="perturb next-state windows of a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=float, default=None, help="noise std in z units (default 0.2)")
    p.add_argument("--fraction", type=float, default=None, help="fraction perturbed (default 0.8)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inject_noise)

    p = sub.add_parser("train-twin", help="train the forecaster (or the MLP baseline)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=("transformer", "mlp"), default=None)
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default 30)")
    p.add_argument("--batch-size", type=int, default=None, help="default 256")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--holdout", type=float, default=None, help="holdout ratio (default 0.2)")
    p.add_argument("--patience", type=int, default=None, help="early-stop patience (default 5)")
    p.add_argument("--model-dim", type=int, default=None, help="encoder width (default 64)")
    p.add_argument("--heads", type=int, default=None, help="attention heads (default 4)")
    p.add_argument("--layers", type=int, default=None, help="encoder layers (default 3)")
    p.add_argument("--dropout", type=float, default=None, help="decoder dropout (default 0.1)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="optional training-history JSONL path")
    p.set_defaults(fn=cmd_train_twin)

    p = sub.add_parser("eval-twin", help="forecast metrics on a held-out dataset")
    common(p)
    p.add_argument("--twin", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--crps-samples", type=int, default=50)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(fn=cmd_eval_twin)

    p = sub.add_parser("fit-guardian", help="fit the KDE density safeguard")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--percentile", type=float, default=None,
                   help="validation percentile for tau (default 20)")
    p.add_argument("--bandwidth", type=float, default=None, help="kernel bandwidth (default 1.0)")
    p.add_argument("--k", type=int, default=None, help="neighbor count (default 100)")
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=None,
                   help="penalty coefficient stored with the model (default 0.005)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit_guardian)

    p = sub.add_parser("train-policy", help="train bc / mbpo / mopo / cormpo")
    common(p)
    p.add_argument("--algo", required=True, choices=("bc", "mbpo", "mopo", "cormpo"))
    p.add_argument("--data", required=True)
    p.add_argument("--guardian", help="guardian checkpoint (required for cormpo)")
    p.add_argument("--lambda1", type=float, default=0.0, help="ACP shaping weight (default 0)")
    p.add_argument("--lambda2", type=float, default=0.0, help="WS shaping weight (default 0)")
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=None,
                   help="density penalty coefficient (default: guardian's stored value)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 100)")
    p.add_argument("--steps-per-epoch", type=int, default=None, help="default 1000")
    p.add_argument("--batch-size", type=int, default=None, help="default 256")
    p.add_argument("--rollout-horizon", type=int, default=None, help="default 5")
    p.add_argument("--rollout-batch", type=int, default=None, help="default 10000")
    p.add_argument("--rollout-frequency", type=int, default=None, help="default 1000")
    p.add_argument("--dynamics-epochs", type=int, default=None, help="default 20")
    p.add_argument("--ensemble-size", type=int, default=None, help="default 7")
    p.add_argument("--n-elites", type=int, default=None, help="default 5")
    p.add_argument("--mopo-lambda", type=float, default=None,
                   help="MOPO uncertainty coefficient (default 1.0)")
    p.add_argument("--bc-epochs", type=int, default=None, help="default 20")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="optional JSONL training log")
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("evaluate", help="evaluate a policy in the twin or oracle env")
    common(p)
    p.add_argument("--policy", help="policy checkpoint")
    p.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    p.add_argument("--twin", help="twin checkpoint (for --env twin)")
    p.add_argument("--env", choices=("twin", "oracle"), default="twin")
    p.add_argument("--episodes", type=int, default=None, help="episodes per seed (default 1000)")
    p.add_argument("--horizon", type=int, default=None, help="default 6")
    p.add_argument("--seeds", help="comma-separated evaluation seeds (default 0,1,2,3,4)")
    p.add_argument("--deterministic-twin", action="store_true",
                   help="disable dropout sampling in twin rollouts")
    p.add_argument("--greedy", action="store_true", help="argmax policy actions")
    p.add_argument("--algo", help="label for the report")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("verify-bounds", help="numeric verification on tabular instances")
    common(p)
    p.add_argument("--instances", type=int, default=100,
                   help="value-bound instances (default 100)")
    p.add_argument("--gap-instances", type=int, default=50,
                   help="optimality-gap instances (default 50)")
    p.add_argument("--out", help="JSON summary path")
    p.set_defaults(fn=cmd_verify_bounds)

    p = sub.add_parser("report", help="combine evaluation reports into tables")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="name=report.json pairs")
    p.add_argument("--out-csv", help="CSV output path")
    p.add_argument("--out-txt", help="text table output path")
    p.add_argument("--drop-pair", help="clean,noisy report names for the drop row")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="run the interactive what-if HTTP service")
    common(p)
    p.add_argument("--twin", required=True)
    p.add_argument("--guardian")
    p.add_argument("--policy")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8331)
    p.add_argument("--session-timeout", type=float, default=None,
                   help="idle session expiry in seconds (default 1800)")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    torch.set_num_threads(max(1, args.threads))
    try:
        config = load_config_file(args.config)
        return args.fn(args, config)
    except (InvalidInputError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except (TrainingFailureError, CheckpointError, RuntimeError, OSError) as exc:
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
