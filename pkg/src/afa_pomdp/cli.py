"""Command-line front door: ``afa-pomdp <command> --config FILE --set key=value``.

Exit codes: 0 success, 2 invalid input (config, versions, corrupted
artifacts), 3 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import evaluation
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .persistence import IntegrityError, VersionMismatch, check_versions, read_dataset
from .training import collect_dataset, evaluate_policy, load_policy, load_vae, pretrain_vae, train_joint
from .training import runtime
from .training.joint import resolve_inputs

OUTPUT_ROOT_ENV = "AFA_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("collect", "train-vae", "train-policy", "eval", "sweep", "plot")

log = logging.getLogger("afa_pomdp")


def output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _dataset_dir(cfg: ExperimentConfig, arg: Optional[str], out: Path) -> Path:
    path = Path(arg or cfg.data.dataset_dir or out / "data")
    if not (path / "train").exists() or not (path / "test").exists():
        raise ConfigError(f"dataset directory {path} must contain train/ and test/")
    return path


def _snapshot(cfg: ExperimentConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, directory / "config.yaml")


def cmd_collect(cfg: ExperimentConfig, args) -> None:
    out = output_dir(cfg) / "data"
    paths = collect_dataset(cfg, out, args.policy)
    for split, p in paths.items():
        _snapshot(cfg, p)
    print(f"dataset written to {out}")


def cmd_train_vae(cfg: ExperimentConfig, args) -> None:
    out = output_dir(cfg)
    data = _dataset_dir(cfg, args.data, out)
    train, test = read_dataset(data / "train"), read_dataset(data / "test")
    vae_dir = out / "vae"
    _snapshot(cfg, vae_dir)
    result = pretrain_vae(cfg, train, test, vae_dir)
    print(f"checkpoint {result.checkpoint} (epoch {result.best_epoch}, "
          f"test unobserved error {result.best_unobserved_err:.6g})")


def _vae_path(cfg: ExperimentConfig, arg: Optional[str]) -> Optional[str]:
    if cfg.rl.input == "end_to_end":
        return None
    path = arg or cfg.vae.checkpoint
    if path is None:
        default = output_dir(cfg) / "vae" / "vae.safetensors"
        if not default.exists():
            raise ConfigError("belief input needs vae.checkpoint (or --vae)")
        path = str(default)
    return path


def cmd_train_policy(cfg: ExperimentConfig, args) -> None:
    out = output_dir(cfg) / "policy"
    result = train_joint(cfg, _vae_path(cfg, args.vae), out)
    last = result.metrics[-1]
    print(f"checkpoint {result.checkpoint}; final greedy task reward {last['mean_task_reward']:.4f}, "
          f"acquisitions {last['mean_episodic_acquisitions']:.2f}")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    out = output_dir(cfg) / "eval"
    _snapshot(cfg, out)
    report: dict = {}
    policy_path = args.policy or cfg.rl.checkpoint
    vae_path = args.vae or cfg.vae.checkpoint
    if vae_path is not None:
        _, vckpt = load_vae(vae_path)
        check_versions(runtime.env_versions(cfg), vckpt.meta.get("versions", {}), what=f"VAE checkpoint {vae_path}")
        if args.data or cfg.data.dataset_dir:
            data = _dataset_dir(cfg, args.data, output_dir(cfg))
            test = read_dataset(data / "test")
            report["imputation"] = evaluation.imputation_metrics(vae_path, test)
    if policy_path is not None:
        policy, pckpt = load_policy(policy_path, cfg)
        if pckpt.meta.get("input") == "belief":
            if vae_path is None:
                raise ConfigError("policy consumes beliefs; pass the VAE it was trained with (--vae)")
            if pckpt.meta.get("vae_sha256") not in (None, vckpt.digest):
                raise VersionMismatch(f"policy was trained on VAE {pckpt.meta.get('vae_sha256')}, "
                                      f"given VAE is {vckpt.digest}")
        eval_cfg = cfg.model_copy(update={"rl": cfg.rl.model_copy(update={"input": pckpt.meta["input"]})})
        inputs, _ = resolve_inputs(eval_cfg, vae_path if pckpt.meta["input"] == "belief" else None)
        row, _ = evaluate_policy(cfg, policy, inputs, cfg.rl.eval_episodes, cfg.master_seed,
                                 random_acq_prob=pckpt.meta.get("random_acq_prob"))
        report["policy"] = row
    if not report:
        raise ConfigError("nothing to evaluate: give a policy (--policy / rl.checkpoint) or a VAE with a dataset")
    (out / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, indent=1, sort_keys=True))


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    out = output_dir(cfg) / "sweep"
    _snapshot(cfg, out)
    vae = _vae_path(cfg, args.vae)
    cells = evaluation.cost_sweep(cfg, cfg.eval.costs, vae, cfg.eval.seeds, out)
    if args.random:
        for p in cfg.eval.random_probs:
            for seed in cfg.eval.seeds:
                cells.append(evaluation.random_acquisition_baseline(cfg, p, vae, seed, out))
        evaluation.write_sweep(cells, out)
    print(f"sweep summary in {out / 'sweep_summary.csv'}")


def cmd_plot(cfg: ExperimentConfig, args) -> None:
    paths = list(args.metrics or cfg.eval.metrics)
    if not paths:
        raise ConfigError("plot needs metrics CSVs (positional arguments or eval.metrics)")
    out = output_dir(cfg) / "plots"
    _snapshot(cfg, out)
    written = evaluation.emit_plots(paths, out)
    for name, p in written.items():
        print(f"{name}: {p}")


HANDLERS = {
    "collect": cmd_collect,
    "train-vae": cmd_train_vae,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afa-pomdp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (heartbeat lines) to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. rl.learning_rate=1e-3 (repeatable)")
        if name == "collect":
            p.add_argument("--policy", help="End-to-End policy checkpoint for the non-random half")
        if name in ("train-vae", "eval"):
            p.add_argument("--data", help="dataset directory holding train/ and test/")
        if name in ("train-policy", "eval", "sweep"):
            p.add_argument("--vae", help="VAE checkpoint providing beliefs")
        if name == "eval":
            p.add_argument("--policy", help="policy checkpoint to evaluate")
        if name == "sweep":
            p.add_argument("--random", action="store_true", help="also run the random-acquisition baselines")
        if name == "plot":
            p.add_argument("metrics", nargs="*", help="metrics CSV files")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.overrides)
        cfg.check_paths()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        HANDLERS[args.command](cfg, args)
    except (ConfigError, VersionMismatch, IntegrityError, runtime.StartupError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("command %s failed", args.command)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
