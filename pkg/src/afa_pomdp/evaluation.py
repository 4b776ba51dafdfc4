"""Measurements: imputation error tables, random-acquisition baselines, cost sweeps, learning-curve plots."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .config import ExperimentConfig
from .envs.bouncing_ball import make_descriptor as ball_descriptor
from .envs.sepsis import make_descriptor as sepsis_descriptor
from .persistence import Dataset, read_dataset
from .representation.elbo import reconstruct
from .representation.metrics import imputation_errors
from .representation.models import VAEModel
from .training.joint import METRIC_COLUMNS, JointResult, train_joint
from .training.vae import load_vae

TIDY_COLUMNS = ("run_id", "seed", "cost", "env_steps", "metric", "value")
CURVE_METRICS = (
    "mean_task_reward",
    "mean_cost_adjusted_return",
    "mean_episodic_acquisitions",
    "discharge_rate",
    "mortality_rate",
)
SWEEP_COLUMNS = (
    "cost", "seed", "config_hash", "acquisitions", "task_reward", "cost_adjusted_return",
    "random_acq_prob", "run_dir",
)


class SchemaError(ValueError):
    pass


def imputation_metrics(model: VAEModel | str | Path, test: Dataset | str | Path,
                       fill_value: Optional[float] = None) -> dict[str, float]:
    """Observed and unobserved reconstruction error of a VAE on a dataset.

    Gaussian models report squared error, categorical models report the
    per-pixel negative log-likelihood of the true pixel.  Masks come from the
    dataset alone, so the numbers do not depend on how the model was trained.
    """
    if isinstance(model, (str, Path)):
        model, ckpt = load_vae(model)
        fill_value = ckpt.meta.get("fill_value", fill_value)
    if fill_value is None:
        raise ValueError("fill_value is required when passing a bare model")
    if not isinstance(test, Dataset):
        test = read_dataset(test)
    for i, rec in enumerate(test.records):
        if not np.all(np.isfinite(rec.observations)):
            raise ValueError(f"trajectory {i} lacks full observations (non-finite entries)")
    obs_shape = tuple(test.meta.get("obs_shape", test.records[0].observations.shape[1:]))
    if tuple(model.obs_shape) != obs_shape:
        raise ValueError(f"model expects observations {tuple(model.obs_shape)}, dataset has {obs_shape}")
    desc = _descriptor_for(obs_shape)
    model.eval()
    errs = imputation_errors(lambda b: reconstruct(model, b, fill_value), model.likelihood, test.records, desc)
    return {"observed_err": errs["observed_err"], "unobserved_err": errs["unobserved_err"]}


def _descriptor_for(obs_shape: tuple[int, ...]):
    for desc in (sepsis_descriptor(), ball_descriptor()):
        if tuple(desc.obs_shape) == obs_shape:
            return desc
    raise ValueError(f"no environment has observation shape {obs_shape}")


def cell_config(cfg: ExperimentConfig, cost: float, seed: int, random_acq_prob: Optional[float] = None,
                output_dir: Optional[str | Path] = None) -> ExperimentConfig:
    """A sweep cell as a standalone, independently re-runnable config."""
    doc = cfg.snapshot()
    doc["cost"]["unit_cost"] = cost
    doc["master_seed"] = seed
    doc["rl"]["random_acq_prob"] = random_acq_prob
    if output_dir is not None:
        doc["output_dir"] = str(output_dir)
    return ExperimentConfig.model_validate(doc)


@dataclass
class SweepCell:
    cfg: ExperimentConfig
    result: JointResult
    run_dir: Optional[Path]

    def row(self) -> dict:
        return {
            "cost": self.cfg.cost.unit_cost,
            "seed": self.cfg.master_seed,
            "config_hash": self.cfg.config_hash,
            "acquisitions": self.result.converged("mean_episodic_acquisitions"),
            "task_reward": self.result.converged("mean_task_reward"),
            "cost_adjusted_return": self.result.converged("mean_cost_adjusted_return"),
            "random_acq_prob": "" if self.cfg.rl.random_acq_prob is None else self.cfg.rl.random_acq_prob,
            "run_dir": "" if self.run_dir is None else str(self.run_dir),
        }


def _run_cell(cell_cfg: ExperimentConfig, vae, vae_meta, out_dir: Optional[Path]) -> SweepCell:
    run_dir = Path(cell_cfg.output_dir) if out_dir is not None else None
    result = train_joint(cell_cfg, vae, run_dir, vae_meta=vae_meta)
    return SweepCell(cell_cfg, result, run_dir)


def random_acquisition_baseline(cfg: ExperimentConfig, p: float, vae=None, seed: Optional[int] = None,
                                out_dir: Optional[str | Path] = None, vae_meta: Optional[dict] = None) -> SweepCell:
    """Train the task head with i.i.d. Bernoulli(p) acquisitions in place of the acquisition policy."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"acquisition probability {p} outside [0, 1]")
    seed = cfg.master_seed if seed is None else seed
    run_dir = Path(out_dir) / f"random-p{p:g}-cost{cfg.cost.unit_cost:g}-seed{seed}" if out_dir else None
    cell = cell_config(cfg, cfg.cost.unit_cost, seed, p, run_dir)
    return _run_cell(cell, vae, vae_meta, run_dir)


def cost_sweep(cfg: ExperimentConfig, costs: Sequence[float], vae=None, seeds: Optional[Sequence[int]] = None,
               out_dir: Optional[str | Path] = None, vae_meta: Optional[dict] = None) -> list[SweepCell]:
    """One training run per (cost, seed); summary rows use the converged evaluation points."""
    if not costs:
        raise ValueError("cost list must be nonempty")
    seeds = list(cfg.eval.seeds if seeds is None else seeds)
    cells = []
    for cost in costs:
        for seed in seeds:
            run_dir = Path(out_dir) / f"cost{cost:g}-seed{seed}" if out_dir else None
            cell = cell_config(cfg, cost, seed, cfg.rl.random_acq_prob, run_dir)
            cells.append(_run_cell(cell, vae, vae_meta, run_dir))
    if out_dir is not None:
        write_sweep(cells, Path(out_dir))
    return cells


def write_sweep(cells: Sequence[SweepCell], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for c in cells:
            w.writerow(c.row())
    # total acquisition cost consumed during training against performance at that point
    with open(out_dir / "cost_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cost", "seed", "config_hash", "env_steps", "consumed_cost", "mean_task_reward",
                    "mean_episodic_acquisitions"])
        for c in cells:
            for steps, consumed, row in c.result.cost_trace:
                w.writerow([c.cfg.cost.unit_cost, c.cfg.master_seed, c.cfg.config_hash, steps, repr(consumed),
                            repr(row["mean_task_reward"]), repr(row["mean_episodic_acquisitions"])])


def converged_acquisitions_nonincreasing(cells: Sequence[SweepCell], seed: int) -> bool:
    rows = sorted((c.cfg.cost.unit_cost, c.result.converged("mean_episodic_acquisitions"))
                  for c in cells if c.cfg.master_seed == seed)
    return all(a >= b for (_, a), (_, b) in zip(rows, rows[1:]))


# -- plots ---------------------------------------------------------------------


@dataclass
class RunCurves:
    run_id: str
    seed: int
    cost: float
    rows: list[dict]


def read_metrics(path: str | Path) -> RunCurves:
    """Parse a training metrics CSV; seed and cost come from the sibling config snapshot."""
    path = Path(path)
    text = path.read_text()
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for col in METRIC_COLUMNS:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no rows")
    parsed = []
    for col in METRIC_COLUMNS:
        if all((r[col] or "").strip() == "" for r in rows):
            raise SchemaError(f"{path}: column {col!r} is empty")
    for i, r in enumerate(rows):
        out = {}
        for col in METRIC_COLUMNS:
            try:
                out[col] = float(r[col])
            except (TypeError, ValueError):
                raise SchemaError(f"{path}: column {col!r} row {i} holds non-numeric {r[col]!r}") from None
        parsed.append(out)
    seed, cost = 0, math.nan
    snap = path.parent / "config.yaml"
    if snap.exists():
        doc = yaml.safe_load(snap.read_text()) or {}
        seed = int(doc.get("master_seed", 0))
        cost = float(doc.get("cost", {}).get("unit_cost", math.nan))
    return RunCurves(run_id=path.parent.name, seed=seed, cost=cost, rows=parsed)


def tidy_rows(runs: Sequence[RunCurves]) -> list[tuple]:
    rows = []
    for run in runs:
        for r in run.rows:
            for metric in CURVE_METRICS:
                rows.append((run.run_id, run.seed, run.cost, int(r["env_steps"]), metric, r[metric]))
    rows.sort(key=lambda x: (x[0], x[1], x[3], x[4]))
    return rows


def group_label(run_id: str) -> str:
    return re.sub(r"-?seed\d+$", "", run_id) or run_id


def seed_bands(runs: Sequence[RunCurves], metric: str) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per group: (env_steps, mean, standard error) across seeds at shared evaluation points."""
    groups: dict[str, list[RunCurves]] = {}
    for run in runs:
        groups.setdefault(group_label(run.run_id), []).append(run)
    out = {}
    for label, members in sorted(groups.items()):
        common = sorted(set.intersection(*[{int(r["env_steps"]) for r in m.rows} for m in members]))
        values = np.array([[next(r[metric] for r in m.rows if int(r["env_steps"]) == s) for s in common]
                           for m in members])
        mean = values.mean(axis=0)
        se = values.std(axis=0, ddof=1) / np.sqrt(len(members)) if len(members) > 1 else np.zeros_like(mean)
        out[label] = (np.array(common), mean, se)
    return out


def emit_plots(metric_paths: Sequence[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Learning-curve figures with mean ± standard-error bands, plus a tidy long-format CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not metric_paths:
        raise SchemaError("no metrics files given")
    runs = [read_metrics(p) for p in metric_paths]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tidy = out_dir / "tidy_metrics.csv"
    with open(tidy, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIDY_COLUMNS)
        for row in tidy_rows(runs):
            w.writerow([row[0], row[1], repr(row[2]), row[3], row[4], repr(row[5])])
    written = {"tidy": tidy}
    for metric in CURVE_METRICS:
        bands = seed_bands(runs, metric)
        if all(np.all(np.isnan(b[1])) for b in bands.values()):
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, (steps, mean, se) in bands.items():
            ax.plot(steps, mean, label=label)
            ax.fill_between(steps, mean - se, mean + se, alpha=0.25)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(metric.replace("_", " "))
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written[metric] = path
    return written


__all__ = [
    "CURVE_METRICS",
    "SchemaError",
    "SweepCell",
    "TIDY_COLUMNS",
    "cell_config",
    "converged_acquisitions_nonincreasing",
    "cost_sweep",
    "emit_plots",
    "imputation_metrics",
    "random_acquisition_baseline",
    "read_metrics",
    "seed_bands",
    "write_sweep",
]
