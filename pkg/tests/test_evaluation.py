import csv
import hashlib
import math

import numpy as np
import pytest
import torch

from afa_pomdp.config import build_config
from afa_pomdp.evaluation import (
    SchemaError,
    TIDY_COLUMNS,
    converged_acquisitions_nonincreasing,
    cost_sweep,
    emit_plots,
    imputation_metrics,
    random_acquisition_baseline,
    read_metrics,
    seed_bands,
    RunCurves,
)
from afa_pomdp.persistence import write_dataset
from afa_pomdp.representation.metrics import imputation_errors
from afa_pomdp.training import METRIC_COLUMNS, pretrain_vae
from conftest import sepsis_records

E2E = ["rl.input=end_to_end", "rl.workers=2", "rl.total_env_steps=200", "rl.eval_interval=100",
       "rl.eval_episodes=3", "rl.hidden_size=8", "rl.rollout_length=5"]


@pytest.fixture(scope="module")
def records():
    return sepsis_records(12, seed=3)


@pytest.fixture(scope="module")
def tiny_vae(tmp_path_factory, records):
    from afa_pomdp.persistence import read_dataset

    out = tmp_path_factory.mktemp("vae")
    write_dataset(out / "train", records[:8], (8,), 4)
    write_dataset(out / "test", records[8:], (8,), 4)
    cfg = build_config({}, ["vae.epochs=2", "vae.batch_size=4"])
    res = pretrain_vae(cfg, read_dataset(out / "train"), read_dataset(out / "test"), out / "vae")
    return res.checkpoint, out


def test_perfect_predictor_has_zero_error(records, sepsis_desc):
    out = imputation_errors(lambda b: b.full.clone(), "gaussian", records, sepsis_desc)
    assert out["observed_err"] == 0.0 and out["unobserved_err"] == 0.0


def test_constant_predictor_error_is_the_variance(records, sepsis_desc):
    targets = np.concatenate([r.observations[~r.masks] for r in records]).astype(np.float64)
    mean = targets.mean()
    out = imputation_errors(lambda b: torch.full_like(b.full, mean), "gaussian", records, sepsis_desc)
    assert out["unobserved_err"] == pytest.approx(targets.var(), rel=1e-6)
    assert out["n_unobserved"] == targets.size


def test_imputation_metrics_from_checkpoint_leaves_it_untouched(tiny_vae):
    path, root = tiny_vae
    before = hashlib.sha256(path.read_bytes()).hexdigest()
    m1 = imputation_metrics(path, root / "test")
    m2 = imputation_metrics(path, root / "test")
    assert m1 == m2 and all(math.isfinite(v) and v >= 0 for v in m1.values())
    assert hashlib.sha256(path.read_bytes()).hexdigest() == before


def test_imputation_metrics_rejects_shape_mismatch(tiny_vae, tmp_path):
    path, _ = tiny_vae
    rng = np.random.default_rng(0)
    from test_persistence import random_records

    write_dataset(tmp_path / "d", random_records(2, rng, obs_shape=(5,)), (5,), 4)
    with pytest.raises(ValueError, match="expects observations"):
        imputation_metrics(path, tmp_path / "d")


def test_random_baseline_extremes(tmp_path):
    cfg = build_config({}, E2E + ["cost.unit_cost=0.01"])
    full = random_acquisition_baseline(cfg, 1.0, out_dir=tmp_path)
    none = random_acquisition_baseline(cfg, 0.0, out_dir=tmp_path)
    assert none.result.converged("mean_episodic_acquisitions") == 0.0
    row = full.row()
    assert row["random_acq_prob"] == 1.0 and (tmp_path / "random-p1-cost0.01-seed0" / "metrics.csv").exists()
    # every step acquires all four features and greedy evaluation keeps the Bernoulli draws
    last = full.result.metrics[-1]
    assert row["acquisitions"] > 0
    assert row["task_reward"] - row["cost_adjusted_return"] == pytest.approx(0.01 * row["acquisitions"], abs=1e-9)
    assert last["mean_episodic_acquisitions"] == row["acquisitions"]
    with pytest.raises(ValueError):
        random_acquisition_baseline(cfg, 1.5)


def test_cost_sweep_rows_and_files(tmp_path):
    cfg = build_config({}, E2E)
    cells = cost_sweep(cfg, [0.0, 0.01, 0.025], seeds=[0], out_dir=tmp_path)
    assert len(cells) == 3
    rows = list(csv.DictReader(open(tmp_path / "sweep_summary.csv")))
    assert [float(r["cost"]) for r in rows] == [0.0, 0.01, 0.025]
    assert len({r["config_hash"] for r in rows}) == 3
    zero = cells[0].row()
    assert zero["cost_adjusted_return"] == pytest.approx(zero["task_reward"])
    for c in cells:
        assert (tmp_path / f"cost{c.cfg.cost.unit_cost:g}-seed0" / "config.yaml").exists()
    trace = list(csv.DictReader(open(tmp_path / "cost_trace.csv")))
    assert trace and all(float(t["consumed_cost"]) >= 0 for t in trace)
    assert isinstance(converged_acquisitions_nonincreasing(cells, 0), bool)
    with pytest.raises(ValueError):
        cost_sweep(cfg, [])


def write_metrics(path, rows, columns=METRIC_COLUMNS):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


def fake_rows(offset):
    return [{c: (s if c == "env_steps" else offset + s / 1000) for c in METRIC_COLUMNS} for s in (0, 100, 200)]


def test_read_metrics_names_missing_column(tmp_path):
    cols = [c for c in METRIC_COLUMNS if c != "mortality_rate"]
    write_metrics(tmp_path / "r" / "metrics.csv", fake_rows(0), cols)
    with pytest.raises(SchemaError, match="mortality_rate"):
        read_metrics(tmp_path / "r" / "metrics.csv")


def test_read_metrics_names_empty_column(tmp_path):
    rows = fake_rows(0)
    for r in rows:
        r["discharge_rate"] = ""
    write_metrics(tmp_path / "r" / "metrics.csv", rows)
    with pytest.raises(SchemaError, match="discharge_rate"):
        read_metrics(tmp_path / "r" / "metrics.csv")


def test_seed_bands_are_mean_and_standard_error():
    runs = [RunCurves(f"belief-seed{i}", i, 0.01, fake_rows(float(i))) for i in range(3)]
    steps, mean, se = seed_bands(runs, "mean_task_reward")["belief"]
    assert list(steps) == [0, 100, 200]
    vals = np.array([[i + s / 1000 for s in (0, 100, 200)] for i in range(3)])
    np.testing.assert_allclose(mean, vals.mean(0))
    np.testing.assert_allclose(se, vals.std(0, ddof=1) / math.sqrt(3))


def test_emit_plots_tidy_csv_is_byte_identical(tmp_path):
    paths = []
    for i in range(2):
        p = tmp_path / f"runs/belief-seed{i}/metrics.csv"
        write_metrics(p, fake_rows(float(i)))
        paths.append(p)
    a = emit_plots(paths, tmp_path / "a")
    b = emit_plots(paths, tmp_path / "b")
    assert a["tidy"].read_bytes() == b["tidy"].read_bytes()
    header = a["tidy"].read_text().splitlines()[0]
    assert header == ",".join(TIDY_COLUMNS)
    assert a["mean_task_reward"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(SchemaError):
        emit_plots([], tmp_path / "c")
