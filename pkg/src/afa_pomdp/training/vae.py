"""Offline VAE pre-training on a collected dataset."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..config import ExperimentConfig
from ..core import EnvDescriptor, TrajectoryRecord
from ..persistence import Checkpoint, Dataset, load_checkpoint, save_checkpoint
from ..representation.elbo import SequenceBatch, elbo, make_batch, reconstruct, supervision_mask
from ..representation.metrics import imputation_errors
from ..representation.models import VAEModel, build_model, model_from_architecture
from . import runtime

log = logging.getLogger(__name__)

EPOCH_COLUMNS = (
    "epoch", "steps",
    "train_loss", "train_rec_observed", "train_rec_unobserved", "train_kl",
    "test_loss", "test_rec_observed", "test_rec_unobserved", "test_kl",
    "test_observed_err", "test_unobserved_err", "wall_seconds",
)


class TrainingDivergence(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass
class VAEResult:
    model: VAEModel
    checkpoint: Optional[Path]
    best_epoch: int
    best_unobserved_err: float
    history: list[dict] = field(default_factory=list)


def supervision_masks(records: Sequence[TrajectoryRecord], desc: EnvDescriptor, mode: str, rho: float,
                      seed: int) -> list[np.ndarray]:
    """Per-record supervision masks, drawn once so every epoch sees the same subset."""
    rng = np.random.default_rng(seed)
    return [supervision_mask(r, desc, mode, rho, rng) for r in records]


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _make(records, idx, desc, sup) -> SequenceBatch:
    return make_batch([records[i] for i in idx], desc, sup_masks=[sup[i] for i in idx])


@torch.no_grad()
def evaluate_split(model: VAEModel, records: Sequence[TrajectoryRecord], desc: EnvDescriptor, beta: float,
                   fill: float, seed: int, batch_size: int = 256) -> dict[str, float]:
    """Full-supervision ELBO terms and imputation errors on a held-out split."""
    sup = [np.ones_like(r.masks) for r in records]
    gen = torch.Generator().manual_seed(seed)
    sums = {"loss": 0.0, "rec_observed": 0.0, "rec_unobserved": 0.0, "kl": 0.0}
    for idx in _batches(len(records), batch_size, None):
        _, diag = elbo(model, _make(records, idx, desc, sup), beta, fill, generator=gen)
        for k in sums:
            sums[k] += diag[k] * len(idx)
    out = {k: v / len(records) for k, v in sums.items()}
    errs = imputation_errors(lambda b: reconstruct(model, b, fill), model.likelihood, records, desc)
    out["observed_err"] = errs["observed_err"]
    out["unobserved_err"] = errs["unobserved_err"]
    return out


def vae_meta(cfg: ExperimentConfig, model: VAEModel, train: Dataset, epoch: int, score: float) -> dict:
    return {
        "kind": "vae",
        "architecture": model.architecture(),
        "model": model.kind,
        "supervision": cfg.vae.supervision,
        "fraction": cfg.vae.fraction,
        "beta": cfg.vae_beta,
        "fill_value": runtime.default_fill(cfg.env.name),
        "dataset_version": train.version,
        "versions": runtime.env_versions(cfg),
        "config": cfg.snapshot(),
        "config_hash": cfg.config_hash,
        "epoch": epoch,
        "test_unobserved_err": score,
    }


def pretrain_vae(cfg: ExperimentConfig, train: Dataset, test: Dataset, out_dir: Optional[str | Path] = None,
                 seed: Optional[int] = None) -> VAEResult:
    """Minimise the negative masked ELBO with Adam; keep the best test-imputation epoch."""
    seed = cfg.master_seed if seed is None else seed
    desc = runtime.descriptor(cfg)
    versions = runtime.env_versions(cfg)
    for name, ds in (("train", train), ("test", test)):
        found = ds.meta.get("versions")
        if found is not None and found != versions:
            raise runtime.StartupError(f"{name} dataset was collected under {found}, config resolves to {versions}")
        if len(ds) == 0:
            raise runtime.StartupError(f"{name} dataset is empty")
    fill = runtime.default_fill(cfg.env.name)
    beta = cfg.vae_beta
    init_seed, shuffle_seed, sup_seed, noise_seed, eval_seed = runtime.spawn_seeds(seed, 5, runtime.STREAM_VAE)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = build_model(cfg.vae.model, desc.obs_shape, desc.action_encoding_size, cfg.vae.latent_dim)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.vae_learning_rate)
    sup = supervision_masks(train.records, desc, cfg.vae.supervision, cfg.vae.fraction, sup_seed)
    shuffle = np.random.default_rng(shuffle_seed)
    noise = torch.Generator().manual_seed(noise_seed)

    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "vae_metrics.csv", "w", newline="")
        writer = csv.DictWriter(metrics_file, fieldnames=EPOCH_COLUMNS)
        writer.writeheader()

    best = (math.inf, -1)
    best_state = None
    history = []
    start = time.perf_counter()
    steps = 0
    try:
        for epoch in range(1, cfg.vae.epochs + 1):
            model.train()
            sums = {"loss": 0.0, "rec_observed": 0.0, "rec_unobserved": 0.0, "kl": 0.0}
            for b, idx in enumerate(_batches(len(train), cfg.vae.batch_size, shuffle)):
                loss, diag = elbo(model, _make(train.records, idx, desc, sup), beta, fill, generator=noise)
                if not torch.isfinite(loss):
                    _dump_divergence(out, epoch, b, idx, diag)
                    raise TrainingDivergence(
                        f"non-finite loss at epoch {epoch}, batch {b} (records {idx.tolist()}): {diag}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                steps += 1
                for k in sums:
                    sums[k] += diag[k] * len(idx)
            model.eval()
            test_m = evaluate_split(model, test.records, desc, beta, fill, eval_seed)
            row = {"epoch": epoch, "steps": steps}
            row.update({f"train_{k}": v / len(train) for k, v in sums.items()})
            row.update({f"test_{k}": v for k, v in test_m.items() if k in ("loss", "rec_observed", "rec_unobserved", "kl")})
            row["test_observed_err"] = test_m["observed_err"]
            row["test_unobserved_err"] = test_m["unobserved_err"]
            row["wall_seconds"] = round(time.perf_counter() - start, 3)
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                metrics_file.flush()
            log.info("vae epoch %d: train loss %.4f, test unobserved err %.4f",
                     epoch, row["train_loss"], row["test_unobserved_err"])
            score = test_m["unobserved_err"]
            if score < best[0] or best_state is None:
                best = (score, epoch)
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if metrics_file is not None:
            metrics_file.close()

    model.load_state_dict(best_state)
    ckpt_path = None
    if out is not None:
        ckpt_path = out / "vae.safetensors"
        save_checkpoint(ckpt_path, model, vae_meta(cfg, model, train, best[1], best[0]))
    return VAEResult(model, ckpt_path, best[1], best[0], history)


def _dump_divergence(out: Optional[Path], epoch: int, batch: int, idx: np.ndarray, diag: dict) -> None:
    if out is None:
        return
    doc = {"epoch": epoch, "batch_index": batch, "record_indices": idx.tolist(), "diagnostics": diag}
    (out / "divergence.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


def load_vae(path: str | Path) -> tuple[VAEModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "vae":
        raise runtime.StartupError(f"{path} is not a VAE checkpoint")
    model = model_from_architecture(ckpt.meta["architecture"])
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model, ckpt
