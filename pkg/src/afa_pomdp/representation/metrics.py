from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core import EnvDescriptor, TrajectoryRecord
from .elbo import SequenceBatch, make_batch

Predictor = Callable[[SequenceBatch], torch.Tensor]


def elementwise_error(likelihood: str, params: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error (gaussian) or pixel NLL (categorical), shaped like ``target``."""
    if likelihood == "gaussian":
        return (params - target).pow(2)
    log_p = F.log_softmax(params, dim=-3)
    return -log_p.gather(-3, target.round().long().unsqueeze(-3)).squeeze(-3)


@torch.no_grad()
def imputation_errors(predict: Predictor, likelihood: str, records: Sequence[TrajectoryRecord],
                      desc: EnvDescriptor, batch_size: int = 64) -> dict[str, float]:
    """Mean error over observed and unobserved entries, pooled over the dataset.

    Masks come solely from the records' stored acquisition masks.
    """
    totals = {"observed": 0.0, "unobserved": 0.0}
    counts = {"observed": 0, "unobserved": 0}
    for start in range(0, len(records), batch_size):
        batch = make_batch(records[start : start + batch_size], desc, mode="partial")
        err = elementwise_error(likelihood, predict(batch), batch.full).double()
        valid = batch.valid.view(*batch.valid.shape, *([1] * (batch.full.dim() - 2)))
        for name, sel in (("observed", batch.obs_mask & valid), ("unobserved", ~batch.obs_mask & valid)):
            totals[name] += float(err[sel].sum())
            counts[name] += int(sel.sum())
    return {
        "observed_err": totals["observed"] / counts["observed"] if counts["observed"] else float("nan"),
        "unobserved_err": totals["unobserved"] / counts["unobserved"] if counts["unobserved"] else float("nan"),
        "n_observed": counts["observed"],
        "n_unobserved": counts["unobserved"],
    }


def unobserved_targets(records: Sequence[TrajectoryRecord]) -> np.ndarray:
    return np.concatenate([r.observations[~r.masks] for r in records])
