"""Masked, supervised ELBO for partially observed sequences.

Reconstruction uses one decoder for every feature; the observed and
unobserved likelihood terms are the same per-element log-likelihood summed
under complementary masks.  The unobserved term is further restricted by the
supervision mask (partial: nothing, full: everything, fraction: a stored
random subset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core import ContractViolation, EnvDescriptor, TrajectoryRecord, encode_action
from .imputer import zero_impute_tensor
from .models import VAEModel

LOG_2PI = math.log(2.0 * math.pi)
SUPERVISION_MODES = ("partial", "full", "fraction")


@dataclass
class SequenceBatch:
    full: torch.Tensor  # [B, T, *obs]
    obs_mask: torch.Tensor  # bool [B, T, *obs]
    sup_mask: torch.Tensor  # bool [B, T, *obs], supervision of unobserved entries
    prev_actions: torch.Tensor  # [B, T, action_dim]
    valid: torch.Tensor  # bool [B, T], false on padding

    @property
    def batch_size(self) -> int:
        return self.full.shape[0]

    def to(self, dtype: torch.dtype) -> "SequenceBatch":
        return SequenceBatch(self.full.to(dtype), self.obs_mask, self.sup_mask,
                             self.prev_actions.to(dtype), self.valid)


def supervision_mask(record: TrajectoryRecord, desc: EnvDescriptor, mode: str, rho: float = 1.0,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Raw-index mask of entries whose targets enter the loss."""
    if mode == "partial":
        return record.masks.copy()
    if mode == "full":
        return np.ones_like(record.masks)
    if mode != "fraction":
        raise ContractViolation(f"unknown supervision mode {mode!r}")
    if rng is None:
        raise ContractViolation("fraction supervision needs a generator")
    T = len(record)
    groups = rng.random((T, desc.n_features)) < rho
    sup = np.zeros((T, desc.obs_size), dtype=bool)
    for i, group in enumerate(desc.feature_group_map):
        sup[:, list(group)] = groups[:, i : i + 1]
    sup = sup.reshape(record.masks.shape)
    # always a superset of what the agent observed
    return sup | record.masks


def prev_action_encodings(record: TrajectoryRecord, desc: EnvDescriptor) -> np.ndarray:
    out = np.zeros((len(record), desc.action_encoding_size), dtype=np.float32)
    for t in range(1, len(record)):
        out[t] = encode_action(record.controls[t - 1], record.acquisitions[t - 1], desc)
    return out


def make_batch(records: Sequence[TrajectoryRecord], desc: EnvDescriptor,
               sup_masks: Optional[Sequence[np.ndarray]] = None, mode: str = "full",
               dtype: torch.dtype = torch.float32) -> SequenceBatch:
    if not records:
        raise ContractViolation("empty batch")
    B = len(records)
    T = max(len(r) for r in records)
    obs = desc.obs_shape
    full = np.zeros((B, T, *obs), dtype=np.float32)
    mask = np.zeros((B, T, *obs), dtype=bool)
    sup = np.zeros((B, T, *obs), dtype=bool)
    acts = np.zeros((B, T, desc.action_encoding_size), dtype=np.float32)
    valid = np.zeros((B, T), dtype=bool)
    for b, rec in enumerate(records):
        n = len(rec)
        full[b, :n] = rec.observations
        mask[b, :n] = rec.masks
        if sup_masks is not None:
            sup[b, :n] = sup_masks[b]
        else:
            sup[b, :n] = supervision_mask(rec, desc, mode)
        acts[b, :n] = prev_action_encodings(rec, desc)
        valid[b, :n] = True
    return SequenceBatch(
        full=torch.from_numpy(full).to(dtype),
        obs_mask=torch.from_numpy(mask),
        sup_mask=torch.from_numpy(sup),
        prev_actions=torch.from_numpy(acts).to(dtype),
        valid=torch.from_numpy(valid),
    )


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(N(mean, exp(logvar)) || N(0, 1))."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)


def log_likelihood(model: VAEModel, params: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-element log-likelihood of ``target`` with the shape of ``target``."""
    if model.likelihood == "gaussian":
        return -0.5 * (target - params).pow(2) - 0.5 * LOG_2PI
    # class axis sits right before the image axes
    log_p = F.log_softmax(params, dim=-3)
    classes = target.round().long().unsqueeze(-3)
    return log_p.gather(-3, classes).squeeze(-3)


def elbo(model: VAEModel, batch: SequenceBatch, beta: float, fill_value: float,
         eps: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None
         ) -> tuple[torch.Tensor, dict[str, float]]:
    """Negative ELBO summed over time and features, averaged over the batch.

    ``eps`` freezes the reparameterisation noise (shape ``[B, T, d_z]``).
    """
    if batch.batch_size == 0:
        raise ContractViolation("empty batch")
    x_in = zero_impute_tensor(batch.full, batch.obs_mask, fill_value)
    mean, logvar = model.encode_sequence(x_in, batch.prev_actions)
    if eps is None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * eps
    ll = log_likelihood(model, model.decode(z), batch.full)

    obs_ndim = batch.full.dim() - 2
    valid = batch.valid.view(*batch.valid.shape, *([1] * obs_ndim))
    observed = batch.obs_mask & valid
    unobserved = ~batch.obs_mask & batch.sup_mask & valid
    zero = ll.new_zeros(())
    rec_obs = -torch.where(observed, ll, zero).sum()
    rec_unobs = -torch.where(unobserved, ll, zero).sum()
    kl = torch.where(batch.valid.unsqueeze(-1), gaussian_kl(mean, logvar), zero).sum()
    B = batch.batch_size
    loss = (rec_obs + rec_unobs + beta * kl) / B
    diagnostics = {
        "loss": float(loss.detach()),
        "rec_observed": float(rec_obs.detach()) / B,
        "rec_unobserved": float(rec_unobs.detach()) / B,
        "kl": float(kl.detach()) / B,
    }
    return loss, diagnostics


@torch.no_grad()
def reconstruct(model: VAEModel, batch: SequenceBatch, fill_value: float) -> torch.Tensor:
    """Decoder output at the posterior mean of every step."""
    x_in = zero_impute_tensor(batch.full, batch.obs_mask, fill_value)
    mean, _ = model.encode_sequence(x_in, batch.prev_actions)
    return model.decode(mean)
