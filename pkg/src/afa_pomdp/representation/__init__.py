"""Imputers, VAE baselines and the sequential partially-observed VAE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .elbo import (
    SUPERVISION_MODES,
    SequenceBatch,
    elbo,
    gaussian_kl,
    log_likelihood,
    make_batch,
    prev_action_encodings,
    reconstruct,
    supervision_mask,
)
from .imputer import ImputerConfig, zero_impute, zero_impute_tensor
from .models import (
    MODEL_KINDS,
    NONSEQ_ZI,
    SEQ_PO_VAE,
    FilterState,
    VAEModel,
    build_model,
    model_from_architecture,
)


@dataclass(frozen=True, eq=False)
class LatentDistribution:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        logvar = np.asarray(self.log_variance, dtype=np.float64)
        if mean.shape != logvar.shape:
            raise ValueError("mean and log_variance shapes differ")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(logvar))):
            raise ValueError("latent distribution has non-finite entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_variance", logvar)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    @classmethod
    def from_tensors(cls, mean: torch.Tensor, logvar: torch.Tensor) -> "LatentDistribution":
        return cls(mean.detach().cpu().double().numpy(), logvar.detach().cpu().double().numpy())


@dataclass(frozen=True, eq=False)
class BeliefState:
    value: np.ndarray


def belief(dist: LatentDistribution) -> BeliefState:
    return BeliefState(np.array(dist.mean, copy=True))


@torch.no_grad()
def encode_nonseq(imputed: np.ndarray | torch.Tensor, model: VAEModel) -> LatentDistribution:
    if model.kind != NONSEQ_ZI:
        raise ValueError("encode_nonseq needs a non-sequential model")
    x = torch.as_tensor(imputed, dtype=next(model.parameters()).dtype)
    squeeze = x.dim() == model.obs_ndim
    if squeeze:
        x = x.unsqueeze(0)
    mean, logvar = model.encode(x)
    if squeeze:
        mean, logvar = mean[0], logvar[0]
    return LatentDistribution.from_tensors(mean, logvar)


@torch.no_grad()
def filter_step(prev: FilterState, imputed_obs, prev_action, model: VAEModel) -> tuple[FilterState, LatentDistribution]:
    """One step of q(z_t | x^p_{<=t}, a_{<t}) for a single (unbatched) stream."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(imputed_obs, dtype=dtype).unsqueeze(0)
    a = torch.as_tensor(prev_action, dtype=dtype).unsqueeze(0)
    state, mean, logvar = model.filter_step(prev, x, a)
    return state, LatentDistribution.from_tensors(mean[0], logvar[0])


@torch.no_grad()
def decode(z, model: VAEModel) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    return model.decode(torch.as_tensor(z, dtype=dtype)).cpu().numpy()


def pixel_probabilities(logits: np.ndarray | torch.Tensor) -> np.ndarray:
    """Probability of the 'on' class from 2-channel pixel logits."""
    logits = torch.as_tensor(logits)
    return torch.softmax(logits, dim=-3).select(-3, 1).numpy()


__all__ = [
    "BeliefState",
    "FilterState",
    "ImputerConfig",
    "LatentDistribution",
    "MODEL_KINDS",
    "NONSEQ_ZI",
    "SEQ_PO_VAE",
    "SUPERVISION_MODES",
    "SequenceBatch",
    "VAEModel",
    "belief",
    "build_model",
    "decode",
    "elbo",
    "encode_nonseq",
    "filter_step",
    "gaussian_kl",
    "log_likelihood",
    "make_batch",
    "model_from_architecture",
    "pixel_probabilities",
    "prev_action_encodings",
    "reconstruct",
    "supervision_mask",
    "zero_impute",
    "zero_impute_tensor",
]
