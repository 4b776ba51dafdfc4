from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..core import ContractViolation, MaskedObservation

BOUNCING_BALL_FILL = 0.5
SEPSIS_FILL = -10.0


@dataclass(frozen=True)
class ImputerConfig:
    fill_value: float

    @classmethod
    def for_env(cls, env_name: str) -> "ImputerConfig":
        return cls(BOUNCING_BALL_FILL if env_name == "bouncing_ball" else SEPSIS_FILL)


def zero_impute(obs: MaskedObservation | np.ndarray, cfg: ImputerConfig, mask: np.ndarray | None = None) -> np.ndarray:
    """Observed values where the mask is set, ``fill_value`` elsewhere."""
    if isinstance(obs, MaskedObservation):
        values, mask = obs.observed, obs.mask
    else:
        values = np.asarray(obs, dtype=np.float32)
        if mask is None:
            raise ContractViolation("a mask is required for raw arrays")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != values.shape:
        raise ContractViolation(f"mask shape {mask.shape} != observation shape {values.shape}")
    return np.where(mask, values, np.float32(cfg.fill_value)).astype(np.float32)


def zero_impute_tensor(x: torch.Tensor, mask: torch.Tensor, fill_value: float) -> torch.Tensor:
    if x.shape != mask.shape:
        raise ContractViolation(f"mask shape {tuple(mask.shape)} != tensor shape {tuple(x.shape)}")
    return torch.where(mask, x, torch.full_like(x, fill_value))
