"""VAE encoders/decoders for vector (Sepsis) and image (BouncingBall+) inputs.

Every model exposes the same surface:

* ``encode_sequence(x_imputed, prev_actions)`` -> ``(mean, logvar)`` with
  shape ``[B, T, latent_dim]``;
* ``initial_state(batch)`` / ``filter_step(state, x_imputed, prev_action)``
  for online filtering during rollouts;
* ``decode(z)`` -> likelihood parameters for the full feature vector.

Non-sequential models ignore actions and carry no recurrent state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from ..core import ContractViolation

SEQ_PO_VAE = "seq-po-vae"
NONSEQ_ZI = "nonseq-zi"
MODEL_KINDS = (SEQ_PO_VAE, NONSEQ_ZI)


@dataclass
class FilterState:
    hidden: Optional[tuple[torch.Tensor, torch.Tensor]]
    step: int = 0


def mlp(sizes: Sequence[int], last_activation: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2 or last_activation:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class VectorDecoder(nn.Module):
    """fc -> ReLU -> hidden fcs (ReLU between) -> obs_dim Gaussian means."""

    def __init__(self, latent_dim: int, obs_dim: int, sizes: Sequence[int] = (64, 64, 32)):
        super().__init__()
        self.net = mlp([latent_dim, *sizes, obs_dim])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class ImageDecoder(nn.Module):
    """fc(256) reshaped to 4x8x8, then deconvolutions with strides 2, 2, 1."""

    def __init__(self, latent_dim: int, channels: Sequence[int] = (32, 32), n_classes: int = 2):
        super().__init__()
        self.fc = nn.Linear(latent_dim, 256)
        c1, c2 = channels
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(4, c1, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c1, c2, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c2, n_classes, 3, stride=1, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        h = torch.relu(self.fc(z.reshape(-1, z.shape[-1]))).view(-1, 4, 8, 8)
        logits = self.deconv(h)
        return logits.view(*lead, *logits.shape[1:])


class VAEModel(nn.Module):
    kind: str
    likelihood: str  # "gaussian" (unit variance) or "categorical" (2-class pixels)

    def __init__(self, obs_shape: Sequence[int], action_dim: int, latent_dim: int):
        super().__init__()
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.latent_dim = latent_dim

    @property
    def obs_ndim(self) -> int:
        return len(self.obs_shape)

    def initial_state(self, batch: int) -> FilterState:
        return FilterState(hidden=None, step=0)

    def encode_sequence(self, x: torch.Tensor, prev_actions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def filter_step(
        self, state: FilterState, x: torch.Tensor, prev_action: torch.Tensor
    ) -> tuple[FilterState, torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def architecture(self) -> dict:
        return dict(self._arch)


class _NonSeqBase(VAEModel):
    kind = NONSEQ_ZI

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(x)
        return self.mean_head(h), self.logvar_head(h)

    def encode_sequence(self, x, prev_actions=None):
        B, T = x.shape[:2]
        mean, logvar = self.encode(x.reshape(B * T, *self.obs_shape))
        return mean.view(B, T, -1), logvar.view(B, T, -1)

    def filter_step(self, state, x, prev_action=None):
        mean, logvar = self.encode(x)
        return FilterState(hidden=None, step=state.step + 1), mean, logvar


class _SeqBase(VAEModel):
    kind = SEQ_PO_VAE

    def _cell_input(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        fx = self.obs_proj(x)
        fa = self.act_proj(a)
        return self.fuse(torch.cat([fx, fa, fx * fa], dim=-1))

    def initial_state(self, batch: int) -> FilterState:
        p = next(self.parameters())
        zeros = p.new_zeros(batch, self.cell.hidden_size)
        return FilterState(hidden=(zeros, zeros.clone()), step=0)

    def filter_step(self, state, x, prev_action):
        if state.hidden is None:
            raise ContractViolation("filter_step called without an initial state; call initial_state() at episode start")
        h, c = self.cell(self._cell_input(x, prev_action), state.hidden)
        return FilterState(hidden=(h, c), step=state.step + 1), self.mean_head(h), self.logvar_head(h)

    def encode_sequence(self, x, prev_actions):
        B, T = x.shape[:2]
        # per-step projections are batched; only the recurrence runs sequentially
        u = self._cell_input(x.reshape(B * T, *self.obs_shape), prev_actions.reshape(B * T, -1)).view(B, T, -1)
        state = self.initial_state(B)
        h, c = state.hidden
        outs = []
        for t in range(T):
            h, c = self.cell(u[:, t], (h, c))
            outs.append(h)
        hs = torch.stack(outs, dim=1)
        return self.mean_head(hs), self.logvar_head(hs)


class VectorNonSeqVAE(_NonSeqBase):
    likelihood = "gaussian"

    def __init__(self, obs_dim: int, action_dim: int = 0, latent_dim: int = 10,
                 encoder_sizes: Sequence[int] = (32, 64), decoder_sizes: Sequence[int] = (64, 64, 32)):
        super().__init__((obs_dim,), action_dim, latent_dim)
        self._arch = dict(model=NONSEQ_ZI, obs_dim=obs_dim, action_dim=action_dim, latent_dim=latent_dim,
                          encoder_sizes=list(encoder_sizes), decoder_sizes=list(decoder_sizes))
        self.body = mlp([obs_dim, *encoder_sizes])
        self.mean_head = nn.Linear(encoder_sizes[-1], latent_dim)
        self.logvar_head = nn.Linear(encoder_sizes[-1], latent_dim)
        self.decoder = VectorDecoder(latent_dim, obs_dim, decoder_sizes)


class VectorSeqPOVAE(_SeqBase):
    likelihood = "gaussian"

    def __init__(self, obs_dim: int, action_dim: int, latent_dim: int = 10,
                 obs_proj_sizes: Sequence[int] = (32, 16, 10), action_proj_size: int = 10,
                 fuse_sizes: Sequence[int] = (64, 32), lstm_size: int = 32,
                 decoder_sizes: Sequence[int] = (64, 64, 32)):
        super().__init__((obs_dim,), action_dim, latent_dim)
        if obs_proj_sizes[-1] != action_proj_size:
            raise ValueError("observation and action projections must have equal width for f_x * f_a")
        self._arch = dict(model=SEQ_PO_VAE, obs_dim=obs_dim, action_dim=action_dim, latent_dim=latent_dim,
                          obs_proj_sizes=list(obs_proj_sizes), action_proj_size=action_proj_size,
                          fuse_sizes=list(fuse_sizes), lstm_size=lstm_size, decoder_sizes=list(decoder_sizes))
        self.obs_proj = mlp([obs_dim, *obs_proj_sizes])
        self.act_proj = nn.Linear(action_dim, action_proj_size)
        self.fuse = mlp([3 * action_proj_size, *fuse_sizes], last_activation=True)
        self.cell = nn.LSTMCell(fuse_sizes[-1], lstm_size)
        self.mean_head = nn.Linear(lstm_size, latent_dim)
        self.logvar_head = nn.Linear(lstm_size, latent_dim)
        self.decoder = VectorDecoder(latent_dim, obs_dim, decoder_sizes)


class _AddChannel(nn.Module):
    def forward(self, x):
        return x.unsqueeze(1)


class ImageNonSeqVAE(_NonSeqBase):
    likelihood = "categorical"

    def __init__(self, image_size: int = 32, action_dim: int = 0, latent_dim: int = 32,
                 conv_channels: Sequence[int] = (32, 64), fc_size: int = 256,
                 decoder_channels: Sequence[int] = (32, 32)):
        super().__init__((image_size, image_size), action_dim, latent_dim)
        if image_size != 32:
            raise ValueError("image models are built for 32x32 frames")
        self._arch = dict(model=NONSEQ_ZI, image_size=image_size, action_dim=action_dim, latent_dim=latent_dim,
                          conv_channels=list(conv_channels), fc_size=fc_size,
                          decoder_channels=list(decoder_channels))
        c1, c2 = conv_channels
        self.body = nn.Sequential(
            _AddChannel(),
            nn.Conv2d(1, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(c2 * 8 * 8, fc_size), nn.ReLU(),
        )
        self.mean_head = nn.Linear(fc_size, latent_dim)
        self.logvar_head = nn.Linear(fc_size, latent_dim)
        self.decoder = ImageDecoder(latent_dim, decoder_channels)


class ImageSeqPOVAE(_SeqBase):
    likelihood = "categorical"

    def __init__(self, image_size: int = 32, action_dim: int = 9, latent_dim: int = 32,
                 conv_channels: int = 32, feature_size: int = 32, fuse_sizes: Sequence[int] = (64, 32),
                 lstm_size: int = 32, decoder_channels: Sequence[int] = (32, 32)):
        super().__init__((image_size, image_size), action_dim, latent_dim)
        if image_size != 32:
            raise ValueError("image models are built for 32x32 frames")
        self._arch = dict(model=SEQ_PO_VAE, image_size=image_size, action_dim=action_dim, latent_dim=latent_dim,
                          conv_channels=conv_channels, feature_size=feature_size, fuse_sizes=list(fuse_sizes),
                          lstm_size=lstm_size, decoder_channels=list(decoder_channels))
        c = conv_channels
        self.obs_proj = nn.Sequential(
            _AddChannel(),
            nn.Conv2d(1, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(c * 4 * 4, feature_size),
        )
        self.act_proj = nn.Linear(action_dim, feature_size)
        self.fuse = mlp([3 * feature_size, *fuse_sizes], last_activation=True)
        self.cell = nn.LSTMCell(fuse_sizes[-1], lstm_size)
        self.mean_head = nn.Linear(lstm_size, latent_dim)
        self.logvar_head = nn.Linear(lstm_size, latent_dim)
        self.decoder = ImageDecoder(latent_dim, decoder_channels)


def build_model(kind: str, obs_shape: Sequence[int], action_dim: int, latent_dim: Optional[int] = None,
                **overrides) -> VAEModel:
    """Paper-sized architecture for the observation type, with optional size overrides."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model {kind!r}; expected one of {MODEL_KINDS}")
    obs_shape = tuple(obs_shape)
    if len(obs_shape) == 1:
        dz = latent_dim or 10
        if kind == SEQ_PO_VAE:
            return VectorSeqPOVAE(obs_shape[0], action_dim, dz, **overrides)
        return VectorNonSeqVAE(obs_shape[0], action_dim, dz, **overrides)
    dz = latent_dim or 32
    if kind == SEQ_PO_VAE:
        return ImageSeqPOVAE(obs_shape[0], action_dim, dz, **overrides)
    return ImageNonSeqVAE(obs_shape[0], action_dim, dz, **overrides)


def model_from_architecture(arch: dict) -> VAEModel:
    arch = dict(arch)
    kind = arch.pop("model")
    if "obs_dim" in arch:
        cls = VectorSeqPOVAE if kind == SEQ_PO_VAE else VectorNonSeqVAE
    else:
        cls = ImageSeqPOVAE if kind == SEQ_PO_VAE else ImageNonSeqVAE
    return cls(**arch)
