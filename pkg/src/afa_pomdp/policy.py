"""LSTM actor-critic with a task head, a factorised acquisition head and a value head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ContractViolation, CostModel

ACQ_LOGIT_CLAMP = 15.0


def normalized_columns_(weight: torch.Tensor, std: float = 1.0, generator: Optional[torch.Generator] = None) -> None:
    """Gaussian init with every output unit's weight vector scaled to norm ``std``."""
    with torch.no_grad():
        w = torch.randn(weight.shape, generator=generator, dtype=weight.dtype)
        w *= std / w.pow(2).sum(dim=1, keepdim=True).sqrt()
        weight.copy_(w)


class ImageEncoder(nn.Module):
    """End-to-End pathway for frames: two ReLU convolutions then fc."""

    def __init__(self, channels: Sequence[int] = (16, 32), out_size: int = 1024):
        super().__init__()
        c1, c2 = channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
        )
        self.fc = nn.Linear(c2 * 8 * 8, out_size)
        nn.init.orthogonal_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)
        self.out_size = out_size

    def forward(self, x):
        return torch.relu(self.fc(self.net(x.unsqueeze(1))))


def _vector_encoder(in_dim: int, sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip([in_dim, *sizes[:-1]], sizes):
        layers += [nn.Linear(a, b), nn.ReLU()]
    return nn.Sequential(*layers)


@dataclass
class PolicyOutput:
    task_logits: torch.Tensor  # [B, n_control]
    acq_logits: torch.Tensor  # [B, n_features], clamped
    value: torch.Tensor  # [B]
    state: tuple[torch.Tensor, torch.Tensor]

    @property
    def acq_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.acq_logits)


class ActorCritic(nn.Module):
    def __init__(self, input_shape: Sequence[int], n_control: int, n_features: int, hidden_size: int = 256,
                 input_proj: Optional[int] = None, encoder: Optional[str] = None,
                 encoder_sizes: Sequence[int] = (), seed: Optional[int] = None):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.n_control = n_control
        self.n_features = n_features
        self.hidden_size = hidden_size
        self._arch = dict(input_shape=list(self.input_shape), n_control=n_control, n_features=n_features,
                          hidden_size=hidden_size, input_proj=input_proj, encoder=encoder,
                          encoder_sizes=list(encoder_sizes))
        # every parameter, including default-initialised ones, derives from ``seed``
        with torch.random.fork_rng(devices=[], enabled=seed is not None):
            if seed is not None:
                torch.manual_seed(seed)
            self._build(encoder, encoder_sizes, input_proj, seed)

    def _build(self, encoder, encoder_sizes, input_proj, seed):
        n_control, n_features, hidden_size = self.n_control, self.n_features, self.hidden_size
        g = torch.Generator().manual_seed(seed) if seed is not None else None
        if encoder == "image":
            self.encoder: nn.Module = ImageEncoder(tuple(encoder_sizes[:2]) or (16, 32),
                                                   encoder_sizes[2] if len(encoder_sizes) > 2 else 1024)
            feat = self.encoder.out_size
        elif encoder == "vector":
            self.encoder = _vector_encoder(int(np.prod(self.input_shape)), encoder_sizes)
            feat = encoder_sizes[-1]
        elif encoder is None:
            self.encoder = nn.Flatten() if len(self.input_shape) > 1 else nn.Identity()
            feat = int(np.prod(self.input_shape))
        else:
            raise ValueError(f"unknown encoder {encoder!r}")
        if input_proj:
            self.proj: nn.Module = nn.Sequential(nn.Linear(feat, input_proj), nn.ReLU())
            feat = input_proj
        else:
            self.proj = nn.Identity()
        self.cell = nn.LSTMCell(feat, hidden_size)
        self.task_head = nn.Linear(hidden_size, n_control)
        self.acq_head = nn.Linear(hidden_size, n_features)
        self.value_head = nn.Linear(hidden_size, 1)

        for module in list(self.proj.modules()) + ([] if encoder == "image" else list(self.encoder.modules())):
            if isinstance(module, nn.Linear):
                normalized_columns_(module.weight, 1.0, g)
                nn.init.zeros_(module.bias)
        normalized_columns_(self.task_head.weight, 0.01, g)
        normalized_columns_(self.acq_head.weight, 0.01, g)
        normalized_columns_(self.value_head.weight, 1.0, g)
        for head in (self.task_head, self.acq_head, self.value_head):
            nn.init.zeros_(head.bias)
        nn.init.zeros_(self.cell.bias_ih)
        nn.init.zeros_(self.cell.bias_hh)

    def architecture(self) -> dict:
        return dict(self._arch)

    def initial_state(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        p = next(self.parameters())
        h = p.new_zeros(batch, self.hidden_size)
        return h, h.clone()

    def forward(self, inputs: torch.Tensor, state: Optional[tuple[torch.Tensor, torch.Tensor]]) -> PolicyOutput:
        if state is None:
            raise ContractViolation("recurrent state not initialised; call initial_state() at episode start")
        h, c = self.cell(self.proj(self.encoder(inputs)), state)
        return PolicyOutput(
            task_logits=self.task_head(h),
            acq_logits=self.acq_head(h).clamp(-ACQ_LOGIT_CLAMP, ACQ_LOGIT_CLAMP),
            value=self.value_head(h).squeeze(-1),
            state=(h, c),
        )


def policy_from_architecture(arch: dict) -> ActorCritic:
    return ActorCritic(**arch)


@dataclass
class ActionSample:
    control: torch.Tensor  # long [B]
    acquisition: torch.Tensor  # bool [B, n_features]
    log_prob: torch.Tensor  # [B], joint log-probability (differentiable)
    entropy: torch.Tensor  # [B]
    value: torch.Tensor  # [B]
    state: tuple[torch.Tensor, torch.Tensor]


def bernoulli_log_prob(logits: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    bits = bits.to(logits.dtype)
    return bits * F.logsigmoid(logits) + (1.0 - bits) * F.logsigmoid(-logits)


def bernoulli_entropy(logits: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits)
    return -(p * F.logsigmoid(logits) + (1.0 - p) * F.logsigmoid(-logits))


def categorical_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1)


def sample_actions(out: PolicyOutput, generator: Optional[torch.Generator] = None, greedy: bool = False,
                   random_acq_prob: Optional[float] = None) -> ActionSample:
    """Draw a joint action from the policy heads.

    With ``random_acq_prob`` the acquisition head is replaced by i.i.d.
    Bernoulli draws and contributes neither log-probability nor entropy.
    """
    logp_c = F.log_softmax(out.task_logits, dim=-1)
    B = logp_c.shape[0]
    if greedy:
        control = out.task_logits.argmax(-1)
    else:
        control = torch.multinomial(logp_c.detach().exp(), 1, generator=generator).squeeze(-1)
    log_prob = logp_c.gather(-1, control.unsqueeze(-1)).squeeze(-1)
    entropy = categorical_entropy(out.task_logits)
    if random_acq_prob is not None:
        u = torch.rand((B, out.acq_logits.shape[-1]), generator=generator, dtype=torch.float64)
        acquisition = u < random_acq_prob
    else:
        probs = torch.sigmoid(out.acq_logits.detach())
        if greedy:
            acquisition = probs > 0.5
        else:
            u = torch.rand(probs.shape, generator=generator, dtype=probs.dtype)
            acquisition = u < probs
        log_prob = log_prob + bernoulli_log_prob(out.acq_logits, acquisition).sum(-1)
        entropy = entropy + bernoulli_entropy(out.acq_logits).sum(-1)
    return ActionSample(control, acquisition, log_prob, entropy, out.value, out.state)


def act(policy: ActorCritic, inputs: torch.Tensor, state, generator: Optional[torch.Generator] = None,
        greedy: bool = False, random_acq_prob: Optional[float] = None) -> ActionSample:
    return sample_actions(policy(inputs, state), generator, greedy, random_acq_prob)


def n_step_returns(rewards: torch.Tensor, costs: torch.Tensor, dones: torch.Tensor,
                   bootstrap: torch.Tensor, gamma: float) -> torch.Tensor:
    """Cost-adjusted returns for ``[T, B]`` rollouts; episodes may end mid-rollout."""
    T = rewards.shape[0]
    out = torch.zeros_like(rewards)
    running = bootstrap
    for t in range(T - 1, -1, -1):
        running = (rewards[t] - costs[t]) + gamma * (1.0 - dones[t]) * running
        out[t] = running
    return out


@dataclass
class LossParts:
    total: torch.Tensor
    policy: torch.Tensor
    value: torch.Tensor
    entropy: torch.Tensor


def a3c_loss(log_probs: torch.Tensor, values: torch.Tensor, entropies: torch.Tensor, rewards, costs, dones,
             bootstrap, cm: CostModel, value_coef: float = 0.5, entropy_coef: float = 0.01) -> LossParts:
    """Actor-critic loss on cost-adjusted n-step returns.

    Inputs are ``[T]`` (single worker) or ``[T, B]``; ``bootstrap`` is the
    value of the state after the last step (ignored where that step was
    terminal).  Terms are summed over time and workers.
    """
    if log_probs.numel() == 0:
        raise ContractViolation("empty rollout")
    as_t = lambda x: torch.as_tensor(x, dtype=values.dtype)  # noqa: E731
    rewards, costs, dones, bootstrap = as_t(rewards), as_t(costs), as_t(dones), as_t(bootstrap)
    returns = n_step_returns(rewards, costs, dones, bootstrap.detach(), cm.discount)
    advantage = (returns - values).detach()
    policy = -(log_probs * advantage).sum()
    value = (returns - values).pow(2).sum()
    entropy = entropies.sum()
    total = policy + value_coef * value - entropy_coef * entropy
    return LossParts(total, policy, value, entropy)

