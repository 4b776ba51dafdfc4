"""Small builders shared by several test modules."""

import numpy as np
import torch

from afa_pomdp.representation import SequenceBatch, build_model

TINY_SEQ = dict(obs_proj_sizes=(5, 3), action_proj_size=3, fuse_sizes=(6, 4), lstm_size=4, decoder_sizes=(5,))
TINY_NONSEQ = dict(encoder_sizes=(5, 4), decoder_sizes=(5,))


def tiny_model(kind, n_feat, action_dim, dz, seed, dtype=torch.float64):
    torch.manual_seed(seed)
    sizes = TINY_SEQ if kind == "seq-po-vae" else TINY_NONSEQ
    return build_model(kind, (n_feat,), action_dim, dz, **sizes).to(dtype)


def random_batch(rng, B, T, D, A, dtype=torch.float64, padded=True):
    full = rng.normal(size=(B, T, D))
    obs = rng.random((B, T, D)) < 0.5
    sup = obs | (rng.random((B, T, D)) < 0.5)
    acts = rng.normal(size=(B, T, A))
    lengths = rng.integers(1, T + 1, size=B) if padded else np.full(B, T)
    lengths[0] = T
    valid = np.arange(T)[None, :] < lengths[:, None]
    return SequenceBatch(
        full=torch.tensor(full, dtype=dtype),
        obs_mask=torch.tensor(obs),
        sup_mask=torch.tensor(sup),
        prev_actions=torch.tensor(acts, dtype=dtype),
        valid=torch.tensor(valid),
    )


def batch_numpy(batch):
    return (batch.full.double().numpy(), batch.obs_mask.numpy(), batch.sup_mask.numpy(),
            batch.prev_actions.double().numpy(), batch.valid.numpy())
