"""Shared numeric primitives for the contrastive losses and memory updates.

All similarity computations are true cosine similarities: inputs are
re-normalized internally, so callers may pass raw or unit-norm features.
Losses preserve the dtype of their inputs, which keeps float64 verification
runs exact.
"""

from __future__ import annotations

import hashlib

import torch
from torch import Tensor


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    norms = x.norm(dim=dim, keepdim=True)
    if not torch.all(norms > 0):
        raise ValueError("cannot normalize a zero vector")
    return x / norms


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return l2_normalize(a) @ l2_normalize(b).T


def info_nce(query: Tensor, candidates: Tensor, positive_index: int, tau: float) -> Tensor:
    """-log softmax over cosine similarities at temperature ``tau``.

    ``query`` is one feature vector, ``candidates`` a bank of row vectors;
    the row at ``positive_index`` is the positive.
    """
    if candidates.shape[0] == 0:
        raise ValueError("candidate bank is empty")
    sims = cosine_matrix(query.unsqueeze(0), candidates).squeeze(0) / tau
    return -torch.log_softmax(sims, dim=0)[positive_index]


def smoothed_cross_entropy(
    query: Tensor,
    candidates: Tensor,
    target_index: int,
    smoothing: float,
    tau: float = 1.0,
) -> Tensor:
    """Cross-entropy against a smoothed one-hot target over cosine logits.

    The target places ``1 - smoothing + smoothing / K`` on ``target_index``
    and ``smoothing / K`` on each of the K candidates.
    """
    k = candidates.shape[0]
    if k == 0:
        raise ValueError("candidate bank is empty")
    if not 0.0 <= smoothing <= 1.0:
        raise ValueError("smoothing must lie in [0, 1]")
    sims = cosine_matrix(query.unsqueeze(0), candidates).squeeze(0) / tau
    log_probs = torch.log_softmax(sims, dim=0)
    weights = torch.full((k,), smoothing / k, dtype=log_probs.dtype, device=log_probs.device)
    weights[target_index] += 1.0 - smoothing
    return -(weights * log_probs).sum()


@torch.no_grad()
def momentum_update(old: Tensor, new: Tensor, alpha: float) -> Tensor:
    """Blend ``alpha * old + (1 - alpha) * new`` and re-normalize.

    ``alpha == 1`` returns ``old`` untouched (a frozen slot) and
    ``alpha == 0`` returns ``new`` normalized, both without drift from a
    redundant renormalization.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return old
    if alpha == 0.0:
        return l2_normalize(new)
    return l2_normalize(alpha * old + (1.0 - alpha) * new)


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over the module's parameter bytes, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def tensor_checksum(tensor: Tensor) -> str:
    return hashlib.sha256(tensor.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
