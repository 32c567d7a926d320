"""Joint-space projections, temperature-scaled similarities and the contrastive objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffcore import DTYPE, glorot_

STRATEGIES = ("none", "eeg_only", "image_only", "both")


class ZeroNormError(ValueError):
    pass


@dataclass(frozen=True)
class NegativeConfig:
    strategy: str = "both"
    sample_size: int | str = "all"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.sample_size != "all" and (not isinstance(self.sample_size, int) or self.sample_size < 1):
            raise ValueError(f"sample_size must be a positive int or 'all', got {self.sample_size!r}")

    @property
    def eeg_terms(self) -> bool:
        return self.strategy in ("eeg_only", "both")

    @property
    def image_terms(self) -> bool:
        return self.strategy in ("image_only", "both")


class Projection(nn.Module):
    """relu(z @ W + b) into the joint space; ``b`` starts slightly positive."""

    def __init__(self, in_dim: int, joint_dim: int, bias_init: float = 0.01):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, joint_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.full((joint_dim,), bias_init, dtype=DTYPE))

    def init(self, gen):
        glorot_(self.weight, gen, *self.weight.shape)
        return self

    def forward(self, z):
        return project(z, self.weight, self.bias)


def project(z: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    pre = z @ weight
    if bias is not None:
        pre = pre + bias
    return torch.relu(pre)


def _unit_rows(Z: torch.Tensor) -> torch.Tensor:
    norms = Z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        rows = torch.nonzero(norms.reshape(-1) == 0).reshape(-1).tolist()
        raise ZeroNormError(f"zero-norm embedding rows {rows}")
    return Z / norms


def cosine_matrix(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    return _unit_rows(A) @ _unit_rows(B).T


def similarity(a, b, tau: float) -> float:
    """exp(cos(a, b) / tau)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError("similarity of a zero vector is undefined")
    return math.exp(float(a @ b) / (na * nb) / tau)


def similarity_matrix(Z_E: torch.Tensor, Z_I: torch.Tensor, tau: float) -> torch.Tensor:
    """Entry (i, j) = exp(cos(eeg_i, image_j) / tau); rows are EEG queries."""
    return torch.exp(cosine_matrix(Z_E, Z_I) / tau)


def negative_mask(N: int, sample_size, generator: np.random.Generator | None = None) -> torch.Tensor:
    """(N, N) bool mask of the negatives j drawn for each anchor i (never j == i)."""
    off = ~torch.eye(N, dtype=torch.bool)
    if sample_size == "all" or sample_size >= N - 1:
        return off
    if generator is None:
        raise ValueError("subsampled negatives need a random generator")
    mask = torch.zeros(N, N, dtype=torch.bool)
    for i in range(N):
        others = np.delete(np.arange(N), i)
        mask[i, generator.choice(others, size=sample_size, replace=False)] = True
    return mask


def infonce_loss(
    Z_E: torch.Tensor,
    Z_I: torch.Tensor,
    tau,
    neg: NegativeConfig = NegativeConfig(),
    generator: np.random.Generator | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over anchors of -log(s_ii / (s_ii + sum over sampled negatives j)).

    Every sampled j contributes the two cross-modal mismatches s(E_i, I_j) and
    s(E_j, I_i); the strategy adds s(E_i, E_j) and/or s(I_i, I_j). Pass a
    fixed ``mask`` (see ``negative_mask``) to reuse one draw of negatives.
    """
    N = Z_E.shape[0]
    if N < 1:
        raise ValueError("need at least one pair")
    if Z_I.shape[0] != N:
        raise ValueError(f"{N} EEG rows vs {Z_I.shape[0]} image rows")
    if N == 1:
        _unit_rows(Z_E), _unit_rows(Z_I)
        return (Z_E.sum() + Z_I.sum()) * 0.0
    uE, uI = _unit_rows(Z_E), _unit_rows(Z_I)
    c_ei = uE @ uI.T
    blocks = [c_ei, c_ei.T]
    if neg.eeg_terms:
        blocks.append(uE @ uE.T)
    if neg.image_terms:
        blocks.append(uI @ uI.T)
    if mask is None:
        mask = negative_mask(N, neg.sample_size, generator)
    neg_logits = torch.cat([b / tau for b in blocks], dim=1)
    neg_logits = neg_logits.masked_fill(~mask.repeat(1, len(blocks)), float("-inf"))
    pos = torch.diagonal(c_ei) / tau
    logits = torch.cat([pos[:, None], neg_logits], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos).mean()
