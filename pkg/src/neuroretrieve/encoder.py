"""Temporal graph convolution EEG encoder and the forecasting head used for pre-training.

Raw clips enter as (B, V, T). Inside the encoder node features use a
node-first, channels-last layout (V, B, T, C): node mixing is then one GEMM
over the leading axis and channel mixing one GEMM over the trailing axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import DTYPE, glorot_
from .montage import adaptive_adjacency


@dataclass
class EncoderConfig:
    S: int = 2
    K: int = 2
    D: int = 16
    M: int = 32
    C_node: int = 10
    kernel: int = 3
    dilations: tuple = (1, 2)
    out_dim: int = 128
    readout: str = "all_blocks"  # or "last_block"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        for name in ("S", "K", "D", "M", "C_node", "kernel", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder.{name} must be >= 1")
        if len(self.dilations) != self.S or min(self.dilations) < 1:
            raise ValueError(f"need {self.S} positive dilations, got {self.dilations}")
        if self.readout not in ("all_blocks", "last_block"):
            raise ValueError(f"unknown readout {self.readout!r}")


def lift_input(E: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Shared scalar -> D map applied to every node and timestep: (...) -> (..., D)."""
    return E.unsqueeze(-1) * weight + bias


def node_mix(P: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
    """P @ X over the leading (node) axis of X: (V, ...) -> (V, ...)."""
    return (P @ X.reshape(X.shape[0], -1)).reshape(X.shape)


def diffusion_gconv(X, P, A, theta_w, theta_a) -> torch.Tensor:
    """Sum over k < K of P^k X theta_w[k] + A^k X theta_a[k].

    X: (V, ..., C) with the node axis first (a plain V x C time slice works);
    theta_w, theta_a: (K, C, M). Returns (V, ..., M).
    """
    K = theta_w.shape[0]
    if K < 1:
        raise ValueError("diffusion needs K >= 1")
    terms, weights = [X], [theta_w[0] + theta_a[0]]
    xp = xa = X
    for k in range(1, K):
        xp, xa = node_mix(P, xp), node_mix(A, xa)
        terms += [xp, xa]
        weights += [theta_w[k], theta_a[k]]
    return torch.cat(terms, dim=-1) @ torch.cat(weights, dim=0)


def causal_conv(X: torch.Tensor, weight: torch.Tensor, dilation: int = 1) -> torch.Tensor:
    """Length-preserving causal convolution along axis -2 of X (..., T, C_in).

    weight: (kernel, C_in, C_out); tap j multiplies x[t - j * dilation].
    """
    k = weight.shape[0]
    T = X.shape[-2]
    pad = (k - 1) * dilation
    Xp = F.pad(X, (0, 0, pad, 0))
    taps = [Xp[..., pad - j * dilation : pad - j * dilation + T, :] for j in range(k)]
    return torch.cat(taps, dim=-1) @ weight.reshape(-1, weight.shape[-1])


def gated_tcn(X, theta_b, theta_c, b, c, dilation: int = 1) -> torch.Tensor:
    """tanh(theta_b * X + b) * sigmoid(theta_c * X + c), causal in time.

    X: (..., T, M); theta_b, theta_c: (kernel, M, M_out).
    """
    both = causal_conv(X, torch.cat([theta_b, theta_c], dim=-1), dilation)
    m = theta_b.shape[-1]
    return torch.tanh(both[..., :m] + b) * torch.sigmoid(both[..., m:] + c)


class TGCNBlock(nn.Module):
    def __init__(self, c_in: int, cfg: EncoderConfig, dilation: int):
        super().__init__()
        K, M, k = cfg.K, cfg.M, cfg.kernel
        self.dilation = dilation
        self.theta_w = nn.Parameter(torch.empty(K, c_in, M, dtype=DTYPE))
        self.theta_a = nn.Parameter(torch.empty(K, c_in, M, dtype=DTYPE))
        self.tcn_b = nn.Parameter(torch.empty(k, M, M, dtype=DTYPE))
        self.tcn_c = nn.Parameter(torch.empty(k, M, M, dtype=DTYPE))
        self.bias_b = nn.Parameter(torch.zeros(M, dtype=DTYPE))
        self.bias_c = nn.Parameter(torch.zeros(M, dtype=DTYPE))

    def init(self, gen):
        _, c_in, M = self.theta_w.shape
        glorot_(self.theta_w, gen, c_in, M)
        glorot_(self.theta_a, gen, c_in, M)
        k = self.tcn_b.shape[0]
        glorot_(self.tcn_b, gen, M * k, M)
        glorot_(self.tcn_c, gen, M * k, M)

    def forward(self, x, P, A):
        # x: (V, B, T, C); graph convolution acts on every time slice independently
        g = diffusion_gconv(x, P, A, self.theta_w, self.theta_a)
        return gated_tcn(g, self.tcn_b, self.tcn_c, self.bias_b, self.bias_c, self.dilation)


class EEGEncoder(nn.Module):
    """Lift -> S x (diffusion GCN + gated TCN) -> node-sum/time-mean readout -> MLP."""

    def __init__(self, cfg: EncoderConfig, P: np.ndarray):
        super().__init__()
        self.cfg = cfg
        V = P.shape[0]
        self.register_buffer("P", torch.as_tensor(np.asarray(P), dtype=DTYPE))
        self.lift_w = nn.Parameter(torch.empty(cfg.D, dtype=DTYPE))
        self.lift_b = nn.Parameter(torch.zeros(cfg.D, dtype=DTYPE))
        self.node_emb = nn.Parameter(torch.empty(V, cfg.C_node, dtype=DTYPE))
        self.node_emb2 = nn.Parameter(torch.empty(V, cfg.C_node, dtype=DTYPE))
        self.blocks = nn.ModuleList(
            TGCNBlock(cfg.D if s == 0 else cfg.M, cfg, cfg.dilations[s]) for s in range(cfg.S)
        )
        self.read_w1 = nn.Parameter(torch.empty(cfg.M, cfg.out_dim, dtype=DTYPE))
        self.read_b1 = nn.Parameter(torch.zeros(cfg.out_dim, dtype=DTYPE))
        self.read_w2 = nn.Parameter(torch.empty(cfg.out_dim, cfg.out_dim, dtype=DTYPE))
        self.read_b2 = nn.Parameter(torch.zeros(cfg.out_dim, dtype=DTYPE))

    @property
    def n_nodes(self) -> int:
        return self.P.shape[0]

    def init(self, gen: torch.Generator):
        cfg = self.cfg
        glorot_(self.lift_w, gen, 1, cfg.D)
        with torch.no_grad():
            self.node_emb.copy_(0.1 * torch.randn(self.node_emb.shape, generator=gen, dtype=DTYPE))
            self.node_emb2.copy_(0.1 * torch.randn(self.node_emb2.shape, generator=gen, dtype=DTYPE))
        for blk in self.blocks:
            blk.init(gen)
        glorot_(self.read_w1, gen, cfg.M, cfg.out_dim)
        glorot_(self.read_w2, gen, cfg.out_dim, cfg.out_dim)
        return self

    def adjacency(self) -> torch.Tensor:
        return adaptive_adjacency(self.node_emb, self.node_emb2)

    def features(self, E: torch.Tensor) -> list[torch.Tensor]:
        """Outputs h^(s) of every block for clips E (B, V, T); each (V, B, T, M)."""
        if E.shape[-2] != self.n_nodes:
            raise ValueError(f"clip has {E.shape[-2]} channels, montage has {self.n_nodes}")
        A = self.adjacency()
        x = lift_input(E.transpose(0, 1), self.lift_w, self.lift_b)
        outs = []
        for blk in self.blocks:
            x = blk(x, self.P, A)
            outs.append(x)
        return outs

    def skip_sum(self, outs: list[torch.Tensor]) -> torch.Tensor:
        return outs[-1] if self.cfg.readout == "last_block" else sum(outs)

    def readout(self, H: torch.Tensor) -> torch.Tensor:
        pooled = H.sum(dim=0).mean(dim=-2)  # nodes summed, time averaged -> (B, M)
        return torch.relu(pooled @ self.read_w1 + self.read_b1) @ self.read_w2 + self.read_b2

    def forward(self, E: torch.Tensor) -> torch.Tensor:
        squeeze = E.dim() == 2
        if squeeze:
            E = E[None]
        z = self.readout(self.skip_sum(self.features(E)))
        return z[0] if squeeze else z


class ForecastHead(nn.Module):
    """One gated TCN block over encoder node features, then a linear map (shared
    across nodes) from a node's whole feature sequence to ``horizon`` values."""

    def __init__(self, M: int, horizon: int, window: int, kernel: int = 3, dilation: int = 1):
        super().__init__()
        self.horizon, self.window = horizon, window
        self.dilation = dilation
        self.tcn_b = nn.Parameter(torch.empty(kernel, M, M, dtype=DTYPE))
        self.tcn_c = nn.Parameter(torch.empty(kernel, M, M, dtype=DTYPE))
        self.bias_b = nn.Parameter(torch.zeros(M, dtype=DTYPE))
        self.bias_c = nn.Parameter(torch.zeros(M, dtype=DTYPE))
        self.out_w = nn.Parameter(torch.empty(window * M, horizon, dtype=DTYPE))
        self.out_b = nn.Parameter(torch.zeros(horizon, dtype=DTYPE))

    def init(self, gen):
        k, M, _ = self.tcn_b.shape
        glorot_(self.tcn_b, gen, M * k, M)
        glorot_(self.tcn_c, gen, M * k, M)
        glorot_(self.out_w, gen, self.out_w.shape[0], self.horizon)
        return self

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        """H: (V, B, window, M) block features -> forecast (B, V, horizon)."""
        if H.shape[-2] != self.window:
            raise ValueError(f"head expects {self.window} timesteps, got {H.shape[-2]}")
        h = gated_tcn(H, self.tcn_b, self.tcn_c, self.bias_b, self.bias_c, self.dilation)
        return (h.flatten(-2) @ self.out_w + self.out_b).transpose(0, 1)
