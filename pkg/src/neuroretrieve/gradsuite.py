"""Finite-difference checks of every differentiable building block on small random configurations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .crossmodal import STRATEGIES, NegativeConfig, infonce_loss, negative_mask, project
from .diffcore import DTYPE, GradCheckReport, ParamStore, grad_check
from .encoder import EEGEncoder, EncoderConfig, diffusion_gconv, gated_tcn
from .montage import adaptive_adjacency, build_knn_adjacency, default_montage, transition_matrix
from .pretrain import Forecaster, pretrain_loss

GROUPS = {
    "encoder": ("diffusion_gconv", "gated_tcn", "encode"),
    "loss": ("project", "infonce_loss", "composed"),
    "pretrain": ("pretrain_loss", "forecast"),
}


@dataclass
class CaseResult:
    case: str
    config: int
    report: GradCheckReport

    def line(self) -> str:
        return f"{self.case}[{self.config}] {self.report}"


def _rand(rng: np.random.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return torch.as_tensor(scale * rng.standard_normal(shape), dtype=DTYPE)


def _row_stochastic(rng, V) -> torch.Tensor:
    W = rng.uniform(0.1, 1.0, (V, V))
    return torch.as_tensor(W / W.sum(1, keepdims=True), dtype=DTYPE)


def _small_encoder_cfg(rng) -> EncoderConfig:
    S = int(rng.integers(1, 3))
    return EncoderConfig(
        S=S,
        K=int(rng.integers(1, 3)),
        D=2,
        M=3,
        C_node=2,
        kernel=int(rng.integers(2, 4)),
        dilations=tuple(int(d) for d in rng.integers(1, 3, S)),
        out_dim=4,
    )


@torch.no_grad()
def _jitter(module, rng, scale: float = 0.1):
    # zero-initialized biases would leave relu units exactly at their kink
    for p in module.parameters():
        p.add_(_rand(rng, *p.shape, scale=scale))
    return module


def _montage_P(rng, V) -> np.ndarray:
    return transition_matrix(build_knn_adjacency(default_montage(V), k=min(2, V - 1)))


def case_diffusion_gconv(rng):
    V, C, M, K = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    ps = ParamStore()
    X = ps.add("X", _rand(rng, V, 2, 3, C))
    tw = ps.add("theta_w", _rand(rng, K, C, M, scale=0.5))
    ta = ps.add("theta_a", _rand(rng, K, C, M, scale=0.5))
    e1 = ps.add("node_emb", _rand(rng, V, 2))
    e2 = ps.add("node_emb2", _rand(rng, V, 2))
    P = _row_stochastic(rng, V)
    R = _rand(rng, V, 2, 3, M)
    return (lambda: (diffusion_gconv(X, P, adaptive_adjacency(e1, e2), tw, ta) * R).sum()), ps


def case_gated_tcn(rng):
    V, T, C, M, k = int(rng.integers(1, 7)), int(rng.integers(4, 17)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4))
    d = int(rng.integers(1, 3))
    ps = ParamStore()
    X = ps.add("X", _rand(rng, V, 2, T, C))
    tb = ps.add("theta_b", _rand(rng, k, C, M, scale=0.5))
    tc = ps.add("theta_c", _rand(rng, k, C, M, scale=0.5))
    b = ps.add("b", _rand(rng, M, scale=0.1))
    c = ps.add("c", _rand(rng, M, scale=0.1))
    R = _rand(rng, V, 2, T, M)
    return (lambda: (gated_tcn(X, tb, tc, b, c, d) * R).sum()), ps


def case_encode(rng):
    V, T = int(rng.integers(2, 7)), int(rng.integers(4, 17))
    enc = EEGEncoder(_small_encoder_cfg(rng), _montage_P(rng, V))
    _jitter(enc.init(torch.Generator().manual_seed(int(rng.integers(1 << 31)))), rng)
    E = _rand(rng, 2, V, T)
    return (lambda: (enc(E) ** 2).sum()), ParamStore.from_module(enc)


def case_project(rng):
    N, d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    ps = ParamStore()
    z = ps.add("z", _rand(rng, N, d_in))
    W = ps.add("W", _rand(rng, d_in, d_out))
    b = ps.add("b", _rand(rng, d_out, scale=0.1))
    R = _rand(rng, N, d_out)
    return (lambda: (project(z, W, b) * R).sum()), ps


def _negatives(rng, N):
    strategy = STRATEGIES[int(rng.integers(len(STRATEGIES)))]
    m = "all" if N < 3 or rng.random() < 0.5 else int(rng.integers(1, N - 1))
    neg = NegativeConfig(strategy, m)
    return neg, negative_mask(N, m, rng)


def case_infonce_loss(rng):
    N, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    ps = ParamStore()
    ZE = ps.add("Z_E", _rand(rng, N, d))
    ZI = ps.add("Z_I", _rand(rng, N, d))
    tau = float(rng.uniform(0.2, 1.0))
    neg, mask = _negatives(rng, N)
    return (lambda: infonce_loss(ZE, ZI, tau, neg, mask=mask)), ps


def case_composed(rng):
    from .model import RetrievalModel

    V, T, N, vis = int(rng.integers(2, 7)), int(rng.integers(4, 17)), int(rng.integers(2, 5)), 5
    model = RetrievalModel(_small_encoder_cfg(rng), _montage_P(rng, V), vis_dim=vis, joint_dim=4, tau=0.5, learn_tau=True)
    _jitter(model.init(torch.Generator().manual_seed(int(rng.integers(1 << 31)))), rng)
    E, zI = _rand(rng, N, V, T), _rand(rng, N, vis)
    neg, mask = _negatives(rng, N)
    return (lambda: model.loss(E, zI, neg, mask)), model.trainable()


def case_pretrain_loss(rng):
    V, H = int(rng.integers(1, 7)), int(rng.integers(1, 9))
    ps = ParamStore()
    target = _rand(rng, 2, V, H)
    F = ps.add("forecast", _rand(rng, 2, V, H))
    return (lambda: pretrain_loss(target, F)), ps


def case_forecast(rng):
    V, T, H = int(rng.integers(2, 7)), int(rng.integers(4, 13)), int(rng.integers(1, 5))
    enc = EEGEncoder(_small_encoder_cfg(rng), _montage_P(rng, V))
    model = _jitter(Forecaster(enc, H, T).init(torch.Generator().manual_seed(int(rng.integers(1 << 31)))), rng)
    past, future = _rand(rng, 2, V, T), _rand(rng, 2, V, H)
    return (lambda: pretrain_loss(future, model(past))), ParamStore.from_module(model)


CASES = {
    "diffusion_gconv": case_diffusion_gconv,
    "gated_tcn": case_gated_tcn,
    "encode": case_encode,
    "project": case_project,
    "infonce_loss": case_infonce_loss,
    "composed": case_composed,
    "pretrain_loss": case_pretrain_loss,
    "forecast": case_forecast,
}


def run_suite(group: str = "all", n_configs: int = 5, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[CaseResult]:
    if group == "all":
        names = [n for g in GROUPS.values() for n in g]
    elif group in GROUPS:
        names = list(GROUPS[group])
    elif group in CASES:
        names = [group]
    else:
        raise ValueError(f"unknown gradcheck target {group!r}; choose all, {', '.join(GROUPS)} or a case name")
    out = []
    for name in names:
        for i in range(n_configs):
            rng = np.random.default_rng([seed, i, list(CASES).index(name)])
            loss_fn, params = CASES[name](rng)
            out.append(CaseResult(name, i, grad_check(loss_fn, params, eps=eps, tol=tol)))
    return out
