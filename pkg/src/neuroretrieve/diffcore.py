"""Parameter registry, gradient evaluation, finite-difference checking and the optimizer.

Reverse-mode derivatives come from torch autograd running in float64. The
finite-difference checker only ever calls the forward loss, so it stays an
independent check on the analytic gradients.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64


class NonFiniteLossError(FloatingPointError):
    def __init__(self, op: str | None, value=None):
        self.op = op
        super().__init__(f"non-finite loss ({value}); first non-finite value produced by {op or 'unknown op'}")


class ParamStore:
    """Ordered name -> float64 tensor mapping with attached gradient buffers."""

    def __init__(self, tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]] = ()):
        self._t: OrderedDict[str, torch.Tensor] = OrderedDict()
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        for name, t in items:
            self.add(name, t)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(module.named_parameters())

    def add(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self._t:
            raise KeyError(f"parameter {name!r} already registered")
        if tensor.dtype != DTYPE:
            raise TypeError(f"parameter {name!r} must be float64, got {tensor.dtype}")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self._t[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore((n, t) for n, t in self._t.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)) for n, t in self._t.items()}

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().numpy().copy() for n, t in self._t.items()}

    def shapes(self) -> dict[str, tuple]:
        return {n: tuple(t.shape) for n, t in self._t.items()}

    @torch.no_grad()
    def load(self, values: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._t) - set(values)
            if missing:
                raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, v in values.items():
            if name not in self._t:
                raise KeyError(f"unknown tensor {name!r}")
            v = torch.as_tensor(np.asarray(v), dtype=DTYPE)
            if v.shape != self._t[name].shape:
                raise ValueError(f"{name}: shape {tuple(v.shape)} != {tuple(self._t[name].shape)}")
            self._t[name].copy_(v)


class _FirstNonFinite(TorchFunctionMode):
    def __init__(self):
        super().__init__()
        self.op = None

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if self.op is None:
            for t in out if isinstance(out, (tuple, list)) else (out,):
                if isinstance(t, torch.Tensor) and t.is_floating_point() and not torch.isfinite(t).all():
                    self.op = getattr(func, "__name__", repr(func))
                    break
        return out


def trace_nonfinite(fn: Callable[[], torch.Tensor]) -> str | None:
    """Re-run ``fn`` and return the name of the first op yielding a non-finite value."""
    mode = _FirstNonFinite()
    with torch.no_grad(), mode:
        fn()
    return mode.op


def evaluate_with_gradients(loss_fn: Callable[[], torch.Tensor], params: ParamStore) -> tuple[float, dict[str, torch.Tensor]]:
    params.zero_grad()
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(trace_nonfinite(loss_fn), loss.item())
    loss.backward()
    return loss.item(), params.grads()


@dataclass
class GradCheckReport:
    rel_errors: dict[str, float]
    tol: float
    n_evals: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        worst = max(self.rel_errors, key=self.rel_errors.get) if self.rel_errors else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max rel err {self.max_rel_error:.3e} (worst {worst}, tol {self.tol:g})"


@torch.no_grad()
def numerical_gradient(loss_fn, tensor: torch.Tensor, eps: float, entries=None) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()) if entries is None else entries:
        orig = flat[i].item()
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    analytic: Mapping[str, torch.Tensor] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, tensor by tensor.

    The per-tensor error is ``max|g_a - g_n| / max(max|g_a|, max|g_n|)``.
    ``analytic`` overrides the autograd gradients (used to inject faults).
    ``max_entries`` caps the entries probed per tensor (sampled with ``seed``).
    """
    if analytic is None:
        _, analytic = evaluate_with_gradients(loss_fn, params)
    rng = np.random.default_rng(seed)
    errors = {}
    n_evals = 0
    for name, t in params.items():
        n = t.numel()
        entries = None
        if max_entries is not None and n > max_entries:
            entries = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        num = numerical_gradient(loss_fn, t.data, eps, entries)
        ana = analytic[name].detach().reshape(-1)
        num = num.reshape(-1)
        if entries is not None:
            ana, num = ana[entries], num[entries]
        n_evals += 2 * (n if entries is None else len(entries))
        scale = max(ana.abs().max().item(), num.abs().max().item())
        diff = (ana - num).abs().max().item()
        errors[name] = 0.0 if scale == 0 else diff / scale
    return GradCheckReport(rel_errors=errors, tol=tol, n_evals=n_evals)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    algorithm: str = "adam"
    step_count: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": t.numpy() for n, t in self.m.items()}
        out.update({f"v.{n}": t.numpy() for n, t in self.v.items()})
        return out

    def meta(self) -> dict:
        return dict(algorithm=self.algorithm, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, step_count=self.step_count)

    @classmethod
    def restore(cls, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> "OptimizerState":
        st = cls(**{k: meta[k] for k in ("lr", "beta1", "beta2", "eps", "algorithm", "step_count")})
        for key, arr in tensors.items():
            kind, name = key.split(".", 1)
            getattr(st, kind)[name] = torch.as_tensor(np.array(arr), dtype=DTYPE)
        return st


@torch.no_grad()
def step(params: ParamStore, grads: Mapping[str, torch.Tensor], state: OptimizerState, frozen: Iterable[str] = ()) -> None:
    """One Adam update (bias-corrected moments), in place."""
    frozen = set(frozen)
    state.step_count += 1
    t = state.step_count
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, p in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)


def glorot_(t: torch.Tensor, gen: torch.Generator, fan_in: int, fan_out: int) -> torch.Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=DTYPE) * 2 * a - a)
    return t
