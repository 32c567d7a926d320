import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from neuroretrieve.diffcore import (
    DTYPE,
    NonFiniteLossError,
    OptimizerState,
    ParamStore,
    evaluate_with_gradients,
    glorot_,
    grad_check,
    numerical_gradient,
    step,
)


def small_net(seed=0):
    g = torch.Generator().manual_seed(seed)
    ps = ParamStore()
    w1 = ps.add("w1", torch.randn(3, 4, generator=g, dtype=DTYPE))
    b1 = ps.add("b1", torch.randn(4, generator=g, dtype=DTYPE))
    w2 = ps.add("w2", torch.randn(4, 2, generator=g, dtype=DTYPE))
    x = torch.randn(5, 3, generator=g, dtype=DTYPE)
    return (lambda: (torch.tanh(x @ w1 + b1) @ w2).pow(2).sum()), ps


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_passes_on_small_network(seed):
    loss_fn, ps = small_net(seed)
    report = grad_check(loss_fn, ps, eps=1e-5, tol=1e-4)
    assert report.passed, str(report)
    assert report.n_evals == 2 * sum(t.numel() for _, t in ps.items())


def test_grad_check_detects_a_wrong_gradient():
    loss_fn, ps = small_net()
    _, grads = evaluate_with_gradients(loss_fn, ps)
    grads["b1"] = grads["b1"] * 1.01
    report = grad_check(loss_fn, ps, analytic=grads)
    assert not report.passed and max(report.rel_errors, key=report.rel_errors.get) == "b1"


def test_grad_check_entry_sampling():
    loss_fn, ps = small_net()
    report = grad_check(loss_fn, ps, max_entries=2)
    assert report.passed and report.n_evals == 2 * 2 * 3


@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_numerical_gradient_of_quadratic(a, b):
    t = torch.tensor([a, b], dtype=DTYPE)
    g = numerical_gradient(lambda: (t**2).sum() + 3 * t[0], t, 1e-5)
    np.testing.assert_allclose(g.numpy(), [2 * a + 3, 2 * b], atol=1e-8)
    assert t.tolist() == [a, b]


def test_nonfinite_loss_names_the_op():
    ps = ParamStore()
    p = ps.add("p", torch.tensor([-1.0, 2.0], dtype=DTYPE))
    with pytest.raises(NonFiniteLossError) as info:
        evaluate_with_gradients(lambda: torch.log(p).sum() * 2, ps)
    assert info.value.op == "log"


def test_param_store_validation():
    ps = ParamStore()
    ps.add("a", torch.zeros(2, dtype=DTYPE))
    with pytest.raises(KeyError):
        ps.add("a", torch.zeros(2, dtype=DTYPE))
    with pytest.raises(TypeError):
        ps.add("b", torch.zeros(2, dtype=torch.float32))
    with pytest.raises(ValueError):
        ps.load({"a": np.zeros(3)})
    with pytest.raises(KeyError):
        ps.load({})
    ps.load({"a": np.array([1.0, 2.0])})
    assert ps.numpy()["a"].tolist() == [1.0, 2.0]
    assert ps.subset("a").names() == ["a"] and ps.shapes() == {"a": (2,)}


def numpy_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


@given(seed=st.integers(0, 2**16), n=st.integers(1, 12))
def test_adam_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    p0 = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(n)]
    ps = ParamStore({"p": torch.tensor(p0, dtype=DTYPE)})
    state = OptimizerState(lr=0.01)
    for g in grads:
        step(ps, {"p": torch.tensor(g, dtype=DTYPE)}, state)
    np.testing.assert_allclose(ps["p"].detach().numpy(), numpy_adam(p0, grads, lr=0.01), rtol=1e-12, atol=1e-14)
    assert state.step_count == n


def test_adam_descends_on_square():
    ps = ParamStore({"p": torch.tensor([1.0], dtype=DTYPE)})
    state = OptimizerState(lr=0.1)
    _, g = evaluate_with_gradients(lambda: (ps["p"] ** 2).sum(), ps)
    step(ps, g, state)
    assert abs(ps["p"].item()) < 1.0


def test_frozen_parameters_do_not_move():
    ps = ParamStore({"a": torch.ones(2, dtype=DTYPE), "b": torch.ones(2, dtype=DTYPE)})
    g = {"a": torch.ones(2, dtype=DTYPE), "b": torch.ones(2, dtype=DTYPE)}
    step(ps, g, OptimizerState(), frozen=["b"])
    assert torch.all(ps["b"] == 1) and torch.all(ps["a"] < 1)


def test_optimizer_state_restore_continues_identically():
    rng = np.random.default_rng(0)
    grads = [{"p": torch.tensor(rng.standard_normal(3), dtype=DTYPE)} for _ in range(6)]
    a = ParamStore({"p": torch.zeros(3, dtype=DTYPE)})
    sa = OptimizerState()
    for g in grads:
        step(a, g, sa)
    b = ParamStore({"p": torch.zeros(3, dtype=DTYPE)})
    sb = OptimizerState()
    for g in grads[:3]:
        step(b, g, sb)
    sb = OptimizerState.restore(sb.meta(), sb.tensors())
    for g in grads[3:]:
        step(b, g, sb)
    assert a["p"].detach().numpy().tobytes() == b["p"].detach().numpy().tobytes()


@given(fan_in=st.integers(1, 50), fan_out=st.integers(1, 50))
def test_glorot_bounds(fan_in, fan_out):
    t = torch.empty(fan_in, fan_out, dtype=DTYPE)
    glorot_(t, torch.Generator().manual_seed(0), fan_in, fan_out)
    assert t.abs().max().item() <= math.sqrt(6 / (fan_in + fan_out))
