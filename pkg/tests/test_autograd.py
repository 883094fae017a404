import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikerecon.autograd import (Tensor, cb_log_norm, cb_nll, concat,
                                 flatten_params, global_norm, logsumexp,
                                 set_flat_params, sgd_step)


def fd_check(build, params, h=1e-5, tol=1e-6):
    """Central finite differences on a scalar graph over a param dict."""
    loss = build()
    loss.backward()
    analytic = np.concatenate([params[k].grad.ravel() for k in sorted(params)])
    flat = flatten_params(params)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        for sign, slot in ((1, 0), (-1, 1)):
            shifted = flat.copy()
            shifted[i] += sign * h
            set_flat_params(params, shifted)
            if slot == 0:
                up = build().data
            else:
                down = build().data
        numeric[i] = (up - down) / (2 * h)
    set_flat_params(params, flat)
    denom = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(analytic - numeric) / denom) <= tol


def test_elementwise_op_gradients():
    rng = np.random.default_rng(0)
    params = {"a": Tensor(rng.normal(size=(3, 4))),
              "b": Tensor(rng.normal(size=(3, 4)))}

    def build():
        a, b = params["a"], params["b"]
        out = (a * b + a.tanh() + b.sigmoid() + a.softplus()
               + (a * a + Tensor(np.full((3, 4), 0.1))).log())
        return (out * out).sum()

    fd_check(build, params)


def test_matmul_concat_getitem_gradients():
    rng = np.random.default_rng(1)
    params = {"w": Tensor(rng.normal(size=(4, 3))),
              "v": Tensor(rng.normal(size=(4, 2)))}
    x = rng.normal(size=(5, 4))

    def build():
        h = concat([Tensor(x) @ params["w"], Tensor(x) @ params["v"]], axis=1)
        return (h[:, 1:4] * h[:, 1:4]).mean()

    fd_check(build, params)


def test_logsumexp_matches_numpy_and_grad():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5)) * 50  # large values: needs the stable form
    t = Tensor(x)
    out = logsumexp(t, axis=1)
    expect = np.log(np.sum(np.exp(x - x.max(1, keepdims=True)), 1)) + x.max(1)
    assert np.allclose(out.data, expect, atol=1e-12)
    params = {"x": Tensor(rng.normal(size=(3, 4)))}
    fd_check(lambda: logsumexp(params["x"], axis=1).sum(), params)


def test_cb_log_norm_series_is_continuous():
    # the closed form degenerates at lambda = 0.5; the series must join it
    lam = np.linspace(0.40, 0.60, 2001)
    vals = cb_log_norm(Tensor(lam)).data
    assert np.all(np.isfinite(vals))
    assert np.max(np.abs(np.diff(vals))) < 1e-3
    assert abs(cb_log_norm(Tensor(np.array([0.5]))).data[0] - np.log(2.0)) < 1e-9


def test_cb_nll_gradient():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.05, 0.95, size=(2, 6))
    params = {"raw": Tensor(rng.normal(size=(2, 6)) * 0.5)}
    fd_check(lambda: cb_nll(params["raw"].sigmoid(), x).sum(), params,
             tol=1e-5)


def test_cb_nll_minimized_at_data():
    # continuous Bernoulli: NLL at lam near x should beat distant lam
    x = np.array([[0.3]])
    near = cb_nll(Tensor(np.array([[0.31]])), x).data
    far = cb_nll(Tensor(np.array([[0.9]])), x).data
    assert near < far


def test_sgd_step_and_clipping():
    p = {"w": Tensor(np.array([3.0, 4.0]))}
    p["w"].grad = np.array([300.0, 400.0])  # norm 500, clipped to 100
    sgd_step(p, lr=0.1, clip_norm=100.0)
    assert np.allclose(p["w"].data, [3.0 - 0.1 * 60.0, 4.0 - 0.1 * 80.0])


def test_sgd_zero_lr_keeps_params():
    p = {"w": Tensor(np.array([1.0, 2.0]))}
    p["w"].grad = np.array([5.0, 5.0])
    sgd_step(p, lr=0.0)
    assert np.allclose(p["w"].data, [1.0, 2.0])


def test_global_norm():
    p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))}
    p["a"].grad = np.array([3.0, 0.0])
    p["b"].grad = np.array([0.0, 4.0])
    assert abs(global_norm(p) - 5.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_logsumexp_dominates_max(vals):
    x = np.array([vals])
    out = logsumexp(Tensor(x), axis=1).data[0]
    assert out >= np.max(x) - 1e-12
    assert out <= np.max(x) + np.log(len(vals)) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_broadcast_add_grad_shapes(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=(3,)))
    ((a + b) * (a + b)).sum().backward()
    assert a.grad.shape == (4, 3)
    assert b.grad.shape == (3,)
