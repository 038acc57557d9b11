import numpy as np
import pytest

from fscert import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


OPS = {
    "tanh": lambda t: ad.tsum(ad.tanh(t)),
    "gelu": lambda t: ad.tsum(ad.gelu(t)),
    "softplus": lambda t: ad.tsum(ad.softplus(t) * t),
    "exp_log": lambda t: ad.tsum(ad.log(ad.exp(t) + 1.0)),
    "sqrt": lambda t: ad.tsum(ad.sqrt(t * t + 1.0)),
    "power": lambda t: ad.tsum((t * t + 0.5) ** 1.5),
    "div": lambda t: ad.tsum(t / (t * t + 2.0)),
    "normalize": lambda t: ad.tsum(ad.normalize_rows(t) * np.arange(12.0).reshape(3, 4)),
    "cosine": lambda t: ad.tsum(ad.cosine_rows(t, np.ones((3, 4)))),
    "logsumexp": lambda t: ad.tsum(ad.logsumexp(t, axis=1)),
    "max": lambda t: ad.tsum(ad.tmax(t, axis=1) * 2.0),
    "mean_keep": lambda t: ad.tsum(ad.tmean(t, axis=0, keepdims=True) * t),
    "matmul": lambda t: ad.tsum(t @ np.arange(8.0).reshape(4, 2)),
    "transpose_reshape": lambda t: ad.tsum(ad.reshape(t.T, (2, 6)) * np.arange(12.0).reshape(2, 6)),
    "broadcast": lambda t: ad.tsum(t * ad.Tensor(np.arange(4.0))),
    "sub_neg": lambda t: ad.tsum(-(1.0 - t) * t),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    f = OPS[name]
    t = ad.Tensor(x.copy(), requires_grad=True)
    f(t).backward()
    num = numeric_grad(lambda v: float(f(ad.Tensor(v)).data), x.copy())
    assert np.allclose(t.grad, num, rtol=1e-6, atol=1e-7)


def test_broadcast_parameter_gradient():
    b = ad.Tensor(np.zeros(4), requires_grad=True)
    x = np.ones((5, 4))
    ad.tsum(x + b).backward()
    assert np.array_equal(b.grad, np.full(4, 5.0))


def test_reused_node_accumulates():
    t = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = t * t
    ad.tsum(y + y).backward()
    assert t.grad[0] == 8.0


def test_constants_get_no_grad():
    c = ad.Tensor(np.ones(3))
    t = ad.Tensor(np.ones(3), requires_grad=True)
    ad.tsum(c * t).backward()
    assert c.grad is None
    assert np.array_equal(t.grad, np.ones(3))


def test_gradients_helper_zero_for_unused():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    b = ad.Tensor(np.ones(2), requires_grad=True)
    ga, gb = ad.gradients(ad.tsum(a * 3.0), [a, b])
    assert np.array_equal(ga, [3.0, 3.0]) and np.array_equal(gb, [0.0, 0.0])
