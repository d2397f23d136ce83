import numpy as np
import pytest

from centermix.engine import Graph, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_check(params, loss_fn, *, rng, n_components=25,
                            rel_tol=None, h_scale=None):
    """Compare taped gradients against central finite differences.

    loss_fn must rebuild the forward pass from the current parameter
    values and return a scalar Tensor. A random subset of parameter
    components is probed with h = h_scale * (1 + |theta|); the relative
    error uses max(|analytic|, |numeric|, 1) as denominator so that
    near-zero gradients are judged on absolute error. The default step
    is 1e-3 in float32 (roundoff-limited) and 1e-5 in float64
    (truncation-limited).
    """
    dtype = params[0].dtype
    if rel_tol is None:
        rel_tol = 1e-3 if dtype == np.float32 else 1e-6
    if h_scale is None:
        h_scale = 1e-3 if dtype == np.float32 else 1e-5

    g = Graph()
    with g.recording():
        loss = loss_fn()
    backward(g, loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for pi, p in enumerate(params):
        assert analytic[pi] is not None, f"parameter {pi} received no gradient"
        flat = p.data.reshape(-1)
        n = min(n_components, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        for j in picks:
            theta = flat[j]
            h = dtype.type(h_scale * (1.0 + abs(theta)))
            flat[j] = theta + h
            lp = loss_fn().item()
            flat[j] = theta - h
            lm = loss_fn().item()
            flat[j] = theta
            numeric = (lp - lm) / (2.0 * float(h))
            a = float(analytic[pi].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
            assert err < rel_tol, (
                f"grad mismatch at param {pi}[{j}]: analytic={a} numeric={numeric} err={err}"
            )
    return worst


def run_graph(fn):
    """Record fn() on a fresh graph and return (graph, output)."""
    g = Graph()
    with g.recording():
        out = fn()
    return g, out


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)
