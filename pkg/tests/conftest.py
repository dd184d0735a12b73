"""Shared helpers: finite-difference oracle, per-kind random instances."""

from __future__ import annotations

import numpy as np
import pytest

try:  # small GEMMs run fastest (and timings stay stable) single-threaded
    import threadpoolctl
    _limits = threadpoolctl.threadpool_limits(limits=1)
except ImportError:  # pragma: no cover
    _limits = None

from visitgan import autodiff as ad

FD_STEP = 1e-6


def central_diff(forward, leaves, step=FD_STEP):
    """Central finite differences of a recomputed scalar wrt each leaf array.

    ``forward`` must rebuild the expression from the leaves' current values
    and return a float; this keeps the oracle independent of the engine's
    backward pass.
    """
    out = {}
    for node in leaves:
        grad = np.zeros_like(node.value)
        flat_v = node.value.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + step
            fp = forward()
            flat_v[i] = orig - step
            fm = forward()
            flat_v[i] = orig
            flat_g[i] = (fp - fm) / (2.0 * step)
        out[node] = grad
    return out


def max_rel_err(a, b, floor=1e-4):
    """Worst-case guarded relative error: |a-b| / max(|a|, |b|, floor).

    The floor marks the oracle's measurability limit: at step 1e-6 in float64
    the central difference carries absolute roundoff noise of about
    |f| * 1e-16 / 2e-6 (~1e-9 for the losses tested here), so entries smaller
    than the floor cannot be certified to 1e-5 relative error by any correct
    implementation; they are held to the same noise budget in absolute terms.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def check_gradients(forward, leaves, tol, step=FD_STEP):
    """Assert engine gradients match the finite-difference oracle."""
    analytic = ad.backward(forward_node(forward))
    numeric = central_diff(lambda: float(forward().value), leaves, step=step)
    worst = 0.0
    for node in leaves:
        assert node in analytic, f"missing gradient for {node}"
        worst = max(worst, max_rel_err(analytic[node], numeric[node]))
    assert worst < tol, f"gradient mismatch: rel err {worst} >= {tol}"
    return worst


def forward_node(forward):
    out = forward()
    assert isinstance(out, ad.Node)
    return out


# ---------------------------------------------------------------------------
# randomized instances for every primitive kind
# ---------------------------------------------------------------------------

def _unit(rng, shape, low=-2.0, high=2.0):
    return ad.leaf(rng.uniform(low, high, shape), requires_grad=True)


def _scalarize(node, weights):
    """Mix a tensor into a scalar with fixed random weights so upstream
    gradients are nontrivial."""
    return ad.sum(ad.mul(node, ad.constant(weights)))


def kind_instance(kind, rng):
    """(forward, leaves) for one random small instance of the given kind."""
    if kind == "matmul":
        a, b = _unit(rng, (3, 4)), _unit(rng, (4, 2))
        w = rng.uniform(-1, 1, (3, 2))
        return lambda: _scalarize(ad.matmul(a, b), w), [a, b]
    if kind in ("add", "sub", "mul", "div"):
        a = _unit(rng, (3, 4))
        if kind == "div":
            raw = rng.uniform(0.3, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
            b = ad.leaf(raw, requires_grad=True)
        else:
            b = _unit(rng, (3, 4)) if rng.random() < 0.5 else _unit(rng, (4,))
        op = getattr(ad, kind)
        w = rng.uniform(-1, 1, (3, 4))
        return lambda: _scalarize(op(a, b), w), [a, b]
    if kind in ("scalar_mul", "add_const", "min_const", "max_const"):
        x = _unit(rng, (3, 4))
        c = float(rng.uniform(-1.5, 1.5))
        op = getattr(ad, kind)
        w = rng.uniform(-1, 1, (3, 4))
        return lambda: _scalarize(op(x, c), w), [x]
    if kind in ("sigmoid", "tanh", "square"):
        x = _unit(rng, (3, 4))
        op = getattr(ad, kind)
        w = rng.uniform(-1, 1, (3, 4))
        return lambda: _scalarize(op(x), w), [x]
    if kind in ("log", "sqrt"):
        x = _unit(rng, (3, 4), 0.05, 2.0)
        op = getattr(ad, kind)
        w = rng.uniform(-1, 1, (3, 4))
        return lambda: _scalarize(op(x), w), [x]
    if kind == "concat":
        axis = int(rng.integers(0, 2))
        shapes = [(2, 3), (2, 3)] if axis == 0 else [(2, 2), (2, 4)]
        xs = [_unit(rng, s) for s in shapes]
        out_shape = (4, 3) if axis == 0 else (2, 6)
        w = rng.uniform(-1, 1, out_shape)
        return lambda: _scalarize(ad.concat(xs, axis=axis), w), xs
    if kind == "mean":
        x = _unit(rng, (3, 4))
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        if axis is None:
            return lambda: ad.mean(x), [x]
        w = rng.uniform(-1, 1, (4,) if axis == 0 else (3,))
        return lambda: _scalarize(ad.mean(x, axis=axis), w), [x]
    if kind == "sum":
        x = _unit(rng, (3, 4))
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        keep = bool(rng.integers(0, 2)) if axis is not None else False
        if axis is None:
            return lambda: ad.sum(x), [x]
        w = rng.uniform(-1, 1, np.sum(np.zeros((3, 4)), axis=axis, keepdims=keep).shape)
        return lambda: _scalarize(ad.sum(x, axis=axis, keepdims=keep), w), [x]
    if kind == "norm_rows":
        x = _unit(rng, (3, 4))
        w = rng.uniform(-1, 1, (3,))
        return lambda: _scalarize(ad.norm_rows(x), w), [x]
    if kind == "softmax":
        x = _unit(rng, (3, 4))
        w = rng.uniform(-1, 1, (3, 4))
        return lambda: _scalarize(ad.softmax(x, axis=1), w), [x]
    if kind == "transpose":
        x = _unit(rng, (3, 4))
        w = rng.uniform(-1, 1, (4, 3))
        return lambda: _scalarize(ad.transpose(x), w), [x]
    if kind == "reshape":
        x = _unit(rng, (3, 4))
        w = rng.uniform(-1, 1, (2, 6))
        return lambda: _scalarize(ad.reshape(x, (2, 6)), w), [x]
    if kind == "narrow":
        x = _unit(rng, (3, 5))
        w = rng.uniform(-1, 1, (3, 3))
        return lambda: _scalarize(ad.narrow(x, 1, 1, 4), w), [x]
    if kind == "broadcast_to":
        x = _unit(rng, (3, 1))
        w = rng.uniform(-1, 1, (3, 4))
        return lambda: _scalarize(ad.broadcast_to(x, (3, 4)), w), [x]
    raise AssertionError(f"no instance builder for kind {kind}")


@pytest.fixture
def rng():
    return np.random.default_rng(1729)
