"""Central-difference gradient checking used across the test suite.

All checks run in float64.  The comparison is relative where the reference
magnitude allows it and absolute near zero, which keeps the tolerance
meaningful for gradients spanning several orders of magnitude.
"""

import numpy as np

from oneshotid import tensor as T

STEP = 1e-5
TOL = 1e-6


def numeric_grad(f, x, step=STEP):
    """d f / d x by central differences; f maps ndarray -> float."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def rel_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), elementwise then reduced."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grads_sampled(build, params, n=20, tol=1e-4, step=STEP, seed=0):
    """Like check_grads but finite-differences only a random coordinate
    sample of each parameter, for functions too large to probe fully."""
    tensors = [T.Tensor(np.asarray(p, dtype=np.float64), requires_grad=True) for p in params]
    with T.Tape():
        loss = build(*tensors)
        T.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"param {i} got no gradient"
        base = np.asarray(params[i], dtype=np.float64)
        flat_idx = rng.choice(base.size, size=min(n, base.size), replace=False)
        for k in flat_idx:
            vals = [np.asarray(p, dtype=np.float64).copy() for p in params]
            probe = vals[i].reshape(-1)
            orig = probe[k]
            probe[k] = orig + step
            with T.Tape():
                hi = float(build(*[T.Tensor(v) for v in vals]).data)
            probe[k] = orig - step
            with T.Tape():
                lo = float(build(*[T.Tensor(v) for v in vals]).data)
            nd = (hi - lo) / (2.0 * step)
            ad = float(t.grad.reshape(-1)[k])
            err = rel_error(np.array([nd]), np.array([ad]))
            worst = max(worst, err)
            assert err < tol, f"param {i} coord {k}: rel err {err:.3e} (fd {nd}, tape {ad})"
    return worst


def check_grads(build, params, tol=TOL, step=STEP):
    """Compare tape gradients of a scalar function against finite differences.

    ``build(*tensors)`` returns a scalar Tensor; ``params`` is a list of
    ndarrays, each becoming a requires_grad leaf.  Returns the worst
    relative error over all parameters.
    """
    tensors = [T.Tensor(np.asarray(p, dtype=np.float64), requires_grad=True) for p in params]
    with T.Tape():
        loss = build(*tensors)
        T.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(x, i=i):
            vals = [np.asarray(p, dtype=np.float64) for p in params]
            vals[i] = x
            with T.Tape():
                out = build(*[T.Tensor(v) for v in vals])
            return float(out.data)

        ng = numeric_grad(f, np.asarray(params[i], dtype=np.float64), step=step)
        assert t.grad is not None, f"param {i} got no gradient"
        err = rel_error(ng, t.grad)
        worst = max(worst, err)
        assert err < tol, f"param {i}: gradient mismatch, rel err {err:.3e}"
    return worst
