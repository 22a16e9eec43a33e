"""Central finite differences, used as the independent gradient oracle."""

import numpy as np

H = 1e-6


def numeric_grad(f, arrays, h=H):
    """Gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-10):
    """Relative L2 error; ``floor`` bounds the denominator for gradients that are
    identically zero (e.g. key biases under softmax shift invariance)."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def check_op(build, shapes, rng, h=H):
    """Compare analytic and numeric gradients of ``sum(build(*tensors) * R)``
    for a fixed random projection ``R``; returns the worst relative error."""
    from stable_attn.tensor import Tensor
    arrays = [rng.normal(size=s) for s in shapes]
    probe = None

    def value():
        nonlocal probe
        out = build(*[Tensor(a) for a in arrays]).data
        if probe is None:
            probe = rng.normal(size=out.shape)
        return float((out * probe).sum())

    value()
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    (out * Tensor(probe)).sum().backward()
    num = numeric_grad(value, arrays, h)
    return max(rel_err(t.grad, g) for t, g in zip(ts, num))
