"""Shared test oracles, kept independent of the library code paths."""

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_check(build_loss, params, h: float = 1e-5, max_elems: int = 64, seed: int = 0):
    """Compare analytic grads to central differences.

    build_loss() must run a fresh taped forward and return (loss_value,
    {param: grad}). Returns the max relative error over (sub-sampled)
    elements of every parameter.
    """
    from clonearm import autodiff as ad

    _, grads = build_loss()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_elems else rng.choice(n, size=max_elems, replace=False)
        ana = grads[p].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, _ = build_loss()
            flat[i] = orig - h
            fm, _ = build_loss()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(ana[i]), abs(fd), 1e-6)
            worst = max(worst, abs(ana[i] - fd) / denom)
    return worst
