"""Central finite differences for checking hand-derived gradients."""
import numpy as np


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, b, floor=1e-10):
    """||a - b|| / max(||a|| + ||b||, floor)."""
    a = np.ravel(a)
    b = np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def check_params(loss_fn, params, analytic, h=1e-6):
    """Max relative error over every parameter array in ``params``.

    ``loss_fn()`` must read ``params`` live; ``analytic`` maps the same keys to gradients.
    """
    worst = 0.0
    for k, arr in params.items():
        num = numeric_grad(loss_fn, arr, h)
        worst = max(worst, rel_error(analytic.get(k, np.zeros_like(arr)), num))
    return worst
