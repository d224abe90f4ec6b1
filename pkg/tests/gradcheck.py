"""Central finite-difference gradient oracle, independent of the tape.

`fd_gradient` evaluates a pure function of numpy arrays by bumping one
coordinate at a time; it never touches Tensor backward code, so it can
arbitrate the analytic gradients produced by the tape.
"""

import numpy as np


def fd_gradient(f, arrays, which, step=1e-4, coords=None):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[which].

    coords: optional list of flat indices to probe (all coordinates when None).
    Returns an array shaped like arrays[which] with untouched coords = nan.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[which]
    grad = np.full(target.size, np.nan)
    flat = target.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(*arrays))
        flat[i] = orig - step
        fm = float(f(*arrays))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(target.shape)


def max_relative_error(analytic, fd):
    """Elementwise |a - fd| / max(|a|, |fd|, 1) over probed coords."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    mask = ~np.isnan(fd)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    d = fd[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(d)), 1.0)
    return float(np.max(np.abs(a - d) / denom))
