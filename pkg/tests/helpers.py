"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from motionguard import autodiff as ad


def finite_diff(fn, x, h=1e-6, indices=None):
    """Central finite differences of a scalar function of an ndarray.

    fn maps an ndarray to a python float. Returns an array shaped like x
    (zeros outside `indices` when a flat index subset is given).
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xflat = x.copy().reshape(-1)
    if indices is None:
        indices = range(x.size)
    for i in indices:
        orig = xflat[i]
        xflat[i] = orig + h
        fp = fn(xflat.reshape(x.shape))
        xflat[i] = orig - h
        fm = fn(xflat.reshape(x.shape))
        xflat[i] = orig
        flat[i] = (fp - fm) / (2 * h)
    return grad


def check_grad(build, x, h=1e-6, rtol=1e-6, indices=None):
    """Compare the tape adjoint of build(tape, leaf) against finite differences.

    build returns a scalar DiffTensor from a leaf tensor created from x.
    Comparison runs in float64 mode. Returns (adjoint, fd) for inspection.
    """
    with ad.precision("float64"):

        def value(arr):
            tape = ad.Tape()
            leaf = tape.tensor(arr, requires_grad=False)
            return float(build(tape, leaf).values)

        fd = finite_diff(value, x, h=h, indices=indices)
        tape = ad.Tape()
        leaf = tape.tensor(x, requires_grad=True)
        root = build(tape, leaf)
        ad.backward(root)
        adj = leaf.adjoint.copy()
    if indices is not None:
        sel = np.zeros(x.size, dtype=bool)
        sel[list(indices)] = True
        adj_sel = adj.reshape(-1)[sel]
        fd_sel = fd.reshape(-1)[sel]
    else:
        adj_sel, fd_sel = adj.reshape(-1), fd.reshape(-1)
    denom = np.maximum(np.abs(fd_sel), np.abs(adj_sel))
    denom = np.where(denom < 1e-8, 1.0, denom)
    rel = np.abs(adj_sel - fd_sel) / denom
    assert rel.max() < rtol, f"max rel err {rel.max():.3e} exceeds {rtol:.1e}"
    return adj, fd
