"""Symmetric positive-definite solves on top of LAPACK's Cholesky routines."""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from ..errors import DimensionError, FactorizationError, NumericError
from .autodiff import Node, _make, differentiable

JITTER_SCALE = 1e-10


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``a``; raises with the failing pivot index."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    factor, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise FactorizationError(info - 1)
    if info < 0:
        raise NumericError(f"dpotrf rejected argument {-info}")
    return factor


def _factor(a: np.ndarray, jitter: bool) -> np.ndarray:
    try:
        return cholesky(a)
    except FactorizationError:
        if not jitter:
            raise
    n = a.shape[0]
    bump = JITTER_SCALE * max(np.trace(a), 0.0) / n
    if bump == 0.0:
        bump = JITTER_SCALE
    return cholesky(a + bump * np.eye(n))


def cho_solve(factor: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dpotrs(factor, b, lower=1)
    if info != 0:
        raise NumericError(f"dpotrs failed with info={info}")
    return x


@differentiable(tensors=2)
def spd_solve(a: Node, b: Node, jitter: bool = False) -> Node:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a``.

    With ``jitter=True`` a failed factorization is retried once after adding
    ``1e-10 * trace(a)/n`` to the diagonal.
    """
    av, bv = a.value, b.value
    if av.shape[0] != av.shape[1]:
        raise DimensionError(f"spd_solve: matrix must be square, got {av.shape}")
    if bv.shape[0] != av.shape[0]:
        raise DimensionError(f"spd_solve: {av.shape} vs right-hand side {bv.shape}")
    factor = _factor(av, jitter)
    x = cho_solve(factor, bv)
    if not np.isfinite(x).all():
        raise NumericError("spd_solve produced non-finite values")

    def rule(g):
        # only the lower triangle is read, so report the symmetric adjoint
        gb = cho_solve(factor, g)
        ga = gb @ x.T
        return (-0.5 * (ga + ga.T), gb)

    return _make(x, (a, b), rule)
