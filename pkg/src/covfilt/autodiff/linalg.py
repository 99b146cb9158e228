"""Cholesky-based SPD operations on the tape.

Inputs that must be symmetric positive definite are symmetrized as
``(A + A^T) / 2`` before factorization, so gradients w.r.t. ``A`` are
symmetric as well.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la

from covfilt.autodiff.tape import Array, Node
from covfilt.exceptions import AsymmetricMatrixError, NotPositiveDefiniteError, ShapeError

__all__ = [
    "SYMMETRY_TOL",
    "cholesky",
    "factor_spd",
    "logdet_spd",
    "solve_factored",
    "solve_spd",
    "symmetrized",
]

SYMMETRY_TOL = 1e-6


def symmetrized(value: Array) -> Array:
    """Return ``(A + A^T) / 2`` after checking ``A`` is square and nearly symmetric.

    Raises:
        ShapeError: If the matrix is not square.
        AsymmetricMatrixError: If the relative asymmetry exceeds SYMMETRY_TOL.
    """
    if value.ndim != 2 or value.shape[0] != value.shape[1]:
        msg = f"Expected a square matrix, got shape {value.shape}"
        raise ShapeError(msg)
    scale = float(np.linalg.norm(value))
    asymmetry = float(np.linalg.norm(value - value.T))
    if asymmetry > SYMMETRY_TOL * max(scale, np.finfo(np.float64).tiny):
        msg = f"Matrix asymmetry {asymmetry:.3e} exceeds {SYMMETRY_TOL:g} relative to norm {scale:.3e}"
        raise AsymmetricMatrixError(msg)
    return 0.5 * (value + value.T)


def factor_spd(value: Array) -> Array:
    """Lower Cholesky factor of the symmetrized matrix.

    Raises:
        NotPositiveDefiniteError: If a pivot is not strictly positive.
    """
    sym = symmetrized(value)
    try:
        return np.asarray(la.cholesky(sym, lower=True), dtype=np.float64)
    except la.LinAlgError as exc:
        msg = f"Matrix of shape {sym.shape} is not positive definite"
        raise NotPositiveDefiniteError(msg) from exc


def solve_factored(factor: Array, rhs: Array) -> Array:
    """Solve ``A X = rhs`` given the lower Cholesky factor of ``A``."""
    return np.asarray(la.cho_solve((factor, True), rhs), dtype=np.float64)


def _conjugate_solve(factor: Array, x: Array) -> Array:
    # L^{-T} X L^{-1}
    left = la.solve_triangular(factor, x.T, lower=True, trans="T")
    return np.asarray(la.solve_triangular(factor, left.T, lower=True, trans="T"), dtype=np.float64)


def cholesky(a: Node) -> Node:
    """Lower-triangular ``L`` with ``L L^T = A``."""
    factor = factor_spd(a.value)

    def vjp(g: Array) -> tuple[Array]:
        inner = np.tril(factor.T @ g)
        inner[np.diag_indices_from(inner)] *= 0.5
        s = _conjugate_solve(factor, inner)
        return (0.5 * (s + s.T),)

    return a.tape.record("cholesky", (a,), factor, vjp)


def logdet_spd(a: Node) -> Node:
    """``ln|A|`` computed as twice the log-sum of the Cholesky diagonal."""
    factor = factor_spd(a.value)
    value = 2.0 * np.log(np.diag(factor)).sum()

    def vjp(g: Array) -> tuple[Array]:
        inverse = solve_factored(factor, np.eye(factor.shape[0]))
        return (g[0, 0] * 0.5 * (inverse + inverse.T),)

    return a.tape.record("logdet_spd", (a,), np.array([[value]]), vjp)


def solve_spd(a: Node, b: Node) -> Node:
    """``X`` with ``A X = B`` for SPD ``A``; ``A^{-1}`` is never formed."""
    if a.shape[0] != b.shape[0]:
        msg = f"solve_spd: {a.shape} system with right-hand side {b.shape}"
        raise ShapeError(msg)
    factor = factor_spd(a.value)
    solution = solve_factored(factor, b.value)

    def vjp(g: Array) -> tuple[Array, Array]:
        grad_b = solve_factored(factor, g)
        outer = grad_b @ solution.T
        return (-0.5 * (outer + outer.T), grad_b)

    return a.tape.record("solve_spd", (a, b), solution, vjp)
