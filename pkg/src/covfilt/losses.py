"""Training objectives: Gaussian NLL, its diagonal restriction, and the state-estimate loss.

Covariances that fail to factor are rescued by an escalating diagonal jitter
``lambda * trace(Sigma) / k`` with ``lambda`` taken from ``JITTER_LADDER``;
the first level that factors wins and gradients flow through the jittered
matrix. When even the largest jitter fails, the off-diagonal part is shrunk
by the first factor in ``SHRINK_LADDER`` that factors. The last factor keeps
only the diagonal, so any covariance with a positive diagonal is repaired.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from covfilt.autodiff import (
    Array,
    Node,
    factor_spd,
    hadamard,
    logdet_spd,
    scale,
    scatter,
    solve_factored,
    solve_spd,
    sum_,
    symmetrized,
    take,
    transpose,
)
from covfilt.exceptions import NotPositiveDefiniteError, ShapeError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

logger = logging.getLogger(__name__)

__all__ = [
    "JITTER_LADDER",
    "SHRINK_LADDER",
    "CovarianceRepair",
    "LossReport",
    "NllTerms",
    "batch_nll",
    "diagonal_nll",
    "gaussian_nll",
    "gaussian_nll_terms",
    "jitter_scale",
    "repair_covariance",
    "stabilize_covariance",
    "stabilize_node",
    "state_estimate_loss",
]

JITTER_LADDER = (0.0, 1e-9, 1e-6, 1e-3)
SHRINK_LADDER = (0.25, 0.5, 0.75, 0.9, 1.0)


@dataclass(frozen=True)
class LossReport:
    """Value of a likelihood loss split into its terms.

    ``total`` is exactly ``quadratic + logdet``; ``jitter`` is the largest
    diagonal inflation that had to be applied and ``shrinkage`` the largest
    off-diagonal shrink factor.
    """

    total: float
    quadratic: float
    logdet: float
    jitter: float = 0.0
    shrinkage: float = 0.0


@dataclass(frozen=True)
class NllTerms:
    """Tape nodes of one Gaussian NLL evaluation."""

    total: Node
    quadratic: Node
    logdet: Node
    jitter: float
    shrinkage: float = 0.0

    def report(self) -> LossReport:
        return LossReport(
            total=self.total.item(),
            quadratic=self.quadratic.item(),
            logdet=self.logdet.item(),
            jitter=self.jitter,
            shrinkage=self.shrinkage,
        )


@dataclass(frozen=True)
class CovarianceRepair:
    """How a covariance was made to factor.

    The repaired matrix is ``sym - shrinkage * offdiag(sym) + jitter * I``.
    """

    matrix: Array
    factor: Array
    jitter: float = 0.0
    shrinkage: float = 0.0

    def keep(self) -> Array:
        """Derivative of each repaired entry with respect to the original one."""
        k = self.matrix.shape[0]
        return 1.0 - self.shrinkage * _off_diagonal_mask(k)


def jitter_scale(matrix: Array) -> float:
    """Mean diagonal entry, or 1.0 when it is not positive."""
    k = matrix.shape[0]
    mean_diag = float(np.trace(matrix)) / k
    return mean_diag if mean_diag > 0.0 else 1.0


def _off_diagonal_mask(k: int) -> Array:
    return 1.0 - np.eye(k)


def _try_factor(matrix: Array) -> Array | None:
    try:
        return factor_spd(matrix)
    except NotPositiveDefiniteError:
        return None


def repair_covariance(matrix: ArrayLike) -> CovarianceRepair:
    """Find the mildest jitter, then shrinkage, that lets ``matrix`` factor.

    Raises:
        NotPositiveDefiniteError: If the matrix is not finite or its diagonal
            is not positive.
    """
    sym = symmetrized(np.asarray(matrix, dtype=np.float64))
    if not np.all(np.isfinite(sym)):
        msg = "Covariance has non-finite entries"
        raise NotPositiveDefiniteError(msg)
    k = sym.shape[0]
    base = jitter_scale(sym)
    eye = np.eye(k)
    for level in JITTER_LADDER:
        jitter = level * base
        candidate = sym + jitter * eye if jitter else sym
        factor = _try_factor(candidate)
        if factor is not None:
            if jitter:
                logger.warning("Covariance needed diagonal jitter %.3e to factor", jitter)
            return CovarianceRepair(matrix=candidate, factor=factor, jitter=jitter)

    jitter = JITTER_LADDER[-1] * base
    off_diagonal = sym * _off_diagonal_mask(k)
    for shrinkage in SHRINK_LADDER:
        candidate = sym - shrinkage * off_diagonal + jitter * eye
        factor = _try_factor(candidate)
        if factor is not None:
            logger.warning("Covariance needed off-diagonal shrinkage %.2f to factor", shrinkage)
            return CovarianceRepair(matrix=candidate, factor=factor, jitter=jitter, shrinkage=shrinkage)
    msg = f"Covariance diagonal {np.diag(sym)} is not positive; no jitter or shrinkage makes it factor"
    raise NotPositiveDefiniteError(msg)


def stabilize_covariance(matrix: ArrayLike) -> tuple[Array, float]:
    """Symmetrize a covariance and repair it until it factors.

    Returns:
        The repaired symmetric matrix and the jitter added to its diagonal.

    Raises:
        NotPositiveDefiniteError: If the matrix cannot be repaired.
    """
    repair = repair_covariance(matrix)
    return repair.matrix, repair.jitter


def _stabilize(sigma: Node) -> tuple[Node, CovarianceRepair]:
    repair = repair_covariance(sigma.value)
    stable = sigma
    if repair.shrinkage:
        mask = sigma.tape.const(_off_diagonal_mask(sigma.shape[0]))
        stable = stable - scale(hadamard(sigma, mask), repair.shrinkage)
    if repair.jitter:
        stable = stable + sigma.tape.const(repair.jitter * np.eye(sigma.shape[0]))
    return stable, repair


def stabilize_node(sigma: Node) -> tuple[Node, float]:
    """Tape counterpart of ``stabilize_covariance``; jitter and shrink factor enter as constants."""
    stable, repair = _stabilize(sigma)
    return stable, repair.jitter


def _column(node: Node) -> Node:
    return node if node.shape[1] == 1 else transpose(node)


def gaussian_nll_terms(mean: Node, sigma: Node, y: Node | ArrayLike) -> NllTerms:
    """``0.5 r^T Sigma^-1 r + 0.5 ln|Sigma|`` with ``r = y - mean``; the ``(k/2) ln 2 pi`` constant is omitted."""
    mean_col = _column(mean)
    target = _column(y if isinstance(y, Node) else mean.tape.const(y))
    if mean_col.shape != target.shape or sigma.shape != (mean_col.shape[0],) * 2:
        msg = f"gaussian_nll: mean {mean.shape}, covariance {sigma.shape} and label {target.shape} disagree"
        raise ShapeError(msg)
    residual = target - mean_col
    stable, repair = _stabilize(sigma)
    solved = solve_spd(stable, residual)
    quadratic = scale(sum_(hadamard(residual, solved)), 0.5)
    logdet = scale(logdet_spd(stable), 0.5)
    return NllTerms(
        total=quadratic + logdet,
        quadratic=quadratic,
        logdet=logdet,
        jitter=repair.jitter,
        shrinkage=repair.shrinkage,
    )


def gaussian_nll(mean: Node, sigma: Node, y: Node | ArrayLike) -> Node:
    """Full-covariance Gaussian negative log-likelihood of one sample."""
    return gaussian_nll_terms(mean, sigma, y).total


def diagonal_nll(mean: Node, variances: Node, y: Node | ArrayLike) -> Node:
    """Gaussian NLL with a diagonal covariance given by ``variances``."""
    column = _column(variances)
    k = column.shape[0]
    sigma = scatter(column, (k, k), range(k), range(k))
    return gaussian_nll(mean, sigma, y)


@dataclass(frozen=True)
class _BatchFactors:
    stable: Array
    factors: Array
    keep: Array
    jitter: float = 0.0
    shrinkage: float = 0.0


def _batched_factors(matrices: Array) -> _BatchFactors:
    sym = 0.5 * (matrices + matrices.transpose(0, 2, 1))
    keep = np.ones_like(sym)
    try:
        return _BatchFactors(stable=sym, factors=np.linalg.cholesky(sym), keep=keep)
    except np.linalg.LinAlgError:
        logger.debug("Batch factorization failed; repairing samples one by one")
    factors = np.empty_like(sym)
    jitter = shrinkage = 0.0
    for index, matrix in enumerate(sym):
        repair = repair_covariance(matrix)
        sym[index] = repair.matrix
        factors[index] = repair.factor
        keep[index] = repair.keep()
        jitter = max(jitter, repair.jitter)
        shrinkage = max(shrinkage, repair.shrinkage)
    return _BatchFactors(stable=sym, factors=factors, keep=keep, jitter=jitter, shrinkage=shrinkage)


def batch_nll(
    sigma_rows: Node,
    residual: Node,
    *,
    offsets: Array | None = None,
) -> tuple[Node, LossReport]:
    """Mean Gaussian NLL over a batch.

    Args:
        sigma_rows: (B, k*k) node of row-major flattened covariances.
        residual: (B, k) node of label minus mean.
        offsets: Optional (B, k, k) constant covariances added before the
            likelihood (used when tuning the head to a residual covariance).

    Returns:
        The 1x1 loss node and its term breakdown.
    """
    batch, k = residual.shape
    if sigma_rows.shape != (batch, k * k):
        msg = f"batch_nll: covariance rows {sigma_rows.shape} do not match residuals {residual.shape}"
        raise ShapeError(msg)
    matrices = sigma_rows.value.reshape(batch, k, k)
    if offsets is not None:
        matrices = matrices + offsets
    repaired = _batched_factors(matrices)
    factors = repaired.factors

    r = residual.value
    solved = np.stack([solve_factored(factor, row) for factor, row in zip(factors, r, strict=True)])
    quadratic = float(np.mean(0.5 * np.einsum("bi,bi->b", r, solved)))
    logdet = float(np.mean(np.log(np.diagonal(factors, axis1=1, axis2=2)).sum(axis=1)))
    total = quadratic + logdet

    def vjp(g: Array) -> tuple[Array, Array]:
        weight = g[0, 0] / batch
        eye = np.eye(k)
        inverse = np.stack([solve_factored(factor, eye) for factor in factors])
        grad_sigma = 0.5 * (inverse - solved[:, :, None] * solved[:, None, :])
        grad_sigma = 0.5 * (grad_sigma + grad_sigma.transpose(0, 2, 1)) * repaired.keep
        return (weight * grad_sigma.reshape(batch, k * k), weight * solved)

    loss = residual.tape.record("batch_nll", (sigma_rows, residual), np.array([[total]]), vjp)
    report = LossReport(
        total=total,
        quadratic=quadratic,
        logdet=logdet,
        jitter=repaired.jitter,
        shrinkage=repaired.shrinkage,
    )
    return loss, report


def state_estimate_loss(
    estimates: Sequence[Node],
    truths: ArrayLike,
    subset: Sequence[int],
    burn_in: int = 2,
) -> Node:
    """Mean squared error of selected state components after the burn-in steps.

    Args:
        estimates: Filter state nodes (n x 1), one per time step.
        truths: True states, shape (T, n).
        subset: 0-based state indices that carry labels.
        burn_in: Leading steps left out of the loss.

    Raises:
        ShapeError: On length or index mismatches, or an empty window.
    """
    truth = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if len(estimates) != truth.shape[0]:
        msg = f"{len(estimates)} estimates for {truth.shape[0]} true states"
        raise ShapeError(msg)
    if not subset:
        msg = "state_estimate_loss needs a non-empty subset"
        raise ShapeError(msg)
    n = truth.shape[1]
    if any(not 0 <= index < n for index in subset):
        msg = f"subset {list(subset)} out of range for {n} state components"
        raise ShapeError(msg)
    window = range(burn_in, len(estimates))
    if not window:
        msg = f"burn_in {burn_in} leaves no steps out of {len(estimates)}"
        raise ShapeError(msg)

    tape = estimates[0].tape
    indices = list(subset)
    total: Node | None = None
    for t in window:
        diff = take(estimates[t], indices, [0]) - tape.const(truth[t, indices])
        term = sum_(hadamard(diff, diff))
        total = term if total is None else total + term
    assert total is not None
    return scale(total, 1.0 / (len(window) * len(indices)))
