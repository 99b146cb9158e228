"""Dropout Monte-Carlo estimates of epistemic covariance and their combination with the aleatoric head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from covfilt.config import CovarianceSource
from covfilt.exceptions import ShapeError
from covfilt.model import GaussianPrediction, ModelParams, predict_gaussian, sample_dropout_mask

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from covfilt.autodiff import Array

logger = logging.getLogger(__name__)

__all__ = [
    "EpistemicBatch",
    "EpistemicEstimate",
    "combine_samples",
    "epistemic_offsets",
    "predict_aleatoric_only",
    "predict_with_epistemic",
    "predict_with_epistemic_batch",
]

# Upper bound on rows (inputs x samples) pushed through the network at once.
_MAX_ROWS = 8192


def _diagonal_only(matrices: Array) -> Array:
    k = matrices.shape[-1]
    return matrices * np.eye(k)


@dataclass(frozen=True)
class EpistemicEstimate:
    """Sample mean of the means plus epistemic, aleatoric and total covariances.

    ``total`` is exactly ``epistemic + aleatoric``.
    """

    mean: Array
    epistemic: Array
    aleatoric: Array
    total: Array
    samples: int

    def diagonal(self) -> EpistemicEstimate:
        """Same estimate with every covariance reduced to its diagonal."""
        epistemic = _diagonal_only(self.epistemic)
        aleatoric = _diagonal_only(self.aleatoric)
        return replace(self, epistemic=epistemic, aleatoric=aleatoric, total=epistemic + aleatoric)

    def covariance(self, source: CovarianceSource) -> Array:
        return {
            CovarianceSource.ALEATORIC: self.aleatoric,
            CovarianceSource.EPISTEMIC: self.epistemic,
            CovarianceSource.COMBINED: self.total,
        }[source]


@dataclass(frozen=True)
class EpistemicBatch:
    """Epistemic estimates for B inputs: means (B, k), covariances (B, k, k)."""

    mean: Array
    epistemic: Array
    aleatoric: Array
    samples: int

    @property
    def total(self) -> Array:
        return self.epistemic + self.aleatoric

    def __len__(self) -> int:
        return int(self.mean.shape[0])

    def __getitem__(self, index: int) -> EpistemicEstimate:
        return EpistemicEstimate(
            mean=self.mean[index],
            epistemic=self.epistemic[index],
            aleatoric=self.aleatoric[index],
            total=self.epistemic[index] + self.aleatoric[index],
            samples=self.samples,
        )

    def covariance(self, source: CovarianceSource, *, diagonal: bool = False) -> Array:
        matrices = {
            CovarianceSource.ALEATORIC: self.aleatoric,
            CovarianceSource.EPISTEMIC: self.epistemic,
            CovarianceSource.COMBINED: self.total,
        }[source]
        return _diagonal_only(matrices) if diagonal else matrices


def _combine(means: Array, covariances: Array) -> tuple[Array, Array, Array]:
    # means (..., N, k), covariances (..., N, k, k)
    n = means.shape[-2]
    total = means.sum(axis=-2)
    second = np.einsum("...ni,...nj->...ij", means, means) / n
    epistemic = second - np.einsum("...i,...j->...ij", total, total) / (n * n)
    epistemic = 0.5 * (epistemic + np.swapaxes(epistemic, -1, -2))
    aleatoric = covariances.sum(axis=-3) / n
    return total / n, epistemic, aleatoric


def combine_samples(means: ArrayLike, covariances: ArrayLike) -> EpistemicEstimate:
    """Combine N sampled predictions (N, k) and covariances (N, k, k).

    ``epistemic = (1/N) sum f f^T - (1/N^2) (sum f)(sum f)^T`` and
    ``aleatoric = (1/N) sum Sigma``.
    """
    f = np.atleast_2d(np.asarray(means, dtype=np.float64))
    sigmas = np.asarray(covariances, dtype=np.float64)
    if f.shape[0] == 0:
        msg = "combine_samples needs at least one sample"
        raise ValueError(msg)
    if sigmas.shape != (f.shape[0], f.shape[1], f.shape[1]):
        msg = f"Sample covariances {sigmas.shape} do not match means {f.shape}"
        raise ShapeError(msg)
    mean, epistemic, aleatoric = _combine(f, sigmas)
    return EpistemicEstimate(
        mean=mean,
        epistemic=epistemic,
        aleatoric=aleatoric,
        total=epistemic + aleatoric,
        samples=f.shape[0],
    )


def predict_with_epistemic_batch(
    params: ModelParams,
    inputs: ArrayLike,
    n_samples: int,
    seed: int,
) -> EpistemicBatch:
    """Draw ``n_samples`` dropout passes for every input row and combine them.

    All inputs and samples go through the network as one batch (chunked for
    memory), each row with its own mask; results depend only on ``seed``.
    """
    if n_samples < 1:
        msg = f"n_samples must be at least 1, got {n_samples}"
        raise ValueError(msg)
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    rng = np.random.default_rng(seed)
    k = params.output_dim
    per_chunk = max(1, _MAX_ROWS // n_samples)
    means, epistemic, aleatoric = [], [], []
    for start in range(0, x.shape[0], per_chunk):
        chunk = x[start : start + per_chunk]
        repeated = np.repeat(chunk, n_samples, axis=0)
        masks = sample_dropout_mask(params, rng, rows=repeated.shape[0])
        f, sigmas = predict_gaussian(params, repeated, masks)
        mean, epi, alea = _combine(
            f.reshape(chunk.shape[0], n_samples, k),
            sigmas.reshape(chunk.shape[0], n_samples, k, k),
        )
        means.append(mean)
        epistemic.append(epi)
        aleatoric.append(alea)
    logger.debug("Drew %d dropout samples for %d inputs", n_samples, x.shape[0])
    return EpistemicBatch(
        mean=np.concatenate(means),
        epistemic=np.concatenate(epistemic),
        aleatoric=np.concatenate(aleatoric),
        samples=n_samples,
    )


def predict_with_epistemic(params: ModelParams, x: ArrayLike, n_samples: int, seed: int) -> EpistemicEstimate:
    """Epistemic estimate for a single input vector."""
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return predict_with_epistemic_batch(params, row, n_samples, seed)[0]


def predict_aleatoric_only(params: ModelParams, x: ArrayLike) -> GaussianPrediction:
    """Single deterministic pass (dropout disabled)."""
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mean, sigmas = predict_gaussian(params, row)
    return GaussianPrediction(mean=mean[0], covariance=sigmas[0])


def epistemic_offsets(params: ModelParams, inputs: ArrayLike, n_samples: int, seed: int) -> Array:
    """Per-input epistemic covariances (B, k, k), used to tune the head to the residual covariance."""
    return predict_with_epistemic_batch(params, inputs, n_samples, seed).epistemic
