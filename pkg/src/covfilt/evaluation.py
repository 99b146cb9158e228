"""Filter evaluation of the uncertainty methods and the metrics table.

Every method row feeds the filter the same measurements, the frozen mean
prediction ``f(x)``; rows differ only in the covariance they hand over.
Velocity error is the Euclidean norm of the estimated minus the true
velocity, reported at the final step and per measurement count.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from covfilt.config import CovarianceSource, Method
from covfilt.epistemic import predict_with_epistemic_batch
from covfilt.exceptions import ShapeError
from covfilt.kalman import Ar1Estimate, estimate_ar1, run_filter, run_filter_time_correlated, velocity_errors
from covfilt.model import ModelParams, predict, predict_gaussian
from covfilt.simulator import VELOCITY_INDICES, regression_arrays

if TYPE_CHECKING:
    from covfilt.autodiff import Array
    from covfilt.kalman import FilterSpec
    from covfilt.simulator import TrackDataset

logger = logging.getLogger(__name__)

__all__ = [
    "BASELINE",
    "MethodSource",
    "MetricsRow",
    "MetricsTable",
    "ProgressCallback",
    "build_sources",
    "ellipse_axes",
    "evaluate_sources",
    "method_sources",
    "residual_ar1",
    "row_name",
    "split_by_track",
    "track_errors",
]

BASELINE = Method.FIXED.value

type ProgressCallback = Callable[[str, int, int], None]

_VARIANCE_METHODS = frozenset({Method.MLE_VARIANCE})


@dataclass(frozen=True)
class MethodSource:
    """Measurements and covariances one method row feeds the filter, per track."""

    name: str
    measurements: list[Array]
    covariances: list[Array]


@dataclass(frozen=True)
class MetricsRow:
    """Final-step velocity error of one method on one split.

    ``relative_*`` divide this row's aggregate by the baseline's aggregate;
    ``ratio_*`` aggregate the per-track ratios to the baseline error.
    """

    split: str
    method: str
    mean: float
    median: float
    relative_mean: float
    relative_median: float
    ratio_mean: float
    ratio_median: float
    n_tracks: int


@dataclass
class MetricsTable:
    """Rows plus per-measurement-count error curves for one evaluation."""

    split: str
    rows: list[MetricsRow] = field(default_factory=list)
    curves: dict[str, tuple[Array, Array]] = field(default_factory=dict)

    def row(self, method: str) -> MetricsRow:
        for row in self.rows:
            if row.method == method:
                return row
        msg = f"No row for method '{method}'"
        raise KeyError(msg)

    def curve_records(self) -> list[dict[str, Any]]:
        """Tidy records: split, method, measurement_count, mean_error, median_error."""
        records = []
        for method, (mean, median) in self.curves.items():
            for index, (m, med) in enumerate(zip(mean, median, strict=True)):
                records.append(
                    {
                        "split": self.split,
                        "method": method,
                        "measurement_count": index + 1,
                        "mean_error": float(m),
                        "median_error": float(med),
                    }
                )
        return records


def row_name(method: Method, source: CovarianceSource | None = None) -> str:
    return method.value if source is None else f"{method.value}/{source.value}"


def split_by_track(values: Array, tracks: Sequence[TrackDataset]) -> list[Array]:
    """Cut stacked per-frame values back into per-track arrays."""
    bounds = np.cumsum([len(track) for track in tracks])[:-1]
    return list(np.split(values, bounds))


def method_sources(
    method: Method,
    params: ModelParams,
    tracks: Sequence[TrackDataset],
    *,
    sources: Sequence[CovarianceSource],
    epistemic_samples: int,
    seed: int,
) -> list[MethodSource]:
    """Rows ``<method>/<source>`` for a learned covariance method.

    The filter always receives the deterministic mean. Without dropout only
    the aleatoric source exists. Variance methods keep the diagonal of
    whichever source they use.
    """
    inputs, _ = regression_arrays(list(tracks))
    means = split_by_track(predict(params, inputs).mean, tracks)
    diagonal = method in _VARIANCE_METHODS
    if params.dropout_rate == 0.0 or list(sources) == [CovarianceSource.ALEATORIC]:
        _, sigmas = predict_gaussian(params, inputs)
        if diagonal:
            sigmas = sigmas * np.eye(params.output_dim)
        return [MethodSource(row_name(method, CovarianceSource.ALEATORIC), means, split_by_track(sigmas, tracks))]

    batch = predict_with_epistemic_batch(params, inputs, epistemic_samples, seed)
    return [
        MethodSource(
            row_name(method, source),
            means,
            split_by_track(batch.covariance(source, diagonal=diagonal), tracks),
        )
        for source in sources
    ]


def build_sources(
    base: ModelParams,
    fixed_covariance: Array,
    methods: Mapping[Method, ModelParams],
    tracks: Sequence[TrackDataset],
    *,
    sources: Sequence[CovarianceSource],
    epistemic_samples: int,
    seed: int,
) -> list[MethodSource]:
    """The fixed baseline row followed by every learned method's rows."""
    inputs, _ = regression_arrays(list(tracks))
    means = split_by_track(predict(base, inputs).mean, tracks)
    fixed = [np.broadcast_to(fixed_covariance, (len(track), *fixed_covariance.shape)).copy() for track in tracks]
    rows = [MethodSource(BASELINE, means, fixed)]
    for method, params in methods.items():
        if method is Method.FIXED:
            continue
        rows.extend(
            method_sources(
                method,
                params,
                tracks,
                sources=sources,
                epistemic_samples=epistemic_samples,
                seed=seed,
            )
        )
    return rows


def residual_ar1(params: ModelParams, tracks: Sequence[TrackDataset]) -> Ar1Estimate:
    """AR(1) fit of the model's measurement residuals ``f(x) - H z`` on each track."""
    residuals = [predict(params, track.inputs).mean - track.labels for track in tracks]
    return estimate_ar1(residuals)


def track_errors(
    spec: FilterSpec,
    measurements: Array,
    covariances: Array,
    true_states: Array,
    ar1: Ar1Estimate | None = None,
) -> Array:
    """Velocity error after every measurement of one track."""
    if ar1 is None:
        run = run_filter(spec, measurements, covariances)
    else:
        run = run_filter_time_correlated(spec, measurements, covariances, ar1.phi, ar1.share)
    return velocity_errors(run, true_states, VELOCITY_INDICES)


def _per_track(
    spec: FilterSpec,
    source: MethodSource,
    tracks: Sequence[TrackDataset],
    ar1: Ar1Estimate | None,
    threads: int,
) -> list[Array]:
    def one(index: int) -> Array:
        return track_errors(spec, source.measurements[index], source.covariances[index], tracks[index].states, ar1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(tracks))))
    return [one(index) for index in range(len(tracks))]


def _safe_ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0.0 else float("nan")


def _aggregate_ratios(errors: Array, baseline: Array) -> tuple[float, float]:
    ratios = np.divide(errors, baseline, out=np.full_like(errors, np.nan), where=baseline > 0.0)
    finite = ratios[np.isfinite(ratios)]
    if finite.size == 0:
        return float("nan"), float("nan")
    return float(finite.mean()), float(np.median(finite))


def evaluate_sources(
    spec: FilterSpec,
    sources: Sequence[MethodSource],
    tracks: Sequence[TrackDataset],
    *,
    split: str = "test",
    ar1: Ar1Estimate | None = None,
    threads: int = 1,
    on_progress: ProgressCallback | None = None,
) -> MetricsTable:
    """Filter every track with every source and tabulate velocity errors.

    Relative columns use the ``fixed`` row of this same evaluation.

    Raises:
        ShapeError: If there are no tracks, tracks differ in length, or
            the baseline row is missing.
    """
    if not tracks:
        msg = "Evaluation needs at least one track"
        raise ShapeError(msg)
    lengths = {len(track) for track in tracks}
    if len(lengths) != 1:
        msg = f"Evaluation needs tracks of one length, got {sorted(lengths)}"
        raise ShapeError(msg)
    if not any(source.name == BASELINE for source in sources):
        msg = f"Evaluation needs the '{BASELINE}' row"
        raise ShapeError(msg)

    per_step: dict[str, Array] = {}
    for done, source in enumerate(sources, start=1):
        per_step[source.name] = np.stack(_per_track(spec, source, tracks, ar1, threads))
        if on_progress is not None:
            on_progress(source.name, done, len(sources))
        logger.info("Evaluated %s on %d %s tracks", source.name, len(tracks), split)

    baseline = per_step[BASELINE][:, -1]
    base_mean, base_median = float(baseline.mean()), float(np.median(baseline))
    table = MetricsTable(split=split)
    for name, errors in per_step.items():
        final = errors[:, -1]
        mean, median = float(final.mean()), float(np.median(final))
        ratio_mean, ratio_median = _aggregate_ratios(final, baseline)
        table.rows.append(
            MetricsRow(
                split=split,
                method=name,
                mean=mean,
                median=median,
                relative_mean=_safe_ratio(mean, base_mean),
                relative_median=_safe_ratio(median, base_median),
                ratio_mean=ratio_mean,
                ratio_median=ratio_median,
                n_tracks=len(tracks),
            )
        )
        table.curves[name] = (errors.mean(axis=0), np.median(errors, axis=0))
    return table


def ellipse_axes(covariances: Array) -> tuple[Array, Array, Array]:
    """Standard deviations along the major and minor axes and the major-axis angle of 2x2 covariances."""
    sigmas = np.asarray(covariances, dtype=np.float64)
    if sigmas.ndim != 3 or sigmas.shape[1:] != (2, 2):
        msg = f"ellipse_axes needs (N, 2, 2) covariances, got {sigmas.shape}"
        raise ShapeError(msg)
    values, vectors = np.linalg.eigh(sigmas)
    values = np.clip(values, 0.0, None)
    major = vectors[:, :, 1]
    angle = np.arctan2(major[:, 1], major[:, 0])
    # axes are undirected; fold the angle into (-pi/2, pi/2]
    angle = np.where(angle > np.pi / 2, angle - np.pi, angle)
    angle = np.where(angle <= -np.pi / 2, angle + np.pi, angle)
    return np.sqrt(values[:, 1]), np.sqrt(values[:, 0]), angle
