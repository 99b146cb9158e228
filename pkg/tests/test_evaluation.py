"""Tests for filter evaluation and the metrics table."""

from __future__ import annotations

import numpy as np
import pytest

from covfilt.config import CovarianceSource, Method, TrackConfig
from covfilt.evaluation import (
    BASELINE,
    MethodSource,
    build_sources,
    ellipse_axes,
    evaluate_sources,
    method_sources,
    residual_ar1,
    row_name,
    split_by_track,
    track_errors,
)
from covfilt.exceptions import ShapeError
from covfilt.kalman import Ar1Estimate, constant_velocity_spec
from covfilt.model import init_params
from covfilt.simulator import INPUT_DIM, TrackDataset, generate_tracks


@pytest.fixture
def tracks() -> list[TrackDataset]:
    return generate_tracks(TrackConfig(duration=6, seed=3), 5)


def _true_source(name: str, tracks: list[TrackDataset]) -> MethodSource:
    return MethodSource(
        name,
        [track.measurements for track in tracks],
        [track.true_covariances for track in tracks],
    )


def _exact_source(name: str, tracks: list[TrackDataset]) -> MethodSource:
    return MethodSource(
        name,
        [track.labels for track in tracks],
        [np.broadcast_to(1e-6 * np.eye(3), (len(track), 3, 3)).copy() for track in tracks],
    )


class TestHelpers:
    def test_row_name(self) -> None:
        assert row_name(Method.FIXED) == "fixed"
        assert row_name(Method.MLE_COVARIANCE, CovarianceSource.COMBINED) == "mle-covariance/combined"

    def test_split_by_track(self, tracks: list[TrackDataset]) -> None:
        stacked = np.arange(30.0)
        parts = split_by_track(stacked, tracks)
        assert [len(part) for part in parts] == [6] * 5
        np.testing.assert_array_equal(parts[2], np.arange(12.0, 18.0))

    def test_residual_ar1_per_dimension(self, tracks: list[TrackDataset]) -> None:
        estimate = residual_ar1(init_params(INPUT_DIM, 3, hidden_sizes=(4,), seed=0), tracks)
        assert estimate.phi.shape == (3,)
        assert 0.0 <= estimate.share < 1.0

    def test_track_errors_length(self, tracks: list[TrackDataset]) -> None:
        track = tracks[0]
        errors = track_errors(constant_velocity_spec(3), track.measurements, track.true_covariances, track.states)
        assert errors.shape == (6,)
        assert np.all(errors >= 0.0)


class TestEvaluateSources:
    def test_identical_rows_have_unit_ratios(self, tracks: list[TrackDataset]) -> None:
        sources = [_true_source(BASELINE, tracks), _true_source("copy", tracks)]
        table = evaluate_sources(constant_velocity_spec(3), sources, tracks)
        row = table.row("copy")
        assert row.relative_mean == pytest.approx(1.0)
        assert row.relative_median == pytest.approx(1.0)
        assert row.ratio_mean == pytest.approx(1.0)
        assert row.n_tracks == 5
        assert row.split == "test"

    def test_exact_measurements_beat_noisy_baseline(self, tracks: list[TrackDataset]) -> None:
        sources = [_true_source(BASELINE, tracks), _exact_source("exact", tracks)]
        table = evaluate_sources(constant_velocity_spec(3), sources, tracks, split="ood")
        row = table.row("exact")
        assert row.mean < table.row(BASELINE).mean
        assert row.relative_mean < 1e-3
        assert row.ratio_median < 1e-3

    def test_curves_follow_measurement_count(self, tracks: list[TrackDataset]) -> None:
        table = evaluate_sources(constant_velocity_spec(3), [_true_source(BASELINE, tracks)], tracks)
        mean, median = table.curves[BASELINE]
        assert mean.shape == (6,)
        assert median.shape == (6,)
        assert mean[-1] == pytest.approx(table.row(BASELINE).mean)
        records = table.curve_records()
        assert len(records) == 6
        assert records[0]["measurement_count"] == 1
        assert records[-1]["measurement_count"] == 6

    def test_threads_do_not_change_result(self, tracks: list[TrackDataset]) -> None:
        sources = [_true_source(BASELINE, tracks)]
        spec = constant_velocity_spec(3)
        sequential = evaluate_sources(spec, sources, tracks)
        parallel = evaluate_sources(spec, sources, tracks, threads=3)
        assert sequential.row(BASELINE) == parallel.row(BASELINE)

    def test_progress_callback(self, tracks: list[TrackDataset]) -> None:
        seen: list[tuple[str, int, int]] = []
        sources = [_true_source(BASELINE, tracks), _exact_source("exact", tracks)]
        evaluate_sources(constant_velocity_spec(3), sources, tracks, on_progress=lambda *args: seen.append(args))
        assert seen == [(BASELINE, 1, 2), ("exact", 2, 2)]

    def test_time_correlated_filter(self, tracks: list[TrackDataset]) -> None:
        ar1 = Ar1Estimate(phi=np.full(3, 0.5), share=0.5)
        table = evaluate_sources(constant_velocity_spec(3), [_true_source(BASELINE, tracks)], tracks, ar1=ar1)
        assert np.isfinite(table.row(BASELINE).mean)

    def test_baseline_row_required(self, tracks: list[TrackDataset]) -> None:
        with pytest.raises(ShapeError, match="fixed"):
            evaluate_sources(constant_velocity_spec(3), [_true_source("other", tracks)], tracks)

    def test_tracks_required(self) -> None:
        with pytest.raises(ShapeError, match="at least one track"):
            evaluate_sources(constant_velocity_spec(3), [MethodSource(BASELINE, [], [])], [])

    def test_mixed_lengths_rejected(self, tracks: list[TrackDataset]) -> None:
        mixed = [*tracks, *generate_tracks(TrackConfig(duration=4, seed=1), 1)]
        with pytest.raises(ShapeError, match="one length"):
            evaluate_sources(constant_velocity_spec(3), [_true_source(BASELINE, mixed)], mixed)

    def test_unknown_row(self, tracks: list[TrackDataset]) -> None:
        table = evaluate_sources(constant_velocity_spec(3), [_true_source(BASELINE, tracks)], tracks)
        with pytest.raises(KeyError):
            table.row("missing")


class TestSources:
    def test_fixed_row_comes_first(self, tracks: list[TrackDataset]) -> None:
        base = init_params(INPUT_DIM, 3, hidden_sizes=(4,), dropout_rate=0.0, seed=0)
        rows = build_sources(
            base,
            2.0 * np.eye(3),
            {Method.FIXED: base, Method.MLE_COVARIANCE: base},
            tracks,
            sources=[CovarianceSource.ALEATORIC],
            epistemic_samples=3,
            seed=0,
        )
        assert [row.name for row in rows] == ["fixed", "mle-covariance/aleatoric"]
        np.testing.assert_array_equal(rows[0].covariances[1], np.broadcast_to(2.0 * np.eye(3), (6, 3, 3)))
        np.testing.assert_array_equal(rows[0].measurements[1], rows[1].measurements[1])

    def test_one_row_per_source_with_dropout(self, tracks: list[TrackDataset]) -> None:
        params = init_params(INPUT_DIM, 3, hidden_sizes=(4,), dropout_rate=0.2, seed=0)
        rows = method_sources(
            Method.MLE_COVARIANCE,
            params,
            tracks,
            sources=[CovarianceSource.ALEATORIC, CovarianceSource.COMBINED],
            epistemic_samples=4,
            seed=1,
        )
        assert [row.name for row in rows] == ["mle-covariance/aleatoric", "mle-covariance/combined"]
        assert len(rows[1].covariances) == 5
        assert rows[1].covariances[0].shape == (6, 3, 3)

    def test_variance_method_is_diagonal(self, tracks: list[TrackDataset]) -> None:
        params = init_params(INPUT_DIM, 3, hidden_sizes=(4,), dropout_rate=0.2, seed=0)
        rows = method_sources(
            Method.MLE_VARIANCE,
            params,
            tracks,
            sources=[CovarianceSource.COMBINED],
            epistemic_samples=4,
            seed=1,
        )
        off_diagonal = rows[0].covariances[0] * (1.0 - np.eye(3))
        np.testing.assert_array_equal(off_diagonal, 0.0)

    def test_without_dropout_only_aleatoric(self, tracks: list[TrackDataset]) -> None:
        params = init_params(INPUT_DIM, 3, hidden_sizes=(4,), dropout_rate=0.0, seed=0)
        rows = method_sources(
            Method.KALMAN_COVARIANCE,
            params,
            tracks,
            sources=list(CovarianceSource),
            epistemic_samples=4,
            seed=1,
        )
        assert [row.name for row in rows] == ["kalman-covariance/aleatoric"]


class TestEllipseAxes:
    def test_axis_aligned(self) -> None:
        major, minor, angle = ellipse_axes(np.array([np.diag([4.0, 1.0]), np.diag([1.0, 4.0])]))
        np.testing.assert_allclose(major, [2.0, 2.0])
        np.testing.assert_allclose(minor, [1.0, 1.0])
        np.testing.assert_allclose(angle, [0.0, np.pi / 2], atol=1e-12)

    def test_rotated(self) -> None:
        _, _, angle = ellipse_axes(np.array([[[2.5, 1.5], [1.5, 2.5]]]))
        np.testing.assert_allclose(angle, [np.pi / 4])

    def test_shape_checked(self) -> None:
        with pytest.raises(ShapeError):
            ellipse_axes(np.eye(3)[None])
