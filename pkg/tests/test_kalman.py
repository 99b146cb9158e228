"""Tests for the Kalman filter paths, the subset condition and the bias-augmented variant."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from covfilt.autodiff import Node, Tape, take
from covfilt.exceptions import NotPositiveDefiniteError, ShapeError, SubsetConditionError
from covfilt.kalman import (
    FilterSpec,
    FilterState,
    InitPolicy,
    augment_spec,
    check_subset_condition,
    constant_velocity_spec,
    estimate_ar1,
    require_subset_condition,
    run_filter,
    run_filter_diff,
    run_filter_time_correlated,
    step,
    step_time_correlated,
    velocity_errors,
    write_trace_csv,
)
from covfilt.losses import state_estimate_loss
from covfilt.model import assemble_covariance
from tests.conftest import finite_difference, random_spd, relative_error, tape_gradient, tape_value


def _sym_spd(rng: np.random.Generator, n: int, floor: float = 0.5) -> np.ndarray:
    a = random_spd(rng, n, floor)
    return 0.5 * (a + a.T)


def _random_system(seed: int, steps: int = 10) -> tuple[FilterSpec, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    k = int(rng.integers(1, 4))
    spec = FilterSpec(
        F=np.eye(n) + 0.05 * rng.normal(size=(n, n)),
        H=rng.normal(size=(k, n)),
        Q=np.zeros((n, n)),
        P0=_sym_spd(rng, n),
        initial_state=rng.normal(size=n),
        init_policy=InitPolicy.PRIOR,
    )
    measurements = rng.normal(size=(steps, k))
    covariances = np.stack([_sym_spd(rng, k) for _ in range(steps)])
    return spec, measurements, covariances


def _information_form_posterior(
    spec: FilterSpec, measurements: np.ndarray, covariances: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batch posterior of the last state when the dynamics are noise-free."""
    assert spec.P0 is not None and spec.initial_state is not None
    prior_info = np.linalg.inv(spec.P0)
    info = prior_info.copy()
    vector = prior_info @ spec.initial_state
    power = np.eye(spec.n)
    for m, sigma in zip(measurements, covariances, strict=True):
        power = spec.F @ power
        design = spec.H @ power
        weight = np.linalg.inv(sigma)
        info += design.T @ weight @ design
        vector += design.T @ weight @ m
    start_cov = np.linalg.inv(info)
    return power @ start_cov @ vector, power @ start_cov @ power.T


class TestStep:
    def test_equal_variance_fusion(self) -> None:
        spec = FilterSpec(
            F=np.eye(1),
            H=np.eye(1),
            Q=np.zeros((1, 1)),
            P0=np.eye(1),
            initial_state=np.zeros(1),
            init_policy=InitPolicy.PRIOR,
        )
        state = FilterState(z=np.zeros(1), P=np.eye(1), t=-1)
        new_state, trace = step(spec, state, [2.0], [[1.0]])
        assert trace.innovation_cov[0, 0] == pytest.approx(2.0)
        assert trace.gain[0, 0] == pytest.approx(0.5)
        assert new_state.z[0] == pytest.approx(1.0)
        assert new_state.P[0, 0] == pytest.approx(0.5)
        assert new_state.t == 0

    def test_huge_noise_keeps_prediction(self) -> None:
        spec = constant_velocity_spec(dims=2)
        state = FilterState(z=np.array([1.0, 2.0, 0.5, -0.5]), P=np.eye(4), t=0)
        new_state, _ = step(spec, state, [10.0, -10.0], 1e12 * np.eye(2))
        np.testing.assert_allclose(new_state.z, spec.F @ state.z, rtol=1e-6)

    def test_tiny_noise_trusts_measurement(self) -> None:
        spec = constant_velocity_spec(dims=2)
        state = FilterState(z=np.zeros(4), P=np.eye(4), t=0)
        new_state, _ = step(spec, state, [3.0, -1.0], 1e-12 * np.eye(2))
        np.testing.assert_allclose(new_state.z[:2], [3.0, -1.0], atol=1e-6)

    def test_two_exact_measurements_give_velocity(self) -> None:
        spec = constant_velocity_spec(dims=1, dt=0.5)
        run = run_filter(spec, [[1.0], [4.0]], 1e-12 * np.ones((2, 1, 1)))
        assert run.estimates[-1, 1] == pytest.approx(6.0, abs=1e-6)

    def test_measurement_shape_checked(self) -> None:
        spec = constant_velocity_spec(dims=2)
        state = FilterState(z=np.zeros(4), P=np.eye(4), t=0)
        with pytest.raises(ShapeError):
            step(spec, state, [1.0, 2.0, 3.0], np.eye(2))

    def test_indefinite_covariance_carries_step(self) -> None:
        spec = constant_velocity_spec(dims=2)
        state = FilterState(z=np.zeros(4), P=np.eye(4), t=3)
        with pytest.raises(NotPositiveDefiniteError) as info:
            step(spec, state, [0.0, 0.0], [[-1.0, 0.0], [0.0, 1.0]])
        assert info.value.step == 4

    def test_joseph_form_matches_standard(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        joseph = constant_velocity_spec(dims=2, joseph=True)
        state = FilterState(z=rng.normal(size=4), P=_sym_spd(rng, 4), t=0)
        sigma = _sym_spd(rng, 2)
        plain, _ = step(spec, state, [0.3, 0.1], sigma)
        stable, _ = step(joseph, state, [0.3, 0.1], sigma)
        np.testing.assert_allclose(stable.z, plain.z, rtol=1e-12)
        np.testing.assert_allclose(stable.P, plain.P, rtol=1e-8, atol=1e-10)

    def test_gain_uses_predicted_covariance_with_process_noise(self) -> None:
        F = np.array([[1.0, 1.0], [0.0, 1.0]])
        H = np.array([[1.0, 0.0]])
        spec = FilterSpec(F=F, H=H, Q=0.5 * np.eye(2))
        state = FilterState(z=np.zeros(2), P=np.eye(2), t=0)
        _, trace = step(spec, state, [1.0], [[1.0]])
        # predicted covariance [[2.5, 1], [1, 1.5]], innovation variance 3.5
        np.testing.assert_allclose(trace.gain, [[2.5 / 3.5], [1.0 / 3.5]], rtol=1e-12)
        without_noise = F @ np.eye(2) @ (H @ F).T / 3.5
        assert not np.allclose(trace.gain, without_noise)


class TestFilterSpec:
    def test_prior_policy_needs_prior(self) -> None:
        with pytest.raises(ShapeError, match="P0"):
            FilterSpec(F=np.eye(2), H=np.eye(2), Q=np.zeros((2, 2)), init_policy=InitPolicy.PRIOR)

    def test_observation_width_checked(self) -> None:
        with pytest.raises(ShapeError):
            FilterSpec(F=np.eye(2), H=np.eye(3), Q=np.zeros((2, 2)))

    def test_negative_process_noise_rejected(self) -> None:
        with pytest.raises(NotPositiveDefiniteError):
            FilterSpec(F=np.eye(2), H=np.eye(2), Q=-np.eye(2))

    def test_asymmetric_process_noise_rejected(self) -> None:
        with pytest.raises(ShapeError, match="symmetric"):
            FilterSpec(F=np.eye(2), H=np.eye(2), Q=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_constant_velocity_layout(self) -> None:
        spec = constant_velocity_spec(dims=3, dt=2.0)
        assert (spec.n, spec.k) == (6, 3)
        np.testing.assert_array_equal(spec.F[:3, 3:], 2.0 * np.eye(3))
        np.testing.assert_array_equal(spec.H, np.hstack([np.eye(3), np.zeros((3, 3))]))


class TestRunFilter:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_information_form_posterior(self, seed: int) -> None:
        spec, measurements, covariances = _random_system(seed)
        run = run_filter(spec, measurements, covariances)
        mean, cov = _information_form_posterior(spec, measurements, covariances)
        assert len(run.states) == 10
        assert relative_error(run.states[-1].z, mean) < 1e-8
        assert relative_error(run.states[-1].P, cov) < 1e-8

    def test_first_measurement_initialization(self) -> None:
        spec = constant_velocity_spec(dims=3)
        run = run_filter(spec, [[1.0, 2.0, 3.0]], [np.eye(3)])
        np.testing.assert_allclose(run.estimates[0, :3], [1.0, 2.0, 3.0])
        np.testing.assert_allclose(run.estimates[0, 3:], 0.0)
        assert run.traces == []
        assert run.states[0].P[3, 3] == pytest.approx(200.0**2)

    def test_noiseless_track_is_recovered(self) -> None:
        spec = constant_velocity_spec(dims=1)
        truth = np.array([[2.0 * t, 2.0] for t in range(6)])
        run = run_filter(spec, truth[:, :1], 0.01 * np.ones((6, 1, 1)))
        position_error = np.abs(run.estimates[:, 0] - truth[:, 0])
        assert np.all(position_error < 1e-5)
        assert np.all(velocity_errors(run, truth, [1])[1:] < 1e-5)

    def test_trace_non_increasing_without_process_noise(self, rng: np.random.Generator) -> None:
        spec = FilterSpec(
            F=np.eye(3),
            H=rng.normal(size=(2, 3)),
            Q=np.zeros((3, 3)),
            P0=np.eye(3),
            initial_state=np.zeros(3),
            init_policy=InitPolicy.PRIOR,
        )
        sigma = _sym_spd(rng, 2)
        run = run_filter(spec, rng.normal(size=(8, 2)), np.stack([sigma] * 8))
        traces = [np.trace(state.P) for state in run.states]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(traces, traces[1:], strict=False))

    def test_empty_sequence_rejected(self) -> None:
        with pytest.raises(ShapeError):
            run_filter(constant_velocity_spec(dims=2), np.zeros((0, 2)), np.zeros((0, 2, 2)))

    def test_covariance_count_checked(self) -> None:
        with pytest.raises(ShapeError):
            run_filter(constant_velocity_spec(dims=2), np.zeros((3, 2)), np.stack([np.eye(2)] * 2))

    def test_velocity_errors_shape_checked(self) -> None:
        spec = constant_velocity_spec(dims=1)
        run = run_filter(spec, [[0.0], [1.0]], np.ones((2, 1, 1)))
        with pytest.raises(ShapeError):
            velocity_errors(run, np.zeros((3, 2)), [1])


class TestRunFilterDiff:
    def _sequence(self, rng: np.random.Generator, steps: int = 5) -> tuple[np.ndarray, np.ndarray]:
        measurements = np.cumsum(rng.normal(size=(steps, 2)), axis=0)
        covariances = np.stack([_sym_spd(rng, 2, floor=0.2) for _ in range(steps)])
        return measurements, covariances

    def test_forward_matches_plain_path(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        measurements, covariances = self._sequence(rng, steps=7)
        plain = run_filter(spec, measurements, covariances)

        tape = Tape()
        diff = run_filter_diff(spec, [tape.const(m) for m in measurements], [tape.const(c) for c in covariances])
        assert len(diff.states) == len(plain.states)
        for node, state in zip(diff.states, plain.states, strict=True):
            assert np.max(np.abs(node.value[:, 0] - state.z)) < 1e-12
        for node, state in zip(diff.covariances, plain.states, strict=True):
            assert np.max(np.abs(node.value - state.P)) < 1e-12

    def test_truncation_keeps_forward_values(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        measurements, covariances = self._sequence(rng, steps=6)
        tape = Tape()
        full = run_filter_diff(spec, [tape.const(m) for m in measurements], [tape.const(c) for c in covariances])
        cut = run_filter_diff(
            spec, [tape.const(m) for m in measurements], [tape.const(c) for c in covariances], truncation=2
        )
        for a, b in zip(full.states, cut.states, strict=True):
            np.testing.assert_array_equal(a.value, b.value)

    def test_gradient_wrt_covariance_logits(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        measurements = np.cumsum(rng.normal(size=(5, 2)), axis=0)
        truths = rng.normal(size=(5, 4))

        def build(logits: Node) -> Node:
            tape = logits.tape
            sigmas = [
                assemble_covariance(take(logits, [t], [0, 1]), take(logits, [t], [2]), 0.9) for t in range(5)
            ]
            run = run_filter_diff(spec, [tape.const(m) for m in measurements], sigmas)
            return state_estimate_loss(run.states, truths, subset=[0, 1, 2, 3], burn_in=1)

        logits = rng.normal(scale=0.3, size=(5, 3))
        _, grad = tape_gradient(build, logits)
        numeric = finite_difference(lambda x: tape_value(build, x), logits)
        assert relative_error(grad, numeric) < 1e-3

    def test_gradient_is_causal(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        measurements = np.cumsum(rng.normal(size=(5, 2)), axis=0)
        truths = rng.normal(size=(3, 4))

        def build(logits: Node) -> Node:
            tape = logits.tape
            sigmas = [
                assemble_covariance(take(logits, [t], [0, 1]), take(logits, [t], [2]), 0.9) for t in range(5)
            ]
            run = run_filter_diff(spec, [tape.const(m) for m in measurements], sigmas)
            return state_estimate_loss(run.states[:3], truths, subset=[2, 3], burn_in=2)

        _, grad = tape_gradient(build, rng.normal(scale=0.3, size=(5, 3)))
        assert np.any(grad[:3] != 0.0)
        np.testing.assert_array_equal(grad[3:], 0.0)

    def test_length_mismatch(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            run_filter_diff(constant_velocity_spec(dims=2), [tape.const([0.0, 0.0])], [])


class TestSubsetCondition:
    def test_position_supervised_by_position(self) -> None:
        assert check_subset_condition([[1.0, 0.0]], [0]).ok

    def test_velocity_cannot_supervise_position_measurement(self) -> None:
        check = check_subset_condition([[1.0, 0.0]], [1])
        assert not check.ok
        assert check.failing_rows == (0,)

    def test_identity_with_partial_subset(self) -> None:
        check = check_subset_condition(np.eye(2), [0])
        assert not check.ok
        assert check.failing_rows == (1,)
        assert "[1]" in check.diagnostic

    def test_out_of_range_index(self) -> None:
        check = check_subset_condition(np.eye(2), [5])
        assert not check.ok
        assert "outside" in check.diagnostic

    def test_empty_subset(self) -> None:
        assert not check_subset_condition(np.eye(2), []).ok

    def test_require_raises(self) -> None:
        with pytest.raises(SubsetConditionError, match="zero column-sum"):
            require_subset_condition([[1.0, 0.0]], [1])
        require_subset_condition(constant_velocity_spec(dims=3).H, [0, 1, 2, 3, 4, 5])


class TestTimeCorrelated:
    def test_memoryless_bias_matches_standard_step(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        aug = augment_spec(spec, [0.0, 0.0])
        P = _sym_spd(rng, 4)
        z = rng.normal(size=4)
        sigma = _sym_spd(rng, 2)
        standard, _ = step(spec, FilterState(z=z, P=P, t=0), [0.4, -0.2], sigma)
        aug_P = np.zeros((6, 6))
        aug_P[:4, :4] = P
        aug_state = FilterState(z=np.concatenate([z, np.zeros(2)]), P=aug_P, t=0)
        augmented, _ = step_time_correlated(aug, aug_state, [0.4, -0.2], sigma, sigma)
        np.testing.assert_allclose(augmented.z[:4], standard.z, atol=1e-9)
        np.testing.assert_allclose(augmented.P[:4, :4], standard.P, atol=1e-9)

    def test_zero_share_matches_standard_filter(self, rng: np.random.Generator) -> None:
        spec = constant_velocity_spec(dims=2)
        measurements = np.cumsum(rng.normal(size=(6, 2)), axis=0)
        covariances = np.stack([_sym_spd(rng, 2) for _ in range(6)])
        standard = run_filter(spec, measurements, covariances)
        correlated = run_filter_time_correlated(spec, measurements, covariances, [0.0, 0.0], 0.0)
        np.testing.assert_allclose(correlated.estimates, standard.estimates, atol=1e-9)

    def test_augmented_layout(self) -> None:
        aug = augment_spec(constant_velocity_spec(dims=2), [0.5, -0.5])
        assert aug.n == 6
        np.testing.assert_array_equal(aug.H[:, 4:], np.eye(2))
        np.testing.assert_array_equal(aug.F[4:, 4:], np.diag([0.5, -0.5]))

    def test_unit_root_rejected(self) -> None:
        with pytest.raises(ValueError, match="phi"):
            augment_spec(constant_velocity_spec(dims=2), [1.0, 0.0])

    def test_coefficient_count_checked(self) -> None:
        with pytest.raises(ShapeError):
            augment_spec(constant_velocity_spec(dims=2), [0.1])

    def test_share_range_checked(self) -> None:
        spec = constant_velocity_spec(dims=1)
        with pytest.raises(ValueError, match="share"):
            run_filter_time_correlated(spec, [[0.0], [1.0]], np.ones((2, 1, 1)), [0.5], 1.0)

    def test_estimate_ar1_recovers_coefficient(self) -> None:
        rng = np.random.default_rng(3)
        tracks = []
        for _ in range(40):
            noise = np.zeros((200, 2))
            for t in range(1, 200):
                noise[t] = np.array([0.8, 0.2]) * noise[t - 1] + rng.normal(size=2)
            tracks.append(noise)
        estimate = estimate_ar1(tracks)
        np.testing.assert_allclose(estimate.phi, [0.8, 0.2], atol=0.05)
        assert estimate.share == pytest.approx(0.5, abs=0.05)

    def test_estimate_ar1_clips(self) -> None:
        estimate = estimate_ar1([np.ones((1000, 1))])
        assert estimate.phi[0] == 0.99
        assert estimate.share == 0.99

    def test_estimate_ar1_needs_two_steps(self) -> None:
        with pytest.raises(ShapeError):
            estimate_ar1([np.zeros((1, 2))])


class TestTraceCsv:
    def test_writes_one_row_per_state(self, tmp_path: Path) -> None:
        spec = constant_velocity_spec(dims=2)
        run = run_filter(spec, [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], np.stack([np.eye(2)] * 3))
        path = tmp_path / "out" / "trace.csv"
        write_trace_csv(run, path)
        with path.open(encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0][:3] == ["t", "m_0", "m_1"]
        assert "sigma_01" in rows[0]
        assert len(rows) == 4
        assert [row[0] for row in rows[1:]] == ["0", "1", "2"]
