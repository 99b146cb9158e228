"""Tests for the likelihood and state-estimate losses."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from covfilt.autodiff import Node, Tape, backward
from covfilt.exceptions import NotPositiveDefiniteError, ShapeError
from covfilt.losses import (
    batch_nll,
    diagonal_nll,
    gaussian_nll,
    gaussian_nll_terms,
    jitter_scale,
    repair_covariance,
    stabilize_covariance,
    state_estimate_loss,
)
from tests.conftest import (
    random_spd,
    relative_error,
    symmetric_finite_difference,
    symmetric_projection,
    tape_gradient,
    tape_value,
)


class TestGaussianNll:
    def test_standard_normal_at_one(self) -> None:
        tape = Tape()
        loss = gaussian_nll(tape.const([[0.0]]), tape.const([[1.0]]), [[1.0]])
        assert loss.item() == pytest.approx(0.5)

    def test_isotropic_two_dimensional(self) -> None:
        tape = Tape()
        terms = gaussian_nll_terms(tape.const([0.0, 0.0]), tape.const(2.0 * np.eye(2)), [1.0, 1.0])
        report = terms.report()
        assert report.quadratic == pytest.approx(0.5)
        assert report.logdet == pytest.approx(np.log(2.0))
        assert report.total == report.quadratic + report.logdet
        assert report.jitter == 0.0

    def test_matches_scipy_density(self, rng: np.random.Generator) -> None:
        sigma = random_spd(rng, 3)
        mean = rng.normal(size=3)
        y = rng.normal(size=3)
        tape = Tape()
        loss = gaussian_nll(tape.const(mean), tape.const(sigma), y)
        expected = -multivariate_normal(mean, sigma).logpdf(y) - 1.5 * np.log(2.0 * np.pi)
        assert loss.item() == pytest.approx(expected, rel=1e-10)

    def test_gradient_wrt_covariance(self, rng: np.random.Generator) -> None:
        sigma = random_spd(rng, 3)
        mean = rng.normal(size=(3, 1))
        y = rng.normal(size=(3, 1))

        def build(node: Node) -> Node:
            return gaussian_nll(node.tape.const(mean), node, y)

        _, grad = tape_gradient(build, sigma)
        inverse = np.linalg.inv(sigma)
        r = y - mean
        analytic = 0.5 * (inverse - inverse @ r @ r.T @ inverse)
        np.testing.assert_allclose(grad, analytic, rtol=1e-8, atol=1e-12)
        numeric = symmetric_finite_difference(lambda x: tape_value(build, x), sigma)
        assert relative_error(symmetric_projection(grad), numeric) < 1e-5

    def test_gradient_wrt_mean(self, rng: np.random.Generator) -> None:
        sigma = random_spd(rng, 2)
        y = rng.normal(size=(2, 1))
        mean = rng.normal(size=(2, 1))
        _, grad = tape_gradient(lambda node: gaussian_nll(node, node.tape.const(sigma), y), mean)
        np.testing.assert_allclose(grad, -np.linalg.solve(sigma, y - mean), rtol=1e-10)

    def test_shape_mismatch(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            gaussian_nll(tape.const([0.0, 0.0]), tape.const(np.eye(3)), [0.0, 0.0])

    def test_diagonal_nll_matches_full_with_diagonal(self, rng: np.random.Generator) -> None:
        variances = np.array([0.5, 2.0, 1.5])
        mean = rng.normal(size=3)
        y = rng.normal(size=3)
        tape = Tape()
        diagonal = diagonal_nll(tape.const(mean), tape.const(variances), y)
        full = gaussian_nll(tape.const(mean), tape.const(np.diag(variances)), y)
        assert diagonal.item() == pytest.approx(full.item(), rel=1e-12)


class TestStabilize:
    def test_jitter_scale(self) -> None:
        assert jitter_scale(np.diag([2.0, 4.0])) == 3.0
        assert jitter_scale(np.zeros((2, 2))) == 1.0

    def test_positive_definite_untouched(self) -> None:
        matrix, jitter = stabilize_covariance(np.diag([1.0, 2.0]))
        assert jitter == 0.0
        np.testing.assert_array_equal(matrix, np.diag([1.0, 2.0]))

    def test_singular_gets_smallest_jitter(self) -> None:
        matrix, jitter = stabilize_covariance(np.ones((2, 2)))
        assert jitter == pytest.approx(1e-9)
        np.testing.assert_allclose(matrix, np.ones((2, 2)) + 1e-9 * np.eye(2))

    def test_indefinite_is_shrunk(self) -> None:
        repair = repair_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert repair.jitter == pytest.approx(1e-3)
        assert repair.shrinkage == 0.5
        np.testing.assert_allclose(repair.matrix, [[1.001, 1.0], [1.0, 1.001]])
        np.testing.assert_allclose(repair.factor @ repair.factor.T, repair.matrix)

    def test_non_positive_diagonal_rejected(self) -> None:
        with pytest.raises(NotPositiveDefiniteError, match="diagonal"):
            stabilize_covariance(np.array([[-1.0, 0.0], [0.0, 1.0]]))

    def test_non_finite_rejected(self) -> None:
        with pytest.raises(NotPositiveDefiniteError, match="non-finite"):
            stabilize_covariance(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_nll_reports_jitter(self) -> None:
        tape = Tape()
        terms = gaussian_nll_terms(tape.const([0.0, 0.0]), tape.const(np.ones((2, 2))), [0.1, 0.1])
        assert terms.jitter > 0.0
        assert terms.shrinkage == 0.0

    def test_gradient_through_shrunk_covariance(self) -> None:
        sigma = np.array([[1.0, 2.0], [2.0, 1.0]])
        residual = np.array([0.3, -0.2])
        repaired = np.array([[1.001, 1.0], [1.0, 1.001]])
        solved = np.linalg.solve(repaired, residual)
        keep = np.array([[1.0, 0.5], [0.5, 1.0]])
        expected = 0.5 * (np.linalg.inv(repaired) - np.outer(solved, solved)) * keep

        tape = Tape()
        node = tape.param(sigma)
        terms = gaussian_nll_terms(tape.const(np.zeros(2)), node, residual)
        backward(tape, terms.total)
        assert terms.report().shrinkage == 0.5
        np.testing.assert_allclose(node.adjoint, expected, rtol=1e-6)

        tape = Tape()
        rows = tape.param(sigma.reshape(1, 4))
        loss, report = batch_nll(rows, tape.const(residual[None, :]))
        backward(tape, loss)
        assert report.shrinkage == 0.5
        assert loss.item() == pytest.approx(terms.total.item(), rel=1e-10)
        np.testing.assert_allclose(rows.adjoint.reshape(2, 2), expected, rtol=1e-6)


class TestBatchNll:
    def test_matches_mean_of_single_losses(self, rng: np.random.Generator) -> None:
        sigmas = np.stack([random_spd(rng, 2) for _ in range(4)])
        residuals = rng.normal(size=(4, 2))
        tape = Tape()
        loss, report = batch_nll(tape.const(sigmas.reshape(4, 4)), tape.const(residuals))
        zero = tape.const(np.zeros(2))
        singles = [gaussian_nll(zero, tape.const(s), r).item() for s, r in zip(sigmas, residuals, strict=True)]
        assert loss.item() == pytest.approx(np.mean(singles), rel=1e-10)
        assert report.total == pytest.approx(report.quadratic + report.logdet)

    def test_gradients(self, rng: np.random.Generator) -> None:
        sigmas = np.stack([random_spd(rng, 2) for _ in range(3)])
        residuals = rng.normal(size=(3, 2))
        tape = Tape()
        rows = tape.param(sigmas.reshape(3, 4))
        resid = tape.param(residuals)
        loss, _ = batch_nll(rows, resid)
        backward(tape, loss)
        for b in range(3):
            inverse = np.linalg.inv(sigmas[b])
            solved = inverse @ residuals[b]
            expected = 0.5 * (inverse - np.outer(solved, solved)) / 3.0
            np.testing.assert_allclose(rows.adjoint[b].reshape(2, 2), expected, rtol=1e-8, atol=1e-12)
            np.testing.assert_allclose(resid.adjoint[b], solved / 3.0, rtol=1e-8)

    def test_offsets_are_added(self, rng: np.random.Generator) -> None:
        sigma = random_spd(rng, 2)
        offset = np.diag([0.3, 0.7])
        residual = rng.normal(size=2)
        tape = Tape()
        loss, _ = batch_nll(tape.const(sigma.reshape(1, 4)), tape.const(residual[None, :]), offsets=offset[None])
        expected = gaussian_nll(tape.const(np.zeros(2)), tape.const(sigma + offset), residual)
        assert loss.item() == pytest.approx(expected.item(), rel=1e-10)

    def test_row_shape_checked(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            batch_nll(tape.const(np.ones((2, 3))), tape.const(np.ones((2, 2))))


class TestStateEstimateLoss:
    def test_mean_squared_error_after_burn_in(self) -> None:
        tape = Tape()
        estimates = [tape.const([[float(t)], [0.0], [1.0]]) for t in range(4)]
        truths = np.zeros((4, 3))
        loss = state_estimate_loss(estimates, truths, subset=[0, 2], burn_in=2)
        # steps 2 and 3: ((4 + 1) + (9 + 1)) / (2 * 2)
        assert loss.item() == pytest.approx(15.0 / 4.0)

    def test_gradient_reaches_estimates(self) -> None:
        tape = Tape()
        estimates = [tape.param([[1.0], [5.0]]) for _ in range(3)]
        loss = state_estimate_loss(estimates, np.zeros((3, 2)), subset=[0], burn_in=1)
        backward(tape, loss)
        assert estimates[0].adjoint[0, 0] == 0.0
        assert estimates[1].adjoint[0, 0] == pytest.approx(1.0)
        assert estimates[1].adjoint[1, 0] == 0.0

    def test_length_mismatch(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            state_estimate_loss([tape.const([[0.0]])], np.zeros((2, 1)), subset=[0])

    def test_empty_window(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError, match="burn_in"):
            state_estimate_loss([tape.const([[0.0]])] * 2, np.zeros((2, 1)), subset=[0], burn_in=2)

    def test_subset_out_of_range(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError, match="out of range"):
            state_estimate_loss([tape.const([[0.0]])] * 3, np.zeros((3, 1)), subset=[1], burn_in=0)

    def test_empty_subset(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            state_estimate_loss([tape.const([[0.0]])] * 3, np.zeros((3, 1)), subset=[], burn_in=0)
