"""Linear Kalman filter with a plain numeric path and a differentiable tape path.

Prediction and update are fused into one step::

    i = m - H F z
    S = Sigma + H (F P F^T + Q) H^T
    K = (F P F^T + Q) H^T S^-1
    z' = F z + K i
    P' = sym((I - K H)(F P F^T + Q))

Both paths perform the same operations in the same order, so their values
agree to rounding.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from covfilt.autodiff import Array, Node, detach, matmul, scale, solve_factored, solve_spd, transpose
from covfilt.autodiff.linalg import factor_spd
from covfilt.exceptions import NotPositiveDefiniteError, ReportWriteError, ShapeError, SubsetConditionError
from covfilt.losses import stabilize_covariance, stabilize_node

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import ArrayLike

logger = logging.getLogger(__name__)

__all__ = [
    "Ar1Estimate",
    "AugmentedSpec",
    "DiffRun",
    "FilterRun",
    "FilterSpec",
    "FilterState",
    "InitPolicy",
    "StepTrace",
    "SubsetCheck",
    "augment_spec",
    "check_subset_condition",
    "constant_velocity_spec",
    "estimate_ar1",
    "initial_state",
    "require_subset_condition",
    "run_filter",
    "run_filter_diff",
    "run_filter_time_correlated",
    "step",
    "step_time_correlated",
    "velocity_errors",
    "write_trace_csv",
]

_PSD_TOL = 1e-9
_PHI_LIMIT = 0.99


class InitPolicy(Enum):
    """How the filter obtains its first estimate."""

    FIRST_MEASUREMENT = "first-measurement"
    PRIOR = "prior"


def _require_psd(name: str, matrix: Array) -> None:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        msg = f"{name} must be square, got shape {matrix.shape}"
        raise ShapeError(msg)
    scale_ = max(float(np.abs(matrix).max(initial=0.0)), 1.0)
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-9 * scale_):
        msg = f"{name} must be symmetric"
        raise ShapeError(msg)
    if np.linalg.eigvalsh(matrix).min(initial=0.0) < -_PSD_TOL * scale_:
        msg = f"{name} must be positive semi-definite"
        raise NotPositiveDefiniteError(msg)


@dataclass(frozen=True)
class FilterSpec:
    """The linear-Gaussian system: transition ``F``, observation ``H``, process noise ``Q``.

    With ``InitPolicy.PRIOR`` the filter starts from ``initial_state`` and
    ``P0``; with ``InitPolicy.FIRST_MEASUREMENT`` it starts from the first
    measurement and gives unobserved directions a prior standard deviation of
    ``velocity_std_max``.
    """

    F: Array
    H: Array
    Q: Array
    P0: Array | None = None
    initial_state: Array | None = None
    init_policy: InitPolicy = InitPolicy.FIRST_MEASUREMENT
    velocity_std_max: float = 200.0
    joseph: bool = False

    def __post_init__(self) -> None:
        n = self.F.shape[0]
        if self.F.shape != (n, n):
            msg = f"F must be square, got {self.F.shape}"
            raise ShapeError(msg)
        if self.H.ndim != 2 or self.H.shape[1] != n:
            msg = f"H of shape {self.H.shape} does not map an {n}-dimensional state"
            raise ShapeError(msg)
        if self.Q.shape != (n, n):
            msg = f"Q must be {n}x{n}, got {self.Q.shape}"
            raise ShapeError(msg)
        _require_psd("Q", self.Q)
        if self.init_policy is InitPolicy.PRIOR:
            if self.P0 is None or self.initial_state is None:
                msg = "The prior init policy needs both P0 and initial_state"
                raise ShapeError(msg)
            if self.initial_state.shape != (n,):
                msg = f"initial_state must have shape ({n},), got {self.initial_state.shape}"
                raise ShapeError(msg)
        if self.P0 is not None:
            if self.P0.shape != (n, n):
                msg = f"P0 must be {n}x{n}, got {self.P0.shape}"
                raise ShapeError(msg)
            _require_psd("P0", self.P0)

    @property
    def n(self) -> int:
        return int(self.F.shape[0])

    @property
    def k(self) -> int:
        return int(self.H.shape[0])


def constant_velocity_spec(
    dims: int = 3,
    dt: float = 1.0,
    *,
    velocity_std_max: float = 200.0,
    joseph: bool = False,
) -> FilterSpec:
    """Position/velocity system observed in position only, without process noise."""
    eye = np.eye(dims)
    zeros = np.zeros((dims, dims))
    F = np.block([[eye, dt * eye], [zeros, eye]])
    H = np.hstack([eye, zeros])
    return FilterSpec(
        F=F,
        H=H,
        Q=np.zeros((2 * dims, 2 * dims)),
        velocity_std_max=velocity_std_max,
        joseph=joseph,
    )


@dataclass(frozen=True)
class FilterState:
    """Estimate ``z`` with covariance ``P`` after measurement ``t`` (0-based)."""

    z: Array
    P: Array
    t: int


@dataclass(frozen=True)
class StepTrace:
    innovation: Array
    innovation_cov: Array
    gain: Array
    state: FilterState
    jitter: float = 0.0


@dataclass(frozen=True)
class FilterRun:
    """Result of filtering a whole sequence.

    ``states[t]`` is the estimate after measurement ``t``; ``traces`` covers
    the measurements consumed by ``step`` (all of them under the prior policy,
    all but the first under first-measurement initialization).
    """

    states: list[FilterState]
    traces: list[StepTrace]
    measurements: Array
    covariances: Array

    @property
    def estimates(self) -> Array:
        return np.stack([state.z for state in self.states])


def _symmetrize(matrix: Array) -> Array:
    return (matrix + matrix.T) * 0.5


def initial_state(spec: FilterSpec, measurement: ArrayLike, sigma: ArrayLike) -> FilterState:
    """First-measurement initialization ``z0 = H+ m``, ``P0 = H+ Sigma H+^T + v^2 (I - H+ H)``."""
    pinv = np.linalg.pinv(spec.H)
    stable, _ = stabilize_covariance(sigma)
    unobserved = spec.velocity_std_max**2 * (np.eye(spec.n) - pinv @ spec.H)
    z = pinv @ np.asarray(measurement, dtype=np.float64)
    P = (pinv @ stable) @ pinv.T + unobserved
    return FilterState(z=z, P=_symmetrize(P), t=0)


def step(
    spec: FilterSpec,
    state: FilterState,
    measurement: ArrayLike,
    sigma: ArrayLike,
) -> tuple[FilterState, StepTrace]:
    """Fuse one measurement with covariance ``sigma`` into the running estimate.

    Raises:
        NotPositiveDefiniteError: If the innovation covariance does not factor;
            the error carries the step index.
    """
    t = state.t + 1
    m = np.asarray(measurement, dtype=np.float64)
    if m.shape != (spec.k,):
        msg = f"Measurement {t} has shape {m.shape}, expected ({spec.k},)"
        raise ShapeError(msg)
    try:
        stable, jitter = stabilize_covariance(sigma)
    except NotPositiveDefiniteError as exc:
        msg = f"Measurement covariance at step {t}: {exc}"
        raise NotPositiveDefiniteError(msg, step=t) from exc

    F, H = spec.F, spec.H
    z_pred = F @ state.z
    P_pred = (F @ state.P) @ F.T + spec.Q
    innovation = m - H @ z_pred
    HP = H @ P_pred
    S = stable + HP @ H.T
    try:
        factor = factor_spd(S)
    except NotPositiveDefiniteError as exc:
        msg = f"Innovation covariance at step {t} is not positive definite"
        raise NotPositiveDefiniteError(msg, step=t) from exc
    # gain is P_pred H^T S^-1, which matches F P (H F)^T S^-1 only while Q is zero
    gain = solve_factored(factor, HP).T
    z_new = z_pred + gain @ innovation
    I_KH = np.eye(spec.n) - gain @ H
    if spec.joseph:
        P_new = (I_KH @ P_pred) @ I_KH.T + (gain @ stable) @ gain.T
    else:
        P_new = I_KH @ P_pred
    new_state = FilterState(z=z_new, P=_symmetrize(P_new), t=t)
    trace = StepTrace(
        innovation=innovation,
        innovation_cov=_symmetrize(S),
        gain=gain,
        state=new_state,
        jitter=jitter,
    )
    return new_state, trace


def _validate_sequence(spec: FilterSpec, measurements: Array, covariances: Array) -> None:
    if measurements.ndim != 2 or measurements.shape[0] == 0 or measurements.shape[1] != spec.k:
        msg = f"Expected a non-empty (T, {spec.k}) measurement array, got {measurements.shape}"
        raise ShapeError(msg)
    if covariances.shape != (measurements.shape[0], spec.k, spec.k):
        msg = f"Expected covariances of shape {(measurements.shape[0], spec.k, spec.k)}, got {covariances.shape}"
        raise ShapeError(msg)


def run_filter(spec: FilterSpec, measurements: ArrayLike, covariances: ArrayLike) -> FilterRun:
    """Filter a whole sequence of measurements (T, k) with covariances (T, k, k)."""
    m = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    sigmas = np.asarray(covariances, dtype=np.float64)
    _validate_sequence(spec, m, sigmas)

    traces: list[StepTrace] = []
    if spec.init_policy is InitPolicy.FIRST_MEASUREMENT:
        state = initial_state(spec, m[0], sigmas[0])
        start = 1
    else:
        assert spec.initial_state is not None and spec.P0 is not None
        state = FilterState(z=spec.initial_state.copy(), P=spec.P0.copy(), t=-1)
        start = 0
    states = [state] if start else []
    for t in range(start, m.shape[0]):
        state, trace = step(spec, state, m[t], sigmas[t])
        states.append(state)
        traces.append(trace)
    return FilterRun(states=states, traces=traces, measurements=m, covariances=sigmas)


@dataclass(frozen=True)
class DiffRun:
    """Tape nodes of the estimates (n x 1) and covariances after each measurement."""

    states: list[Node]
    covariances: list[Node] = field(repr=False)


def run_filter_diff(
    spec: FilterSpec,
    measurements: Sequence[Node],
    covariances: Sequence[Node],
    *,
    truncation: int | None = None,
) -> DiffRun:
    """Differentiable counterpart of ``run_filter``.

    ``measurements`` are (k x 1) nodes and ``covariances`` (k x k) nodes on a
    single tape. With ``truncation`` set, the running estimate is detached
    every ``truncation`` steps so gradients reach back at most that far.
    """
    if not measurements or len(measurements) != len(covariances):
        msg = f"Need matching non-empty sequences, got {len(measurements)} and {len(covariances)}"
        raise ShapeError(msg)
    tape = measurements[0].tape
    F = tape.const(spec.F)
    H = tape.const(spec.H)
    Q = tape.const(spec.Q)
    identity = np.eye(spec.n)

    if spec.init_policy is InitPolicy.FIRST_MEASUREMENT:
        pinv = np.linalg.pinv(spec.H)
        pinv_node = tape.const(pinv)
        sigma0, _ = stabilize_node(covariances[0])
        z = matmul(pinv_node, measurements[0])
        P = matmul(matmul(pinv_node, sigma0), tape.const(pinv.T)) + tape.const(
            spec.velocity_std_max**2 * (identity - pinv @ spec.H)
        )
        P = scale(P + transpose(P), 0.5)
        states, posteriors, start = [z], [P], 1
    else:
        assert spec.initial_state is not None and spec.P0 is not None
        z = tape.const(spec.initial_state)
        P = tape.const(spec.P0)
        states, posteriors, start = [], [], 0

    for t in range(start, len(measurements)):
        if truncation and t > start and (t - start) % truncation == 0:
            z, P = detach(z), detach(P)
        try:
            sigma, _ = stabilize_node(covariances[t])
            z_pred = matmul(F, z)
            P_pred = matmul(matmul(F, P), transpose(F)) + Q
            innovation = measurements[t] - matmul(H, z_pred)
            HP = matmul(H, P_pred)
            S = sigma + matmul(HP, transpose(H))
            gain = transpose(solve_spd(S, HP))
        except NotPositiveDefiniteError as exc:
            msg = f"Innovation covariance at step {t} is not positive definite"
            raise NotPositiveDefiniteError(msg, step=t) from exc
        z = z_pred + matmul(gain, innovation)
        I_KH = tape.const(identity) - matmul(gain, H)
        if spec.joseph:
            P_new = matmul(matmul(I_KH, P_pred), transpose(I_KH)) + matmul(matmul(gain, sigma), transpose(gain))
        else:
            P_new = matmul(I_KH, P_pred)
        P = scale(P_new + transpose(P_new), 0.5)
        states.append(z)
        posteriors.append(P)
    return DiffRun(states=states, covariances=posteriors)


@dataclass(frozen=True)
class SubsetCheck:
    ok: bool
    diagnostic: str
    failing_rows: tuple[int, ...] = ()


def check_subset_condition(H: ArrayLike, subset: Sequence[int]) -> SubsetCheck:
    """Check that every measurement row has a nonzero sum over the supervised state columns.

    Indices are 0-based.
    """
    obs = np.atleast_2d(np.asarray(H, dtype=np.float64))
    n = obs.shape[1]
    if not subset:
        return SubsetCheck(ok=False, diagnostic="subset is empty")
    bad = [index for index in subset if not 0 <= index < n]
    if bad:
        return SubsetCheck(ok=False, diagnostic=f"subset indices {bad} outside 0..{n - 1}")
    sums = obs[:, list(subset)].sum(axis=1)
    failing = tuple(int(row) for row in np.flatnonzero(sums == 0.0))
    if failing:
        diagnostic = (
            f"measurement rows {list(failing)} have zero column-sum over state indices {list(subset)}; "
            "those measurements give the supervised states no signal"
        )
        return SubsetCheck(ok=False, diagnostic=diagnostic, failing_rows=failing)
    return SubsetCheck(ok=True, diagnostic="ok")


def require_subset_condition(H: ArrayLike, subset: Sequence[int]) -> None:
    """Raise SubsetConditionError when ``check_subset_condition`` fails."""
    check = check_subset_condition(H, subset)
    if not check.ok:
        raise SubsetConditionError(check.diagnostic)


def velocity_errors(run: FilterRun, true_states: ArrayLike, velocity_indices: Sequence[int]) -> Array:
    """Euclidean velocity error after every measurement, shape (T,)."""
    truth = np.asarray(true_states, dtype=np.float64)
    estimates = run.estimates
    if truth.shape != estimates.shape:
        msg = f"True states {truth.shape} do not match estimates {estimates.shape}"
        raise ShapeError(msg)
    index = list(velocity_indices)
    return np.asarray(np.linalg.norm(estimates[:, index] - truth[:, index], axis=1), dtype=np.float64)


@dataclass(frozen=True)
class Ar1Estimate:
    """Per-dimension AR(1) coefficients and the share of the covariance treated as correlated."""

    phi: Array
    share: float


def estimate_ar1(residual_tracks: Sequence[ArrayLike]) -> Ar1Estimate:
    """Pooled lag-1 autocorrelation of residual sequences, one column per measurement dimension.

    ``phi`` is clipped to ``[-0.99, 0.99]``; the correlated share is the mean
    of the per-dimension autocorrelations clipped to ``[0, 0.99]``.
    """
    numerator: Array | None = None
    denominator: Array | None = None
    for track in residual_tracks:
        residual = np.atleast_2d(np.asarray(track, dtype=np.float64))
        if residual.shape[0] < 2:
            continue
        lagged = (residual[1:] * residual[:-1]).sum(axis=0)
        energy = (residual * residual).sum(axis=0)
        numerator = lagged if numerator is None else numerator + lagged
        denominator = energy if denominator is None else denominator + energy
    if numerator is None or denominator is None:
        msg = "estimate_ar1 needs at least one residual track with two or more steps"
        raise ShapeError(msg)
    rho = np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0.0)
    phi = np.clip(rho, -_PHI_LIMIT, _PHI_LIMIT)
    share = float(np.clip(rho, 0.0, _PHI_LIMIT).mean())
    logger.info("Estimated AR(1) coefficients %s with correlated share %.3f", np.round(phi, 3).tolist(), share)
    return Ar1Estimate(phi=phi, share=share)


@dataclass(frozen=True)
class AugmentedSpec:
    """A filter spec whose state is extended by a measurement-bias block ``b``."""

    base: FilterSpec
    phi: Array
    F: Array
    H: Array

    @property
    def n(self) -> int:
        return int(self.F.shape[0])


def augment_spec(spec: FilterSpec, phi: ArrayLike) -> AugmentedSpec:
    """Extend the state with an AR(1) bias ``b_t = diag(phi) b_{t-1} + w_t`` observed additively."""
    coefficients = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    if coefficients.shape != (spec.k,):
        msg = f"phi must have one coefficient per measurement dimension ({spec.k}), got {coefficients.shape}"
        raise ShapeError(msg)
    if np.any(np.abs(coefficients) >= 1.0):
        msg = f"AR(1) coefficients must satisfy |phi| < 1, got {coefficients.tolist()}"
        raise ValueError(msg)
    n, k = spec.n, spec.k
    F = np.block([[spec.F, np.zeros((n, k))], [np.zeros((k, n)), np.diag(coefficients)]])
    H = np.hstack([spec.H, np.eye(k)])
    return AugmentedSpec(base=spec, phi=coefficients, F=F, H=H)


def _bias_driving_noise(correlated: Array, phi: Array) -> Array:
    # Q_b keeps Cov(b) stationary at `correlated`: Q_b = C - diag(phi) C diag(phi)
    noise = correlated - np.outer(phi, phi) * correlated
    noise = _symmetrize(noise)
    values, vectors = np.linalg.eigh(noise)
    if values.min() < -_PSD_TOL * max(float(np.abs(values).max()), 1.0):
        logger.warning("Bias driving noise was not PSD (min eigenvalue %.3e); projecting", values.min())
    clipped = np.clip(values, 0.0, None)
    return _symmetrize((vectors * clipped) @ vectors.T)


def _augmented_initial_state(aug: AugmentedSpec, measurement: Array, sigma: Array, correlated: Array) -> FilterState:
    base = initial_state(aug.base, measurement, sigma)
    pinv = np.linalg.pinv(aug.base.H)
    cross = -pinv @ correlated
    P = np.block([[base.P, cross], [cross.T, correlated]])
    z = np.concatenate([base.z, np.zeros(aug.base.k)])
    return FilterState(z=z, P=_symmetrize(P), t=0)


def step_time_correlated(
    aug: AugmentedSpec,
    state: FilterState,
    measurement: ArrayLike,
    sigma: ArrayLike,
    sigma_uncorr: ArrayLike,
) -> tuple[FilterState, StepTrace]:
    """One step of the bias-augmented filter.

    The correlated part ``sigma - sigma_uncorr`` becomes the stationary
    covariance of the bias state; ``sigma_uncorr`` is the measurement covariance.
    """
    full = np.asarray(sigma, dtype=np.float64)
    uncorr = np.asarray(sigma_uncorr, dtype=np.float64)
    n = aug.base.n
    Q = np.zeros((aug.n, aug.n))
    Q[:n, :n] = aug.base.Q
    Q[n:, n:] = _bias_driving_noise(full - uncorr, aug.phi)
    step_spec = FilterSpec(F=aug.F, H=aug.H, Q=Q, joseph=aug.base.joseph)
    return step(step_spec, state, measurement, uncorr)


def run_filter_time_correlated(
    spec: FilterSpec,
    measurements: ArrayLike,
    covariances: ArrayLike,
    phi: ArrayLike,
    share: float,
) -> FilterRun:
    """Filter with ``share`` of every covariance modelled as AR(1) bias.

    The returned states are projected back onto the original state space.
    """
    if not 0.0 <= share < 1.0:
        msg = f"Correlated share must lie in [0, 1), got {share}"
        raise ValueError(msg)
    aug = augment_spec(spec, phi)
    m = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    sigmas = np.asarray(covariances, dtype=np.float64)
    _validate_sequence(spec, m, sigmas)

    n = spec.n
    first = stabilize_covariance(sigmas[0])[0]
    state = _augmented_initial_state(aug, m[0], first, share * first)
    states = [FilterState(z=state.z[:n], P=state.P[:n, :n], t=0)]
    traces: list[StepTrace] = []
    for t in range(1, m.shape[0]):
        stable = stabilize_covariance(sigmas[t])[0]
        state, trace = step_time_correlated(aug, state, m[t], stable, (1.0 - share) * stable)
        states.append(FilterState(z=state.z[:n], P=state.P[:n, :n], t=t))
        traces.append(trace)
    return FilterRun(states=states, traces=traces, measurements=m, covariances=sigmas)


def write_trace_csv(run: FilterRun, path: Path) -> None:
    """Export a filter run: t, measurement, covariance upper triangle, estimate, P diagonal.

    Raises:
        ReportWriteError: If the file cannot be written.
    """
    k = run.measurements.shape[1]
    n = run.states[0].z.shape[0]
    rows, cols = np.triu_indices(k)
    header = (
        ["t"]
        + [f"m_{i}" for i in range(k)]
        + [f"sigma_{i}{j}" for i, j in zip(rows, cols, strict=True)]
        + [f"z_{i}" for i in range(n)]
        + [f"p_{i}{i}" for i in range(n)]
    )
    offset = run.measurements.shape[0] - len(run.states)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for index, state in enumerate(run.states):
                t = index + offset
                values = [
                    *run.measurements[t],
                    *run.covariances[t][rows, cols],
                    *state.z,
                    *np.diag(state.P),
                ]
                writer.writerow([t, *(format(float(v), ".17g") for v in values)])
    except OSError as exc:
        msg = f"Could not write filter trace to {path}: {exc}"
        raise ReportWriteError(msg) from exc
