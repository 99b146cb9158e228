"""Adam optimizer and the MLE, filter-through and fixed-covariance training regimes."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import TYPE_CHECKING, Any

import numpy as np

from covfilt.autodiff import Array, Node, Tape, backward, take, transpose
from covfilt.config import TrainMode
from covfilt.exceptions import ReportWriteError, ShapeError, TrainingDivergedError
from covfilt.kalman import FilterSpec, require_subset_condition, run_filter_diff
from covfilt.losses import batch_nll, state_estimate_loss
from covfilt.model import (
    DropoutMasks,
    ModelParams,
    assemble_covariance,
    assemble_covariance_rows,
    bind,
    forward,
    predict,
    sample_dropout_mask,
)

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import ArrayLike

    from covfilt.simulator import TrackDataset

logger = logging.getLogger(__name__)

__all__ = [
    "AdamSettings",
    "OptimState",
    "TrainReport",
    "adam_step",
    "fixed_covariance_baseline",
    "fixed_covariance_for",
    "frozen_prefixes",
    "train_kalman",
    "train_mle",
    "write_loss_curve",
    "write_train_report",
]

type EpochCallback = Callable[[int, float], None]


@dataclass(frozen=True)
class AdamSettings:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class OptimState:
    """Adam moment accumulators keyed by parameter name."""

    first: Mapping[str, Array]
    second: Mapping[str, Array]
    step: int = 0
    settings: AdamSettings = field(default_factory=AdamSettings)

    @classmethod
    def zeros(cls, params: ModelParams, settings: AdamSettings | None = None) -> OptimState:
        return cls(
            first={name: np.zeros_like(value) for name, value in params.arrays.items()},
            second={name: np.zeros_like(value) for name, value in params.arrays.items()},
            settings=settings or AdamSettings(),
        )


def adam_step(
    params: ModelParams,
    grads: Mapping[str, Array],
    state: OptimState,
) -> tuple[ModelParams, OptimState]:
    """Apply one Adam update to every parameter named in ``grads``.

    Parameters without a gradient keep their values and moments.

    Raises:
        TrainingDivergedError: If a gradient is not finite (names the parameter).
        ShapeError: If a gradient's shape differs from its parameter.
    """
    cfg = state.settings
    step = state.step + 1
    first = dict(state.first)
    second = dict(state.second)
    updates: dict[str, Array] = {}
    correction1 = 1.0 - cfg.beta1**step
    correction2 = 1.0 - cfg.beta2**step
    for name, grad in grads.items():
        value = params.arrays[name]
        if grad.shape != value.shape:
            msg = f"Gradient for '{name}' has shape {grad.shape}, parameter has {value.shape}"
            raise ShapeError(msg)
        if not np.all(np.isfinite(grad)):
            msg = f"Non-finite gradient for parameter '{name}' at step {step}"
            raise TrainingDivergedError(msg, parameter=name)
        first[name] = cfg.beta1 * first[name] + (1.0 - cfg.beta1) * grad
        second[name] = cfg.beta2 * second[name] + (1.0 - cfg.beta2) * grad * grad
        m_hat = first[name] / correction1
        v_hat = second[name] / correction2
        updates[name] = value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    new_state = OptimState(first=first, second=second, step=step, settings=cfg)
    return params.with_arrays(updates), new_state


@dataclass
class TrainReport:
    """What a training run did, for the record."""

    regime: str
    seed: int
    loss_curve: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    final_metrics: dict[str, float] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def frozen_prefixes(mode: TrainMode) -> tuple[str, ...]:
    """Parameter name prefixes that stay fixed in ``mode``."""
    return {
        TrainMode.JOINT: (),
        TrainMode.MEAN_ONLY: ("cov.",),
        TrainMode.COV_ONLY: ("mean.",),
    }[mode]


def _grads(nodes: Mapping[str, Node]) -> dict[str, Array]:
    return {name: node.adjoint.copy() for name, node in nodes.items() if node.is_param}


def _global_norm(grads: Mapping[str, Array]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _masks(
    params: ModelParams,
    rng: np.random.Generator,
    rows: int,
    *,
    keep_mean: bool,
) -> DropoutMasks | None:
    if params.dropout_rate == 0.0:
        return None
    masks = sample_dropout_mask(params, rng, rows=rows)
    if keep_mean:
        # forward divides by (1 - rate), so these masks multiply by exactly 1.0
        depth = len(params.hidden_sizes)
        keep = 1.0 - params.dropout_rate
        masks = tuple(np.full_like(mask, keep) for mask in masks[:depth]) + masks[depth:]
    return masks


def train_mle(
    params: ModelParams,
    inputs: ArrayLike,
    labels: ArrayLike,
    *,
    mode: TrainMode = TrainMode.JOINT,
    epochs: int = 40,
    batch_size: int = 64,
    seed: int = 0,
    settings: AdamSettings | None = None,
    dropout: bool = True,
    offsets: Array | None = None,
    on_epoch: EpochCallback | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Fit the network by minimizing the mean Gaussian NLL over mini-batches.

    The covariance layout of ``params`` decides between the full and the
    diagonal likelihood. In ``COV_ONLY`` mode the mean parameters are
    constants on the tape and the mean branch runs without dropout, so the
    mean outputs stay bit-identical.

    Args:
        params: Starting model.
        inputs: Features, shape (N, d).
        labels: Targets, shape (N, k).
        mode: Which parameter groups are trained.
        epochs: Passes over the data.
        batch_size: Samples per update.
        seed: Seeds shuffling and dropout masks.
        settings: Adam hyperparameters.
        dropout: Sample dropout masks while training.
        offsets: Optional (N, k, k) constant covariances added to every
            predicted covariance before the likelihood.
        on_epoch: Called with (epoch, mean loss) after every epoch.

    Returns:
        The trained model and its TrainReport.

    Raises:
        TrainingDivergedError: If the loss or a gradient becomes non-finite.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        msg = f"train_mle needs matching non-empty inputs and labels, got {x.shape} and {y.shape}"
        raise ShapeError(msg)
    frozen = frozen_prefixes(mode)
    rng = np.random.default_rng(seed)
    state = OptimState.zeros(params, settings)
    report = TrainReport(regime=f"mle/{mode.value}", seed=seed)
    started = time.perf_counter()

    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        weighted_loss = 0.0
        norms: list[float] = []
        for start in range(0, x.shape[0], batch_size):
            index = order[start : start + batch_size]
            tape = Tape()
            nodes = bind(tape, params, frozen=frozen)
            masks = _masks(params, rng, len(index), keep_mean=mode is TrainMode.COV_ONLY) if dropout else None
            out = forward(params, x[index], masks, tape=tape, nodes=nodes)
            rows = assemble_covariance_rows(out.s, out.r, params.rho_scale, params.layout)
            residual = tape.const(y[index]) - out.mean
            loss, terms = batch_nll(rows, residual, offsets=None if offsets is None else offsets[index])
            if not np.isfinite(terms.total):
                msg = f"Loss became non-finite in epoch {epoch + 1}"
                raise TrainingDivergedError(msg)
            backward(tape, loss)
            grads = _grads(nodes)
            norms.append(_global_norm(grads))
            params, state = adam_step(params, grads, state)
            weighted_loss += terms.total * len(index)
        epoch_loss = weighted_loss / x.shape[0]
        report.loss_curve.append(epoch_loss)
        report.grad_norms.append(float(np.mean(norms)))
        logger.info("MLE epoch %d/%d: loss %.6f", epoch + 1, epochs, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss)

    report.wall_clock = time.perf_counter() - started
    if report.loss_curve:
        report.final_metrics["final_loss"] = report.loss_curve[-1]
    return params, report


def _track_loss(
    params: ModelParams,
    spec: FilterSpec,
    track: TrackDataset,
    masks: DropoutMasks | None,
    *,
    frozen: tuple[str, ...],
    subset: Sequence[int],
    burn_in: int,
    truncation: int,
) -> tuple[float, dict[str, Array]]:
    tape = Tape()
    nodes = bind(tape, params, frozen=frozen)
    out = forward(params, track.inputs, masks, tape=tape, nodes=nodes)
    k = params.output_dim
    p = out.r.shape[1]
    measurements = []
    covariances = []
    for t in range(len(track)):
        measurements.append(transpose(take(out.mean, [t], list(range(k)))))
        covariances.append(
            assemble_covariance(
                take(out.s, [t], list(range(k))),
                take(out.r, [t], list(range(p))),
                params.rho_scale,
                params.layout,
            )
        )
    run = run_filter_diff(spec, measurements, covariances, truncation=truncation)
    loss = state_estimate_loss(run.states, track.states, subset, burn_in)
    backward(tape, loss)
    return loss.item(), _grads(nodes)


type TrackScore = tuple[float, dict[str, Array]]


def _score_group(
    pool: ThreadPoolExecutor | None,
    score: Callable[[TrackDataset, DropoutMasks | None], TrackScore],
    jobs: Sequence[tuple[TrackDataset, DropoutMasks | None]],
) -> list[TrackScore]:
    if pool is None:
        return [score(track, masks) for track, masks in jobs]
    return list(pool.map(lambda job: score(*job), jobs))


def train_kalman(
    params: ModelParams,
    tracks: Sequence[TrackDataset],
    spec: FilterSpec,
    *,
    subset: Sequence[int],
    epochs: int = 5,
    truncation: int = 10,
    burn_in: int = 2,
    seed: int = 0,
    batch_tracks: int = 8,
    clip_norm: float = 10.0,
    train_mean: bool = False,
    settings: AdamSettings | None = None,
    threads: int = 1,
    on_epoch: EpochCallback | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train through the filter: run each track, score its state estimates, backpropagate.

    Gradients of ``batch_tracks`` tracks are averaged, clipped to global norm
    ``clip_norm`` and applied with Adam. Only covariance parameters move
    unless ``train_mean`` is set. With ``threads > 1`` the tracks of a batch
    are differentiated in a thread pool; dropout masks are drawn and gradients
    summed in track order, so the result does not depend on ``threads``.

    Raises:
        SubsetConditionError: If ``subset`` cannot supervise every measurement row.
        TrainingDivergedError: If the loss or a gradient becomes non-finite.
    """
    require_subset_condition(spec.H, subset)
    if not tracks:
        msg = "train_kalman needs at least one track"
        raise ShapeError(msg)
    frozen = () if train_mean else ("mean.",)
    rng = np.random.default_rng(seed)
    state = OptimState.zeros(params, settings)
    report = TrainReport(regime="kalman", seed=seed)
    started = time.perf_counter()

    with ExitStack() as stack:
        pool = stack.enter_context(ThreadPoolExecutor(max_workers=threads)) if threads > 1 else None
        for epoch in range(epochs):
            order = rng.permutation(len(tracks))
            losses: list[float] = []
            norms: list[float] = []
            for start in range(0, len(order), batch_tracks):
                group = [tracks[int(index)] for index in order[start : start + batch_tracks]]
                jobs = [(track, _masks(params, rng, len(track), keep_mean=not train_mean)) for track in group]
                score = partial(
                    _track_loss, params, spec, frozen=frozen, subset=subset, burn_in=burn_in, truncation=truncation
                )
                summed: dict[str, Array] = {}
                for track, (loss, grads) in zip(group, _score_group(pool, score, jobs), strict=True):
                    if not np.isfinite(loss):
                        msg = f"Filter loss became non-finite on track {track.track_id} in epoch {epoch + 1}"
                        raise TrainingDivergedError(msg)
                    losses.append(loss)
                    for name, grad in grads.items():
                        summed[name] = summed[name] + grad if name in summed else grad
                averaged = {name: grad / len(group) for name, grad in summed.items()}
                norm = _global_norm(averaged)
                norms.append(norm)
                if np.isfinite(norm) and norm > clip_norm:
                    averaged = {name: grad * (clip_norm / norm) for name, grad in averaged.items()}
                params, state = adam_step(params, averaged, state)
            epoch_loss = float(np.mean(losses))
            report.loss_curve.append(epoch_loss)
            report.grad_norms.append(float(np.mean(norms)))
            logger.info("Filter-training epoch %d/%d: loss %.6f", epoch + 1, epochs, epoch_loss)
            if on_epoch is not None:
                on_epoch(epoch + 1, epoch_loss)

    report.wall_clock = time.perf_counter() - started
    if report.loss_curve:
        report.final_metrics["final_loss"] = report.loss_curve[-1]
    return params, report


def fixed_covariance_baseline(predictions: ArrayLike, labels: ArrayLike) -> Array:
    """Population covariance (divide by N) of the residuals ``labels - predictions``.

    Raises:
        ShapeError: With fewer than two samples or mismatched shapes.
    """
    f = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if f.shape != y.shape:
        msg = f"Predictions {f.shape} and labels {y.shape} differ in shape"
        raise ShapeError(msg)
    if f.shape[0] < 2:
        msg = f"The fixed covariance needs at least 2 samples, got {f.shape[0]}"
        raise ShapeError(msg)
    residual = y - f
    centered = residual - residual.mean(axis=0)
    return np.asarray(centered.T @ centered / f.shape[0], dtype=np.float64)


def fixed_covariance_for(params: ModelParams, inputs: ArrayLike, labels: ArrayLike) -> Array:
    """Fixed covariance of a trained model's deterministic predictions."""
    return fixed_covariance_baseline(predict(params, inputs).mean, labels)


def write_train_report(report: TrainReport, path: Path) -> None:
    """Write a TrainReport as JSON.

    Raises:
        ReportWriteError: If the file cannot be written.
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        msg = f"Could not write training report to {path}: {exc}"
        raise ReportWriteError(msg) from exc


def write_loss_curve(report: TrainReport, path: Path) -> None:
    """Write the per-epoch loss and gradient norm as CSV."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["epoch", "loss", "grad_norm"])
            for epoch, (loss, norm) in enumerate(zip(report.loss_curve, report.grad_norms, strict=True), start=1):
                writer.writerow([epoch, format(loss, ".17g"), format(norm, ".17g")])
    except OSError as exc:
        msg = f"Could not write loss curve to {path}: {exc}"
        raise ReportWriteError(msg) from exc
