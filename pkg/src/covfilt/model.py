"""Regression network predicting a mean and a full measurement covariance.

The network reads standardized inputs through two tanh branches of equal
hidden sizes. The mean branch (plus a linear skip from the input) produces
``k`` means; the covariance branch produces ``k`` variance logits ``s`` and
``k(k-1)/2`` correlation logits ``r``. Parameter names carry the branch as a
prefix (``mean.`` / ``cov.``) so the two can be trained together or apart.

Model file format (JSON, UTF-8)::

    {
      "schema": "covfilt-model",
      "schema_version": 1,
      "metadata": {"writer": "covfilt <version>", "config_hash": str, "seed": int},
      "hyperparameters": {
        "input_dim": int, "output_dim": int, "hidden_sizes": [int, ...],
        "dropout_rate": float, "rho_scale": float, "layout": "full" | "diagonal",
        "label_scale": float
      },
      "arrays": {
        "<name>": {"shape": [rows, cols], "data": "<base64 of float64 little-endian, row-major>"}
      }
    }

``arrays`` holds every weight plus ``norm.input_shift``, ``norm.input_scale``
and ``norm.label_shift`` (row vectors).
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import tempfile
from collections.abc import Collection, Mapping
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from covfilt import __version__
from covfilt.autodiff import Array, Node, Tape, exp, hadamard, matmul, scale, scatter, take, tanh, transpose
from covfilt.exceptions import ModelFileError, NonFiniteError, SchemaVersionError, ShapeError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

logger = logging.getLogger(__name__)

__all__ = [
    "MODEL_SCHEMA_VERSION",
    "CovarianceLayout",
    "DropoutMasks",
    "GaussianPrediction",
    "HeadArrays",
    "HeadOutput",
    "ModelParams",
    "assemble_covariance",
    "assemble_covariance_rows",
    "bind",
    "correlation_count",
    "covariances",
    "forward",
    "init_params",
    "load_model",
    "predict",
    "predict_gaussian",
    "sample_dropout_mask",
    "save_model",
    "upper_pairs",
]

MODEL_SCHEMA_VERSION = 1
_SCHEMA_NAME = "covfilt-model"
_BRANCHES = ("mean", "cov")

type DropoutMasks = tuple[Array, ...]


class CovarianceLayout(Enum):
    """How the covariance head's outputs become a matrix."""

    FULL = "full"
    DIAGONAL = "diagonal"


def correlation_count(k: int) -> int:
    """Number of correlation logits for a ``k``-dimensional output."""
    return k * (k - 1) // 2


def upper_pairs(k: int) -> tuple[list[int], list[int]]:
    """Row and column indices of the strict upper triangle, row-major (r_12, r_13, ..., r_23, ...)."""
    rows, cols = np.triu_indices(k, 1)
    return rows.tolist(), cols.tolist()


@dataclass(frozen=True)
class ModelParams:
    """Immutable network weights, standardization statistics and hyperparameters."""

    input_dim: int
    output_dim: int
    hidden_sizes: tuple[int, ...]
    dropout_rate: float
    rho_scale: float
    layout: CovarianceLayout
    arrays: Mapping[str, Array]
    input_shift: Array
    input_scale: Array
    label_shift: Array
    label_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            msg = f"dropout_rate must lie in [0, 1), got {self.dropout_rate}"
            raise ValueError(msg)
        if not 0.0 < self.rho_scale <= 1.0:
            msg = f"rho_scale must lie in (0, 1], got {self.rho_scale}"
            raise ValueError(msg)
        if not self.label_scale > 0.0:
            msg = f"label_scale must be positive, got {self.label_scale}"
            raise ValueError(msg)
        expected = _expected_shapes(self.input_dim, self.output_dim, self.hidden_sizes)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            msg = f"Parameter names mismatch (missing {missing}, unexpected {extra})"
            raise ShapeError(msg)
        for name, shape in expected.items():
            array = self.arrays[name]
            if array.shape != shape:
                msg = f"Parameter '{name}' has shape {array.shape}, expected {shape}"
                raise ShapeError(msg)
            if not np.all(np.isfinite(array)):
                msg = f"Parameter '{name}' contains non-finite values"
                raise NonFiniteError(msg)
            array.setflags(write=False)
        for stat in (self.input_shift, self.input_scale, self.label_shift):
            stat.setflags(write=False)

    @property
    def output_width(self) -> int:
        """Total head width: k means, k variance logits, k(k-1)/2 correlation logits."""
        return 2 * self.output_dim + correlation_count(self.output_dim)

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def with_arrays(self, updates: Mapping[str, Array]) -> ModelParams:
        """Return a copy with some named arrays replaced."""
        arrays = {name: np.array(updates.get(name, value), dtype=np.float64) for name, value in self.arrays.items()}
        return replace(self, arrays=arrays)


def _expected_shapes(input_dim: int, output_dim: int, hidden_sizes: tuple[int, ...]) -> dict[str, tuple[int, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    head_widths = {"mean": output_dim, "cov": output_dim + correlation_count(output_dim)}
    for branch in _BRANCHES:
        fan_in = input_dim
        for i, width in enumerate(hidden_sizes):
            shapes[f"{branch}.w{i}"] = (fan_in, width)
            shapes[f"{branch}.b{i}"] = (1, width)
            fan_in = width
        shapes[f"{branch}.w_out"] = (fan_in, head_widths[branch])
        shapes[f"{branch}.b_out"] = (1, head_widths[branch])
    shapes["mean.skip"] = (input_dim, output_dim)
    return shapes


@dataclass(frozen=True)
class GaussianPrediction:
    """Mean and covariance of one prediction, in label units."""

    mean: Array
    covariance: Array


@dataclass(frozen=True)
class HeadOutput:
    """Differentiable head outputs for a batch of ``B`` inputs."""

    tape: Tape
    mean: Node
    s: Node
    r: Node


@dataclass(frozen=True)
class HeadArrays:
    """Head outputs as plain arrays: mean (B, k), s (B, k), r (B, k(k-1)/2)."""

    mean: Array
    s: Array
    r: Array


def init_params(
    input_dim: int,
    output_dim: int,
    *,
    hidden_sizes: tuple[int, ...] = (64, 64),
    dropout_rate: float = 0.1,
    rho_scale: float = 0.99,
    layout: CovarianceLayout = CovarianceLayout.FULL,
    seed: int = 0,
    inputs: ArrayLike | None = None,
    labels: ArrayLike | None = None,
) -> ModelParams:
    """Create a freshly initialized model.

    Weights are drawn from N(0, 1/fan_in). When training data is supplied the
    standardization statistics are taken from it, the mean skip path and
    output bias are set by least squares, the mean output layer starts at zero,
    and the variance-logit biases start at the log residual variance.
    Correlation-logit weights and biases always start at zero.
    """
    hidden = tuple(hidden_sizes)
    rng = np.random.default_rng(seed)
    shapes = _expected_shapes(input_dim, output_dim, hidden)
    arrays: dict[str, Array] = {}
    for name, shape in shapes.items():
        if name.endswith(".b_out") or ".b" in name or name == "mean.skip":
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    # correlation logits start at zero: the first covariance is diagonal
    arrays["cov.w_out"][:, output_dim:] = 0.0

    input_shift = np.zeros(input_dim)
    input_scale = np.ones(input_dim)
    label_shift = np.zeros(output_dim)
    label_scale = 1.0

    if inputs is not None and labels is not None:
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
        if x.shape[0] != y.shape[0] or x.shape[1] != input_dim or y.shape[1] != output_dim:
            msg = f"Initialization data shapes {x.shape} / {y.shape} do not match dims ({input_dim}, {output_dim})"
            raise ShapeError(msg)
        input_shift = x.mean(axis=0)
        std = x.std(axis=0)
        input_scale = np.where(std > 0.0, std, 1.0)
        label_shift = y.mean(axis=0)
        label_std = float(y.std(axis=0).mean())
        label_scale = label_std if label_std > 0.0 else 1.0

        xn = (x - input_shift) / input_scale
        yn = (y - label_shift) / label_scale
        design = np.hstack([xn, np.ones((xn.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(design, yn, rcond=None)
        arrays["mean.skip"] = coef[:input_dim]
        arrays["mean.b_out"] = coef[input_dim:]
        arrays["mean.w_out"] = np.zeros(shapes["mean.w_out"])
        residual = yn - design @ coef
        variance = np.maximum(residual.var(axis=0), 1e-12)
        cov_bias = np.zeros(shapes["cov.b_out"])
        cov_bias[0, :output_dim] = np.log(variance)
        arrays["cov.b_out"] = cov_bias

    return ModelParams(
        input_dim=input_dim,
        output_dim=output_dim,
        hidden_sizes=hidden,
        dropout_rate=dropout_rate,
        rho_scale=rho_scale,
        layout=layout,
        arrays=arrays,
        input_shift=np.asarray(input_shift, dtype=np.float64),
        input_scale=np.asarray(input_scale, dtype=np.float64),
        label_shift=np.asarray(label_shift, dtype=np.float64),
        label_scale=label_scale,
    )


def bind(tape: Tape, params: ModelParams, *, frozen: Collection[str] = ()) -> dict[str, Node]:
    """Record every parameter on ``tape``.

    Names starting with any prefix in ``frozen`` become constants, the rest
    differentiable params.
    """
    nodes: dict[str, Node] = {}
    for name, value in params.arrays.items():
        if any(name.startswith(prefix) for prefix in frozen):
            nodes[name] = tape.const(value)
        else:
            nodes[name] = tape.param(value)
    return nodes


def sample_dropout_mask(
    params: ModelParams,
    seed: int | np.random.Generator,
    *,
    rows: int = 1,
) -> DropoutMasks:
    """Draw keep-masks (1 = keep) for every hidden layer of both branches.

    Each hidden unit is kept independently with probability ``1 - dropout_rate``.
    Masks come back in order mean-branch layers, then covariance-branch layers,
    each with shape ``(rows, width)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masks: list[Array] = []
    for _branch in _BRANCHES:
        for width in params.hidden_sizes:
            if params.dropout_rate == 0.0:
                masks.append(np.ones((rows, width)))
            else:
                masks.append((rng.random((rows, width)) >= params.dropout_rate).astype(np.float64))
    return tuple(masks)


def _standardize(params: ModelParams, x: ArrayLike) -> Array:
    batch = np.asarray(x, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        msg = f"Expected inputs with {params.input_dim} features, got shape {batch.shape}"
        raise ShapeError(msg)
    if not np.all(np.isfinite(batch)):
        msg = "Model inputs must be finite"
        raise NonFiniteError(msg)
    return (batch - params.input_shift) / params.input_scale


def _branch(
    params: ModelParams,
    nodes: Mapping[str, Node],
    branch: str,
    x: Node,
    ones: Node,
    masks: DropoutMasks | None,
    mask_offset: int,
) -> Node:
    tape = x.tape
    hidden = x
    batch = x.shape[0]
    for i, width in enumerate(params.hidden_sizes):
        hidden = tanh(matmul(hidden, nodes[f"{branch}.w{i}"]) + matmul(ones, nodes[f"{branch}.b{i}"]))
        if masks is not None:
            keep = np.broadcast_to(masks[mask_offset + i], (batch, width)) / (1.0 - params.dropout_rate)
            hidden = hadamard(hidden, tape.const(keep))
    return matmul(hidden, nodes[f"{branch}.w_out"]) + matmul(ones, nodes[f"{branch}.b_out"])


def forward(
    params: ModelParams,
    x: ArrayLike,
    dropout_mask: DropoutMasks | None = None,
    *,
    tape: Tape | None = None,
    nodes: Mapping[str, Node] | None = None,
) -> HeadOutput:
    """Run the network on one input (d,) or a batch (B, d).

    Without a mask dropout is disabled; with one, surviving hidden activations
    are scaled by ``1 / (1 - dropout_rate)``. ``nodes`` lets a caller reuse
    parameters already bound on ``tape`` (all params are bound otherwise).
    """
    xn = _standardize(params, x)
    batch = xn.shape[0]
    if dropout_mask is not None:
        expected = 2 * len(params.hidden_sizes)
        if len(dropout_mask) != expected:
            msg = f"Expected {expected} dropout masks, got {len(dropout_mask)}"
            raise ShapeError(msg)
        for mask, width in zip(dropout_mask, params.hidden_sizes * 2, strict=True):
            if mask.shape[-1] != width or (mask.ndim == 2 and mask.shape[0] not in (1, batch)):
                msg = f"Dropout mask of shape {mask.shape} does not fit layer width {width} and batch {batch}"
                raise ShapeError(msg)

    tape = tape if tape is not None else Tape()
    nodes = nodes if nodes is not None else bind(tape, params)
    x_node = tape.const(xn)
    ones = tape.const(np.ones((batch, 1)))

    k = params.output_dim
    mean_raw = _branch(params, nodes, "mean", x_node, ones, dropout_mask, 0)
    mean_raw = mean_raw + matmul(x_node, nodes["mean.skip"])
    mean = scale(mean_raw, params.label_scale) + tape.const(np.tile(params.label_shift, (batch, 1)))

    cov_out = _branch(params, nodes, "cov", x_node, ones, dropout_mask, len(params.hidden_sizes))
    all_rows = list(range(batch))
    s = take(cov_out, all_rows, list(range(k))) + tape.const(2.0 * np.log(params.label_scale))
    r = take(cov_out, all_rows, list(range(k, k + correlation_count(k))))
    return HeadOutput(tape=tape, mean=mean, s=s, r=r)


def assemble_covariance(
    s: Node,
    r: Node,
    rho_scale: float,
    layout: CovarianceLayout = CovarianceLayout.FULL,
) -> Node:
    """Build one k x k covariance from variance logits ``s`` and correlation logits ``r``.

    ``Sigma_ii = exp(s_i)`` and ``Sigma_ij = rho_scale * tanh(r_ij) * sqrt(exp(s_i) exp(s_j))``.
    The diagonal layout ignores ``r``.
    """
    s_col = s if s.shape[1] == 1 else transpose(s)
    k = s_col.shape[0]
    diagonal = scatter(exp(s_col), (k, k), range(k), range(k))
    p = correlation_count(k)
    if layout is CovarianceLayout.DIAGONAL or p == 0:
        return diagonal
    if r.value.size != p:
        msg = f"Expected {p} correlation logits for k={k}, got {r.value.size}"
        raise ShapeError(msg)
    rows, cols = upper_pairs(k)
    upper = scatter(scale(tanh(r), rho_scale), (k, k), rows, cols)
    correlation = upper + transpose(upper)
    sigma = exp(scale(s_col, 0.5))
    off_diagonal = hadamard(correlation, matmul(sigma, transpose(sigma)))
    return diagonal + off_diagonal


def assemble_covariance_rows(
    s: Node,
    r: Node,
    rho_scale: float,
    layout: CovarianceLayout = CovarianceLayout.FULL,
) -> Node:
    """Batched ``assemble_covariance``: (B, k) and (B, p) logits to a (B, k*k) node.

    Row ``b`` holds the row-major flattening of sample ``b``'s covariance.
    """
    batch, k = s.shape
    all_rows = list(range(batch))
    repeated = np.repeat(np.arange(batch), k)
    diag_cols = np.tile(np.arange(k) * (k + 1), batch)
    rows = scatter(exp(s), (batch, k * k), repeated, diag_cols)
    p = correlation_count(k)
    if layout is CovarianceLayout.DIAGONAL or p == 0:
        return rows
    if r.shape != (batch, p):
        msg = f"Expected correlation logits of shape {(batch, p)}, got {r.shape}"
        raise ShapeError(msg)
    upper_i, upper_j = upper_pairs(k)
    sigma = exp(scale(s, 0.5))
    off_diagonal = hadamard(
        scale(tanh(r), rho_scale),
        hadamard(take(sigma, all_rows, upper_i), take(sigma, all_rows, upper_j)),
    )
    pair_rows = np.repeat(np.arange(batch), p)
    upper_cols = np.tile(np.asarray(upper_i) * k + np.asarray(upper_j), batch)
    lower_cols = np.tile(np.asarray(upper_j) * k + np.asarray(upper_i), batch)
    upper = scatter(off_diagonal, (batch, k * k), pair_rows, upper_cols)
    lower = scatter(off_diagonal, (batch, k * k), pair_rows, lower_cols)
    return rows + (upper + lower)


def covariances(
    s: Array,
    r: Array,
    rho_scale: float,
    layout: CovarianceLayout = CovarianceLayout.FULL,
) -> Array:
    """Vectorized twin of ``assemble_covariance`` for a batch: (B, k), (B, p) -> (B, k, k)."""
    s = np.atleast_2d(s)
    batch, k = s.shape
    diag_index = np.arange(k)
    out = np.zeros((batch, k, k))
    p = correlation_count(k)
    if layout is CovarianceLayout.FULL and p > 0:
        r = np.atleast_2d(r).reshape(batch, p)
        rows, cols = upper_pairs(k)
        correlation = np.zeros((batch, k, k))
        correlation[:, rows, cols] = np.tanh(r) * rho_scale
        correlation = correlation + correlation.transpose(0, 2, 1)
        sigma = np.exp(s * 0.5)
        out = correlation * (sigma[:, :, None] * sigma[:, None, :])
    out[:, diag_index, diag_index] = np.exp(s) + out[:, diag_index, diag_index]
    return out


def predict(params: ModelParams, x: ArrayLike, dropout_mask: DropoutMasks | None = None) -> HeadArrays:
    """Evaluate the network without recording gradients."""
    tape = Tape()
    nodes = bind(tape, params, frozen=_BRANCHES)
    out = forward(params, x, dropout_mask, tape=tape, nodes=nodes)
    return HeadArrays(mean=out.mean.value, s=out.s.value, r=out.r.value)


def predict_gaussian(
    params: ModelParams, x: ArrayLike, dropout_mask: DropoutMasks | None = None
) -> tuple[Array, Array]:
    """Means (B, k) and covariances (B, k, k) in label units."""
    heads = predict(params, x, dropout_mask)
    return heads.mean, covariances(heads.s, heads.r, params.rho_scale, params.layout)


def _encode(array: Array) -> dict[str, Any]:
    matrix = np.atleast_2d(np.asarray(array, dtype="<f8"))
    return {"shape": list(matrix.shape), "data": base64.b64encode(matrix.tobytes(order="C")).decode("ascii")}


def _decode(name: str, raw: object, path: Path) -> Array:
    if not isinstance(raw, dict) or "shape" not in raw or "data" not in raw:
        msg = f"Array '{name}' in {path} must be an object with 'shape' and 'data'"
        raise ModelFileError(msg)
    shape = tuple(int(v) for v in raw["shape"])
    try:
        blob = base64.b64decode(str(raw["data"]), validate=True)
    except (binascii.Error, ValueError) as exc:
        msg = f"Array '{name}' in {path} has invalid base64 data"
        raise ModelFileError(msg) from exc
    expected = int(np.prod(shape)) * 8
    if len(blob) != expected:
        msg = f"Array '{name}' in {path} holds {len(blob)} bytes, expected {expected}"
        raise ModelFileError(msg)
    return np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)


def save_model(params: ModelParams, path: Path, *, metadata: Mapping[str, Any] | None = None) -> None:
    """Write a model file atomically; ``metadata`` entries sit next to the writer tag.

    Raises:
        ModelFileError: If the file cannot be written.
    """
    arrays = {name: _encode(value) for name, value in params.arrays.items()}
    arrays["norm.input_shift"] = _encode(params.input_shift.reshape(1, -1))
    arrays["norm.input_scale"] = _encode(params.input_scale.reshape(1, -1))
    arrays["norm.label_shift"] = _encode(params.label_shift.reshape(1, -1))
    data = {
        "schema": _SCHEMA_NAME,
        "schema_version": MODEL_SCHEMA_VERSION,
        "metadata": {"writer": f"covfilt {__version__}", **(metadata or {})},
        "hyperparameters": {
            "input_dim": params.input_dim,
            "output_dim": params.output_dim,
            "hidden_sizes": list(params.hidden_sizes),
            "dropout_rate": params.dropout_rate,
            "rho_scale": params.rho_scale,
            "layout": params.layout.value,
            "label_scale": params.label_scale,
        },
        "arrays": arrays,
    }

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_path_str = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        tmp_path = Path(tmp_path_str)
        try:
            with open(fd, "w", encoding="utf-8") as f:  # noqa: PTH123
                json.dump(data, f, indent=2)
                f.write("\n")
            tmp_path.replace(path)
        except BaseException:
            tmp_path.unlink(missing_ok=True)
            raise
    except OSError as exc:
        msg = f"Could not write model file {path}: {exc}"
        raise ModelFileError(msg) from exc
    logger.info("Saved model to %s", path)


def load_model(path: Path) -> ModelParams:
    """Read a model file written by ``save_model``.

    Raises:
        ModelFileError: If the file is unreadable, truncated or malformed.
        SchemaVersionError: If the file carries another schema version.
    """
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        msg = f"Could not read model file {path}: {exc}"
        raise ModelFileError(msg) from exc

    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        msg = f"Model file {path} could not be parsed: {exc}"
        raise ModelFileError(msg) from exc

    if not isinstance(data, dict) or data.get("schema") != _SCHEMA_NAME:
        msg = f"{path} is not a covfilt model file"
        raise ModelFileError(msg)
    version = data.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        msg = f"Model file {path} has schema version {version!r}, expected {MODEL_SCHEMA_VERSION}"
        raise SchemaVersionError(msg)

    try:
        hyper = data["hyperparameters"]
        raw_arrays = dict(data["arrays"])
        arrays = {name: _decode(name, value, path) for name, value in raw_arrays.items()}
        input_shift = arrays.pop("norm.input_shift").ravel()
        input_scale = arrays.pop("norm.input_scale").ravel()
        label_shift = arrays.pop("norm.label_shift").ravel()
        return ModelParams(
            input_dim=int(hyper["input_dim"]),
            output_dim=int(hyper["output_dim"]),
            hidden_sizes=tuple(int(v) for v in hyper["hidden_sizes"]),
            dropout_rate=float(hyper["dropout_rate"]),
            rho_scale=float(hyper["rho_scale"]),
            layout=CovarianceLayout(hyper["layout"]),
            arrays=arrays,
            input_shift=input_shift,
            input_scale=input_scale,
            label_shift=label_shift,
            label_scale=float(hyper["label_scale"]),
        )
    except (KeyError, TypeError, ValueError, ShapeError, NonFiniteError) as exc:
        msg = f"Model file {path} is malformed: {exc}"
        raise ModelFileError(msg) from exc
