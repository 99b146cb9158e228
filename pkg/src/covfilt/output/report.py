"""JSON and CSV reports for covfilt runs."""

import csv
import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path  # noqa: TC003
from typing import Any

import numpy as np

from covfilt import __version__
from covfilt.autodiff import Array
from covfilt.evaluation import MetricsTable, ellipse_axes
from covfilt.exceptions import ReportWriteError
from covfilt.simulator import RainbowDataset

REPORT_SCHEMA_VERSION = "1.0"

METRICS_COLUMNS = (
    "split",
    "method",
    "mean",
    "median",
    "relative_mean",
    "relative_median",
    "ratio_mean",
    "ratio_median",
    "n_tracks",
)
CURVE_COLUMNS = ("split", "method", "measurement_count", "mean_error", "median_error")
RAINBOW_COLUMNS = (
    "t",
    "sample_0",
    "sample_1",
    "mean_0",
    "mean_1",
    "sigma_00",
    "sigma_01",
    "sigma_11",
    "major_std",
    "minor_std",
    "angle",
    "true_major_std",
    "true_minor_std",
    "true_angle",
)


@dataclass
class ReportMetadata:
    """Provenance stamped into every report."""

    command: str
    config_hash: str
    seed: int


def _build_metadata_dict(metadata: ReportMetadata) -> dict[str, Any]:
    return {"command": metadata.command, "config_hash": metadata.config_hash, "seed": metadata.seed}


def _finite_or_none(value: float) -> float | None:
    return value if np.isfinite(value) else None


def generate_metrics_report(tables: Sequence[MetricsTable], metadata: ReportMetadata) -> dict[str, Any]:
    """Build the metrics report structure.

    Non-finite relative values (a zero baseline) are written as null.

    Args:
        tables: One table per evaluated split.
        metadata: Command provenance.

    Returns:
        Dict ready for JSON serialization.
    """
    splits = {}
    for table in tables:
        splits[table.split] = [
            {key: _finite_or_none(value) if isinstance(value, float) else value for key, value in asdict(row).items()}
            for row in table.rows
        ]
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "version": __version__,
        "metadata": _build_metadata_dict(metadata),
        "splits": splits,
    }


def write_report(report: Mapping[str, Any], path: Path) -> None:
    """Write a JSON report to a file.

    Creates parent directories if needed.

    Raises:
        ReportWriteError: If the file cannot be written.
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    except OSError as exc:
        msg = f"Could not write report to {path}: {exc}"
        raise ReportWriteError(msg) from exc


def _fmt(value: object) -> object:
    return format(value, ".17g") if isinstance(value, float) else value


def _write_rows(path: Path, columns: Sequence[str], rows: Iterable[Sequence[object]], metadata: ReportMetadata) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow([*columns, "config_hash", "seed"])
            for row in rows:
                writer.writerow([*(_fmt(value) for value in row), metadata.config_hash, metadata.seed])
    except OSError as exc:
        msg = f"Could not write {path}: {exc}"
        raise ReportWriteError(msg) from exc


def write_metrics_csv(tables: Sequence[MetricsTable], path: Path, metadata: ReportMetadata) -> None:
    """One row per split and method; columns as ``METRICS_COLUMNS`` plus provenance."""
    rows = ([getattr(row, column) for column in METRICS_COLUMNS] for table in tables for row in table.rows)
    _write_rows(path, METRICS_COLUMNS, rows, metadata)


def write_curves_csv(tables: Sequence[MetricsTable], path: Path, metadata: ReportMetadata) -> None:
    """Tidy error-versus-measurement-count records for every split and method."""
    rows = (
        [record[column] for column in CURVE_COLUMNS] for table in tables for record in table.curve_records()
    )
    _write_rows(path, CURVE_COLUMNS, rows, metadata)


def write_rainbow_csv(
    dataset: RainbowDataset,
    means: Array,
    covariances: Array,
    path: Path,
    metadata: ReportMetadata,
) -> None:
    """Samples, predicted mean and covariance, and predicted and true ellipse axes per point."""
    major, minor, angle = ellipse_axes(covariances)
    true_major, true_minor, true_angle = ellipse_axes(dataset.covariances)
    rows = (
        [
            float(dataset.t[i]),
            *(float(v) for v in dataset.samples[i]),
            *(float(v) for v in means[i]),
            float(covariances[i, 0, 0]),
            float(covariances[i, 0, 1]),
            float(covariances[i, 1, 1]),
            float(major[i]),
            float(minor[i]),
            float(angle[i]),
            float(true_major[i]),
            float(true_minor[i]),
            float(true_angle[i]),
        ]
        for i in range(len(dataset.t))
    )
    _write_rows(path, RAINBOW_COLUMNS, rows, metadata)


def file_sha256(path: Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as exc:
        msg = f"Could not hash {path}: {exc}"
        raise ReportWriteError(msg) from exc


def generate_manifest(
    metadata: ReportMetadata,
    files: Sequence[Path],
    root: Path,
    *,
    config: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Provenance record: metadata, the full config and the hash of every produced file.

    File keys are paths relative to ``root`` with forward slashes.
    """
    entries = {path.relative_to(root).as_posix(): file_sha256(path) for path in sorted(files)}
    manifest: dict[str, Any] = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "version": __version__,
        "metadata": _build_metadata_dict(metadata),
        "files": entries,
    }
    if config is not None:
        manifest["config"] = dict(config)
    return manifest
