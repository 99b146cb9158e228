"""Track dataset CSV files.

Layout::

    # covfilt-tracks v1 config=<TrackConfig as compact JSON>     (optional)
    track_id,t,x_0,...,x_7,y_0,y_1,y_2,z_0,...,z_5,sigma_00,sigma_01,...,sigma_22
    0,0,<17 significant digits>,...

One row per frame, tracks in order, ``t`` counting from 0 within each track.
``y_*`` are the noisy measurements, ``z_*`` the true states and ``sigma_ij``
the upper triangle (row-major) of the true noise covariance.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from typing import TYPE_CHECKING

import numpy as np
from pydantic import ValidationError

from covfilt.config import TrackConfig
from covfilt.exceptions import DatasetFormatError, ReportWriteError
from covfilt.simulator import TrackDataset

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

logger = logging.getLogger(__name__)

__all__ = [
    "DATASET_VERSION",
    "format_tracks",
    "load_tracks",
    "parse_tracks",
    "save_tracks",
]

DATASET_VERSION = 1
_PREAMBLE = re.compile(r"^# covfilt-tracks v(?P<version>\d+)(?: config=(?P<config>.*))?$")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _header(d: int, k: int, n: int) -> list[str]:
    rows, cols = np.triu_indices(k)
    return (
        ["track_id", "t"]
        + [f"x_{i}" for i in range(d)]
        + [f"y_{i}" for i in range(k)]
        + [f"z_{i}" for i in range(n)]
        + [f"sigma_{i}{j}" for i, j in zip(rows, cols, strict=True)]
    )


def format_tracks(tracks: Sequence[TrackDataset]) -> str:
    """Render tracks in the CSV layout; the preamble is written when the tracks carry a config."""
    buffer = io.StringIO()
    config = tracks[0].config if tracks else None
    if config is not None and all(track.config == config for track in tracks):
        buffer.write(f"# covfilt-tracks v{DATASET_VERSION} config={config.model_dump_json()}\n")
    if not tracks:
        return buffer.getvalue()

    first = tracks[0]
    d, k, n = first.inputs.shape[1], first.measurements.shape[1], first.states.shape[1]
    rows, cols = np.triu_indices(k)
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_header(d, k, n))
    for track in tracks:
        for t in range(len(track)):
            values = [
                *track.inputs[t],
                *track.measurements[t],
                *track.states[t],
                *track.true_covariances[t][rows, cols],
            ]
            writer.writerow([track.track_id, t, *(_fmt(v) for v in values)])
    return buffer.getvalue()


def save_tracks(tracks: Sequence[TrackDataset], path: Path) -> None:
    """Write tracks to ``path``, creating parent directories.

    Raises:
        ReportWriteError: If the file cannot be written.
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_tracks(tracks), encoding="utf-8")
    except OSError as exc:
        msg = f"Could not write dataset to {path}: {exc}"
        raise ReportWriteError(msg) from exc
    logger.info("Wrote %d tracks to %s", len(tracks), path)


def _count(header: list[str], prefix: str, line: int) -> int:
    pattern = re.compile(rf"^{prefix}_(\d+)$")
    indices = [int(m.group(1)) for name in header if (m := pattern.match(name))]
    if not indices:
        msg = f"missing column '{prefix}_0'"
        raise DatasetFormatError(msg, line=line)
    for index in range(max(indices) + 1):
        if index not in indices:
            msg = f"missing column '{prefix}_{index}'"
            raise DatasetFormatError(msg, line=line)
    return max(indices) + 1


def _parse_preamble(line: str) -> TrackConfig | None:
    match = _PREAMBLE.match(line.rstrip("\n"))
    if match is None:
        msg = "unrecognized preamble, expected '# covfilt-tracks v<N> config=<json>'"
        raise DatasetFormatError(msg, line=1)
    version = int(match.group("version"))
    if version != DATASET_VERSION:
        msg = f"dataset version {version} is not supported (expected {DATASET_VERSION})"
        raise DatasetFormatError(msg, line=1)
    raw = match.group("config")
    if raw is None:
        return None
    try:
        return TrackConfig.model_validate(json.loads(raw))
    except (json.JSONDecodeError, ValidationError) as exc:
        msg = f"invalid config in preamble: {exc}"
        raise DatasetFormatError(msg, line=1) from exc


def parse_tracks(text: str) -> list[TrackDataset]:
    """Parse the CSV layout produced by ``format_tracks``.

    Raises:
        DatasetFormatError: With the offending line number on any malformed content.
    """
    lines = text.splitlines()
    config: TrackConfig | None = None
    offset = 0
    if lines and lines[0].startswith("#"):
        config = _parse_preamble(lines[0])
        offset = 1
    if len(lines) <= offset:
        return []

    reader = csv.reader(lines[offset:])
    header = next(reader)
    header_line = offset + 1
    for required in ("track_id", "t"):
        if required not in header:
            msg = f"missing column '{required}'"
            raise DatasetFormatError(msg, line=header_line)
    d, k, n = (_count(header, prefix, header_line) for prefix in ("x", "y", "z"))
    expected = _header(d, k, n)
    for name in expected:
        if name not in header:
            msg = f"missing column '{name}'"
            raise DatasetFormatError(msg, line=header_line)
    position = [header.index(name) for name in expected]
    rows, cols = np.triu_indices(k)

    grouped: dict[int, list[list[float]]] = {}
    order: list[int] = []
    for line_number, record in enumerate(reader, start=header_line + 1):
        if len(record) != len(header):
            msg = f"expected {len(header)} fields, got {len(record)}"
            raise DatasetFormatError(msg, line=line_number)
        try:
            track_id = int(record[position[0]])
            t = int(record[position[1]])
            values = [float(record[i]) for i in position[2:]]
        except ValueError as exc:
            msg = f"could not parse value: {exc}"
            raise DatasetFormatError(msg, line=line_number) from exc
        frames = grouped.setdefault(track_id, [])
        if not frames:
            order.append(track_id)
        elif order[-1] != track_id:
            msg = f"rows of track {track_id} are not contiguous"
            raise DatasetFormatError(msg, line=line_number)
        if t != len(frames):
            msg = f"track {track_id} expected t={len(frames)}, got t={t}"
            raise DatasetFormatError(msg, line=line_number)
        frames.append(values)

    tracks = []
    for track_id in order:
        data = np.asarray(grouped[track_id], dtype=np.float64)
        upper = data[:, d + k + n :]
        sigma = np.zeros((data.shape[0], k, k))
        sigma[:, rows, cols] = upper
        sigma[:, cols, rows] = upper
        tracks.append(
            TrackDataset(
                track_id=track_id,
                inputs=data[:, :d],
                measurements=data[:, d : d + k],
                states=data[:, d + k : d + k + n],
                true_covariances=sigma,
                config=config,
            )
        )
    return tracks


def load_tracks(path: Path) -> list[TrackDataset]:
    """Read a dataset file written by ``save_tracks``.

    Raises:
        DatasetFormatError: If the file is unreadable or malformed.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        msg = f"Could not read dataset {path}: {exc}"
        raise DatasetFormatError(msg) from exc
    tracks = parse_tracks(text)
    logger.info("Loaded %d tracks from %s", len(tracks), path)
    return tracks
