"""Synthetic data: the heteroscedastic "rainbow" curve and 3D constant-velocity tracks.

Track inputs have eight features::

    x[0:3]  noisy position encoding (measurement / box_mm)
    x[3:7]  orientation quaternion (x, y, z, w) that shapes the noise ellipsoid
    x[7]    distractor with no influence on anything

The measurement noise of frame t is ``R(q_t) diag(a^2, b^2, c^2) R(q_t)^T``
scaled by a depth factor, so a model must read the orientation and position
features to predict it. Every track draws from its own generator seeded by
``SeedSequence([seed, track_index])``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.transform import Rotation

from covfilt.kalman import constant_velocity_spec

if TYPE_CHECKING:
    from covfilt.autodiff import Array
    from covfilt.config import OodShift, TrackConfig

logger = logging.getLogger(__name__)

__all__ = [
    "INPUT_DIM",
    "MEASUREMENT_DIM",
    "POSITION_INDICES",
    "STATE_DIM",
    "VELOCITY_INDICES",
    "RainbowDataset",
    "TrackDataset",
    "apply_ood_shift",
    "generate_rainbow",
    "generate_track",
    "generate_tracks",
    "noise_covariance",
    "regression_arrays",
    "track_rng",
]

INPUT_DIM = 8
MEASUREMENT_DIM = 3
STATE_DIM = 6
POSITION_INDICES = (0, 1, 2)
VELOCITY_INDICES = (3, 4, 5)


@dataclass(frozen=True)
class TrackDataset:
    """One generated track.

    Attributes:
        track_id: Index of the track within its set (also its RNG stream).
        inputs: Model input features, shape (T, 8).
        measurements: Noisy positions ``H z_t + eps_t`` in mm, shape (T, 3).
        states: True states (position mm, velocity mm/s), shape (T, 6).
        true_covariances: Noise covariance of every frame, shape (T, 3, 3).
        config: Generation settings, when known.
    """

    track_id: int
    inputs: Array
    measurements: Array
    states: Array
    true_covariances: Array
    config: TrackConfig | None = None

    @property
    def labels(self) -> Array:
        """True positions, the regression target for the measurement model."""
        return self.states[:, :MEASUREMENT_DIM]

    def __len__(self) -> int:
        return int(self.states.shape[0])


@dataclass(frozen=True)
class RainbowDataset:
    """Samples around a smooth 2D curve with input-dependent covariance."""

    t: Array
    samples: Array
    means: Array
    covariances: Array

    @property
    def inputs(self) -> Array:
        return self.t.reshape(-1, 1)


def track_rng(seed: int, index: int, *stream: int) -> np.random.Generator:
    """Independent generator for one track; extra ``stream`` words split it further."""
    return np.random.default_rng(np.random.SeedSequence([seed, index, *stream]))


def _axes(config: TrackConfig) -> Array:
    base = config.noise_base_mm
    return np.array([base, base * config.anisotropy, base * config.anisotropy])


def _rotations(config: TrackConfig, quaternions: Array) -> Array:
    rotvec = Rotation.from_quat(quaternions).as_rotvec() * config.orientation_coupling
    return np.asarray(Rotation.from_rotvec(rotvec).as_matrix(), dtype=np.float64)


def _depth_factor(config: TrackConfig, positions: Array) -> Array:
    depth = np.clip(positions[:, 2] / config.box_mm, 0.0, 1.0)
    return 1.0 + config.distance_scaling * depth


def noise_covariance(config: TrackConfig, quaternions: Array, positions: Array) -> Array:
    """True measurement covariance for each frame, shape (T, 3, 3)."""
    rotations = _rotations(config, np.atleast_2d(quaternions))
    axes = _axes(config)
    factor = _depth_factor(config, np.atleast_2d(positions))
    scaled = rotations * (axes * axes)[None, None, :]
    sigma = scaled @ rotations.transpose(0, 2, 1) * (factor * factor)[:, None, None]
    return 0.5 * (sigma + sigma.transpose(0, 2, 1))


def generate_track(config: TrackConfig, index: int) -> TrackDataset:
    """Generate track ``index`` of the set described by ``config``."""
    rng = track_rng(config.seed, index)
    steps = config.duration
    F = constant_velocity_spec(MEASUREMENT_DIM, config.dt).F

    start = rng.uniform(0.0, config.box_mm, size=MEASUREMENT_DIM)
    direction = rng.normal(size=MEASUREMENT_DIM)
    direction /= np.linalg.norm(direction)
    speed = rng.uniform(config.speed_min, config.speed_max)
    states = np.empty((steps, STATE_DIM))
    states[0] = np.concatenate([start, speed * direction])
    for t in range(1, steps):
        states[t] = F @ states[t - 1]
    positions = states[:, :MEASUREMENT_DIM]

    quaternions = rng.normal(size=(steps, 4))
    quaternions /= np.linalg.norm(quaternions, axis=1, keepdims=True)
    covariances = noise_covariance(config, quaternions, positions)

    # eps = factor * R diag(axes) w, i.e. a draw from N(0, Sigma_true)
    rotations = _rotations(config, quaternions)
    factor = _depth_factor(config, positions)
    white = rng.normal(size=(steps, MEASUREMENT_DIM))
    shaped = np.einsum("tij,tj->ti", rotations, white * _axes(config)) * factor[:, None]
    noise = np.empty_like(shaped)
    noise[0] = shaped[0]
    phi = config.noise_ar1
    innovation_scale = np.sqrt(1.0 - phi * phi)
    for t in range(1, steps):
        noise[t] = phi * noise[t - 1] + innovation_scale * shaped[t] if phi else shaped[t]
    measurements = positions + noise

    distractor = rng.normal(size=(steps, 1))
    inputs = np.hstack([measurements / config.box_mm, quaternions, distractor])
    return TrackDataset(
        track_id=index,
        inputs=inputs,
        measurements=measurements,
        states=states,
        true_covariances=covariances,
        config=config,
    )


def generate_tracks(
    config: TrackConfig,
    n_tracks: int,
    *,
    threads: int = 1,
) -> list[TrackDataset]:
    """Generate ``n_tracks`` tracks; the result does not depend on ``threads``."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tracks = list(pool.map(lambda index: generate_track(config, index), range(n_tracks)))
    else:
        tracks = [generate_track(config, index) for index in range(n_tracks)]
    logger.info("Generated %d tracks of %d steps (seed %d)", n_tracks, config.duration, config.seed)
    return tracks


def apply_ood_shift(tracks: list[TrackDataset], shift: OodShift, seed: int) -> list[TrackDataset]:
    """Perturb the designated input features of every track with a per-track offset and scale.

    Labels, measurements and true covariances are left untouched. A zero
    shift returns the tracks unchanged.
    """
    if shift.is_zero:
        return list(tracks)
    dims = list(shift.dims)
    shifted = []
    for track in tracks:
        rng = track_rng(seed, track.track_id, 1)
        offset = rng.uniform(-shift.offset, shift.offset, size=len(dims))
        factor = 1.0 + rng.uniform(-shift.scale_jitter, shift.scale_jitter, size=len(dims))
        inputs = track.inputs.copy()
        inputs[:, dims] = inputs[:, dims] * factor + offset
        shifted.append(replace(track, inputs=inputs))
    logger.info("Applied out-of-domain shift to %d tracks on features %s", len(tracks), dims)
    return shifted


def regression_arrays(tracks: list[TrackDataset]) -> tuple[Array, Array]:
    """Stack all frames into inputs (N, 8) and true-position labels (N, 3)."""
    inputs = np.concatenate([track.inputs for track in tracks])
    labels = np.concatenate([track.labels for track in tracks])
    return inputs, labels


def _rainbow_curve(t: Array) -> Array:
    angle = np.pi * t
    return np.stack([2.0 * np.cos(angle), 2.0 * np.sin(angle) + 0.25 * np.sin(3.0 * angle)], axis=1)


def _rainbow_shape(t: Array, noise_scale: float, heteroscedastic: bool) -> tuple[Array, Array, Array]:
    if heteroscedastic:
        major = noise_scale * (0.05 + 0.25 * t)
        angle = np.pi * t
    else:
        major = np.full_like(t, 0.15 * noise_scale)
        angle = np.full_like(t, np.pi / 4.0)
    minor = 0.3 * major
    cos, sin = np.cos(angle), np.sin(angle)
    rotations = np.stack([np.stack([cos, -sin], axis=1), np.stack([sin, cos], axis=1)], axis=1)
    return rotations, major, minor


def generate_rainbow(
    n_points: int,
    seed: int,
    *,
    noise_scale: float = 1.0,
    heteroscedastic: bool = True,
) -> RainbowDataset:
    """Sample ``n_points`` inputs ``t ~ U[0, 1]`` and 2D outputs around a smooth arc.

    The noise ellipse grows and turns with ``t`` when ``heteroscedastic``;
    otherwise it is the same everywhere.
    """
    if n_points < 1:
        msg = f"n_points must be at least 1, got {n_points}"
        raise ValueError(msg)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, size=n_points)
    means = _rainbow_curve(t)
    rotations, major, minor = _rainbow_shape(t, noise_scale, heteroscedastic)
    axes = np.stack([major, minor], axis=1)
    white = rng.normal(size=(n_points, 2))
    samples = means + np.einsum("nij,nj->ni", rotations, white * axes)
    scaled = rotations * (axes * axes)[:, None, :]
    covariances = scaled @ rotations.transpose(0, 2, 1)
    covariances = 0.5 * (covariances + covariances.transpose(0, 2, 1))
    return RainbowDataset(t=t, samples=samples, means=means, covariances=covariances)
