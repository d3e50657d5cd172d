"""Discrete multichannel RIR synthesis, noise injection, extrapolation.

The forward model is an exact sum of ideal low-passed spherical waves:

    x[m, n] = sum_k a_k * sinc(pi fs (n/fs - ||r_m - r_k|| / c)) / (4 pi ||r_m - r_k||)

evaluated with true sinc functions (no windowing or FFT approximation).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import _accel
from .errors import SingularityError, ValidationError
from .geometry import (SPEED_OF_SOUND, ImageSourceCloud, MicArray, RoomBox,
                       Scene, WallSet, enumerate_image_sources)
from .serialize import dump_canonical, load_json

MIN_SOURCE_MIC_DISTANCE = 1e-6
ENUMERATION_GUARD_SAMPLES = 10


@dataclass(frozen=True)
class MultichannelRir:
    """M x N sampled signal with its rate, duration, and array identity."""

    samples: np.ndarray
    fs: float
    duration: float
    array: Optional[MicArray] = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or not np.all(np.isfinite(s)):
            raise ValidationError("samples must be a finite (M, N) array")
        if abs(s.shape[1] - self.duration * self.fs) > 0.5 + 1e-9:
            raise ValidationError("sample count does not match duration * fs")
        if self.array is not None and len(self.array) != s.shape[0]:
            raise ValidationError("channel count does not match the array")
        object.__setattr__(self, "samples", s)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def flat(self) -> np.ndarray:
        """Channel-major flattening, matching the measurement vector layout."""
        return self.samples.reshape(-1)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise level as peak signal-to-noise ratio."""

    psnr_db: Optional[float]
    seed: int = 0

    def __post_init__(self):
        if self.psnr_db is not None and np.isnan(self.psnr_db):
            raise ValidationError("psnr_db must be a number or None")


def synthesize_rir(cloud: ImageSourceCloud, array: MicArray, fs: float,
                   duration: float) -> MultichannelRir:
    """Exact forward synthesis of a weighted source cloud."""
    if fs <= 0 or duration <= 0:
        raise ValidationError("fs and duration must be positive")
    if len(cloud) == 0:
        raise ValidationError("cannot synthesize from an empty cloud")
    dist = np.linalg.norm(cloud.positions[:, np.newaxis, :]
                          - array.positions[np.newaxis, :, :], axis=2)
    if np.min(dist) < MIN_SOURCE_MIC_DISTANCE:
        raise SingularityError("a source coincides with a microphone")
    n_samples = int(round(duration * fs))
    samples = _accel.synth_rir(np.ascontiguousarray(cloud.positions),
                               np.ascontiguousarray(cloud.amplitudes),
                               np.ascontiguousarray(array.positions),
                               float(fs), SPEED_OF_SOUND, n_samples)
    return MultichannelRir(samples, float(fs), float(duration), array)


def simulate_scene_rir(scene: Scene, fs: float, duration: float,
                       max_order: int = 20,
                       guard_samples: int = ENUMERATION_GUARD_SAMPLES) -> MultichannelRir:
    """Enumerate the scene's image sources (order cap + radius with a sinc
    pre-ring guard margin) and synthesize the discrete RIR."""
    max_radius = SPEED_OF_SOUND * duration + guard_samples * SPEED_OF_SOUND / fs
    cloud = enumerate_image_sources(scene, max_order=max_order, max_radius=max_radius)
    return synthesize_rir(cloud, scene.array, fs, duration)


def add_noise_psnr(rir: MultichannelRir, spec: NoiseSpec) -> MultichannelRir:
    """Add i.i.d. Gaussian noise at the requested peak signal-to-noise ratio."""
    peak = float(np.max(np.abs(rir.samples)))
    if peak == 0.0:
        raise ValidationError("PSNR is undefined for an all-zero signal")
    if spec.psnr_db is None or np.isinf(spec.psnr_db):
        return MultichannelRir(rir.samples.copy(), rir.fs, rir.duration, rir.array)
    sigma = peak * 10.0 ** (-spec.psnr_db / 20.0)
    rng = np.random.default_rng(spec.seed)
    noisy = rir.samples + rng.normal(0.0, sigma, size=rir.samples.shape)
    return MultichannelRir(noisy, rir.fs, rir.duration, rir.array)


# ---------------------------------------------------------------------------
# Extrapolation at a new source-array placement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArrayPose:
    """A microphone array placed in some reference frame: local coordinates p
    map to ``center + rotation @ p``."""

    array: MicArray
    center: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        from .geometry import check_rotation
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "rotation", check_rotation(self.rotation))

    @classmethod
    def identity(cls, array: MicArray) -> "ArrayPose":
        return cls(array, np.zeros(3), np.eye(3))


def scene_from_recovered(recovered, new_source: np.ndarray, pose: ArrayPose,
                         min_wall_margin: float = 1e-6) -> Scene:
    """Build a Scene from recovered parameters at a new placement.

    ``new_source`` and ``pose`` are expressed in the frame the room was
    recovered in; the returned Scene lives in the new array's own frame.
    """
    basis = recovered.basis.as_matrix()
    w = pose.rotation
    basis_new = w.T @ basis
    corner_new = (recovered.corner_origin - pose.center) @ w
    source_new = (np.asarray(new_source, dtype=np.float64) - pose.center) @ w

    alphas = np.clip(recovered.absorptions, 0.0, 1.0 - 1e-15)
    room = RoomBox(recovered.dims, basis_new, corner_new)
    scene = Scene(room=room, walls=WallSet(alphas), source=source_new,
                  source_room=room.array_to_room(source_new), array=pose.array)
    if not room.contains_room_point(scene.source_room, margin=min_wall_margin):
        raise ValidationError("new source lies outside the recovered room")
    if not room.contains_room_point(scene.array_center_room, margin=min_wall_margin):
        raise ValidationError("new array center lies outside the recovered room")
    return scene


def extrapolate_rir(recovered, new_source: np.ndarray, pose: ArrayPose,
                    fs: float, duration: float, max_order: int = 20) -> MultichannelRir:
    """Re-simulate a RIR at a new source-array placement from recovered
    parameters (same forward path as plain scene simulation)."""
    scene = scene_from_recovered(recovered, new_source, pose)
    return simulate_scene_rir(scene, fs, duration, max_order=max_order)


# ---------------------------------------------------------------------------
# File formats: raw little-endian float64 + JSON sidecar, optional CSV
# ---------------------------------------------------------------------------

def save_rir(path_base, rir: MultichannelRir, scene_id: str = "") -> None:
    """Write ``<base>.f64`` (channel-major raw doubles) and ``<base>.json``."""
    base = Path(path_base)
    base.with_suffix(".f64").write_bytes(
        np.ascontiguousarray(rir.samples, dtype="<f8").tobytes())
    dump_canonical({
        "fs": rir.fs,
        "duration": rir.duration,
        "M": rir.n_channels,
        "N": rir.n_samples,
        "scene_id": scene_id,
    }, base.with_suffix(".json"))


def load_rir(path_base, array: Optional[MicArray] = None) -> MultichannelRir:
    base = Path(path_base)
    meta = load_json(base.with_suffix(".json"))
    raw = np.frombuffer(base.with_suffix(".f64").read_bytes(), dtype="<f8")
    samples = raw.reshape(meta["M"], meta["N"]).astype(np.float64)
    return MultichannelRir(samples, float(meta["fs"]), float(meta["duration"]), array)


def export_rir_csv(path, rir: MultichannelRir) -> None:
    """One column per channel, one row per sample."""
    header = ",".join(f"ch{m}" for m in range(rir.n_channels))
    np.savetxt(path, rir.samples.T, delimiter=",", header=header, comments="")
