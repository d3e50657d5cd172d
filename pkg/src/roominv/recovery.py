"""First-order identification and room parameter inference.

Given an estimated cloud and an estimated basis: the true source is the cloud
member nearest the array center; the six first-order images are the nearest
members inside cones cast along the signed basis directions; clustered
estimates are merged by amplitude-weighted fusion.  Dimensions, translation,
and per-wall absorptions follow from the fused positions and amplitudes.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (AmbiguityError, InconsistentBasisError,
                     MissingReflectionError, ValidationError)
from .geometry import ImageSourceCloud, Scene
from .orientation import Basis
from .serialize import dump_canonical, load_json

RECOVERED_WALLS = ("1-", "1+", "2-", "2+", "3-", "3+")
_TAU_SLACK = 0.05


@dataclass(frozen=True)
class ConeSearchConfig:
    initial_half_angle: float = np.deg2rad(15.0)
    widen_factor: float = 1.5
    max_half_angle: float = np.deg2rad(90.0)

    def __post_init__(self):
        if not (0 < self.initial_half_angle <= self.max_half_angle):
            raise ValidationError("cone angles must satisfy 0 < initial <= max")
        if self.widen_factor <= 1.0:
            raise ValidationError("widen factor must exceed 1")


@dataclass(frozen=True)
class RecoveredRoom:
    """Estimated 18-parameter description plus the fused first-order images.

    ``absorptions`` are clamped to [0, 1]; the raw values (which may be
    slightly negative under amplitude over-estimation) are kept alongside.
    Wall order matches RECOVERED_WALLS (recovered axes, near then far).
    """

    basis: Basis
    dims: np.ndarray
    tau_room: np.ndarray
    source_pos: np.ndarray
    absorptions: np.ndarray
    raw_absorptions: np.ndarray
    source_amplitude: float
    first_order_positions: np.ndarray
    first_order_amplitudes: np.ndarray
    corner_origin: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=np.float64)
        tau = np.asarray(self.tau_room, dtype=np.float64)
        if np.any(dims <= 0):
            raise InconsistentBasisError(f"non-positive recovered dimension: {dims}")
        if np.any(tau < -_TAU_SLACK * dims) or np.any(tau > (1 + _TAU_SLACK) * dims):
            raise InconsistentBasisError(
                f"recovered translation {tau} falls outside the room {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "tau_room", tau)
        object.__setattr__(self, "source_pos", np.asarray(self.source_pos, dtype=np.float64))
        object.__setattr__(self, "absorptions",
                           np.clip(np.asarray(self.absorptions, dtype=np.float64), 0.0, 1.0))
        object.__setattr__(self, "raw_absorptions",
                           np.asarray(self.raw_absorptions, dtype=np.float64))
        object.__setattr__(self, "first_order_positions",
                           np.asarray(self.first_order_positions, dtype=np.float64))
        object.__setattr__(self, "first_order_amplitudes",
                           np.asarray(self.first_order_amplitudes, dtype=np.float64))
        corner = self.corner_origin
        if corner is None:
            corner = self.source_pos - self.tau_room @ self.basis.as_matrix().T
        object.__setattr__(self, "corner_origin", np.asarray(corner, dtype=np.float64))

    @classmethod
    def from_scene(cls, scene: Scene) -> "RecoveredRoom":
        """Exact-parameter instance (identity labeling), e.g. for extrapolation
        references; carries the scene's corner so round trips are bit-exact."""
        basis = Basis.from_matrix(scene.room.rotation)
        d = scene.source_room
        dims = scene.room.dims
        first_pos = []
        for axis in range(3):
            for far in (0, 1):
                p = scene.source_room.copy()
                p[axis] = (2 * dims[axis] - d[axis]) if far else -d[axis]
                first_pos.append(scene.room.room_to_array(p))
        amps = scene.walls.reflection_amplitudes
        return cls(basis=basis, dims=dims.copy(), tau_room=d.copy(),
                   source_pos=scene.source.copy(),
                   absorptions=scene.walls.absorptions.copy(),
                   raw_absorptions=scene.walls.absorptions.copy(),
                   source_amplitude=1.0,
                   first_order_positions=np.array(first_pos),
                   first_order_amplitudes=amps.copy(),
                   corner_origin=scene.room.corner_origin.copy())

    def array_to_room(self, r) -> np.ndarray:
        return (np.asarray(r, dtype=np.float64) - self.source_pos) \
            @ self.basis.as_matrix() + self.tau_room

    def room_to_array(self, r_room) -> np.ndarray:
        return (np.asarray(r_room, dtype=np.float64) - self.tau_room) \
            @ self.basis.as_matrix().T + self.source_pos


def identify_true_source(cloud: ImageSourceCloud, tie_tol: float = 1e-9) -> int:
    """Index of the cloud member nearest the array center."""
    if len(cloud) == 0:
        raise ValidationError("empty cloud")
    dist = np.linalg.norm(cloud.positions, axis=1)
    order = np.argsort(dist, kind="stable")
    if len(cloud) > 1 and dist[order[1]] - dist[order[0]] < tie_tol:
        raise AmbiguityError("two candidates tie for the nearest source")
    return int(order[0])


def fusion(candidate_index: int, cloud: ImageSourceCloud, mu: float):
    """Amplitude-weighted merge of all members within ``mu`` of the candidate.

    Returns (total amplitude, weighted centroid); the candidate itself is
    always included.
    """
    if mu <= 0:
        raise ValidationError("fusion radius must be positive")
    center = cloud.positions[candidate_index]
    near = np.linalg.norm(cloud.positions - center, axis=1) < mu
    near[candidate_index] = True
    amps = cloud.amplitudes[near]
    total = float(np.sum(amps))
    pos = (amps / total) @ cloud.positions[near]
    return total, pos


def closest_in_cone(origin: np.ndarray, direction: np.ndarray,
                    cloud: ImageSourceCloud, cfg: ConeSearchConfig,
                    exclude: Optional[np.ndarray] = None,
                    wall: str = "?") -> int:
    """Nearest cloud member inside a cone from ``origin`` along ``direction``,
    widening the cone geometrically until it contains one."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    offsets = cloud.positions - origin
    dist = np.linalg.norm(offsets, axis=1)
    usable = dist > 1e-12
    if exclude is not None:
        usable &= ~exclude
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_angle = np.where(usable, offsets @ direction / np.where(usable, dist, 1.0), -2.0)

    half_angle = cfg.initial_half_angle
    while True:
        inside = usable & (cos_angle >= np.cos(half_angle))
        if np.any(inside):
            masked = np.where(inside, dist, np.inf)
            return int(np.argmin(masked))
        if half_angle >= cfg.max_half_angle:
            raise MissingReflectionError(wall)
        half_angle = min(half_angle * cfg.widen_factor, cfg.max_half_angle)


def recover_room(cloud: ImageSourceCloud, basis: Basis, mu: float = 0.05,
                 cone_cfg: Optional[ConeSearchConfig] = None) -> RecoveredRoom:
    """Infer dimensions, translation, source, and absorptions from the cloud.

    Per recovered axis t: L_t = e_t . (r_{t+} - r_{t-}) / 2 and
    tau_t = e_t . (r_0 - r_{t-}) / 2; per wall, the reflection amplitude is
    the fused first-order amplitude normalized by the fused source amplitude,
    and the absorption is one minus its square.
    """
    cone_cfg = cone_cfg or ConeSearchConfig()
    k0 = identify_true_source(cloud)
    a0, r0 = fusion(k0, cloud, mu)

    # Members of the fused true-source cluster are reconstruction artifacts of
    # the direct path and never first-order candidates.
    origin_cluster = np.linalg.norm(cloud.positions - cloud.positions[k0], axis=1) < mu
    origin_cluster[k0] = True

    axes = basis.as_matrix().T  # rows e1, e2, e3
    first_pos = np.zeros((6, 3))
    first_amp = np.zeros(6)
    for t in range(3):
        for far, sign in ((0, -1.0), (1, 1.0)):
            wall = RECOVERED_WALLS[2 * t + far]
            idx = closest_in_cone(r0, sign * axes[t], cloud, cone_cfg,
                                  exclude=origin_cluster, wall=wall)
            amp, pos = fusion(idx, cloud, mu)
            first_pos[2 * t + far] = pos
            first_amp[2 * t + far] = amp

    dims = np.array([axes[t] @ (first_pos[2 * t + 1] - first_pos[2 * t]) / 2.0
                     for t in range(3)])
    if np.any(dims <= 0):
        raise InconsistentBasisError(f"non-positive recovered dimension: {dims}")
    tau = np.array([axes[t] @ (r0 - first_pos[2 * t]) / 2.0 for t in range(3)])

    ratios = first_amp / a0
    raw_alpha = 1.0 - ratios ** 2
    return RecoveredRoom(
        basis=basis, dims=dims, tau_room=tau, source_pos=r0,
        absorptions=raw_alpha, raw_absorptions=raw_alpha,
        source_amplitude=a0,
        first_order_positions=first_pos, first_order_amplitudes=first_amp,
        diagnostics={
            "fused_source_amplitude": a0,
            "raw_first_order_amplitudes": first_amp.tolist(),
            "mu": mu,
        })


def room_center_in_array_frame(recovered: RecoveredRoom) -> np.ndarray:
    """Array-frame position of the recovered room's center (room coords L/2)."""
    return recovered.room_to_array(recovered.dims / 2.0)


# ---------------------------------------------------------------------------
# Serialization (mirrors the scene schema plus recovery extras)
# ---------------------------------------------------------------------------

def recovered_to_dict(rec: RecoveredRoom) -> dict:
    return {
        "dims_m": rec.dims,
        "rotation": rec.basis.as_matrix().reshape(9),
        "corner_origin_m": rec.corner_origin,
        "absorptions": rec.absorptions,
        "source_m": rec.source_pos,
        "tau_room_m": rec.tau_room,
        "source_amplitude": rec.source_amplitude,
        "first_order": [
            {"wall": RECOVERED_WALLS[i],
             "position_m": rec.first_order_positions[i],
             "amplitude": rec.first_order_amplitudes[i]}
            for i in range(6)
        ],
        "raw_absorptions": rec.raw_absorptions,
        "diagnostics": rec.diagnostics,
    }


def recovered_from_dict(doc: dict) -> RecoveredRoom:
    basis = Basis.from_matrix(np.array(doc["rotation"]).reshape(3, 3))
    return RecoveredRoom(
        basis=basis,
        dims=np.array(doc["dims_m"]),
        tau_room=np.array(doc["tau_room_m"]),
        source_pos=np.array(doc["source_m"]),
        absorptions=np.array(doc["absorptions"]),
        raw_absorptions=np.array(doc["raw_absorptions"]),
        source_amplitude=float(doc["source_amplitude"]),
        first_order_positions=np.array([f["position_m"] for f in doc["first_order"]]),
        first_order_amplitudes=np.array([f["amplitude"] for f in doc["first_order"]]),
        corner_origin=np.array(doc["corner_origin_m"]),
        diagnostics=dict(doc.get("diagnostics", {})),
    )


def save_recovered(rec: RecoveredRoom, path) -> None:
    dump_canonical(recovered_to_dict(rec), path)


def load_recovered(path) -> RecoveredRoom:
    return recovered_from_dict(load_json(path))
