"""Scene model, image-source lattice enumeration, frames, random scenes.

Conventions used package-wide:

* The *array frame* has its origin at the microphone centroid.  The *room
  frame* has its origin at one room corner with axes along the wall normals,
  so the walls lie at coordinate 0 ("near", suffix ``-``) and at the room
  dimension ("far", suffix ``+``) on each axis.
* ``RoomBox.rotation`` holds the room basis vectors as columns, expressed in
  the array frame: ``p_array = corner_origin + rotation @ p_room``.
* Wall order everywhere is ``x-, x+, y-, y+, z-, z+``.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import SceneGenerationError, ValidationError
from .serialize import dump_canonical, load_json

SPEED_OF_SOUND = 343.0  # m/s

WALL_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValidationError("cannot normalize the zero vector")
    return v / n


def check_direction(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValidationError(f"not a finite 3-vector: {v!r}")
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise ValidationError(f"direction is not unit length: {v!r}")
    return v


def check_rotation(matrix: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Validate a proper rotation matrix (orthonormal, det +1)."""
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValidationError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise ValidationError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValidationError("rotation determinant is not +1")
    return r


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    w, x, y, z = unit(np.asarray(q, dtype=np.float64))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    if q[0] < 0:
        q = -q
    return rotation_from_quaternion(q)


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly equidistributed unit vectors on the full sphere."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    az = i * (np.pi * (3.0 - np.sqrt(5.0)))
    return np.column_stack([r * np.cos(az), r * np.sin(az), z])


def fibonacci_half_sphere(n: int) -> np.ndarray:
    """n roughly equidistributed unit vectors on the upper half sphere."""
    i = np.arange(n, dtype=np.float64)
    z = (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    az = i * (np.pi * (3.0 - np.sqrt(5.0)))
    return np.column_stack([r * np.cos(az), r * np.sin(az), z])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WallSet:
    """Absorption per wall, ordered x-, x+, y-, y+, z-, z+."""

    absorptions: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.absorptions, dtype=np.float64)
        if a.shape != (6,) or not np.all(np.isfinite(a)):
            raise ValidationError("absorptions must be 6 finite reals")
        if np.any(a < 0.0) or np.any(a >= 1.0):
            raise ValidationError("absorptions must lie in [0, 1)")
        object.__setattr__(self, "absorptions", a)

    @property
    def reflection_amplitudes(self) -> np.ndarray:
        """Per-wall reflection amplitude a = sqrt(1 - alpha), in (0, 1]."""
        return np.sqrt(1.0 - self.absorptions)

    @staticmethod
    def uniform(alpha: float) -> "WallSet":
        return WallSet(np.full(6, float(alpha)))


@dataclass(frozen=True)
class MicArray:
    """Rigid microphone layout, positions in the array frame (centroid at 0)."""

    name: str
    positions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or not np.all(np.isfinite(p)):
            raise ValidationError("mic positions must be a finite (M, 3) array")
        if p.shape[0] < 4:
            raise ValidationError("need at least 4 microphones")
        p = p - p.mean(axis=0)
        if np.linalg.svd(p, compute_uv=False)[-1] <= 1e-9:
            raise ValidationError("microphones must be non-coplanar")
        object.__setattr__(self, "positions", p)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.positions, axis=1)))

    def scaled(self, factor: float) -> "MicArray":
        if factor <= 0:
            raise ValidationError("scale factor must be positive")
        return MicArray(self.name, self.positions * float(factor))


@dataclass(frozen=True)
class RoomBox:
    """Cuboid room: side lengths plus pose of the room frame in the array frame."""

    dims: np.ndarray
    rotation: np.ndarray
    corner_origin: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dims, dtype=np.float64)
        if d.shape != (3,) or not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValidationError("room dims must be 3 positive reals")
        r = check_rotation(self.rotation)
        c = np.asarray(self.corner_origin, dtype=np.float64)
        if c.shape != (3,) or not np.all(np.isfinite(c)):
            raise ValidationError("corner origin must be a finite 3-vector")
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "corner_origin", c)

    def room_to_array(self, p_room: np.ndarray) -> np.ndarray:
        return self.corner_origin + np.asarray(p_room, dtype=np.float64) @ self.rotation.T

    def array_to_room(self, p_array: np.ndarray) -> np.ndarray:
        return (np.asarray(p_array, dtype=np.float64) - self.corner_origin) @ self.rotation

    def contains_room_point(self, p_room: np.ndarray, margin: float = 0.0) -> bool:
        p = np.asarray(p_room, dtype=np.float64)
        return bool(np.all(p > margin) and np.all(p < self.dims - margin))


@dataclass(frozen=True)
class Scene:
    """Full 18-parameter ground truth: room pose/size, wall set, source, array."""

    room: RoomBox
    walls: WallSet
    source: np.ndarray        # array frame
    source_room: np.ndarray   # room frame (distances to the near walls)
    array: MicArray

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.float64)
        sr = np.asarray(self.source_room, dtype=np.float64)
        if s.shape != (3,) or sr.shape != (3,):
            raise ValidationError("source positions must be 3-vectors")
        if np.max(np.abs(self.room.room_to_array(sr) - s)) > 1e-9:
            raise ValidationError("source and source_room disagree")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "source_room", sr)

    @classmethod
    def from_room_frame(cls, dims, rotation, array_center_room, source_room,
                        absorptions, array: MicArray) -> "Scene":
        rotation = np.asarray(rotation, dtype=np.float64)
        corner = -np.asarray(array_center_room, dtype=np.float64) @ rotation.T
        room = RoomBox(dims, rotation, corner)
        source = room.room_to_array(source_room)
        return cls(room=room, walls=WallSet(absorptions), source=source,
                   source_room=np.asarray(source_room, dtype=np.float64), array=array)

    @property
    def array_center_room(self) -> np.ndarray:
        return self.room.array_to_room(np.zeros(3))

    def validate(self, strict: bool = True,
                 min_source_array_dist: float = 1.0,
                 min_array_wall_dist: float = 0.25,
                 min_source_wall_dist: float = 0.0) -> None:
        """Check scene invariants; `strict` enables the placement rules."""
        if not self.room.contains_room_point(self.source_room, margin=min_source_wall_dist):
            raise ValidationError("source is not strictly inside the room")
        for mic in self.array.positions:
            if not self.room.contains_room_point(self.room.array_to_room(mic)):
                raise ValidationError("a microphone lies outside the room")
        if strict:
            if np.linalg.norm(self.source) < min_source_array_dist:
                raise ValidationError("source closer than the minimum source-array distance")
            center = self.array_center_room
            if not self.room.contains_room_point(center, margin=min_array_wall_dist):
                raise ValidationError("array center violates the wall margin")


@dataclass(frozen=True)
class ImageSourceCloud:
    """Weighted 3D point set; lattice labels are kept for ground-truth clouds."""

    positions: np.ndarray
    amplitudes: np.ndarray
    orders: Optional[np.ndarray] = None
    lattice_q: Optional[np.ndarray] = None
    lattice_eps: Optional[np.ndarray] = None
    frame: str = "array"

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        if p.size == 0:
            p = p.reshape(0, 3)
        if p.shape != (a.shape[0], 3):
            raise ValidationError("positions must be (K, 3) matching amplitudes")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
            raise ValidationError("cloud entries must be finite")
        if np.any(a <= 0.0):
            raise ValidationError("amplitudes must be positive")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "amplitudes", a)
        for name in ("orders", "lattice_q", "lattice_eps"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=np.int64))
        if self.lattice_q is not None and self.lattice_eps is not None:
            labels = np.concatenate([self.lattice_q, self.lattice_eps], axis=1)
            if len(np.unique(labels, axis=0)) != len(a):
                raise ValidationError("duplicate lattice indices in ground-truth cloud")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, index) -> "ImageSourceCloud":
        def take(v):
            return None if v is None else v[index]
        return ImageSourceCloud(self.positions[index], self.amplitudes[index],
                                take(self.orders), take(self.lattice_q),
                                take(self.lattice_eps), self.frame)

    def to_records(self):
        return [{"position_m": self.positions[k], "amplitude": self.amplitudes[k]}
                for k in range(len(self))]

    @staticmethod
    def from_records(records, frame: str = "array") -> "ImageSourceCloud":
        if not records:
            return ImageSourceCloud(np.zeros((0, 3)), np.zeros(0), frame=frame)
        pos = np.array([r["position_m"] for r in records], dtype=np.float64)
        amp = np.array([r["amplitude"] for r in records], dtype=np.float64)
        return ImageSourceCloud(pos, amp, frame=frame)


# ---------------------------------------------------------------------------
# Image-source enumeration
# ---------------------------------------------------------------------------

_EPS_COMBOS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                       dtype=np.int64)


def enumerate_image_sources(scene: Scene, max_order: int,
                            max_radius: float) -> ImageSourceCloud:
    """All image sources with reflection order <= max_order within max_radius.

    Positions follow the mirror lattice ``eps * d + 2 q * L`` in the room
    frame; per-axis reflection counts are ``|q - p|`` on the near wall and
    ``|q|`` on the far wall with ``p = (1 - eps) / 2``, and the amplitude is
    the product of the corresponding wall reflection amplitudes.  The radius
    is measured from the array center.  Output is mapped to the array frame
    and sorted by (order, lattice index).
    """
    scene.validate(strict=False)
    if max_order < 0:
        raise ValidationError("max_order must be >= 0")
    if max_radius <= 0:
        raise ValidationError("max_radius must be positive")

    dims = scene.room.dims
    d = scene.source_room
    center = scene.array_center_room
    q_cap = (max_order + 1) // 2

    ranges = []
    for i in range(3):
        lo = int(np.floor((center[i] - max_radius - d[i]) / (2.0 * dims[i])))
        hi = int(np.ceil((center[i] + max_radius + d[i]) / (2.0 * dims[i])))
        ranges.append(np.arange(max(lo, -q_cap), min(hi, q_cap) + 1, dtype=np.int64))

    qx, qy, qz = np.meshgrid(*ranges, indexing="ij")
    q = np.column_stack([qx.ravel(), qy.ravel(), qz.ravel()])      # (Nq, 3)
    q = np.repeat(q, len(_EPS_COMBOS), axis=0)
    eps = np.tile(_EPS_COMBOS, (qx.size, 1))

    p = (1 - eps) // 2
    c_near = np.abs(q - p)
    c_far = np.abs(q)
    order = (c_near + c_far).sum(axis=1)

    pos_room = eps * d[np.newaxis, :] + 2.0 * q * dims[np.newaxis, :]
    dist = np.linalg.norm(pos_room - center[np.newaxis, :], axis=1)
    keep = (order <= max_order) & (dist <= max_radius)

    q, eps, c_near, c_far = q[keep], eps[keep], c_near[keep], c_far[keep]
    order, pos_room = order[keep], pos_room[keep]

    a = scene.walls.reflection_amplitudes
    a_near = a[0::2]  # x-, y-, z-
    a_far = a[1::2]   # x+, y+, z+
    amps = np.prod(a_near[np.newaxis, :] ** c_near, axis=1) \
        * np.prod(a_far[np.newaxis, :] ** c_far, axis=1)

    idx = np.lexsort((eps[:, 2], eps[:, 1], eps[:, 0], q[:, 2], q[:, 1], q[:, 0], order))
    pos_array = scene.room.room_to_array(pos_room[idx])
    return ImageSourceCloud(pos_array, amps[idx], orders=order[idx],
                            lattice_q=q[idx], lattice_eps=eps[idx], frame="array")


def complete_image_lattice(n1: int, n2: int, n3: int, dims, source_room) -> ImageSourceCloud:
    """Complete finite mirror grid with N_i points per axis (N_i even > 0).

    Lattice indices run q_i in [0, N_i/2) with all eight sign patterns, in the
    room frame; all amplitudes are 1.
    """
    for n in (n1, n2, n3):
        if n <= 0 or n % 2 != 0:
            raise ValidationError("grid counts must be positive even integers")
    dims = np.asarray(dims, dtype=np.float64)
    d = np.asarray(source_room, dtype=np.float64)
    qx, qy, qz = np.meshgrid(np.arange(n1 // 2), np.arange(n2 // 2),
                             np.arange(n3 // 2), indexing="ij")
    q = np.column_stack([qx.ravel(), qy.ravel(), qz.ravel()]).astype(np.int64)
    q = np.repeat(q, len(_EPS_COMBOS), axis=0)
    eps = np.tile(_EPS_COMBOS, (qx.size, 1))
    pos = eps * d[np.newaxis, :] + 2.0 * q * dims[np.newaxis, :]
    return ImageSourceCloud(pos, np.ones(len(pos)), orders=None,
                            lattice_q=q, lattice_eps=eps, frame="room")


# ---------------------------------------------------------------------------
# Frame maps shared with the recovery stage
# ---------------------------------------------------------------------------

def array_to_room_frame(r, basis_matrix, source_pos, tau) -> np.ndarray:
    """Map array-frame coordinates into a room frame given by its basis
    (columns), the source position, and the source-to-near-wall distances."""
    basis_matrix = np.asarray(basis_matrix, dtype=np.float64)
    check_rotation(basis_matrix)
    r = np.asarray(r, dtype=np.float64)
    return (r - np.asarray(source_pos)) @ basis_matrix + np.asarray(tau)


def room_frame_to_array(r_room, basis_matrix, source_pos, tau) -> np.ndarray:
    basis_matrix = np.asarray(basis_matrix, dtype=np.float64)
    check_rotation(basis_matrix)
    r_room = np.asarray(r_room, dtype=np.float64)
    return (r_room - np.asarray(tau)) @ basis_matrix.T + np.asarray(source_pos)


# ---------------------------------------------------------------------------
# Random scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneDistribution:
    """Sampling ranges and placement constraints for random scenes."""

    length_range: tuple = (2.0, 10.0)
    width_range: tuple = (2.0, 10.0)
    height_range: tuple = (2.0, 5.0)
    absorption_range: tuple = (0.01, 0.3)
    min_source_array_dist: float = 1.0
    min_array_wall_dist: float = 0.25
    min_source_wall_dist: float = 0.01
    array: Optional[MicArray] = None
    max_attempts: int = 10000

    def resolved_array(self) -> MicArray:
        if self.array is not None:
            return self.array
        from .arrays import get_array
        return get_array("em32")


def random_scene(cfg: SceneDistribution, seed) -> Scene:
    """Draw one scene; deterministic in the seed.

    Sampling order is fixed (dims, absorptions, rotation, array center, then
    source with rejection on the source-array separation).
    """
    rng = np.random.default_rng(seed)
    array = cfg.resolved_array()

    for lo, hi in (cfg.length_range, cfg.width_range, cfg.height_range):
        if not (0 < lo <= hi):
            raise ValidationError("invalid dimension range")

    dims = np.array([rng.uniform(*cfg.length_range),
                     rng.uniform(*cfg.width_range),
                     rng.uniform(*cfg.height_range)])
    absorptions = rng.uniform(cfg.absorption_range[0], cfg.absorption_range[1], size=6)
    rotation = random_rotation(rng)

    wall_margin = cfg.min_array_wall_dist
    src_margin = cfg.min_source_wall_dist
    if np.any(dims <= 2 * wall_margin) or np.any(dims <= 2 * src_margin):
        raise SceneGenerationError("room too small for the wall margins")

    center = rng.uniform(wall_margin, dims - wall_margin)
    for _ in range(cfg.max_attempts):
        source_room = rng.uniform(src_margin, dims - src_margin)
        if np.linalg.norm(source_room - center) >= cfg.min_source_array_dist:
            scene = Scene.from_room_frame(dims, rotation, center, source_room,
                                          absorptions, array)
            scene.validate(strict=True,
                           min_source_array_dist=cfg.min_source_array_dist,
                           min_array_wall_dist=cfg.min_array_wall_dist,
                           min_source_wall_dist=0.0)
            return scene
    raise SceneGenerationError(
        f"no admissible source placement after {cfg.max_attempts} attempts")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "dims_m": scene.room.dims,
        "rotation": scene.room.rotation.reshape(9),
        "corner_origin_m": scene.room.corner_origin,
        "absorptions": scene.walls.absorptions,
        "source_m": scene.source,
        "array": {
            "name": scene.array.name,
            "positions_m": scene.array.positions,
        },
    }


def scene_from_dict(doc: dict) -> Scene:
    room = RoomBox(np.array(doc["dims_m"]),
                   np.array(doc["rotation"]).reshape(3, 3),
                   np.array(doc["corner_origin_m"]))
    source = np.array(doc["source_m"], dtype=np.float64)
    array = MicArray(doc["array"]["name"], np.array(doc["array"]["positions_m"]))
    return Scene(room=room, walls=WallSet(np.array(doc["absorptions"])),
                 source=source, source_room=room.array_to_room(source), array=array)


def save_scene(scene: Scene, path) -> None:
    dump_canonical(scene_to_dict(scene), path)


def load_scene(path) -> Scene:
    return scene_from_dict(load_json(path))
