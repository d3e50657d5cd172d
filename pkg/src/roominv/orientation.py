"""Room orientation from an unlabeled image-source cloud.

The wall normals of a shoebox room maximize an orthogonality score over the
cloud's pairwise difference directions.  A Gaussian kernel of width ``sigma``
relaxes the exact orthogonality test; annealing over a decreasing sigma
schedule combined with a multi-start mesh search makes the non-convex
maximization reliable.  An exact counting variant serves as a brute-force
test oracle for complete grids.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from . import _accel
from ._threads import single_threaded_blas
from .errors import DegenerateCloudError, ValidationError
from .geometry import (ImageSourceCloud, check_direction, fibonacci_half_sphere,
                       unit)

_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class OrientationConfig:
    sigma_schedule: Tuple[float, ...] = (0.01, 0.005, 0.0005)
    sphere_mesh_size: int = 2000
    circle_mesh_size: int = 720
    descent_gtol: float = 1e-12
    descent_maxiter: int = 400

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigma_schedule)
        if not s or any(v <= 0 for v in s) or any(a <= b for a, b in zip(s, s[1:])):
            raise ValidationError("sigma schedule must be strictly decreasing and positive")
        object.__setattr__(self, "sigma_schedule", s)


@dataclass(frozen=True)
class Basis:
    """Estimated room basis; e3 is exactly e1 x e2 by construction."""

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray

    def __post_init__(self):
        for name in ("e1", "e2", "e3"):
            object.__setattr__(self, name, check_direction(getattr(self, name), tol=1e-10))
        if max(abs(self.e1 @ self.e2), abs(self.e1 @ self.e3),
               abs(self.e2 @ self.e3)) > 1e-8:
            raise ValidationError("basis vectors are not pairwise orthogonal")

    @classmethod
    def from_e1_e2(cls, e1, e2) -> "Basis":
        e1 = unit(e1)
        e2 = unit(np.asarray(e2, dtype=np.float64) - (e2 @ e1) * e1)
        return cls(e1, e2, np.cross(e1, e2))

    @classmethod
    def from_matrix(cls, matrix) -> "Basis":
        m = np.asarray(matrix, dtype=np.float64)
        return cls.from_e1_e2(m[:, 0], m[:, 1])

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.e1, self.e2, self.e3])


def pair_directions(positions: np.ndarray) -> np.ndarray:
    """Normalized differences over all ordered pairs (i != j)."""
    p = np.asarray(positions, dtype=np.float64)
    k = p.shape[0]
    diff = p[:, np.newaxis, :] - p[np.newaxis, :, :]
    mask = ~np.eye(k, dtype=bool)
    diff = diff[mask]
    norms = np.linalg.norm(diff, axis=1)
    if np.any(norms <= _DEGENERATE_NORM):
        raise ValidationError("cloud contains coincident points")
    return np.ascontiguousarray(diff / norms[:, np.newaxis])


def _sph_to_vec(theta: float, phi: float) -> np.ndarray:
    sp = np.sin(phi)
    return np.array([np.cos(theta) * sp, np.sin(theta) * sp, np.cos(phi)])


def score_j3(cloud: ImageSourceCloud, u, sigma: float) -> float:
    """Gaussian orthogonality score over ordered pairs, diagonal included
    (each of the K coincident pairs contributes 1)."""
    u = unit(u)
    if len(cloud) < 2:
        raise ValidationError("need at least two sources")
    pd = pair_directions(cloud.positions)
    vals = _accel.j3_many(np.asarray(u, dtype=np.float64).reshape(1, 3), pd, float(sigma))
    return float(vals[0]) + len(cloud)


def score_j3_sph(cloud: ImageSourceCloud, theta: float, phi: float, sigma: float) -> float:
    return score_j3(cloud, _sph_to_vec(theta, phi), sigma)


def score_j3_sph_grad(cloud: ImageSourceCloud, theta: float, phi: float,
                      sigma: float) -> Tuple[float, float, float]:
    """(value, d/dtheta, d/dphi) of the score in spherical coordinates."""
    pd = pair_directions(cloud.positions)
    v, dt, dp = _accel.j3_grad_sph(float(theta), float(phi), pd, float(sigma))
    return float(v) + len(cloud), float(dt), float(dp)


def _plane_basis(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis of the plane orthogonal to u."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(u)))] = 1.0
    b1 = unit(axis - (axis @ u) * u)
    return b1, np.cross(u, b1)


def _projected_pairs(pd: np.ndarray, u: np.ndarray):
    """In-plane normalized pair directions and the degenerate-pair count."""
    b1, b2 = _plane_basis(u)
    xy = np.column_stack([pd @ b1, pd @ b2])
    norms = np.linalg.norm(xy, axis=1)
    valid = norms > _DEGENERATE_NORM
    return np.ascontiguousarray(xy[valid] / norms[valid, np.newaxis]), \
        int(np.sum(~valid)), b1, b2


def score_j2(cloud: ImageSourceCloud, u_fixed, theta: float, sigma: float) -> float:
    """Circle score after projecting pair directions onto the plane orthogonal
    to ``u_fixed``; pairs parallel to ``u_fixed`` (and the diagonal) count 1."""
    u = unit(u_fixed)
    pd = pair_directions(cloud.positions)
    xy, n_deg, _, _ = _projected_pairs(pd, u)
    vals = _accel.j2_many(np.array([float(theta)]), xy, float(sigma))
    return float(vals[0]) + n_deg + len(cloud)


def _refine_j3(u0: np.ndarray, pd: np.ndarray, sigma: float,
               cfg: OrientationConfig) -> np.ndarray:
    """Local maximization of the Gaussian score, started at u0.

    The sphere is re-parameterized so u0 sits on the equator of the working
    frame (spherical angles are best conditioned there), then BFGS runs on the
    two angles with the analytic gradient.
    """
    b1, b2 = _plane_basis(u0)
    frame = np.vstack([u0, b1, b2])       # rows: frame @ u0 = (1, 0, 0)
    pd_rot = np.ascontiguousarray(pd @ frame.T)
    scale = 1.0 / max(1, pd.shape[0])

    def objective(angles):
        v, dt, dp = _accel.j3_grad_sph(angles[0], angles[1], pd_rot, sigma)
        return -v * scale, np.array([-dt * scale, -dp * scale])

    res = minimize(objective, np.array([0.0, np.pi / 2.0]), jac=True, method="BFGS",
                   options={"gtol": cfg.descent_gtol, "maxiter": cfg.descent_maxiter})
    u_new = unit(frame.T @ _sph_to_vec(res.x[0], res.x[1]))
    before = _accel.j3_many(u0.reshape(1, 3), pd, sigma)[0]
    after = _accel.j3_many(u_new.reshape(1, 3), pd, sigma)[0]
    return u_new if after >= before else u0


def _refine_j2(theta0: float, xy: np.ndarray, sigma: float,
               cfg: OrientationConfig) -> float:
    scale = 1.0 / max(1, xy.shape[0])

    def objective(t):
        v, dt = _accel.j2_grad(float(t[0]), xy, sigma)
        return -v * scale, np.array([-dt * scale])

    res = minimize(objective, np.array([theta0]), jac=True, method="BFGS",
                   options={"gtol": cfg.descent_gtol, "maxiter": cfg.descent_maxiter})
    v0 = _accel.j2_many(np.array([theta0]), xy, sigma)[0]
    v1 = _accel.j2_many(np.array([float(res.x[0])]), xy, sigma)[0]
    return float(res.x[0]) if v1 >= v0 else theta0


def estimate_orientation(cloud: ImageSourceCloud,
                         cfg: Optional[OrientationConfig] = None) -> Basis:
    """Estimate the room basis from the cloud geometry alone.

    The first axis maximizes the sphere score from the best of a half-sphere
    mesh of initializations, annealed through the sigma schedule; the second
    maximizes the circle score in the orthogonal plane; the third is their
    cross product.
    """
    cfg = cfg or OrientationConfig()
    with single_threaded_blas():
        return _estimate_orientation(cloud, cfg)


def _estimate_orientation(cloud: ImageSourceCloud, cfg: OrientationConfig) -> Basis:
    if len(cloud) < 4:
        raise DegenerateCloudError("too few sources for orientation estimation")
    centered = cloud.positions - cloud.positions.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-9 * max(sv[0], 1e-30):
        raise DegenerateCloudError("cloud does not span three dimensions")

    pd = pair_directions(cloud.positions)
    sigma0 = cfg.sigma_schedule[0]

    mesh = fibonacci_half_sphere(cfg.sphere_mesh_size)
    u = mesh[int(np.argmax(_accel.j3_many(mesh, pd, sigma0)))]
    for sigma in cfg.sigma_schedule:
        u = _refine_j3(u, pd, sigma, cfg)
    e1 = u

    xy, _, b1, b2 = _projected_pairs(pd, e1)
    if xy.shape[0] == 0:
        raise DegenerateCloudError("no pair survives the projection")
    thetas = np.arange(cfg.circle_mesh_size) * (np.pi / cfg.circle_mesh_size)
    theta = float(thetas[int(np.argmax(_accel.j2_many(thetas, xy, sigma0)))])
    for sigma in cfg.sigma_schedule:
        theta = _refine_j2(theta, xy, sigma, cfg)
    e2 = np.cos(theta) * b1 + np.sin(theta) * b2

    return Basis.from_e1_e2(e1, e2)


# ---------------------------------------------------------------------------
# Exact counting oracle
# ---------------------------------------------------------------------------

def score_j3_counting(cloud: ImageSourceCloud, u, tol: float = 1e-12) -> int:
    """Exact orthogonality count (ordered pairs, diagonal included)."""
    u = unit(u)
    pd = pair_directions(cloud.positions)
    counts = _accel.count_orth(np.asarray(u).reshape(1, 3), pd, float(tol))
    return int(counts[0]) + len(cloud)


def _canonical_sign(dirs: np.ndarray) -> np.ndarray:
    """Flip each direction so its first nonzero component is positive."""
    out = dirs.copy()
    undecided = np.ones(len(out), dtype=bool)
    for col in range(3):
        sel = undecided & (out[:, col] < 0)
        out[sel] = -out[sel]
        undecided = undecided & (out[:, col] == 0)
    return out


def brute_force_argmax_j3(cloud: ImageSourceCloud, mesh_size: int = 10000,
                          tol: float = 1e-12, n_top_dirs: int = 48) -> np.ndarray:
    """Argmax of the exact counting score; a test oracle, not pipeline code.

    The counting score exceeds its baseline only on the great circles
    orthogonal to some pair direction, so a generic mesh alone cannot see the
    maxima.  The evaluated set is therefore the Fibonacci half-sphere mesh
    plus the intersections of the most populated circles: normalized cross
    products of the highest-multiplicity pair directions.  For complete grids
    these candidates contain the wall normals exactly.
    """
    pd = pair_directions(cloud.positions)
    mesh = fibonacci_half_sphere(mesh_size)

    canon = _canonical_sign(pd)
    keys = np.round(canon / 1e-9).astype(np.int64)
    _, index, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    order = np.lexsort((index, -counts))
    top = canon[index[order[:n_top_dirs]]]

    crosses = np.cross(top[:, np.newaxis, :], top[np.newaxis, :, :]).reshape(-1, 3)
    norms = np.linalg.norm(crosses, axis=1)
    crosses = crosses[norms > 1e-9] / norms[norms > 1e-9, np.newaxis]
    if len(crosses):
        crosses = _canonical_sign(crosses)
        ckeys = np.round(crosses / 1e-9).astype(np.int64)
        _, cidx = np.unique(ckeys, axis=0, return_index=True)
        crosses = crosses[np.sort(cidx)]
        candidates = np.vstack([crosses, mesh])
    else:
        candidates = mesh

    scores = _accel.count_orth(np.ascontiguousarray(candidates), pd, float(tol))
    return unit(candidates[int(np.argmax(scores))])
