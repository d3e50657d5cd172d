"""Gridless image-source recovery by total-variation-regularized inversion.

The measured multichannel RIR is modeled as the image of a nonnegative spike
measure under the exact forward operator.  The solver alternates: pick the
position maximizing the dual certificate <residual, atom> / lambda over a
candidate grid, refine it continuously, re-fit all amplitudes by nonnegative
sparsity-regularized least squares, jointly refine positions and amplitudes,
and prune low-amplitude spikes; it stops once the certificate drops to 1 (up
to tolerance) or the spike budget is exhausted.

Grid certificates are evaluated cheaply through an FFT-oversampled
interpolation of the residual; every refinement and every stopping decision
uses the exact sum.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq, minimize

from . import _accel
from .errors import SingularityError, ValidationError
from ._threads import single_threaded_blas
from .geometry import SPEED_OF_SOUND, ImageSourceCloud, MicArray, fibonacci_sphere
from .simulate import MultichannelRir

_C = SPEED_OF_SOUND


@dataclass(frozen=True)
class SfwConfig:
    """Solver knobs.  ``lam`` is the absolute regularization weight; when
    None it is set to ``lam_scale`` times the largest certificate correlation
    of the raw input (logged per run)."""

    lam: Optional[float] = None
    lam_scale: float = 0.03
    max_spikes: int = 200
    min_radius: float = 0.2
    max_radius: Optional[float] = None      # None -> c * duration
    radial_step: Optional[float] = None     # None -> c / (2 fs)
    target_correlation: float = 0.9         # neighboring grid atoms
    max_directions: int = 4096
    grid_strategy: str = "full"             # "full" | "peak"
    oversample: int = 8
    refine_top_k: int = 6
    refine_gtol: float = 1e-9
    stop_tol: float = 1e-3
    slide_maxiter: int = 40
    final_slide_maxiter: int = 400
    slide_ftol: float = 1e-14
    slide_gtol: float = 1e-12
    amp_min_pre: Optional[float] = None     # absolute; None -> prune_fraction * max amp
    amp_min_post: Optional[float] = None
    prune_fraction: float = 0.02
    debias: bool = True
    min_mic_distance: float = 0.05
    lasso_max_iter: int = 20000
    lasso_tol: float = 1e-11

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise ValidationError("lam must be positive")
        if self.max_spikes < 1:
            raise ValidationError("max_spikes must be at least 1")
        for name in ("amp_min_pre", "amp_min_post"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.grid_strategy not in ("full", "peak"):
            raise ValidationError("grid_strategy must be 'full' or 'peak'")


@dataclass
class SfwResult:
    cloud: ImageSourceCloud
    converged: bool
    n_iterations: int
    lam: float
    cert_max_final: float
    objective_trace: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Atoms and certificates
# ---------------------------------------------------------------------------

def _check_clear_of_mics(r: np.ndarray, mics: np.ndarray, min_dist: float = 1e-6) -> None:
    if np.min(np.linalg.norm(mics - np.asarray(r)[np.newaxis, :], axis=1)) < min_dist:
        raise SingularityError("candidate position coincides with a microphone")


def atom_signature(r, array: MicArray, fs: float, duration: float,
                   max_radius: Optional[float] = None) -> np.ndarray:
    """Channel-major flattened response of a unit spike at ``r``."""
    r = np.asarray(r, dtype=np.float64)
    limit = max_radius if max_radius is not None else _C * duration
    if np.linalg.norm(r) > limit:
        raise ValidationError(f"position {r} beyond the maximum radius {limit}")
    _check_clear_of_mics(r, array.positions)
    n = int(round(duration * fs))
    sig = _accel.synth_rir(r.reshape(1, 3), np.ones(1),
                           np.ascontiguousarray(array.positions), float(fs), _C, n)
    return sig.reshape(-1)


def certificate(residual, r, array: MicArray, fs: float, lam: float) -> float:
    """Dual certificate <residual, atom(r)> / lambda."""
    res = np.asarray(residual, dtype=np.float64)
    if res.ndim == 1:
        res = res.reshape(len(array), -1)
    if not np.all(np.isfinite(res)):
        raise ValidationError("residual must be finite")
    r = np.asarray(r, dtype=np.float64)
    _check_clear_of_mics(r, array.positions)
    num = _accel.cert_num(r, np.ascontiguousarray(array.positions),
                          np.ascontiguousarray(res), float(fs), _C)
    return float(num) / lam


def candidate_grid(array: MicArray, fs: float, duration: float,
                   cfg: SfwConfig) -> np.ndarray:
    """Spherical-shell candidate grid around the array center.

    Radial step defaults to c/(2 fs); the angular step is chosen so that two
    neighboring atoms at the same radius keep a correlation of at least
    ``target_correlation`` (delay shifts across the aperture stay below the
    matching sinc autocorrelation lag)."""
    max_radius = cfg.max_radius if cfg.max_radius is not None else _C * duration
    step = cfg.radial_step if cfg.radial_step is not None else _C / (2.0 * fs)
    radii = np.arange(cfg.min_radius, max_radius + 0.5 * step, step)
    if len(radii) == 0:
        raise ValidationError("empty radial range for the candidate grid")
    dirs = fibonacci_sphere(_n_directions(array, fs, cfg))
    pts = radii[:, np.newaxis, np.newaxis] * dirs[np.newaxis, :, :]
    return np.ascontiguousarray(pts.reshape(-1, 3))


def _n_directions(array: MicArray, fs: float, cfg: SfwConfig) -> int:
    # lag u (in samples) at which the sinc autocorrelation drops to the target
    u_star = brentq(lambda u: math.sin(math.pi * u) / (math.pi * u)
                    - cfg.target_correlation, 1e-6, 0.9999)
    aperture = max(array.radius, 1e-6)
    dtheta = min(u_star * _C / (fs * aperture), np.pi / 8.0)
    n = int(np.ceil(4.0 * np.pi / (dtheta * dtheta) * 1.2))
    return int(np.clip(n, 64, cfg.max_directions))


def _upsample(signal: np.ndarray, oversample: int) -> np.ndarray:
    """Bandlimited oversampling by FFT zero-padding (Nyquist bin split)."""
    m, n = signal.shape
    spec = np.fft.rfft(signal, axis=1)
    if n % 2 == 0:
        spec[:, -1] *= 0.5
    padded = np.zeros((m, (n * oversample) // 2 + 1), dtype=complex)
    padded[:, : spec.shape[1]] = spec
    return np.fft.irfft(padded, n=n * oversample, axis=1) * oversample


# ---------------------------------------------------------------------------
# Nonnegative sparsity-regularized least squares on the atom Gram matrix
# ---------------------------------------------------------------------------

def nonneg_lasso(gram: np.ndarray, corr: np.ndarray, lam: float,
                 x0: Optional[np.ndarray] = None, max_iter: int = 20000,
                 tol: float = 1e-11) -> np.ndarray:
    """Minimize 0.5 a'Ga - corr'a + lam sum(a) subject to a >= 0 (FISTA with
    restart, run to a KKT tolerance)."""
    k = gram.shape[0]
    if k == 0:
        return np.zeros(0)
    lip = float(np.max(np.linalg.eigvalsh(gram))) if k > 1 else float(gram[0, 0])
    lip = max(lip, 1e-30)
    step = 1.0 / lip
    scale = max(float(np.max(np.abs(corr))), lam, 1e-30)

    x = np.maximum(x0 if x0 is not None else np.zeros(k), 0.0)
    z = x.copy()
    t = 1.0
    f_prev = np.inf
    for it in range(max_iter):
        g = gram @ z - corr + lam
        x_new = np.maximum(z - step * g, 0.0)
        f = 0.5 * x_new @ gram @ x_new - corr @ x_new + lam * np.sum(x_new)
        if f > f_prev:  # restart the momentum
            z = x_new.copy()
            t = 1.0
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
        f_prev = f
        if it % 25 == 0 or it == max_iter - 1:
            grad = gram @ x - corr + lam
            viol = 0.0
            if np.any(x > 0):
                viol = float(np.max(np.abs(grad[x > 0])))
            if np.any(x == 0):
                viol = max(viol, float(max(0.0, -np.min(grad[x == 0]))))
            if viol <= tol * scale:
                break
    return x


# ---------------------------------------------------------------------------
# Joint continuous refinement
# ---------------------------------------------------------------------------

def joint_refine(amplitudes: np.ndarray, positions: np.ndarray, y: np.ndarray,
                 mics: np.ndarray, fs: float, lam: float,
                 cfg: SfwConfig, maxiter: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """L-BFGS-B descent on 0.5||model - y||^2 + lam sum(a) over amplitudes
    (box a >= 0) and positions jointly.  Returns the refined state and its
    objective; the caller decides whether to accept it."""
    k = len(amplitudes)
    max_radius = cfg.max_radius if cfg.max_radius is not None else np.inf
    box = 1.05 * max_radius if np.isfinite(max_radius) else np.inf

    def objective(var):
        a = var[:k]
        x = var[k:].reshape(k, 3)
        value, grad = _accel.slide_obj_grad(np.ascontiguousarray(a),
                                            np.ascontiguousarray(x),
                                            mics, y, float(fs), _C, float(lam))
        return value, grad

    var0 = np.concatenate([amplitudes, positions.reshape(-1)])
    bounds = [(0.0, None)] * k + [(-box, box)] * (3 * k)
    res = minimize(objective, var0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter if maxiter is not None else cfg.slide_maxiter,
                            "ftol": cfg.slide_ftol, "gtol": cfg.slide_gtol})
    return res.x[:k], res.x[k:].reshape(k, 3), float(res.fun)


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

class _Solver:
    def __init__(self, rir: MultichannelRir, array: MicArray, cfg: SfwConfig):
        self.cfg = cfg
        self.fs = rir.fs
        self.y = np.ascontiguousarray(rir.samples)
        self.mics = np.ascontiguousarray(array.positions)
        self.n = rir.n_samples
        self.duration = rir.duration
        self.max_radius = cfg.max_radius if cfg.max_radius is not None \
            else _C * rir.duration
        self.grid = candidate_grid(array, rir.fs, rir.duration, cfg) \
            if cfg.grid_strategy == "full" else None
        self.sphere = fibonacci_sphere(_n_directions(array, rir.fs, cfg))

    def model(self, a, x):
        if len(a) == 0:
            return np.zeros_like(self.y)
        return _accel.synth_rir(np.ascontiguousarray(x), np.ascontiguousarray(a),
                                self.mics, self.fs, _C, self.n)

    def atoms_matrix(self, x):
        cols = [_accel.synth_rir(x[k].reshape(1, 3), np.ones(1), self.mics,
                                 self.fs, _C, self.n).reshape(-1)
                for k in range(len(x))]
        return np.column_stack(cols) if cols else np.zeros((self.y.size, 0))

    def _scan_candidates(self, res: np.ndarray) -> np.ndarray:
        res_up = _upsample(res, self.cfg.oversample)
        if self.cfg.grid_strategy == "full":
            points = self.grid
        else:
            flat = np.argmax(np.abs(res_up))
            m_star, j_star = np.unravel_index(flat, res_up.shape)
            radius = (j_star / self.cfg.oversample) / self.fs * _C
            radius = min(max(radius, self.cfg.min_radius), self.max_radius)
            points = self.mics[m_star][np.newaxis, :] + radius * self.sphere
            keep = np.linalg.norm(points, axis=1) <= self.max_radius
            points = np.ascontiguousarray(points[keep]) if np.any(keep) else self.grid
        values = _accel.scan_points(np.ascontiguousarray(res_up), self.mics, points,
                                    self.fs, self.cfg.oversample, _C)
        order = np.argsort(values)[::-1]
        picked = []
        min_sep = max(4.0 * (self.cfg.radial_step or _C / (2 * self.fs)), 0.04)
        for idx in order[: 40 * self.cfg.refine_top_k]:
            p = points[idx]
            if all(np.linalg.norm(p - q) >= min_sep for q in picked):
                picked.append(p)
            if len(picked) >= self.cfg.refine_top_k:
                break
        return np.array(picked)

    def _refine(self, res: np.ndarray, starts: np.ndarray):
        """Maximize the normalized certificate from each start; return the raw
        certificate numerator at the best admissible refined point."""
        best_norm, best_num, best_pos = -np.inf, -np.inf, None

        def neg(xv):
            num, gnum, norm2, gnorm2 = _accel.cert_norm_grad(
                xv, self.mics, res, self.fs, _C)
            norm = math.sqrt(max(norm2, 1e-300))
            grad = gnum / norm - (num / (2.0 * norm * norm2)) * gnorm2
            return -num / norm, -grad

        for start in starts:
            opt = minimize(neg, start, jac=True, method="BFGS",
                           options={"gtol": self.cfg.refine_gtol, "maxiter": 200})
            pos = opt.x
            radius = np.linalg.norm(pos)
            if not (self.cfg.min_radius * 0.5 <= radius <= self.max_radius * 1.001):
                continue
            if np.min(np.linalg.norm(self.mics - pos[np.newaxis, :], axis=1)) \
                    < self.cfg.min_mic_distance:
                continue
            if -opt.fun > best_norm:
                best_norm = -opt.fun
                best_num = _accel.cert_num(pos, self.mics, res, self.fs, _C)
                best_pos = pos
        return best_num, best_pos

    def best_certificate(self, res: np.ndarray):
        starts = self._scan_candidates(res)
        if len(starts) == 0:
            return -np.inf, None
        return self._refine(res, starts)

    def run(self) -> SfwResult:
        cfg = self.cfg
        warnings: List[str] = []
        empty = ImageSourceCloud(np.zeros((0, 3)), np.zeros(0), frame="array")
        if float(np.max(np.abs(self.y))) == 0.0:
            return SfwResult(empty, True, 0, cfg.lam or 0.0, 0.0)

        num0, _ = self.best_certificate(self.y)
        if num0 <= 0:
            return SfwResult(empty, True, 0, cfg.lam or 0.0, 0.0,
                             warnings=["no positive correlation with any atom"])
        lam = cfg.lam if cfg.lam is not None else cfg.lam_scale * num0

        a = np.zeros(0)
        x = np.zeros((0, 3))
        trace: List[float] = []
        converged = False
        stall = 0
        it = 0
        cert_last = num0 / lam

        while len(a) < cfg.max_spikes:
            res = self.y - self.model(a, x)
            num, pos = self.best_certificate(res)
            cert_last = num / lam
            if pos is None or cert_last <= 1.0 + cfg.stop_tol:
                converged = True
                break
            it += 1

            x = np.vstack([x, pos[np.newaxis, :]])
            gmat = self.atoms_matrix(x)
            gram = gmat.T @ gmat
            corr = gmat.T @ self.y.reshape(-1)
            guess = max((num - lam) / max(gram[-1, -1], 1e-30), 0.0)
            a = nonneg_lasso(gram, corr, lam, x0=np.concatenate([a, [guess]]),
                             max_iter=cfg.lasso_max_iter, tol=cfg.lasso_tol)

            val_lasso, _ = _accel.slide_obj_grad(np.ascontiguousarray(a),
                                                 np.ascontiguousarray(x), self.mics,
                                                 self.y, self.fs, _C, lam)
            a_new, x_new, val_new = joint_refine(a, x, self.y, self.mics,
                                                 self.fs, lam, cfg)
            if val_new <= val_lasso:
                a, x, value = a_new, x_new, val_new
            else:
                value = val_lasso
            trace.append(float(value))

            floor = cfg.amp_min_pre if cfg.amp_min_pre is not None \
                else cfg.prune_fraction * (np.max(a) if len(a) else 0.0)
            keep = a > floor
            a, x = a[keep], x[keep]
            if len(a) == 0:
                warnings.append("all spikes pruned; stopping")
                break

            if len(trace) >= 2 and trace[-2] - trace[-1] < 1e-12 * max(1.0, abs(trace[-2])):
                stall += 1
                if stall >= 3:
                    warnings.append("objective stalled; stopping early")
                    break
            else:
                stall = 0

        if not converged and len(a) >= cfg.max_spikes:
            warnings.append("spike budget reached before certificate convergence")

        if len(a):
            a_fin, x_fin, val_fin = joint_refine(a, x, self.y, self.mics, self.fs,
                                                 lam, cfg, maxiter=cfg.final_slide_maxiter)
            val_cur, _ = _accel.slide_obj_grad(np.ascontiguousarray(a),
                                               np.ascontiguousarray(x), self.mics,
                                               self.y, self.fs, _C, lam)
            if val_fin <= val_cur:
                a, x = a_fin, x_fin

        floor = cfg.amp_min_post if cfg.amp_min_post is not None \
            else cfg.prune_fraction * (np.max(a) if len(a) else 0.0)
        keep = a > floor
        a, x = a[keep], x[keep]

        if cfg.debias and len(a):
            gmat = self.atoms_matrix(x)
            gram = gmat.T @ gmat
            corr = gmat.T @ self.y.reshape(-1)
            a = nonneg_lasso(gram, corr, 0.0, x0=a,
                             max_iter=cfg.lasso_max_iter, tol=cfg.lasso_tol)
            keep = a > 0
            a, x = a[keep], x[keep]

        order = np.argsort(np.linalg.norm(x, axis=1), kind="stable")
        cloud = ImageSourceCloud(x[order], a[order], frame="array") if len(a) else empty
        return SfwResult(cloud, converged, it, lam, float(cert_last), trace, warnings)


def sfw_localize(rir: MultichannelRir, array: Optional[MicArray] = None,
                 cfg: Optional[SfwConfig] = None) -> SfwResult:
    """Recover spike positions and amplitudes from a multichannel RIR."""
    array = array if array is not None else rir.array
    if array is None:
        raise ValidationError("an array geometry is required")
    if len(array) != rir.n_channels:
        raise ValidationError("array size does not match the channel count")
    cfg = cfg or SfwConfig()
    with single_threaded_blas():
        return _Solver(rir, array, cfg).run()
