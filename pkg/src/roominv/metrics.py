"""Evaluation metrics: axis matching, geometric errors, absorption recall,
signal-to-error ratio, and recall curves."""

from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import AxisMatchingError, ValidationError
from .geometry import Scene, check_rotation
from .orientation import Basis
from .recovery import RecoveredRoom, room_center_in_array_frame

SER_CAP_DB = 300.0


def match_axes(recovered: Basis, gt_rotation: np.ndarray
               ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assign recovered axes to ground-truth axes.

    Each recovered direction is expressed in the ground-truth room frame and
    assigned to the axis of its largest-magnitude component, with that
    component's sign; the assignment must be a permutation.  Returns
    (permutation, signs, angular errors in degrees).
    """
    gt_rotation = check_rotation(gt_rotation)
    est = recovered.as_matrix()
    in_room = gt_rotation.T @ est            # column i: recovered e_i in room coords
    perm = np.argmax(np.abs(in_room), axis=0)
    if len(set(perm.tolist())) != 3:
        raise AxisMatchingError(f"axis assignment is not a permutation: {perm}")
    comps = in_room[perm, np.arange(3)]
    signs = np.sign(comps)
    errors = np.degrees(np.arccos(np.clip(np.abs(comps), -1.0, 1.0)))
    return perm.astype(np.int64), signs, errors


def map_recovered_walls(perm: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """For each recovered wall slot (1-,1+,2-,2+,3-,3+), the matching
    ground-truth wall slot (x-,x+,y-,y+,z-,z+)."""
    out = np.zeros(6, dtype=np.int64)
    for t in range(3):
        for far in (0, 1):
            gt_far = far if signs[t] > 0 else 1 - far
            out[2 * t + far] = 2 * perm[t] + gt_far
    return out


def absorption_metrics(est: np.ndarray, gt: np.ndarray, threshold: float = 0.3
                       ) -> Tuple[float, float, np.ndarray]:
    """MAE over coefficients recalled at |error| < threshold, and the recall.

    Returns (mae_over_recalled, recall, recalled_flags); the MAE is NaN when
    nothing is recalled.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = np.abs(est - gt)
    recalled = err < threshold
    mae = float(np.mean(err[recalled])) if np.any(recalled) else float("nan")
    return mae, float(np.mean(recalled)), recalled


def ser(estimated, reference, cap_db: float = SER_CAP_DB) -> float:
    """Signal-to-error ratio 10 log10(sum x^2 / sum (xhat - x)^2) in dB.

    No alignment is applied to either argument; a delayed copy scores a finite
    value.  Errors below the machine floor return the cap.
    """
    x_hat = estimated.samples if hasattr(estimated, "samples") else np.asarray(estimated)
    x = reference.samples if hasattr(reference, "samples") else np.asarray(reference)
    if x_hat.shape != x.shape:
        raise ValidationError("signals must share a shape")
    if hasattr(estimated, "fs") and hasattr(reference, "fs") \
            and estimated.fs != reference.fs:
        raise ValidationError("signals must share a sampling rate")
    signal = float(np.sum(x * x))
    if signal == 0.0:
        raise ValidationError("reference signal is identically zero")
    error = float(np.sum((x_hat - x) ** 2))
    if error == 0.0:
        return cap_db
    return float(min(10.0 * np.log10(signal / error), cap_db))


def recall_curve(errors: Sequence[float], thresholds: Sequence[float]) -> np.ndarray:
    """Fraction of errors <= t for each threshold t (non-decreasing in t)."""
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(errors < 0) or np.any(thresholds < 0):
        raise ValidationError("errors and thresholds must be nonnegative")
    if errors.size == 0:
        return np.zeros_like(thresholds)
    return np.mean(errors[np.newaxis, :] <= thresholds[:, np.newaxis], axis=1)


def evaluate_room(scene: Scene, recovered: Optional[RecoveredRoom],
                  ser_db: Optional[float] = None,
                  absorption_threshold: float = 0.3) -> dict:
    """Per-room error record comparing a recovery against its scene."""
    if recovered is None:
        return {"status": "failed"}
    perm, signs, axis_err = match_axes(recovered.basis, scene.room.rotation)

    dim_err = np.full(3, np.nan)
    tau_err = np.full(3, np.nan)
    d = scene.source_room
    L = scene.room.dims
    for t in range(3):
        g = perm[t]
        dim_err[g] = abs(recovered.dims[t] - L[g])
        gt_tau = d[g] if signs[t] > 0 else L[g] - d[g]
        tau_err[g] = abs(recovered.tau_room[t] - gt_tau)

    wall_map = map_recovered_walls(perm, signs)
    est_alpha = np.full(6, np.nan)
    est_alpha[wall_map] = recovered.absorptions
    abs_err = np.abs(est_alpha - scene.walls.absorptions)
    mae, recall, recalled = absorption_metrics(est_alpha, scene.walls.absorptions,
                                               absorption_threshold)

    center_gt = scene.room.room_to_array(scene.room.dims / 2.0)
    center_err = float(np.linalg.norm(room_center_in_array_frame(recovered) - center_gt))
    source_err = float(np.linalg.norm(recovered.source_pos - scene.source))

    return {
        "status": "ok",
        "axis_err_deg": axis_err,
        "dim_err_m": dim_err,
        "tau_err_m": tau_err,
        "center_err_m": center_err,
        "source_err_m": source_err,
        "absorption_err": abs_err,
        "absorption_recalled": recalled,
        "absorption_mae_recalled": mae,
        "absorption_recall": recall,
        "ser_db": ser_db,
    }


def aggregate_report(room_records: Sequence[dict],
                     dim_recall_thresholds: Optional[Sequence[float]] = None) -> dict:
    """Aggregate per-room records into the report structure."""
    if dim_recall_thresholds is None:
        dim_recall_thresholds = np.linspace(0.0, 0.1, 21)
    thresholds = np.asarray(dim_recall_thresholds, dtype=np.float64)

    ok = [r for r in room_records if r.get("status") == "ok"]

    def stack(key):
        return np.concatenate([np.atleast_1d(np.asarray(r[key], dtype=np.float64))
                               for r in ok]) if ok else np.zeros(0)

    def stats(values):
        values = values[np.isfinite(values)]
        if values.size == 0:
            return {"mean": None, "std": None, "median": None}
        return {"mean": float(np.mean(values)), "std": float(np.std(values)),
                "median": float(np.median(values))}

    axis_err = stack("axis_err_deg") if ok else np.zeros(0)
    dim_err = stack("dim_err_m") if ok else np.zeros(0)
    tau_err = stack("tau_err_m") if ok else np.zeros(0)
    center_err = stack("center_err_m") if ok else np.zeros(0)
    abs_err = stack("absorption_err") if ok else np.zeros(0)
    recalled = np.concatenate([np.asarray(r["absorption_recalled"], dtype=bool)
                               for r in ok]) if ok else np.zeros(0, dtype=bool)
    sers = np.array([r["ser_db"] for r in ok if r.get("ser_db") is not None],
                    dtype=np.float64)

    finite_dims = dim_err[np.isfinite(dim_err)]
    curve = recall_curve(finite_dims, thresholds) if finite_dims.size else np.zeros_like(thresholds)

    recall_rate = float(np.mean(recalled)) if recalled.size else None
    picked = recalled & np.isfinite(abs_err) if recalled.size else recalled
    mae_recalled = float(np.mean(abs_err[picked])) if np.any(picked) else None

    return {
        "n_rooms": len(room_records),
        "n_ok": len(ok),
        "n_failed": len(room_records) - len(ok),
        "axis_err_deg": stats(axis_err),
        "dim_err_m": stats(dim_err),
        "tau_err_m": stats(tau_err),
        "center_err_m": stats(center_err),
        "absorption_err": stats(abs_err),
        "absorption_recall": recall_rate,
        "absorption_mae_recalled": mae_recalled,
        "ser_db": stats(sers),
        "dim_recall_thresholds_m": thresholds,
        "dim_recall": curve,
    }
