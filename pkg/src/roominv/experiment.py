"""Batch orchestration: scene generation, simulation, inversion, evaluation,
extrapolation, and plot-data emission.

Every output under the study directory is deterministic in (config, seed):
per-room generators derive from ``SeedSequence((seed, room, stream))`` so the
room count can change without reshuffling earlier rooms, and all JSON goes
through the canonical serializer.
"""

import dataclasses
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .arrays import get_array
from .errors import (AmbiguityError, DegenerateCloudError,
                     InconsistentBasisError, MissingReflectionError,
                     ValidationError)
from .geometry import (SPEED_OF_SOUND, Scene, SceneDistribution,
                       enumerate_image_sources, load_scene, random_rotation,
                       random_scene, save_scene)
from .metrics import aggregate_report, evaluate_room, ser
from .orientation import OrientationConfig, estimate_orientation
from .recovery import (ConeSearchConfig, RecoveredRoom, load_recovered,
                       recover_room, save_recovered)
from .serialize import dump_canonical, load_json
from .sfw import SfwConfig, sfw_localize
from .simulate import (ArrayPose, MultichannelRir, NoiseSpec, add_noise_psnr,
                       extrapolate_rir, load_rir, save_rir, simulate_scene_rir)

SOFT_ERRORS = (MissingReflectionError, DegenerateCloudError, AmbiguityError,
               InconsistentBasisError)

ORACLE_MU = 0.005
ORACLE_SIGMA_SCHEDULE = (0.01, 0.005, 0.0005, 1e-4, 2e-5)


@dataclass
class StudyConfig:
    n_rooms: int = 10
    seed: int = 0
    fs: float = 16000.0
    duration: float = 0.05
    array_name: str = "em32"
    array_scale: float = 1.0
    psnr_db: Optional[float] = None
    oracle_cloud: bool = False
    max_order: int = 20
    mu: float = 0.05
    output_dir: str = "runs/study"
    scene: SceneDistribution = field(default_factory=SceneDistribution)
    sfw: SfwConfig = field(default_factory=lambda: SfwConfig(max_spikes=60))
    orientation: OrientationConfig = field(default_factory=OrientationConfig)
    cone: ConeSearchConfig = field(default_factory=ConeSearchConfig)
    dim_recall_thresholds: tuple = tuple(np.round(np.linspace(0.0, 0.1, 21), 10))

    def __post_init__(self):
        if self.n_rooms < 1:
            raise ValidationError("n_rooms must be at least 1")
        if self.fs <= 0 or self.duration <= 0:
            raise ValidationError("fs and duration must be positive")

    def resolved_array(self):
        return get_array(self.array_name, self.array_scale)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["scene"].pop("array", None)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyConfig":
        doc = dict(doc)
        scene = doc.pop("scene", {}) or {}
        sfw = doc.pop("sfw", {}) or {}
        orientation = doc.pop("orientation", {}) or {}
        cone = doc.pop("cone", {}) or {}
        scene.pop("array", None)

        def build(cls_, d):
            names = {f.name for f in dataclasses.fields(cls_)}
            unknown = set(d) - names
            if unknown:
                raise ValidationError(f"unknown {cls_.__name__} fields: {sorted(unknown)}")
            kw = dict(d)
            for key, val in kw.items():
                if isinstance(val, list):
                    kw[key] = tuple(val)
            return cls_(**kw)

        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        if "dim_recall_thresholds" in doc:
            doc["dim_recall_thresholds"] = tuple(doc["dim_recall_thresholds"])
        return cls(scene=build(SceneDistribution, scene),
                   sfw=build(SfwConfig, sfw),
                   orientation=build(OrientationConfig, orientation),
                   cone=build(ConeSearchConfig, cone), **doc)


def _room_dir(cfg: StudyConfig, index: int) -> Path:
    return Path(cfg.output_dir) / "rooms" / f"room_{index:04d}"


def _room_seed(cfg: StudyConfig, index: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((cfg.seed, index, stream))


def _write_config(cfg: StudyConfig) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_canonical(cfg.to_dict(), out / "config.json")


def _load_manifest(cfg: StudyConfig) -> dict:
    path = Path(cfg.output_dir) / "manifest.json"
    if path.exists():
        return load_json(path)
    return {"rooms": [{"index": i, "status": "pending", "flags": []}
                      for i in range(cfg.n_rooms)],
            "n_hard_failed": 0}


def _save_manifest(cfg: StudyConfig, manifest: dict) -> None:
    manifest["n_hard_failed"] = sum(1 for r in manifest["rooms"]
                                    if r["status"] == "hard_failed")
    dump_canonical(manifest, Path(cfg.output_dir) / "manifest.json")


def _flag(room: dict, flag: str) -> None:
    if flag not in room["flags"]:
        room["flags"].append(flag)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: StudyConfig) -> dict:
    """Generate scenes and their RIRs (clean, plus noisy when PSNR is set)."""
    _write_config(cfg)
    array = cfg.resolved_array()
    dist = dataclasses.replace(cfg.scene, array=array)
    manifest = _load_manifest(cfg)
    for i in range(cfg.n_rooms):
        room = manifest["rooms"][i]
        rdir = _room_dir(cfg, i)
        rdir.mkdir(parents=True, exist_ok=True)
        try:
            scene = random_scene(dist, _room_seed(cfg, i, 0))
            save_scene(scene, rdir / "scene.json")
            rir = simulate_scene_rir(scene, cfg.fs, cfg.duration, cfg.max_order)
            save_rir(rdir / "rir", rir, scene_id=f"room_{i:04d}")
            if cfg.psnr_db is not None:
                noise_seed = int(_room_seed(cfg, i, 1).generate_state(1)[0])
                noisy = add_noise_psnr(rir, NoiseSpec(cfg.psnr_db, noise_seed))
                save_rir(rdir / "rir_noisy", noisy, scene_id=f"room_{i:04d}")
            room["status"] = "simulated"
        except Exception as exc:  # noqa: BLE001 - per-room crash isolation
            room["status"] = "hard_failed"
            _flag(room, f"simulate:{type(exc).__name__}")
            (rdir / "error.txt").write_text(traceback.format_exc())
    _save_manifest(cfg, manifest)
    return manifest


def _oracle_cloud(scene: Scene):
    bound = float(np.linalg.norm(3.0 * scene.room.dims)
                  + np.linalg.norm(scene.array_center_room) + 1.0)
    return enumerate_image_sources(scene, max_order=2, max_radius=bound)


def cmd_invert(cfg: StudyConfig) -> dict:
    """Run localization + orientation + recovery per room; per-room failures
    are recorded as flags without aborting the batch."""
    _write_config(cfg)
    array = cfg.resolved_array()
    manifest = _load_manifest(cfg)
    for i in range(cfg.n_rooms):
        room = manifest["rooms"][i]
        rdir = _room_dir(cfg, i)
        if room["status"] == "hard_failed" or not (rdir / "scene.json").exists():
            continue
        try:
            scene = load_scene(rdir / "scene.json")
            if cfg.oracle_cloud:
                cloud = _oracle_cloud(scene)
                mu = ORACLE_MU
                orient_cfg = dataclasses.replace(
                    cfg.orientation, sigma_schedule=ORACLE_SIGMA_SCHEDULE)
            else:
                rir_path = rdir / ("rir_noisy" if cfg.psnr_db is not None else "rir")
                rir = load_rir(rir_path, array)
                result = sfw_localize(rir, array, cfg.sfw)
                cloud = result.cloud
                mu = cfg.mu
                orient_cfg = cfg.orientation
                dump_canonical({"spikes": cloud.to_records()}, rdir / "cloud.json")
                dump_canonical({
                    "lam": result.lam,
                    "iterations": result.n_iterations,
                    "converged": result.converged,
                    "final_certificate_max": result.cert_max_final,
                    "n_spikes": len(cloud),
                    "warnings": result.warnings,
                    "config": dataclasses.asdict(cfg.sfw),
                }, rdir / "sfw_log.json")
                with open(rdir / "objective_trace.csv", "w", encoding="utf-8") as fh:
                    fh.write("iteration,objective\n")
                    for j, val in enumerate(result.objective_trace):
                        fh.write(f"{j},{val:.17g}\n")
                if not result.converged:
                    _flag(room, "sfw_not_converged")
            basis = estimate_orientation(cloud, orient_cfg)
            recovered = recover_room(cloud, basis, mu=mu, cone_cfg=cfg.cone)
            save_recovered(recovered, rdir / "recovered.json")
            room["status"] = "inverted"
        except SOFT_ERRORS as exc:
            room["status"] = "soft_failed"
            _flag(room, f"invert:{type(exc).__name__}")
            (rdir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        except Exception as exc:  # noqa: BLE001
            room["status"] = "hard_failed"
            _flag(room, f"invert:{type(exc).__name__}")
            (rdir / "error.txt").write_text(traceback.format_exc())
    _save_manifest(cfg, manifest)
    return manifest


def _sample_placement(scene: Scene, dist: SceneDistribution,
                      rng: np.random.Generator):
    """New source/array placement in the ground-truth room, respecting the
    scene-distribution constraints."""
    dims = scene.room.dims
    rotation = random_rotation(rng)
    center = rng.uniform(dist.min_array_wall_dist, dims - dist.min_array_wall_dist)
    for _ in range(dist.max_attempts):
        source = rng.uniform(dist.min_source_wall_dist,
                             dims - dist.min_source_wall_dist)
        if np.linalg.norm(source - center) >= dist.min_source_array_dist:
            return source, center, rotation
    raise ValidationError("no admissible extrapolation placement found")


def cmd_extrapolate(cfg: StudyConfig) -> dict:
    """Re-simulate RIRs at one new random placement per room and score the
    signal-to-error ratio against the exact-parameter reference."""
    _write_config(cfg)
    array = cfg.resolved_array()
    manifest = _load_manifest(cfg)
    records = []
    for i in range(cfg.n_rooms):
        room = manifest["rooms"][i]
        rdir = _room_dir(cfg, i)
        if not (rdir / "scene.json").exists():
            continue
        rec_path = rdir / "recovered.json"
        if room["status"] in ("hard_failed",) or not rec_path.exists():
            continue
        try:
            scene = load_scene(rdir / "scene.json")
            estimate = (RecoveredRoom.from_scene(scene) if cfg.oracle_cloud
                        else load_recovered(rec_path))
            rng = np.random.default_rng(_room_seed(cfg, i, 2))
            s_room, c_room, q = _sample_placement(scene, cfg.scene, rng)
            source_old = scene.room.room_to_array(s_room)
            pose = ArrayPose(array, scene.room.room_to_array(c_room),
                             scene.room.rotation @ q)
            reference = extrapolate_rir(RecoveredRoom.from_scene(scene),
                                        source_old, pose, cfg.fs, cfg.duration,
                                        cfg.max_order)
            estimated = extrapolate_rir(estimate, source_old, pose,
                                        cfg.fs, cfg.duration, cfg.max_order)
            value = ser(estimated, reference)
            save_rir(rdir / "extrap_ref", reference, scene_id=f"room_{i:04d}")
            save_rir(rdir / "extrap_est", estimated, scene_id=f"room_{i:04d}")
            dump_canonical({"ser_db": value,
                            "source_room_m": s_room,
                            "array_center_room_m": c_room},
                           rdir / "extrap.json")
            records.append({"index": i, "ser_db": value})
        except SOFT_ERRORS + (ValidationError,) as exc:
            _flag(room, f"extrapolate:{type(exc).__name__}")
            records.append({"index": i, "ser_db": None})
        except Exception as exc:  # noqa: BLE001
            room["status"] = "hard_failed"
            _flag(room, f"extrapolate:{type(exc).__name__}")
            (rdir / "error.txt").write_text(traceback.format_exc())
    values = [r["ser_db"] for r in records if r["ser_db"] is not None]
    table = {"rooms": records,
             "mean_ser_db": float(np.mean(values)) if values else None}
    dump_canonical(table, Path(cfg.output_dir) / "ser_table.json")
    with open(Path(cfg.output_dir) / "ser_table.csv", "w", encoding="utf-8") as fh:
        fh.write("room,ser_db\n")
        for r in records:
            val = "" if r["ser_db"] is None else f"{r['ser_db']:.17g}"
            fh.write(f"{r['index']},{val}\n")
    _save_manifest(cfg, manifest)
    return table


_CSV_COLUMNS = (["room", "status"]
                + [f"axis_err_deg_{i}" for i in (1, 2, 3)]
                + [f"dim_err_m_{i}" for i in (1, 2, 3)]
                + ["center_err_m", "source_err_m"]
                + [f"tau_err_m_{i}" for i in (1, 2, 3)]
                + [f"abs_err_{i}" for i in range(1, 7)]
                + [f"abs_recalled_{i}" for i in range(1, 7)]
                + ["ser_db"])


def _record_row(index: int, rec: dict) -> list:
    if rec.get("status") != "ok":
        return [index, rec.get("status", "failed")] + [""] * (len(_CSV_COLUMNS) - 2)
    row = [index, "ok"]
    row += [f"{v:.17g}" for v in rec["axis_err_deg"]]
    row += [f"{v:.17g}" for v in rec["dim_err_m"]]
    row += [f"{rec['center_err_m']:.17g}", f"{rec['source_err_m']:.17g}"]
    row += [f"{v:.17g}" for v in rec["tau_err_m"]]
    row += [f"{v:.17g}" for v in rec["absorption_err"]]
    row += [str(bool(v)).lower() for v in rec["absorption_recalled"]]
    row += ["" if rec.get("ser_db") is None else f"{rec['ser_db']:.17g}"]
    return row


def cmd_evaluate(cfg: StudyConfig) -> dict:
    """Compare recoveries against ground truth and write the report."""
    _write_config(cfg)
    manifest = _load_manifest(cfg)
    records = []
    for i in range(cfg.n_rooms):
        rdir = _room_dir(cfg, i)
        scene_path = rdir / "scene.json"
        rec_path = rdir / "recovered.json"
        if not scene_path.exists():
            records.append({"status": "missing"})
            continue
        if not rec_path.exists():
            records.append({"status": "failed"})
            continue
        scene = load_scene(scene_path)
        recovered = load_recovered(rec_path)
        ser_db = None
        extrap_path = rdir / "extrap.json"
        if extrap_path.exists():
            ser_db = load_json(extrap_path).get("ser_db")
        try:
            records.append(evaluate_room(scene, recovered, ser_db=ser_db))
        except SOFT_ERRORS + (ValidationError,) as exc:
            _flag(manifest["rooms"][i], f"evaluate:{type(exc).__name__}")
            records.append({"status": "unmatched"})
    report = {
        "per_room": [
            {"index": i, **{k: v for k, v in rec.items()}}
            for i, rec in enumerate(records)
        ],
        "aggregate": aggregate_report(records, cfg.dim_recall_thresholds),
    }
    out = Path(cfg.output_dir)
    dump_canonical(_jsonable(report), out / "report.json")
    with open(out / "report.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(_CSV_COLUMNS) + "\n")
        for i, rec in enumerate(records):
            fh.write(",".join(str(v) for v in _record_row(i, rec)) + "\n")
    _save_manifest(cfg, manifest)
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if np.isnan(v) else v
    return obj


def cmd_plot(cfg: StudyConfig) -> List[str]:
    from .plotting import render_study_figures
    return render_study_figures(cfg)


def cmd_all(cfg: StudyConfig) -> dict:
    cmd_simulate(cfg)
    cmd_invert(cfg)
    cmd_extrapolate(cfg)
    report = cmd_evaluate(cfg)
    cmd_plot(cfg)
    return report


def hard_failures(cfg: StudyConfig) -> int:
    return int(_load_manifest(cfg).get("n_hard_failed", 0))
