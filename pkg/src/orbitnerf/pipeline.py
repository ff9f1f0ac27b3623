"""End-to-end experiment: two capture arms, reconstruction, comparison.

The ``standard`` arm places the drones uniformly on a ring at the operator's
object-center height and flies the capture schedule.  The ``optimized`` arm
first takes four orthogonal snapshots from that same ring, builds the seed
geometry, scores a discrete candidate-pose grid (greedy + simulated
annealing on the visibility/reprojection fitness), and flies the same
schedule from the chosen poses.  Everything else - scene, schedule, detector,
reconstruction settings, held-out protocol - is shared, so camera placement
is the only varying factor.

Evaluation runs two protocols per arm: ``holdout`` (the arm's own withheld
captures) and ``novel`` (ground-truth renders at probe poses around the
object that neither arm captured; identical probes for both arms, so the
scores are directly comparable).

Every run directory gets a ``manifest.json`` with the config snapshot, stage
timings and a content hash per artifact; identical config + seed reproduce
identical artifact hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from . import control as ct
from . import placement as pl
from .geometry import (Box3, CameraRig, Intrinsics, TriangleMesh, look_at,
                       render_rgb, render_shaded, save_poses, load_poses)
from .images import save_png
from .metrics import (MetricReport, comparison_rows, comparison_csv,
                      format_comparison_table)
from .nerf import (HashGridConfig, TrainConfig, train, render_novel_view,
                   save_checkpoint, load_checkpoint)
from .scenes import load_scene

ARMS = ("standard", "optimized")

# fixed per-stage seed lanes derived from the master seed
_SEED_LANES = {"sa": 1, "t0": 2, "holdout_standard": 3, "holdout_optimized": 4,
               "train_standard": 5, "train_optimized": 6}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(master: int, lane: str) -> int:
    return int(np.random.SeedSequence([master, _SEED_LANES[lane]])
               .generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG = {
    "scene": {
        "mesh": "tall_figure",       # bundled scene name or path to a .mesh
        "orbit_center": None,        # ring center; null -> mesh bounds center
        "orbit_radius": 2.6,
        "ring_height": None,         # baseline height; null -> center height
    },
    "drones": 4,
    "seed": 0,
    "output_dir": "runs/out",
    "capture": {
        "iterations": 5,             # x drones = images per arm
        "delta_angle_deg": 18.0,
        "image_size": 128,
        "vfov_deg": 50.0,
        "perception_size": 64,       # servo render resolution
        "tol_px": 2.0,
        "max_steps": 300,
    },
    "gains": {
        "kp": [1.6, 0.8, 1.6, 1.2],
        "ki": [0.05, 0.02, 0.05, 0.0],
        "kd": [0.6, 0.3, 0.6, 0.2],
        "integral_clamp": 0.5,
    },
    "candidates": {
        "radii": [2.6],
        "height_fracs": [0.5, 0.85, 1.2],  # of seed-box height above its floor
        "azimuth_step_deg": 45.0,
        "servo_max_steps": 120,
    },
    "fitness": {"w_vis": 1.0, "w_rep": 0.01},
    "annealing": {
        "t0": None,                  # null -> fitness std over 50 random configs
        "alpha": 0.95,
        "iters_per_temp": 20,
        "total_iters": 2000,
    },
    "nerf": {
        "levels": 8, "table_size": 16384, "features": 2,
        "n_min": 16, "n_max": 128,
    },
    "train": {
        "steps": 1200, "batch_rays": 1024, "n_samples": 32,
        "lr": 0.005, "bg": [0.0, 0.0, 0.0],
    },
    "eval": {
        "holdout_fraction": 0.2,
        "novel_count": 8,
        "novel_azimuth_offset_deg": 22.5,
        "novel_elevations_deg": [0.0, 35.0],
        "render_samples": 48,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config parse error in {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
        return cls(_merge(DEFAULT_CONFIG, user))

    @classmethod
    def defaults(cls, **overrides) -> "ExperimentConfig":
        return cls(_merge(DEFAULT_CONFIG, overrides))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def scene_mesh(self) -> TriangleMesh:
        try:
            return load_scene(self.raw["scene"]["mesh"])
        except (ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc

    def orbit_center(self, mesh: TriangleMesh) -> np.ndarray:
        c = self.raw["scene"]["orbit_center"]
        return mesh.bounds().center if c is None else np.asarray(c, dtype=float)

    def ring_height(self, mesh: TriangleMesh) -> float:
        h = self.raw["scene"]["ring_height"]
        return float(mesh.bounds().center[2]) if h is None else float(h)

    def capture_intrinsics(self) -> Intrinsics:
        c = self.raw["capture"]
        return Intrinsics.from_vfov(c["image_size"], c["image_size"],
                                    c["vfov_deg"])

    def perception_intrinsics(self) -> Intrinsics:
        c = self.raw["capture"]
        return Intrinsics.from_vfov(c["perception_size"], c["perception_size"],
                                    c["vfov_deg"])

    def gains(self) -> ct.PidGains:
        g = self.raw["gains"]
        return ct.PidGains(np.array(g["kp"]), np.array(g["ki"]),
                           np.array(g["kd"]), g["integral_clamp"])

    def schedule(self) -> ct.CaptureSchedule:
        c = self.raw["capture"]
        return ct.CaptureSchedule(iterations=c["iterations"],
                                  delta_angle=math.radians(c["delta_angle_deg"]))

    def grid_config(self) -> HashGridConfig:
        n = self.raw["nerf"]
        return HashGridConfig(levels=n["levels"], table_size=n["table_size"],
                              features=n["features"], n_min=n["n_min"],
                              n_max=n["n_max"])

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(steps=t["steps"], batch_rays=t["batch_rays"],
                           n_samples=t["n_samples"], lr=t["lr"],
                           bg=tuple(t["bg"]))


def write_default_config(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(DEFAULT_CONFIG, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# holdout split


def split_holdout(pairs, fraction: float, seed: int):
    """Seeded shuffle split; returns (train, test), disjoint, order-stable."""
    n = len(pairs)
    if n < 2:
        raise ValueError("need at least 2 images to split")
    n_test = max(1, int(round(n * fraction)))
    if n_test >= n:
        raise ValueError("holdout fraction leaves no training images")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = sorted(int(i) for i in perm[:n_test])
    train_idx = sorted(int(i) for i in perm[n_test:])
    return [pairs[i] for i in train_idx], [pairs[i] for i in test_idx]


# ---------------------------------------------------------------------------
# pose construction


def ring_rigs(center, radius, height, k, intrinsics, aim=None):
    """K rigs uniformly on a circle, aimed at the center (or ``aim``)."""
    center = np.asarray(center, dtype=float)
    aim = center if aim is None else np.asarray(aim, dtype=float)
    rigs = []
    for i in range(k):
        az = 2.0 * math.pi * i / k
        pos = np.array([center[0] + radius * math.cos(az),
                        center[1] + radius * math.sin(az), height])
        rigs.append(CameraRig(intrinsics, pos, look_at(pos, aim)))
    return rigs


def novel_eval_rigs(cfg: ExperimentConfig, mesh: TriangleMesh):
    """Probe poses for the shared 'novel' protocol: azimuths offset from every
    captured azimuth, alternating elevations, aimed at the object center."""
    e = cfg["eval"]
    center = mesh.bounds().center
    radius = cfg["scene"]["orbit_radius"]
    intr = cfg.capture_intrinsics()
    rigs = []
    for i in range(e["novel_count"]):
        az = math.radians(e["novel_azimuth_offset_deg"]) \
            + 2.0 * math.pi * i / e["novel_count"]
        elev = math.radians(e["novel_elevations_deg"]
                            [i % len(e["novel_elevations_deg"])])
        pos = center + radius * np.array([
            math.cos(elev) * math.cos(az),
            math.cos(elev) * math.sin(az),
            math.sin(elev)])
        rigs.append(CameraRig(intr, pos, look_at(pos, center)))
    return rigs


def _drones_at(rigs, aim):
    """Drone states teleported to rig positions, heading toward ``aim``;
    returns (drones, camera pitches)."""
    drones, pitches = [], []
    for rig in rigs:
        yaw = math.atan2(aim[1] - rig.position[1], aim[0] - rig.position[0])
        drones.append(ct.DroneState(position=rig.position.copy(), yaw=yaw))
        pitches.append(ct.pitch_to_aim(rig.position, aim))
    return drones, pitches


# ---------------------------------------------------------------------------
# run directory bookkeeping


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.timings = {}

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def time_stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                run.timings[name] = time.perf_counter() - self.t0

        return _Timer()

    def artifact_hashes(self) -> dict:
        out = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                out[str(p.relative_to(self.root))] = hashlib.sha256(
                    p.read_bytes()).hexdigest()
        return out


def _save_captures(run: RunDir, arm: str, pairs, seed: int):
    for i, (img, _) in enumerate(pairs):
        save_png(run.path(f"{arm}/captures/cap_{i:03d}.png"), img, seed=seed)
    save_poses(run.path(f"{arm}/poses.json"), [rig for _, rig in pairs],
               seed=seed)


# ---------------------------------------------------------------------------
# arm stages


def plan_standard(cfg: ExperimentConfig, mesh: TriangleMesh):
    """Baseline placement: uniform ring at the object-center height."""
    center = cfg.orbit_center(mesh)
    return ring_rigs(center, cfg["scene"]["orbit_radius"],
                     cfg.ring_height(mesh), int(cfg["drones"]),
                     cfg.capture_intrinsics(),
                     aim=np.array([center[0], center[1], cfg.ring_height(mesh)]))


def plan_optimized(cfg: ExperimentConfig, mesh: TriangleMesh, run: RunDir = None):
    """Geometry-aware placement: seed box -> candidate grid -> greedy + SA.

    Returns (rigs, info dict with the seed box, chosen indices and fitness).
    """
    center = cfg.orbit_center(mesh)
    radius = cfg["scene"]["orbit_radius"]
    ring_h = cfg.ring_height(mesh)
    perc = cfg.perception_intrinsics()
    seed_rigs = ring_rigs(center, radius, ring_h, 4, perc,
                          aim=np.array([center[0], center[1], ring_h]))
    views = [(render_shaded(mesh, rig), rig) for rig in seed_rigs]
    if run is not None:
        for i, (img, _) in enumerate(views):
            save_png(run.path(f"optimized/seed_views/view_{i}.png"), img,
                     seed=cfg.seed)
    seed_geom = pl.estimate_seed_geometry(views)
    box = seed_geom.bounds

    c = cfg["candidates"]
    heights = [float(box.lo[2] + f * box.size[2]) for f in c["height_fracs"]]
    pset = pl.build_candidate_set(
        seed_geom.centroid, c["radii"], heights,
        math.radians(c["azimuth_step_deg"]), cfg.capture_intrinsics(),
        min_count=int(cfg["drones"]))
    frames = pl.FrameSet.from_servo(
        pset, mesh, cfg.gains(), lift_box=mesh.bounds(),
        cfg=_servo_cfg(cfg), max_steps=int(c["servo_max_steps"]),
        tol_px=float(cfg["capture"]["tol_px"]))
    fit = cfg["fitness"]
    evaluator = pl.FitnessEvaluator(pset, seed_geom, frames, mesh,
                                    w_vis=fit["w_vis"], w_rep=fit["w_rep"])
    k = int(cfg["drones"])
    greedy = pl.greedy_init(pset, k, evaluator)
    ann = cfg["annealing"]
    t0 = ann["t0"]
    if t0 is None:
        t0 = pl.initial_temperature(pset, k, evaluator,
                                    np.random.default_rng(derive_seed(cfg.seed, "t0")))
    schedule = pl.AnnealingSchedule(t0=float(t0), alpha=ann["alpha"],
                                    iters_per_temp=ann["iters_per_temp"],
                                    total_iters=ann["total_iters"],
                                    seed=derive_seed(cfg.seed, "sa"))
    history = []
    best = pl.simulated_annealing(greedy, pset, evaluator, schedule,
                                  history_out=history)
    rigs = [pset.rigs[i] for i in best.indices]
    info = {
        "seed_box": {"lo": box.lo.tolist(), "hi": box.hi.tolist()},
        "candidates": pset.size,
        "greedy": {"indices": list(greedy.indices), "fitness": greedy.fitness},
        "chosen": {"indices": list(best.indices), "fitness": best.fitness},
        "aim": seed_geom.centroid.tolist(),
        "t0": float(t0),
    }
    if run is not None:
        with open(run.path("optimized/placement.json"), "w", encoding="utf-8") as fh:
            json.dump(info, fh, indent=1)
            fh.write("\n")
        np.savetxt(run.path("optimized/sa_history.csv"),
                   np.asarray(history), fmt="%.9f",
                   header=f"best fitness per iteration, seed={schedule.seed}")
    return rigs, info


def _servo_cfg(cfg: ExperimentConfig) -> ct.ServoConfig:
    return ct.ServoConfig()


def capture_arm(cfg: ExperimentConfig, mesh: TriangleMesh, rigs, aim,
                run: RunDir, arm: str):
    """Fly the shared schedule from an arm's planned poses and persist the
    captured image/pose pairs."""
    drones, pitches = _drones_at(rigs, aim)
    fracs = []
    perc = cfg.perception_intrinsics()
    scfg = _servo_cfg(cfg)
    for d, p in zip(drones, pitches):
        fracs.append(pl._expected_height_frac(mesh, perc, d, p, scfg))
    pairs = ct.run_capture(
        drones, cfg.schedule(), mesh, cfg.gains(), cfg.capture_intrinsics(),
        perception_intrinsics=perc, orbit_center=cfg.orbit_center(mesh),
        camera_pitches=pitches, cfg=scfg, lift_box=mesh.bounds(),
        tol_px=float(cfg["capture"]["tol_px"]),
        max_steps=int(cfg["capture"]["max_steps"]),
        target_height_fracs=fracs)
    _save_captures(run, arm, pairs, cfg.seed)
    return pairs


def train_arm(cfg: ExperimentConfig, pairs, run: RunDir, arm: str):
    """Split off the holdout, fit the field, write checkpoint and loss curve."""
    tr, te = split_holdout(pairs, cfg["eval"]["holdout_fraction"],
                           derive_seed(cfg.seed, f"holdout_{arm}"))
    scene_box = _seed_box_from_run(run) if arm == "optimized" else None
    if scene_box is None:
        scene_box = _camera_hull_box(pairs)
    result = train([(img, rig) for img, rig in tr], cfg.grid_config(),
                   cfg.train_config(), derive_seed(cfg.seed, f"train_{arm}"),
                   scene_box)
    save_checkpoint(run.path(f"{arm}/field.nrf"), result.field)
    hist = result.history
    with open(run.path(f"{arm}/loss.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# seed={cfg.seed}\nstep,loss\n")
        for i, v in enumerate(hist):
            fh.write(f"{i},{v!r}\n")
    with open(run.path(f"{arm}/holdout.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": cfg.seed,
                   "train": len(tr), "test": len(te)}, fh)
        fh.write("\n")
    return result.field, tr, te


def _seed_box_from_run(run: RunDir):
    p = run.root / "optimized/placement.json"
    if not p.exists():
        return None
    with open(p, "r", encoding="utf-8") as fh:
        info = json.load(fh)
    return Box3(np.array(info["seed_box"]["lo"]),
                np.array(info["seed_box"]["hi"])).dilated(0.15)


def _camera_hull_box(pairs):
    """Fallback scene box when no seed geometry exists (standard arm): the
    region the cameras orbit, shrunk toward their common aim."""
    centers = np.array([rig.position for _, rig in pairs])
    mid = centers.mean(axis=0)
    radius = float(np.linalg.norm(centers[:, :2] - mid[None, :2], axis=1).mean())
    half = 0.45 * radius
    lo = np.array([mid[0] - half, mid[1] - half, centers[:, 2].min() - half])
    hi = np.array([mid[0] + half, mid[1] + half, centers[:, 2].max() + half])
    return Box3(lo, hi)


def evaluate_arm(cfg: ExperimentConfig, mesh: TriangleMesh, field, test_pairs,
                 run: RunDir, arm: str):
    """Score the arm on its own holdout and on the shared novel probes."""
    scene = cfg["scene"]["mesh"]
    n_samp = cfg["eval"]["render_samples"]
    hold = MetricReport(scene, arm, "holdout")
    for i, (img, rig) in enumerate(test_pairs):
        pred = render_novel_view(field, rig, n_samples=n_samp)
        save_png(run.path(f"{arm}/holdout_renders/test_{i:02d}.png"), pred,
                 seed=cfg.seed)
        hold.add_view(f"test_{i:02d}", img, pred)
    hold.to_json(run.path(f"{arm}/metrics_holdout.json"))

    novel = MetricReport(scene, arm, "novel")
    for i, rig in enumerate(novel_eval_rigs(cfg, mesh)):
        gt = render_rgb(mesh, rig)
        pred = render_novel_view(field, rig, n_samples=n_samp)
        save_png(run.path(f"{arm}/novel_renders/pred_{i:02d}.png"), pred,
                 seed=cfg.seed)
        save_png(run.path(f"{arm}/novel_renders/gt_{i:02d}.png"), gt,
                 seed=cfg.seed)
        novel.add_view(f"novel_{i:02d}", gt, pred)
    novel.to_json(run.path(f"{arm}/metrics_novel.json"))
    return hold, novel


def compare_reports(reports: dict, run: RunDir, seed: int):
    """Side-by-side table over both protocols; text, CSV and JSON outputs."""
    rows = [comparison_rows(reports["standard"][proto],
                            reports["optimized"][proto])
            for proto in ("holdout", "novel")]
    text = format_comparison_table(rows)
    with open(run.path("comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    with open(run.path("comparison.csv"), "w", encoding="utf-8") as fh:
        fh.write(comparison_csv(rows, seed=seed))
    with open(run.path("comparison.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "rows": rows}, fh, indent=1)
        fh.write("\n")
    return rows


# ---------------------------------------------------------------------------
# whole runs


def run_arm(cfg: ExperimentConfig, arm: str, run: RunDir, mesh=None):
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}")
    mesh = mesh or cfg.scene_mesh()
    info = None
    with run.time_stage(f"{arm}.plan"):
        if arm == "standard":
            rigs = plan_standard(cfg, mesh)
            aim = np.array([*cfg.orbit_center(mesh)[:2], cfg.ring_height(mesh)])
        else:
            rigs, info = plan_optimized(cfg, mesh, run)
            aim = np.array(info["aim"])
    with run.time_stage(f"{arm}.capture"):
        pairs = capture_arm(cfg, mesh, rigs, aim, run, arm)
    with run.time_stage(f"{arm}.train"):
        field, tr, te = train_arm(cfg, pairs, run, arm)
    with run.time_stage(f"{arm}.evaluate"):
        hold, novel = evaluate_arm(cfg, mesh, field, te, run, arm)
    return {"rigs": rigs, "pairs": pairs, "info": info,
            "reports": {"holdout": hold, "novel": novel}}


def run_all(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Both arms plus comparison and manifest; returns the manifest dict."""
    run = RunDir(out_dir or cfg["output_dir"])
    mesh = cfg.scene_mesh()
    reports = {}
    arm_summaries = {}
    for arm in ARMS:
        res = run_arm(cfg, arm, run, mesh)
        reports[arm] = res["reports"]
        arm_summaries[arm] = {
            "poses": f"{arm}/poses.json",
            "placement": res["info"],
            "mean_psnr_novel": res["reports"]["novel"].mean_psnr,
            "mean_ssim_novel": res["reports"]["novel"].mean_ssim,
        }
    rows = compare_reports(reports, run, cfg.seed)
    manifest = {
        "format": "orbitnerf-run/v1",
        "seed": cfg.seed,
        "config": cfg.raw,
        "arms": arm_summaries,
        "comparison": rows,
        "stages": run.timings,
        "artifacts": run.artifact_hashes(),
    }
    with open(run.path("manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest
