"""Seed geometry from four orthogonal views, and camera-set optimization.

The optimizer is discrete: the space of drone poses around the object is
sampled into a candidate set (radius x height x azimuth grid, every pose aimed
at the seed-geometry centroid), a greedy pass picks an initial K-subset, and
simulated annealing with Boltzmann acceptance refines it.

A configuration is scored by

    F_fit = w_vis * (union visible-triangle fraction)
          - w_rep * (mean reprojection discrepancy, pixels)

The reprojection term scores expected-vs-achieved consistency pose by pose:
for each selected pose, find the nearest front-facing seed-box face (by
camera-to-face-centroid distance), project that face centroid under the
nominal pose and under the achieved pose the servo loop actually reaches, and
take the pixel distance between the two projections.  Achieved poses come
from a :class:`FrameSet`, either simulated once per candidate or the identity
(zero residual).  Higher F_fit is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import control as ct
from .blobs import detect_blobs, largest_region_bbox, geometric_sigmas
from .geometry import (Box3, CameraRig, Intrinsics, TriangleMesh, look_at,
                       project_point, visible_triangles)


class SeedViewError(RuntimeError):
    """A seed view produced no usable region."""


@dataclass(frozen=True)
class SeedGeometry:
    """Axis-aligned boxes enclosing the object, estimated from images only."""

    boxes: tuple  # tuple of Box3

    def __post_init__(self):
        if len(self.boxes) < 1:
            raise ValueError("seed geometry needs at least one box")
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def bounds(self) -> Box3:
        lo = np.min([b.lo for b in self.boxes], axis=0)
        hi = np.max([b.hi for b in self.boxes], axis=0)
        return Box3(lo, hi)

    @property
    def centroid(self) -> np.ndarray:
        return self.bounds.center

    def faces(self):
        out = []
        for b in self.boxes:
            out.extend(b.faces())
        return out


@dataclass(frozen=True)
class PoseCandidateSet:
    """Candidate rigs on a (radius, height, azimuth) grid, aimed at a point."""

    rigs: tuple
    n_radii: int
    n_heights: int
    n_azimuths: int
    aim: np.ndarray

    @property
    def size(self) -> int:
        return len(self.rigs)

    def grid_coords(self, i: int):
        ir, rem = divmod(i, self.n_heights * self.n_azimuths)
        ih, ia = divmod(rem, self.n_azimuths)
        return ir, ih, ia

    def neighbors(self, i: int):
        """Grid-adjacent candidate indices (azimuth wraps)."""
        ir, ih, ia = self.grid_coords(i)
        out = []
        for d in (-1, 1):
            if 0 <= ir + d < self.n_radii:
                out.append(((ir + d) * self.n_heights + ih) * self.n_azimuths + ia)
            if 0 <= ih + d < self.n_heights:
                out.append((ir * self.n_heights + ih + d) * self.n_azimuths + ia)
            if self.n_azimuths > 1:
                out.append((ir * self.n_heights + ih) * self.n_azimuths
                           + (ia + d) % self.n_azimuths)
        return sorted(set(out) - {i})


@dataclass(frozen=True)
class Configuration:
    """A selected K-subset of candidate indices with its fitness."""

    indices: tuple
    fitness: float

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx):
            raise ValueError("configuration indices must be distinct")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class AnnealingSchedule:
    t0: float
    alpha: float = 0.95
    iters_per_temp: int = 20
    total_iters: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.t0 <= 0:
            raise ValueError("initial temperature must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("cooling factor must be in (0, 1)")


@dataclass(frozen=True)
class FrameSet:
    """Achieved (servo-converged) rig per candidate pose."""

    achieved: tuple

    @classmethod
    def identity(cls, pset: PoseCandidateSet) -> "FrameSet":
        return cls(tuple(pset.rigs))

    @classmethod
    def from_servo(cls, pset: PoseCandidateSet, mesh: TriangleMesh,
                   gains: ct.PidGains = ct.DEFAULT_GAINS, *,
                   lift_box: Box3 = None, cfg: ct.ServoConfig = ct.ServoConfig(),
                   max_steps: int = 150, tol_px: float = 2.0) -> "FrameSet":
        """Fly each candidate once: teleport a drone to the pose, let the servo
        fine-tune, and record the converged rig.  Deterministic."""
        achieved = []
        for rig in pset.rigs:
            yaw = math.atan2(pset.aim[1] - rig.position[1],
                             pset.aim[0] - rig.position[0])
            pitch = ct.pitch_to_aim(rig.position, pset.aim)
            drone = ct.DroneState(position=rig.position.copy(), yaw=yaw)
            frac = _expected_height_frac(mesh, rig.intrinsics, drone, pitch, cfg)
            res = ct.servo_to_object(drone, mesh, rig.intrinsics, gains,
                                     max_steps=max_steps, tol_px=tol_px,
                                     cfg=cfg, lift_box=lift_box,
                                     camera_pitch=pitch,
                                     target_height_frac=frac)
            achieved.append(ct.rig_from_drone(res.state, rig.intrinsics, pitch))
        return cls(tuple(achieved))


def _expected_height_frac(mesh, intrinsics, drone, pitch, cfg):
    """Apparent size of the object at the planned pose, so the servo holds the
    planned standoff instead of pulling to a global setpoint."""
    from .geometry import render_shaded
    rig = ct.rig_from_drone(drone, intrinsics, pitch)
    img = render_shaded(mesh, rig)
    blobs = detect_blobs(img, cfg.sigmas, cfg.blob_threshold)
    if not blobs:
        return None
    bbox = largest_region_bbox(img, blobs)
    return bbox.h / intrinsics.height


# ---------------------------------------------------------------------------
# seed geometry


def _rays_center(rigs):
    """Least-squares intersection point of the optical axes."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for rig in rigs:
        d = rig.forward
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ rig.position
    return np.linalg.solve(A, b)


def estimate_seed_geometry(views, sigmas=None,
                           threshold: float = 0.01) -> SeedGeometry:
    """Crude 3D box of the object from four views at 90-degree azimuths.

    Each view contributes a 2D region box; its corner pixel rays are cut at
    the depth of the common axis-intersection point, constraining the world
    axes roughly perpendicular to that view.  The per-axis interval
    intersection of all views is the seed box.
    """
    if len(views) != 4:
        raise ValueError("seed geometry expects exactly 4 views")
    if sigmas is None:
        sigmas = geometric_sigmas(2.0, 28.0, per_octave=4)
    rigs = [rig for _, rig in views]
    center = _rays_center(rigs)
    lo = np.full(3, -np.inf)
    hi = np.full(3, np.inf)
    constrained = np.zeros(3, dtype=bool)
    for vi, (img, rig) in enumerate(views):
        blobs = detect_blobs(img, sigmas, threshold)
        if not blobs:
            raise SeedViewError(f"no region detected in seed view {vi}")
        bbox = largest_region_bbox(img, blobs)
        i = rig.intrinsics
        depth = float((center - rig.position) @ rig.forward)
        if depth <= 0:
            raise SeedViewError(f"seed view {vi} does not face the scene center")
        corners_px = [(bbox.x, bbox.y), (bbox.x + bbox.w, bbox.y),
                      (bbox.x, bbox.y + bbox.h), (bbox.x + bbox.w, bbox.y + bbox.h)]
        pts = []
        for (u, v) in corners_px:
            d_cam = np.array([(u - i.cx) / i.fx, (v - i.cy) / i.fy, 1.0])
            d = d_cam @ rig.rotation
            pts.append(rig.position + depth * d)
        pts = np.array(pts)
        for ax in range(3):
            if abs(rig.forward[ax]) < 0.5:  # axis roughly perpendicular to view
                lo[ax] = max(lo[ax], pts[:, ax].min())
                hi[ax] = min(hi[ax], pts[:, ax].max())
                constrained[ax] = True
    if not np.all(constrained):
        raise SeedViewError("views do not constrain every world axis")
    if np.any(lo >= hi):
        raise SeedViewError("seed view regions are mutually inconsistent")
    return SeedGeometry((Box3(lo, hi),))


# ---------------------------------------------------------------------------
# candidate poses


def build_candidate_set(center, radii, heights, azimuth_step: float,
                        intrinsics: Intrinsics, aim=None,
                        min_count: int = 1) -> PoseCandidateSet:
    """Cartesian radius x height x azimuth sampling, every pose aimed at
    ``aim`` (default: ``center``).  Index layout: radius-major, then height,
    then azimuth."""
    center = np.asarray(center, dtype=np.float64)
    radii = [float(r) for r in radii]
    heights = [float(h) for h in heights]
    if not radii or not heights or azimuth_step <= 0:
        raise ValueError("radii, heights and azimuth_step must be non-empty/positive")
    n_az = int(2.0 * math.pi / azimuth_step + 1e-9)
    if n_az < 1:
        raise ValueError("azimuth step exceeds a full turn")
    aim = center if aim is None else np.asarray(aim, dtype=np.float64)
    rigs = []
    for r in radii:
        for h in heights:
            for k in range(n_az):
                az = k * azimuth_step
                pos = np.array([center[0] + r * math.cos(az),
                                center[1] + r * math.sin(az), h])
                rigs.append(CameraRig(intrinsics, pos, look_at(pos, aim)))
    if len(rigs) < min_count:
        raise ValueError(f"candidate set too small: {len(rigs)} < {min_count}")
    return PoseCandidateSet(tuple(rigs), len(radii), len(heights), n_az, aim)


# ---------------------------------------------------------------------------
# fitness


def _reprojection_discrepancy(nominal: CameraRig, achieved: CameraRig,
                              seed: SeedGeometry) -> float:
    """Pixel distance between the nearest seed face centroid as projected
    under the nominal and the achieved pose.  Behind-camera projections are
    penalized with the image diagonal."""
    best, best_d = None, np.inf
    for fc, n in seed.faces():
        if (nominal.position - fc) @ n <= 0:  # back-facing face
            continue
        d = float(np.linalg.norm(nominal.position - fc))
        if d < best_d:
            best, best_d = fc, d
    i = nominal.intrinsics
    diag = math.hypot(i.width, i.height)
    if best is None:
        return diag
    expect = project_point(nominal, best)
    real = project_point(achieved, best)
    if expect is None or real is None:
        return diag
    return math.hypot(expect[0] - real[0], expect[1] - real[1])


def fitness(config, pset: PoseCandidateSet, seed: SeedGeometry,
            frames: FrameSet, mesh: TriangleMesh,
            w_vis: float = 1.0, w_rep: float = 0.01) -> float:
    """Reference fitness of a set of candidate indices (higher is better)."""
    indices = sorted(int(i) for i in
                     (config.indices if isinstance(config, Configuration) else config))
    union = frozenset()
    disc = []
    for i in indices:
        union = union | visible_triangles(mesh, pset.rigs[i])
        disc.append(_reprojection_discrepancy(pset.rigs[i], frames.achieved[i], seed))
    vis = len(union) / mesh.n_triangles
    return w_vis * vis - w_rep * (sum(disc) / len(disc))


class FitnessEvaluator:
    """Cached per-candidate visibility and discrepancy; exact same values as
    :func:`fitness`, evaluated in O(K) per configuration."""

    def __init__(self, pset: PoseCandidateSet, seed: SeedGeometry,
                 frames: FrameSet, mesh: TriangleMesh,
                 w_vis: float = 1.0, w_rep: float = 0.01):
        self.pset = pset
        self.w_vis = w_vis
        self.w_rep = w_rep
        self.n_triangles = mesh.n_triangles
        self.visible = [visible_triangles(mesh, r) for r in pset.rigs]
        self.discrepancy = [
            _reprojection_discrepancy(pset.rigs[i], frames.achieved[i], seed)
            for i in range(pset.size)]

    def __call__(self, indices) -> float:
        idx = sorted(int(i) for i in indices)
        union = frozenset().union(*(self.visible[i] for i in idx))
        vis = len(union) / self.n_triangles
        disc = [self.discrepancy[i] for i in idx]
        return self.w_vis * vis - self.w_rep * (sum(disc) / len(disc))


# ---------------------------------------------------------------------------
# greedy + simulated annealing


def greedy_init(pset: PoseCandidateSet, k: int, fitness_fn) -> Configuration:
    """Iteratively add the candidate with the best marginal fitness gain.
    Ties break toward the lowest index, making the result deterministic."""
    if pset.size < k:
        raise ValueError(f"need at least {k} candidates, have {pset.size}")
    selected = []
    value = None
    for _ in range(k):
        best_j, best_v = None, -np.inf
        for j in range(pset.size):
            if j in selected:
                continue
            v = fitness_fn(selected + [j])
            if v > best_v:
                best_j, best_v = j, v
        selected.append(best_j)
        value = best_v
    return Configuration(tuple(selected), value)


def boltzmann_accept(delta_f: float, temperature: float, rng) -> bool:
    """Accept improvements always; accept a worsening move with probability
    exp(delta_f / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if delta_f >= 0:
        return True
    return rng.random() < math.exp(delta_f / temperature)


def initial_temperature(pset: PoseCandidateSet, k: int, fitness_fn, rng,
                        n_probe: int = 50) -> float:
    """Standard deviation of the fitness over random configurations."""
    vals = []
    for _ in range(n_probe):
        idx = rng.choice(pset.size, size=k, replace=False)
        vals.append(fitness_fn(idx))
    return max(float(np.std(vals)), 1e-12)


def simulated_annealing(init: Configuration, pset: PoseCandidateSet,
                        fitness_fn, schedule: AnnealingSchedule, *,
                        history_out: list = None) -> Configuration:
    """Refine a configuration with swap / grid-nudge moves under Boltzmann
    acceptance against the current configuration; the best configuration ever
    seen is tracked and returned.  Reproducible given the schedule seed."""
    rng = np.random.default_rng(schedule.seed)
    cur = set(init.indices)
    cur_f = init.fitness
    best = init
    temp = schedule.t0
    for it in range(schedule.total_iters):
        sel = sorted(cur)
        new = None
        if rng.random() < 0.5:  # swap one selected index for an unselected one
            out_i = sel[rng.integers(len(sel))]
            pool = [j for j in range(pset.size) if j not in cur]
            if pool:
                in_j = pool[rng.integers(len(pool))]
                new = (cur - {out_i}) | {in_j}
        else:  # nudge one pose to a grid-neighbor candidate
            out_i = sel[rng.integers(len(sel))]
            nbrs = [j for j in pset.neighbors(out_i) if j not in cur]
            if nbrs:
                in_j = nbrs[rng.integers(len(nbrs))]
                new = (cur - {out_i}) | {in_j}
        if new is not None:
            new_f = fitness_fn(sorted(new))
            if boltzmann_accept(new_f - cur_f, temp, rng):
                cur, cur_f = new, new_f
                if cur_f > best.fitness:
                    best = Configuration(tuple(cur), cur_f)
        if history_out is not None:
            history_out.append(best.fitness)
        if (it + 1) % schedule.iters_per_temp == 0:
            temp *= schedule.alpha
    return best
