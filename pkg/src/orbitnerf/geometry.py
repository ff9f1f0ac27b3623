"""Triangle meshes, pinhole cameras, visibility and shaded ray-cast rendering.

Conventions used throughout the package:

* World frame: right-handed, z up, units are meters.
* Camera frame: right-handed, the camera looks along its local +z axis,
  x points right and y points DOWN in the image.  A world point ``p`` maps
  to the camera frame as ``q = R @ (p - C)`` where ``R`` is the 3x3
  world-to-camera rotation and ``C`` the camera center.
* Pixel coordinates are continuous: ``u`` runs left to right in ``[0, width]``,
  ``v`` top to bottom in ``[0, height]``.  Array cell ``img[r, c]`` covers the
  unit square with center ``(c + 0.5, r + 0.5)``.

Meshes are loaded from a plain text vertex/face format (see :func:`load_mesh`).
All types are treated as immutable after construction; every operation here is
a pure function and safe to call concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Fixed directional light for the shaded renders: unit vector pointing from
# the scene toward the light (mostly overhead, azimuthally skewed).
LIGHT_DIR = np.array([0.35, -0.25, 0.9])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.15

DEFAULT_ALBEDO = (0.5, 0.5, 0.5)

_EDGE_ON_EPS = 1e-6


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed or violates mesh invariants."""


# ---------------------------------------------------------------------------
# core types


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup with per-triangle unit normals and centroids.

    ``albedo`` holds one RGB color per triangle (mid-gray when the source
    file does not specify one).
    """

    vertices: np.ndarray   # (V, 3) float
    triangles: np.ndarray  # (M, 3) int, indices into vertices
    normals: np.ndarray    # (M, 3) unit
    centroids: np.ndarray  # (M, 3)
    albedo: np.ndarray     # (M, 3) in [0, 1]

    @classmethod
    def from_arrays(cls, vertices, triangles, albedo=None) -> "TriangleMesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.shape[0] < 1:
            raise MeshFormatError("mesh has no triangles")
        if triangles.min() < 0 or triangles.max() >= vertices.shape[0]:
            bad = int(triangles.max())
            raise MeshFormatError(
                f"face index {bad} out of range for {vertices.shape[0]} vertices")
        corners = vertices[triangles]                      # (M, 3, 3)
        e1 = corners[:, 1] - corners[:, 0]
        e2 = corners[:, 2] - corners[:, 0]
        n = np.cross(e1, e2)
        ln = np.linalg.norm(n, axis=1)
        if np.any(ln < 1e-12):
            bad = int(np.argmin(ln))
            raise MeshFormatError(f"triangle {bad} is degenerate (zero area)")
        n = n / ln[:, None]
        cen = corners.mean(axis=1)
        if albedo is None:
            alb = np.tile(np.asarray(DEFAULT_ALBEDO), (triangles.shape[0], 1))
        else:
            alb = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
            if alb.shape[0] != triangles.shape[0]:
                raise MeshFormatError("albedo count does not match triangle count")
        for a in (vertices, triangles, n, cen, alb):
            a.setflags(write=False)
        return cls(vertices, triangles, n, cen, alb)

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def corner_array(self) -> np.ndarray:
        """(M, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def bounds(self) -> "Box3":
        return Box3(self.vertices.min(axis=0), self.vertices.max(axis=0))


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box, used for seed geometry and scene normalization."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if not np.all(self.lo < self.hi):
            raise ValueError("box min must be strictly below max on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def dilated(self, frac: float) -> "Box3":
        pad = 0.5 * frac * self.size
        return Box3(self.lo - pad, self.hi + pad)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0])
                         for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def faces(self):
        """Six (centroid, outward unit normal) pairs."""
        c, s = self.center, self.size
        out = []
        for ax in range(3):
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[ax] = sign
                fc = c.copy()
                fc[ax] = self.hi[ax] if sign > 0 else self.lo[ax]
                out.append((fc, n))
        return out

    def intersect_ray(self, origin, direction):
        """Entry/exit parameters of a ray against the box (slab method).

        Returns ``(t_near, t_far, axis, sign)`` where ``axis``/``sign``
        identify the entry face, or ``None`` when the ray misses.
        """
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        t_near, t_far = -np.inf, np.inf
        axis, sign = -1, 0.0
        for ax in range(3):
            d = direction[ax]
            if abs(d) < 1e-15:
                if origin[ax] < self.lo[ax] or origin[ax] > self.hi[ax]:
                    return None
                continue
            t0 = (self.lo[ax] - origin[ax]) / d
            t1 = (self.hi[ax] - origin[ax]) / d
            face_sign = -1.0 if d > 0 else 1.0
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > t_near:
                t_near, axis, sign = t0, ax, face_sign
            t_far = min(t_far, t1)
            if t_near > t_far:
                return None
        return t_near, t_far, axis, sign


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def from_vfov(cls, width: int, height: int, vfov_deg: float) -> "Intrinsics":
        f = 0.5 * height / math.tan(math.radians(vfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height)

    def scaled(self, factor: float) -> "Intrinsics":
        """Same field of view at a resized image."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)),
                          int(round(self.height * factor)))


@dataclass(frozen=True)
class CameraRig:
    """Pinhole camera: intrinsics plus world pose (see module header)."""

    intrinsics: Intrinsics
    position: np.ndarray   # camera center C, world
    rotation: np.ndarray   # 3x3 world-to-camera

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal within 1e-6")
        object.__setattr__(self, "rotation", R)
        self.position.setflags(write=False)
        R.setflags(write=False)

    def camera_frame(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (p - self.position) @ self.rotation.T

    def world_to_camera_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = -self.rotation @ self.position
        return T

    @property
    def forward(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.rotation[2]


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at ``position`` looking at ``target``.

    Roll-free with respect to ``up``; image y ends up pointing down.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera position coincides with look target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    right = right / rn
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


# ---------------------------------------------------------------------------
# mesh file I/O
#
# Text format, one record per line:
#   v x y z          vertex position
#   f i j k [r g b]  triangle (1-based vertex indices) with optional albedo
# '#' starts a comment.  Faces without albedo default to mid-gray.


def load_mesh(path) -> TriangleMesh:
    """Parse a ``.mesh`` text file. Raises :class:`MeshFormatError` with the
    offending line number on malformed input."""
    verts, tris, albs = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind, args = parts[0], parts[1:]
            try:
                if kind == "v":
                    if len(args) != 3:
                        raise ValueError("expected 3 coordinates")
                    verts.append([float(a) for a in args])
                elif kind == "f":
                    if len(args) not in (3, 6):
                        raise ValueError("expected 3 indices with optional r g b")
                    tris.append([int(a) - 1 for a in args[:3]])
                    albs.append([float(a) for a in args[3:]] if len(args) == 6
                                else list(DEFAULT_ALBEDO))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
    if not tris:
        raise MeshFormatError(f"{path}: no faces found")
    return TriangleMesh.from_arrays(np.array(verts), np.array(tris), np.array(albs))


def save_mesh(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t, a in zip(mesh.triangles, mesh.albedo):
            fh.write(f"f {int(t[0]) + 1} {int(t[1]) + 1} {int(t[2]) + 1} "
                     f"{float(a[0])!r} {float(a[1])!r} {float(a[2])!r}\n")


# ---------------------------------------------------------------------------
# camera pose JSON (shared with the placement and pipeline modules)


def save_poses(path, rigs, seed=None) -> None:
    """Write rigs as a JSON document with intrinsics and 4x4 transforms.

    ``position``/``rotation`` are the authoritative fields (so that
    load -> save reproduces the file byte for byte); the ``world_to_camera``
    matrix is derived and included for interoperability.
    """
    doc = {"format": "camera-poses/v1", "seed": seed, "cameras": []}
    for rig in rigs:
        i = rig.intrinsics
        doc["cameras"].append({
            "intrinsics": {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
                           "width": i.width, "height": i.height},
            "position": rig.position.tolist(),
            "rotation": rig.rotation.tolist(),
            "world_to_camera": rig.world_to_camera_matrix().tolist(),
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_poses(path):
    """Inverse of :func:`save_poses`; returns ``(rigs, seed)``."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "camera-poses/v1":
        raise ValueError(f"{path}: unrecognized pose document format")
    rigs = []
    for cam in doc["cameras"]:
        i = cam["intrinsics"]
        rigs.append(CameraRig(
            Intrinsics(i["fx"], i["fy"], i["cx"], i["cy"],
                       int(i["width"]), int(i["height"])),
            np.array(cam["position"]), np.array(cam["rotation"])))
    return rigs, doc.get("seed")


# ---------------------------------------------------------------------------
# projection and intersection


def project_point(rig: CameraRig, point):
    """Pinhole projection to continuous pixel coordinates.

    Returns ``(u, v)`` or ``None`` when the point has non-positive
    camera-frame depth (behind the camera).
    """
    q = rig.camera_frame(point)[0]
    if q[2] <= 0.0:
        return None
    i = rig.intrinsics
    return (i.fx * q[0] / q[2] + i.cx, i.fy * q[1] / q[2] + i.cy)


def project_points(rig: CameraRig, points):
    """Vectorized projection: returns ``(uv (N,2), in_front (N,))``.

    ``uv`` rows for points behind the camera are NaN.
    """
    q = rig.camera_frame(points)
    in_front = q[:, 2] > 0.0
    uv = np.full((q.shape[0], 2), np.nan)
    i = rig.intrinsics
    z = q[in_front, 2]
    uv[in_front, 0] = i.fx * q[in_front, 0] / z + i.cx
    uv[in_front, 1] = i.fy * q[in_front, 1] / z + i.cy
    return uv, in_front


def ray_triangle_hit(origin, direction, triangle):
    """Moeller-Trumbore intersection of one ray with one triangle.

    ``direction`` must be unit length; ``triangle`` is a (3, 3) corner array.
    Returns the smallest positive distance, or ``None`` (misses and
    degenerate/parallel cases).  Edge and vertex hits count as hits.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    tri = np.asarray(triangle, dtype=np.float64)
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    pvec = np.cross(direction, e2)
    det = e1 @ pvec
    if abs(det) < 1e-14:
        return None
    inv = 1.0 / det
    tvec = origin - tri[0]
    u = (tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = (direction @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ qvec) * inv
    return float(t) if t > 1e-12 else None


def _rays_vs_triangle(origin, dirs, tri):
    """Intersection parameters of many rays from one origin with one triangle.

    Returns ``t`` (N,) with inf where there is no positive hit.  ``dirs`` need
    not be unit length; ``t`` is in units of the direction vectors.
    """
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    pvec = np.cross(dirs, e2)
    det = pvec @ e1
    tvec = origin - tri[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        u = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1)
        v = (dirs @ qvec) * inv
        t = (qvec @ e2) * inv
    ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
    return np.where(ok, t, np.inf)


def _min_hits(origin, dirs, mesh: TriangleMesh):
    """Per-ray nearest hit over the whole mesh.

    Returns ``(t_min (N,), tri_id (N,))`` with inf / -1 for misses.  Loops over
    triangles, vectorized over rays (meshes here are small, ray counts large).
    """
    n = dirs.shape[0]
    t_min = np.full(n, np.inf)
    tri_id = np.full(n, -1, dtype=np.int64)
    corners = mesh.corner_array()
    for k in range(mesh.n_triangles):
        t = _rays_vs_triangle(origin, dirs, corners[k])
        closer = t < t_min
        t_min[closer] = t[closer]
        tri_id[closer] = k
    return t_min, tri_id


# ---------------------------------------------------------------------------
# visibility


@dataclass(frozen=True)
class VisibilityReport:
    """Per-pose visible triangle sets plus union and pairwise overlap."""

    visible: list                 # list of frozenset of triangle ids
    union_fraction: float
    per_pose_fractions: np.ndarray
    overlap: np.ndarray           # (R, R) Jaccard matrix
    n_triangles: int = field(default=0)


def visible_triangles(mesh: TriangleMesh, rig: CameraRig) -> frozenset:
    """Triangles that are in frame, front-facing and unoccluded.

    A triangle is visible iff its centroid projects inside the image bounds
    with positive depth, its normal faces the camera (edge-on triangles are
    treated as invisible), and the ray from the camera center to the centroid
    hits no nearer triangle.
    """
    C = rig.position
    uv, in_front = project_points(rig, mesh.centroids)
    i = rig.intrinsics
    with np.errstate(invalid="ignore"):
        in_frame = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < i.width) \
            & (uv[:, 1] >= 0) & (uv[:, 1] < i.height)
    view = mesh.centroids - C
    dist = np.linalg.norm(view, axis=1)
    facing = np.einsum("ij,ij->i", mesh.normals, view) / np.maximum(dist, 1e-300)
    front = facing < -_EDGE_ON_EPS
    cand = np.flatnonzero(in_frame & front)
    if cand.size == 0:
        return frozenset()
    t_min, _ = _min_hits(C, view[cand], mesh)
    # the centroid's own triangle is hit at t == 1 in these units
    unoccluded = t_min >= 1.0 - 1e-9
    return frozenset(int(k) for k in cand[unoccluded])


def coverage_report(mesh: TriangleMesh, rigs) -> VisibilityReport:
    """Union visibility fraction and pairwise Jaccard overlaps for a rig set."""
    if len(rigs) < 1:
        raise ValueError("coverage_report needs at least one rig")
    sets = [visible_triangles(mesh, r) for r in rigs]
    m = mesh.n_triangles
    union = frozenset().union(*sets)
    fr = np.array([len(s) / m for s in sets])
    n = len(sets)
    overlap = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            uni = len(sets[a] | sets[b])
            overlap[a, b] = 1.0 if uni == 0 else len(sets[a] & sets[b]) / uni
    return VisibilityReport(sets, len(union) / m, fr, overlap, m)


# ---------------------------------------------------------------------------
# ray-cast rendering


def _pixel_rays(rig: CameraRig):
    """World-space ray directions through every pixel center, z-depth scaled.

    Directions have camera-frame depth 1, so the hit parameter t equals the
    camera-frame z depth.
    """
    i = rig.intrinsics
    u = (np.arange(i.width) + 0.5 - i.cx) / i.fx
    v = (np.arange(i.height) + 0.5 - i.cy) / i.fy
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    return d_cam @ rig.rotation


def _shade(mesh: TriangleMesh, tri_id, light_dir, ambient):
    lam = mesh.normals @ light_dir
    shade = ambient + (1.0 - ambient) * np.maximum(lam, 0.0)
    out = np.zeros(tri_id.shape[0])
    hit = tri_id >= 0
    out[hit] = shade[tri_id[hit]]
    return out, hit


def render_shaded(mesh: TriangleMesh, rig: CameraRig,
                  light_dir=LIGHT_DIR, ambient=AMBIENT) -> np.ndarray:
    """Depth-tested grayscale render, values in [0, 1], background 0.

    Foreground brightness is ``ambient + (1 - ambient) * max(0, n . l)`` with
    the fixed directional light ``l``.  Deterministic.
    """
    i = rig.intrinsics
    dirs = _pixel_rays(rig)
    _, tri_id = _min_hits(rig.position, dirs, mesh)
    shade, _ = _shade(mesh, tri_id, light_dir, ambient)
    return shade.reshape(i.height, i.width)


def render_rgb(mesh: TriangleMesh, rig: CameraRig,
               light_dir=LIGHT_DIR, ambient=AMBIENT) -> np.ndarray:
    """As :func:`render_shaded` with 3 channels: per-triangle albedo times the
    Lambertian shade. Background pixels are (0, 0, 0)."""
    i = rig.intrinsics
    dirs = _pixel_rays(rig)
    _, tri_id = _min_hits(rig.position, dirs, mesh)
    shade, hit = _shade(mesh, tri_id, light_dir, ambient)
    img = np.zeros((tri_id.shape[0], 3))
    img[hit] = mesh.albedo[tri_id[hit]] * shade[hit, None]
    return img.reshape(i.height, i.width, 3)
