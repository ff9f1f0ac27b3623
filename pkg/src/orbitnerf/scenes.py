"""Bundled synthetic scenes and their generators.

Five box-composite meshes ship with the package, thematic stand-ins for the
kinds of objects a camera ring handles badly:

* ``cube``        - unit cube, the smoke-test object
* ``tall_figure`` - tall standing figure with a wide hat brim and shoulders
                    (lots of top-facing surface a level ring never sees)
* ``bowl``        - open-top container whose interior is only visible from
                    above
* ``spire``       - thin elongated object on a base
* ``lowbox``      - low, wide body with a head at one end

``regenerate_assets`` rewrites the .mesh files and the count manifest; the
committed assets were produced by it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, load_mesh, save_mesh

ASSET_DIR = Path(__file__).parent / "assets"

_GRAY = (0.5, 0.5, 0.5)


def _box(lo, hi, albedo=_GRAY, face_albedo=None):
    """12 outward-wound triangles of an axis-aligned box.

    ``face_albedo`` overrides the base color per face key ('+x', '-x', ...).
    Returns (vertices, triangles, per-triangle albedo) with local indexing.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0])
                  for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    idx = lambda x, y, z: x * 4 + y * 2 + z
    quads = {
        "+x": (idx(1, 0, 0), idx(1, 1, 0), idx(1, 1, 1), idx(1, 0, 1)),
        "-x": (idx(0, 0, 0), idx(0, 0, 1), idx(0, 1, 1), idx(0, 1, 0)),
        "+y": (idx(0, 1, 0), idx(0, 1, 1), idx(1, 1, 1), idx(1, 1, 0)),
        "-y": (idx(0, 0, 0), idx(1, 0, 0), idx(1, 0, 1), idx(0, 0, 1)),
        "+z": (idx(0, 0, 1), idx(1, 0, 1), idx(1, 1, 1), idx(0, 1, 1)),
        "-z": (idx(0, 0, 0), idx(0, 1, 0), idx(1, 1, 0), idx(1, 0, 0)),
    }
    tris, albs = [], []
    fa = face_albedo or {}
    for key, (a, b, c, d) in quads.items():
        col = fa.get(key, albedo)
        tris += [[a, b, c], [a, c, d]]
        albs += [col, col]
    return v, np.array(tris), np.array(albs)


def _assemble(parts):
    verts, tris, albs = [], [], []
    offset = 0
    for v, t, a in parts:
        verts.append(v)
        tris.append(t + offset)
        albs.append(a)
        offset += v.shape[0]
    return TriangleMesh.from_arrays(np.concatenate(verts),
                                    np.concatenate(tris),
                                    np.concatenate(albs))


def _build_cube():
    return _assemble([_box([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])])


def _build_tall_figure():
    skin = (0.88, 0.72, 0.58)
    shirt = (0.25, 0.38, 0.78)
    pants = (0.22, 0.22, 0.28)
    hat = (0.82, 0.18, 0.18)
    bag = (0.2, 0.62, 0.3)
    parts = [
        _box([-0.20, -0.08, 0.00], [-0.05, 0.08, 0.78], pants),   # left leg
        _box([0.05, -0.08, 0.00], [0.20, 0.08, 0.78], pants),     # right leg
        _box([-0.28, -0.15, 0.78], [0.28, 0.15, 1.50], shirt),    # torso
        _box([-0.36, -0.17, 1.50], [0.36, 0.17, 1.62], shirt),    # shoulders
        _box([-0.13, -0.13, 1.62], [0.13, 0.13, 1.92], skin),     # head
        _box([-0.48, -0.48, 1.92], [0.48, 0.48, 1.97], hat),      # hat brim
        _box([-0.15, -0.15, 1.97], [0.15, 0.15, 2.15], hat),      # hat crown
        _box([-0.10, 0.15, 0.90], [0.10, 0.30, 1.22], bag),       # satchel
    ]
    return _assemble(parts)


def _build_bowl():
    outer = (0.35, 0.42, 0.52)
    rim = (0.75, 0.75, 0.78)
    inside = (0.92, 0.55, 0.15)
    t = 0.08  # wall thickness
    h = 0.85
    parts = [
        _box([-0.5, -0.5, 0.0], [0.5, 0.5, t], outer,
             {"+z": inside}),                                      # floor
        _box([-0.5, -0.5, t], [-0.5 + t, 0.5, h], outer,
             {"+x": inside, "+z": rim}),                           # -x wall
        _box([0.5 - t, -0.5, t], [0.5, 0.5, h], outer,
             {"-x": inside, "+z": rim}),                           # +x wall
        _box([-0.5 + t, -0.5, t], [0.5 - t, -0.5 + t, h], outer,
             {"+y": inside, "+z": rim}),                           # -y wall
        _box([-0.5 + t, 0.5 - t, t], [0.5 - t, 0.5, h], outer,
             {"-y": inside, "+z": rim}),                           # +y wall
    ]
    return _assemble(parts)


def _build_spire():
    base = (0.45, 0.35, 0.3)
    shaft = (0.65, 0.6, 0.5)
    top = (0.85, 0.75, 0.25)
    parts = [
        _box([-0.28, -0.2, 0.0], [0.28, 0.2, 0.35], base),
        _box([-0.08, -0.08, 0.35], [0.08, 0.08, 1.70], shaft),
        _box([-0.16, -0.10, 1.70], [0.16, 0.22, 1.92], top),  # offset finial
    ]
    return _assemble(parts)


def _build_lowbox():
    body = (0.55, 0.45, 0.35)
    head = (0.8, 0.65, 0.45)
    leg = (0.3, 0.28, 0.26)
    parts = [
        _box([-0.60, -0.25, 0.22], [0.60, 0.25, 0.52], body),
        _box([0.44, -0.14, 0.52], [0.72, 0.14, 0.82], head),
        _box([-0.55, -0.20, 0.0], [-0.43, -0.08, 0.22], leg),
        _box([-0.55, 0.08, 0.0], [-0.43, 0.20, 0.22], leg),
        _box([0.43, -0.20, 0.0], [0.55, -0.08, 0.22], leg),
        _box([0.43, 0.08, 0.0], [0.55, 0.20, 0.22], leg),
    ]
    return _assemble(parts)


_BUILDERS = {
    "cube": _build_cube,
    "tall_figure": _build_tall_figure,
    "bowl": _build_bowl,
    "spire": _build_spire,
    "lowbox": _build_lowbox,
}

SCENE_NAMES = tuple(sorted(_BUILDERS))


def scene_path(name: str) -> Path:
    return ASSET_DIR / f"{name}.mesh"


def load_scene(name: str) -> TriangleMesh:
    """Load a bundled scene by name, or any path ending in .mesh."""
    p = Path(name)
    if p.suffix == ".mesh" and p.exists():
        return load_mesh(p)
    if name in _BUILDERS:
        return load_mesh(scene_path(name))
    raise ValueError(f"unknown scene {name!r}; bundled: {', '.join(SCENE_NAMES)}")


def asset_manifest() -> dict:
    with open(ASSET_DIR / "manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def regenerate_assets(out_dir=None) -> dict:
    """Rewrite the bundled .mesh files and the vertex/triangle count manifest."""
    out = Path(out_dir) if out_dir else ASSET_DIR
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name in SCENE_NAMES:
        mesh = _BUILDERS[name]()
        save_mesh(out / f"{name}.mesh", mesh)
        manifest[f"{name}.mesh"] = {"vertices": int(mesh.vertices.shape[0]),
                                    "triangles": int(mesh.n_triangles)}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
