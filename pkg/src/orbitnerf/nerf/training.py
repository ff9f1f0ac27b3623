"""Training loop, novel-view rendering and checkpoint container.

Training fits the hash tables and MLP weights to posed RGB images by plain
photometric L2 on random ray batches, optimized with adaptive-moment gradient
descent.  The scene box (the dilated seed geometry) is mapped to the unit
cube with a uniform scale; rays are clipped to it, and rays that miss render
the background exactly.

Everything is driven by one seed: parameter init, batch sampling and the
stratified jitter all come from the same generator, gradient reductions run
in a fixed order, so two runs with the same seed produce bitwise-identical
loss histories and parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from ..geometry import Box3, CameraRig
from .grid import (HashGridConfig, encode, encode_backward, init_hash_tables)
from .field import (MlpParams, init_mlp, mlp_forward, mlp_backward,
                    composite, composite_backward, sample_ts)

CHECKPOINT_MAGIC = b"ONRFCKP1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1200
    batch_rays: int = 1024
    n_samples: int = 32
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    bg: tuple = (0.0, 0.0, 0.0)
    hidden: int = 32
    geo_features: int = 7
    density_bias: float = 0.5
    box_dilation: float = 0.1
    dtype: str = "float32"  # training arithmetic; float64 for diagnostics


@dataclass
class RadianceField:
    """A trained (or initializing) field bound to its scene normalization."""

    cfg: HashGridConfig
    tables: np.ndarray
    mlp: MlpParams
    scene_box: Box3       # world-space box mapped into the unit cube
    bg: np.ndarray
    seed: int = None

    def __post_init__(self):
        self.bg = np.asarray(self.bg, dtype=np.float64).reshape(3)

    @property
    def _scale(self) -> float:
        return float(self.scene_box.size.max())

    def to_unit(self, pts_world) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts_world, dtype=np.float64))
        return (p - self.scene_box.center) / self._scale + 0.5

    def unit_bounds(self) -> Box3:
        lo = (self.scene_box.lo - self.scene_box.center) / self._scale + 0.5
        hi = (self.scene_box.hi - self.scene_box.center) / self._scale + 0.5
        return Box3(lo, hi)

    def eval(self, x_unit, view_dir):
        from .field import field_eval
        return field_eval(x_unit, view_dir, self.tables, self.mlp, self.cfg)


@dataclass
class TrainResult:
    field: RadianceField
    history: np.ndarray

    @property
    def tables(self):
        return self.field.tables

    @property
    def mlp(self):
        return self.field.mlp


def rays_for_rig(rig: CameraRig):
    """World-space (origins, unit directions) through every pixel center."""
    i = rig.intrinsics
    u = (np.arange(i.width) + 0.5 - i.cx) / i.fx
    v = (np.arange(i.height) + 0.5 - i.cy) / i.fy
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d = d_cam @ rig.rotation
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(rig.position, d.shape).copy()
    return o, d


def _unit_box_clip(origins, dirs, unit_box: Box3):
    """Per-ray (near, far) against the unit-space scene bounds; near >= 0."""
    lo, hi = unit_box.lo, unit_box.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None, :] - origins) * inv
        t1 = (hi[None, :] - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axes with zero direction: inside the slab -> (-inf, inf), else empty
    zero = np.abs(dirs) < 1e-15
    inside = (origins >= lo[None, :]) & (origins <= hi[None, :])
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    near = np.maximum(tmin.max(axis=1), 1e-6)
    far = tmax.min(axis=1)
    return near, far


def _build_ray_dataset(dataset, field: RadianceField):
    dtype = field.tables.dtype
    origins, dirs, targets = [], [], []
    for img, rig in dataset:
        o, d = rays_for_rig(rig)
        origins.append(field.to_unit(o))
        dirs.append(d)
        targets.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    targets = np.concatenate(targets)
    near, far = _unit_box_clip(origins, dirs, field.unit_bounds())
    return (origins.astype(dtype), dirs.astype(dtype), targets.astype(dtype),
            near.astype(dtype), far.astype(dtype))


class _Adam:
    def __init__(self, params: dict, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) \
                / (np.sqrt(self.v[k] / bc2) + self.eps)


def _forward_backward(field, origins, dirs, targets, near, far, n_samples, rng):
    """Loss and gradients for one ray batch. Rays missing the scene box
    contribute their (constant) background residual to the loss only."""
    n = origins.shape[0]
    bg = field.bg.astype(targets.dtype)
    hit = near < far
    pred = np.tile(bg, (n, 1))
    grads = None
    d_pred = None
    caches = None
    if np.any(hit):
        ts = sample_ts(near[hit], far[hit], n_samples, rng)
        o, d = origins[hit], dirs[hit]
        pts = (o[:, None, :] + ts[:, :, None] * d[:, None, :]).reshape(-1, 3)
        viewdirs = np.repeat(d, n_samples, axis=0)
        enc = encode(pts, field.tables, field.cfg, aux=viewdirs)
        color, sigma, mlp_cache = mlp_forward(enc, field.mlp, field.cfg.aux_dim)
        color = color.reshape(-1, n_samples, 3)
        sigma = sigma.reshape(-1, n_samples)
        pixel, _, comp_cache = composite(sigma, color, ts, far[hit], bg)
        pred[hit] = pixel
        caches = (pts, mlp_cache, comp_cache)
    resid = pred - targets
    loss = float(np.mean(resid * resid))
    if caches is not None:
        pts, mlp_cache, comp_cache = caches
        d_pixel = 2.0 * resid[hit] / resid.size
        d_sigma, d_color = composite_backward(comp_cache, d_pixel)
        grads, d_enc_grid = mlp_backward(
            mlp_cache, d_color.reshape(-1, 3), d_sigma.reshape(-1), field.mlp)
        grads["tables"] = encode_backward(pts, d_enc_grid, field.cfg)
    return loss, grads


def train(dataset, cfg: HashGridConfig, train_cfg: TrainConfig, seed: int,
          scene_box: Box3) -> TrainResult:
    """Fit a radiance field to ``dataset`` (a list of ``(rgb, rig)`` pairs).

    Deterministic given ``seed``.  Raises :class:`TrainingDivergedError`
    with the offending step when the loss goes non-finite.
    """
    if len(dataset) < 1:
        raise ValueError("training needs at least one view")
    dtype = np.dtype(train_cfg.dtype)
    rng = np.random.default_rng(seed)
    tables = init_hash_tables(cfg, rng).astype(dtype)
    mlp = init_mlp(cfg, rng, hidden=train_cfg.hidden,
                   geo_features=train_cfg.geo_features,
                   density_bias=train_cfg.density_bias, dtype=dtype)
    field = RadianceField(cfg, tables, mlp,
                          scene_box.dilated(train_cfg.box_dilation),
                          np.asarray(train_cfg.bg), seed=seed)
    origins, dirs, targets, near, far = _build_ray_dataset(dataset, field)
    n_rays = origins.shape[0]

    params = {"tables": field.tables, **field.mlp.arrays()}
    opt = _Adam(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2,
                train_cfg.eps)
    history = np.zeros(train_cfg.steps)
    for step in range(train_cfg.steps):
        idx = rng.integers(0, n_rays, train_cfg.batch_rays)
        loss, grads = _forward_backward(
            field, origins[idx], dirs[idx], targets[idx], near[idx], far[idx],
            train_cfg.n_samples, rng)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (batch of {train_cfg.batch_rays})")
        history[step] = loss
        if grads is not None:
            opt.step(params, grads)
    return TrainResult(field, history)


def render_novel_view(field: RadianceField, rig: CameraRig,
                      n_samples: int = 48, chunk: int = 16384) -> np.ndarray:
    """Deterministic per-pixel render of the field at a camera pose."""
    i = rig.intrinsics
    o_w, d = rays_for_rig(rig)
    o = field.to_unit(o_w)
    near, far = _unit_box_clip(o, d, field.unit_bounds())
    out = np.zeros((o.shape[0], 3))
    from .field import volume_render
    for s in range(0, o.shape[0], chunk):
        e = min(s + chunk, o.shape[0])
        color, _ = volume_render(o[s:e], d[s:e], near[s:e], far[s:e],
                                 n_samples, field, bg=field.bg)
        out[s:e] = color
    return np.clip(out, 0.0, 1.0).reshape(i.height, i.width, 3)


# ---------------------------------------------------------------------------
# checkpoint container: magic, u64 header length, JSON header, raw buffers


def save_checkpoint(path, field: RadianceField) -> None:
    arrays = [("tables", field.tables)]
    arrays += [(name, arr) for name, arr in field.mlp.arrays().items()]
    manifest = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        manifest.append({"name": name, "dtype": "<f8",
                         "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "format": "orbitnerf-checkpoint", "version": 1,
        "grid": {"levels": field.cfg.levels, "table_size": field.cfg.table_size,
                 "features": field.cfg.features, "n_min": field.cfg.n_min,
                 "n_max": field.cfg.n_max, "aux_dim": field.cfg.aux_dim},
        "scene_box": {"lo": field.scene_box.lo.tolist(),
                      "hi": field.scene_box.hi.tolist()},
        "bg": field.bg.tolist(),
        "seed": field.seed,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> RadianceField:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        (hlen,) = np.frombuffer(fh.read(8), dtype=np.uint64)
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        data = fh.read()
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        start = spec["offset"]
        arr = np.frombuffer(data, dtype=spec["dtype"], count=count,
                            offset=start).reshape(spec["shape"]).copy()
        arrays[spec["name"]] = arr
    g = header["grid"]
    cfg = HashGridConfig(levels=g["levels"], table_size=g["table_size"],
                         features=g["features"], n_min=g["n_min"],
                         n_max=g["n_max"], aux_dim=g["aux_dim"])
    mlp = MlpParams(**{k: arrays[k] for k in MlpParams.ARRAY_NAMES})
    box = Box3(np.array(header["scene_box"]["lo"]),
               np.array(header["scene_box"]["hi"]))
    return RadianceField(cfg, arrays["tables"], mlp, box,
                         np.array(header["bg"]), seed=header.get("seed"))
