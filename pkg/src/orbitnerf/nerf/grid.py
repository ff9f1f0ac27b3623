"""Multiresolution hash encoding of 3D positions.

Trainable feature tables live at L grid resolutions spaced geometrically
between the coarsest and finest level.  Encoding a point: at each level, find
the enclosing voxel, hash its 8 corners into that level's table, trilinearly
interpolate the F-dimensional entries by the point's position inside the
voxel, and concatenate the per-level results (plus any auxiliary inputs, here
the view direction).  Levels whose full corner grid fits in the table are
indexed densely (collision-free); finer levels use the XOR spatial hash with
the conventional primes (1, 2654435761, 805459861).

The hot loops are numba kernels (serial, so results are bitwise
reproducible); gradients flow to the tables only, positions are not trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8           # L
    table_size: int = 2 ** 14  # T, power of two
    features: int = 2         # F per entry
    n_min: int = 16           # coarsest grid resolution
    n_max: int = 128          # finest grid resolution
    aux_dim: int = 3          # E, appended auxiliary inputs (view direction)

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least 2 levels")
        if self.table_size < 1 or (self.table_size & (self.table_size - 1)) != 0:
            raise ValueError("table size must be a power of two")
        if not (0 < self.n_min < self.n_max):
            raise ValueError("need 0 < n_min < n_max")
        if self.features < 1:
            raise ValueError("need at least one feature per entry")

    @property
    def encoded_dim(self) -> int:
        return self.levels * self.features + self.aux_dim


def level_resolutions(cfg: HashGridConfig) -> np.ndarray:
    """Per-level grid resolutions: N_l = floor(n_min * b^l) with the geometric
    growth factor b chosen so the last level lands on n_max."""
    b = math.exp((math.log(cfg.n_max) - math.log(cfg.n_min)) / (cfg.levels - 1))
    # the epsilon protects the exact endpoints from one-ulp rounding
    res = np.floor(cfg.n_min * b ** np.arange(cfg.levels) + 1e-9).astype(np.int64)
    return res


def _dense_levels(cfg: HashGridConfig, res=None) -> np.ndarray:
    res = level_resolutions(cfg) if res is None else res
    return (res + 1) ** 3 <= cfg.table_size


def hash_index(corner, level: int, cfg: HashGridConfig):
    """Table index of an integer corner coordinate at a level.

    Dense (collision-free linear) indexing when the level's corner grid fits
    in the table, the XOR spatial hash otherwise.  Vectorized over leading
    dimensions of ``corner``.
    """
    if not (0 <= level < cfg.levels):
        raise ValueError("level out of range")
    c = np.asarray(corner, dtype=np.int64)
    res = level_resolutions(cfg)
    n = int(res[level])
    if _dense_levels(cfg, res)[level]:
        return (c[..., 2] * (n + 1) + c[..., 1]) * (n + 1) + c[..., 0]
    h = (c[..., 0].astype(np.uint64) * np.uint64(HASH_PRIMES[0])
         ^ c[..., 1].astype(np.uint64) * np.uint64(HASH_PRIMES[1])
         ^ c[..., 2].astype(np.uint64) * np.uint64(HASH_PRIMES[2]))
    return (h & np.uint64(cfg.table_size - 1)).astype(np.int64)


def init_hash_tables(cfg: HashGridConfig, rng) -> np.ndarray:
    """(L, T, F) trainable tables, uniform in [-1e-4, 1e-4]."""
    return rng.uniform(-1e-4, 1e-4,
                       (cfg.levels, cfg.table_size, cfg.features))


@njit(cache=False)
def _encode_fwd(x, tables, res, dense, out):
    L, T, F = tables.shape
    p1 = np.uint64(HASH_PRIMES[1])
    p2 = np.uint64(HASH_PRIMES[2])
    mask = np.uint64(T - 1)
    for b in range(x.shape[0]):
        for l in range(L):
            n = res[l]
            sx = x[b, 0] * n
            sy = x[b, 1] * n
            sz = x[b, 2] * n
            ix = np.int64(sx)
            iy = np.int64(sy)
            iz = np.int64(sz)
            if ix >= n:
                ix = n - 1
            if iy >= n:
                iy = n - 1
            if iz >= n:
                iz = n - 1
            wx = sx - ix
            wy = sy - iy
            wz = sz - iz
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                cx = ix + ox
                cy = iy + oy
                cz = iz + oz
                if dense[l]:
                    idx = (cz * (n + 1) + cy) * (n + 1) + cx
                else:
                    h = np.uint64(cx) ^ (np.uint64(cy) * p1) ^ (np.uint64(cz) * p2)
                    idx = np.int64(h & mask)
                w = (wx if ox else 1.0 - wx) * (wy if oy else 1.0 - wy) \
                    * (wz if oz else 1.0 - wz)
                for f in range(F):
                    out[b, l * F + f] += w * tables[l, idx, f]


@njit(cache=False)
def _encode_bwd(x, d_out, res, dense, d_tables):
    L, T, F = d_tables.shape
    p1 = np.uint64(HASH_PRIMES[1])
    p2 = np.uint64(HASH_PRIMES[2])
    mask = np.uint64(T - 1)
    for b in range(x.shape[0]):
        for l in range(L):
            n = res[l]
            sx = x[b, 0] * n
            sy = x[b, 1] * n
            sz = x[b, 2] * n
            ix = np.int64(sx)
            iy = np.int64(sy)
            iz = np.int64(sz)
            if ix >= n:
                ix = n - 1
            if iy >= n:
                iy = n - 1
            if iz >= n:
                iz = n - 1
            wx = sx - ix
            wy = sy - iy
            wz = sz - iz
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                cx = ix + ox
                cy = iy + oy
                cz = iz + oz
                if dense[l]:
                    idx = (cz * (n + 1) + cy) * (n + 1) + cx
                else:
                    h = np.uint64(cx) ^ (np.uint64(cy) * p1) ^ (np.uint64(cz) * p2)
                    idx = np.int64(h & mask)
                w = (wx if ox else 1.0 - wx) * (wy if oy else 1.0 - wy) \
                    * (wz if oz else 1.0 - wz)
                for f in range(F):
                    d_tables[l, idx, f] += w * d_out[b, l * F + f]


def _prepare_positions(x, cfg, oob, dtype):
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x)), dtype=dtype)
    if oob == "error":
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("position outside the unit cube")
    else:
        x = np.clip(x, 0.0, 1.0)
    return x


def encode(x, tables: np.ndarray, cfg: HashGridConfig, aux=None,
           oob: str = "clamp") -> np.ndarray:
    """Encode positions in [0,1]^3 to (B, L*F + E) feature vectors.

    ``aux`` (B, E) is concatenated untransformed.  Positions outside the unit
    cube are clamped (``oob='clamp'``) or rejected (``oob='error'``).
    Arithmetic runs in the tables' dtype.
    """
    x = _prepare_positions(x, cfg, oob, tables.dtype)
    res = level_resolutions(cfg)
    dense = _dense_levels(cfg, res)
    out = np.zeros((x.shape[0], cfg.levels * cfg.features), dtype=tables.dtype)
    _encode_fwd(x, np.ascontiguousarray(tables), res, dense, out)
    if cfg.aux_dim:
        if aux is None:
            raise ValueError(f"config declares aux_dim={cfg.aux_dim} but no aux given")
        aux = np.atleast_2d(np.asarray(aux, dtype=tables.dtype))
        if aux.shape != (x.shape[0], cfg.aux_dim):
            raise ValueError("aux inputs have the wrong shape")
        out = np.concatenate([out, aux], axis=1)
    return out


def encode_backward(x, d_encoded, cfg: HashGridConfig,
                    oob: str = "clamp") -> np.ndarray:
    """Gradient of a scalar loss with respect to the tables.

    ``d_encoded`` is the loss gradient at the (B, L*F) grid part of the
    encoding (auxiliary columns excluded).  Returns d_tables (L, T, F).
    """
    d_out = np.ascontiguousarray(np.asarray(d_encoded))
    x = _prepare_positions(x, cfg, oob, d_out.dtype)
    res = level_resolutions(cfg)
    dense = _dense_levels(cfg, res)
    d_tables = np.zeros((cfg.levels, cfg.table_size, cfg.features),
                        dtype=d_out.dtype)
    _encode_bwd(x, d_out, res, dense, d_tables)
    return d_tables
