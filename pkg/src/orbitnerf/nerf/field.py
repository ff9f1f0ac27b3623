"""The radiance field MLP and the volume rendering quadrature.

The field maps an encoded position (plus view direction) to an emitted color
and a volume density.  The density trunk sees only the positional encoding;
the color head sees the trunk's geometry features concatenated with the view
direction, so density is view-independent by construction:

    h1    = relu(enc @ W1 + b1)
    s, g  = split(h1 @ W2 + b2)      # raw density + geometry features
    sigma = elu(s) + 1               # >= 0, smooth
    h3    = relu([g, view] @ W3 + b3)
    color = sigmoid(h3 @ W4 + b4)

The color output layer starts at zero, so an untrained field emits 0.5 gray.

Rendering composites stratified samples t_i in [near, far] front to back:

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i
    color   = sum w_i c_i + (1 - sum w_i) * background

with delta_i the gap to the next sample (the last sample's gap runs to far).
The weights always satisfy 0 <= sum w_i <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import HashGridConfig, encode, encode_backward


@dataclass
class MlpParams:
    """Trainable weights of the density trunk and color head."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray

    ARRAY_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")

    def arrays(self):
        return {name: getattr(self, name) for name in self.ARRAY_NAMES}

    @property
    def geo_features(self) -> int:
        return self.W2.shape[1] - 1


def init_mlp(cfg: HashGridConfig, rng, hidden: int = 64,
             geo_features: int = 15, density_bias: float = 0.5,
             dtype=np.float64) -> MlpParams:
    """He-style initialization; color output layer zeroed so the untrained
    field emits 0.5; ``density_bias`` sets the initial fog level."""
    enc_dim = cfg.levels * cfg.features

    def he(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out)).astype(dtype)

    b2 = np.zeros(1 + geo_features, dtype=dtype)
    b2[0] = density_bias
    return MlpParams(
        W1=he(enc_dim, hidden), b1=np.zeros(hidden, dtype=dtype),
        W2=he(hidden, 1 + geo_features), b2=b2,
        W3=he(geo_features + cfg.aux_dim, hidden), b3=np.zeros(hidden, dtype=dtype),
        W4=np.zeros((hidden, 3), dtype=dtype), b4=np.zeros(3, dtype=dtype),
    )


def elu_plus_one(s):
    """Shifted exponential-linear: exp(s) below zero, s + 1 above; >= 0."""
    return np.where(s >= 0, s + 1.0, np.exp(np.minimum(s, 0.0)))


def _elu_plus_one_grad(s):
    return np.where(s >= 0, 1.0, np.exp(np.minimum(s, 0.0)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def mlp_forward(enc, mlp: MlpParams, aux_dim: int):
    """Returns (color (B,3), sigma (B,), cache) for encoded inputs."""
    grid_part = enc[:, :enc.shape[1] - aux_dim]
    xi = enc[:, enc.shape[1] - aux_dim:]
    z1 = grid_part @ mlp.W1 + mlp.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ mlp.W2 + mlp.b2
    sraw = z2[:, 0]
    geo = z2[:, 1:]
    sigma = elu_plus_one(sraw)
    u = np.concatenate([geo, xi], axis=1)
    z3 = u @ mlp.W3 + mlp.b3
    h3 = np.maximum(z3, 0.0)
    z4 = h3 @ mlp.W4 + mlp.b4
    color = _sigmoid(z4)
    cache = (grid_part, z1, h1, sraw, u, z3, h3, color)
    return color, sigma, cache


def mlp_backward(cache, d_color, d_sigma, mlp: MlpParams):
    """Gradients of the loss w.r.t. all MLP weights and the grid encoding."""
    grid_part, z1, h1, sraw, u, z3, h3, color = cache
    dz4 = d_color * color * (1.0 - color)
    dW4 = h3.T @ dz4
    db4 = dz4.sum(axis=0)
    dh3 = dz4 @ mlp.W4.T
    dz3 = dh3 * (z3 > 0)
    dW3 = u.T @ dz3
    db3 = dz3.sum(axis=0)
    du = dz3 @ mlp.W3.T
    geo_dim = mlp.W2.shape[1] - 1
    dz2 = np.empty((grid_part.shape[0], 1 + geo_dim), dtype=grid_part.dtype)
    dz2[:, 0] = d_sigma * _elu_plus_one_grad(sraw)
    dz2[:, 1:] = du[:, :geo_dim]
    dW2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ mlp.W2.T
    dz1 = dh1 * (z1 > 0)
    dW1 = grid_part.T @ dz1
    db1 = dz1.sum(axis=0)
    d_enc_grid = dz1 @ mlp.W1.T
    grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2,
             "W3": dW3, "b3": db3, "W4": dW4, "b4": db4}
    return grads, d_enc_grid


def field_eval(x, view_dir, tables, mlp: MlpParams, cfg: HashGridConfig,
               oob: str = "clamp"):
    """Evaluate the field at unit-cube positions: returns (color, sigma)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    view_dir = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    if view_dir.shape[0] == 1 and x.shape[0] > 1:
        view_dir = np.broadcast_to(view_dir, (x.shape[0], view_dir.shape[1]))
    enc = encode(x, tables, cfg, aux=view_dir, oob=oob)
    color, sigma, _ = mlp_forward(enc, mlp, cfg.aux_dim)
    return color, sigma


# ---------------------------------------------------------------------------
# quadrature


def sample_ts(near, far, n_samples: int, rng=None):
    """Stratified sample positions, (R, S).  Midpoints when ``rng`` is None
    (deterministic rendering), uniform jitter inside each bin otherwise."""
    near = np.atleast_1d(np.asarray(near))
    far = np.atleast_1d(np.asarray(far))
    if not np.issubdtype(near.dtype, np.floating):
        near = near.astype(np.float64)
    far = far.astype(near.dtype)
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    span = (far - near)[:, None]
    bins = np.arange(n_samples, dtype=near.dtype)[None, :]
    if rng is None:
        u = np.full((near.shape[0], n_samples), 0.5, dtype=near.dtype)
    else:
        u = rng.random((near.shape[0], n_samples)).astype(near.dtype)
    return near[:, None] + span * (bins + u) / n_samples


def composite(sigma, color, ts, far, bg):
    """Front-to-back compositing.  Returns (pixel (R,3), opacity (R,), cache)."""
    far = np.atleast_1d(np.asarray(far, dtype=sigma.dtype))
    ts = np.asarray(ts, dtype=sigma.dtype)
    bg = np.asarray(bg, dtype=sigma.dtype)
    delta = np.diff(ts, axis=1)
    delta = np.concatenate([delta, (far[:, None] - ts[:, -1:])], axis=1)
    delta = np.maximum(delta, 0.0)
    sd = sigma * delta
    one_minus_alpha = np.exp(-sd)
    alpha = 1.0 - one_minus_alpha
    # exclusive cumulative product: transmittance before each sample
    trans = np.cumprod(one_minus_alpha, axis=1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    weights = trans * alpha
    opacity = weights.sum(axis=1)
    pixel = (weights[:, :, None] * color).sum(axis=1) + (1.0 - opacity)[:, None] * bg
    cache = (delta, one_minus_alpha, trans, weights, color, bg)
    return pixel, opacity, cache


def composite_backward(cache, d_pixel):
    """Gradients of the loss w.r.t. per-sample sigma and color.

    ``d_pixel`` is (R, 3).  Returns (d_sigma (R,S), d_color (R,S,3)).
    """
    delta, one_minus_alpha, trans, weights, color, bg = cache
    d_color = weights[:, :, None] * d_pixel[:, None, :]
    # dL/dw_i = d_pixel . (c_i - bg)
    d_w = ((color - bg) * d_pixel[:, None, :]).sum(axis=2)
    # dL/dalpha_i = T_i dw_i - (sum_{j>i} w_j dw_j) / (1 - alpha_i)
    wd = weights * d_w
    suffix = np.cumsum(wd[:, ::-1], axis=1)[:, ::-1] - wd
    safe = np.maximum(one_minus_alpha, 1e-12)
    d_alpha = trans * d_w - suffix / safe
    d_sigma = d_alpha * delta * one_minus_alpha
    return d_sigma, d_color


def volume_render(origin, direction, near, far, n_samples: int, field,
                  bg=(0.0, 0.0, 0.0), rng=None, cfg: HashGridConfig = None,
                  tables=None, mlp=None):
    """Render rays through a field: returns (color (R,3), opacity (R,)).

    ``field`` is either a callable ``(x, view_dir) -> (color, sigma)`` or a
    :class:`~orbitnerf.nerf.training.RadianceField`.  Rays with
    ``near >= far`` produce the background with zero opacity.
    """
    origin = np.atleast_2d(np.asarray(origin, dtype=np.float64))
    direction = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if near.shape != far.shape:
        raise ValueError("near and far must have the same shape")
    bg = np.asarray(bg, dtype=np.float64)
    n = origin.shape[0]
    out_color = np.tile(bg, (n, 1))
    out_opacity = np.zeros(n)
    hit = near < far
    if not np.any(hit):
        return out_color, out_opacity
    ts = sample_ts(near[hit], far[hit], n_samples, rng)
    o = origin[hit]
    d = direction[hit]
    pts = o[:, None, :] + ts[:, :, None] * d[:, None, :]
    flat = pts.reshape(-1, 3)
    dirs = np.repeat(d, n_samples, axis=0)
    if callable(field):
        color, sigma = field(flat, dirs)
    else:
        color, sigma = field.eval(flat, dirs)
    color = color.reshape(-1, n_samples, 3)
    sigma = sigma.reshape(-1, n_samples)
    pixel, opacity, _ = composite(sigma, color, ts, far[hit], bg)
    out_color[hit] = pixel
    out_opacity[hit] = opacity
    return out_color, out_opacity
