"""Scale-normalized Laplacian-of-Gaussian region detection.

The detector kernel (positive at the center, so bright-on-dark regions give
maxima) is

    k(x, y) = 1/(pi s^4) * (1 - (x^2 + y^2) / (2 s^2)) * exp(-(x^2+y^2)/(2 s^2))

and the scale-normalized response is the image convolved with ``s^2 * k``,
which makes peak responses comparable across scales.  Regions are the points
that are simultaneously strict local maxima of the response over space (3x3
neighborhood) and the adjacent scale levels.  A bright disk of radius r peaks
at scale s = r / sqrt(2).

``largest_region_bbox`` turns the biggest detected region into an axis-aligned
box: threshold at half the local intensity range inside a window of half-width
3 s around the blob, then take the connected component containing the blob
center.  Rotated boxes are deliberately not produced.

Everything here is a pure function over immutable arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage, signal

DEFAULT_THRESHOLD = 0.01


@dataclass(frozen=True)
class ScaleSpaceBlob:
    """A detected region: position (pixels), scale (Gaussian sigma), response.

    ``at_border`` flags blobs whose 3-sigma window exits the image.
    """

    x: int
    y: int
    sigma: float
    response: float
    at_border: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with top-left corner (x, y) and size (w, h), pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("bounding box must have positive size")

    @property
    def centroid(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def to_dict(self):
        d = asdict(self)
        d["centroid"] = list(self.centroid)
        return d


def log_kernel(sigma: float, radius: int) -> np.ndarray:
    """Detector kernel sampled at integer offsets; shape (2r+1, 2r+1).

    ``radius`` must cover at least 3 sigma.  The kernel is symmetric in x/y
    and sign flips, has value 1/(pi sigma^4) at the center, and vanishes on
    the ring x^2 + y^2 = 2 sigma^2.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(radius)
    if radius < math.ceil(3 * sigma):
        raise ValueError(f"radius {radius} below 3*sigma for sigma={sigma}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    r2 = xx * xx + yy * yy
    s2 = sigma * sigma
    return (1.0 / (math.pi * s2 * s2)) * (1.0 - r2 / (2.0 * s2)) \
        * np.exp(-r2 / (2.0 * s2))


def norm_log_response(img: np.ndarray, sigma: float) -> np.ndarray:
    """Scale-normalized response: image convolved with ``sigma^2 * kernel``.

    Borders use reflect padding; output has the input's shape.
    """
    img = np.asarray(img, dtype=np.float64)
    radius = math.ceil(3 * sigma)
    kern = log_kernel(sigma, radius) * (sigma * sigma)
    padded = np.pad(img, radius, mode="reflect")
    # kernel is symmetric, so convolution == correlation
    return signal.fftconvolve(padded, kern, mode="valid")


def geometric_sigmas(lo: float, hi: float, per_octave: int = 8) -> np.ndarray:
    """Geometric sigma grid from lo to hi with ``per_octave`` levels per octave."""
    if not (0 < lo < hi):
        raise ValueError("need 0 < lo < hi")
    n = int(math.ceil(per_octave * math.log2(hi / lo))) + 1
    return lo * (2.0 ** (np.arange(n) / per_octave))


def detect_blobs(img: np.ndarray, sigmas, threshold: float = DEFAULT_THRESHOLD):
    """Joint space/scale maxima of the normalized response volume.

    ``sigmas`` must be an ascending grid with at least 3 levels; the first and
    last level only serve as scale neighbors.  A point qualifies when its
    response is at least as large as all 26 neighbors in the 3x3x3 space-scale
    neighborhood and above ``threshold``.  The comparison is non-strict so
    that regions centered between pixels (whose 2x2 tied responses would
    otherwise cancel out) are still reported, one blob per tied pixel.
    Results are sorted by descending sigma, then descending response, then
    position.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.size < 3:
        raise ValueError("need at least 3 sigma levels for scale-local maxima")
    if np.any(np.diff(sigmas) <= 0):
        raise ValueError("sigmas must be strictly ascending")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    resp = np.stack([norm_log_response(img, s) for s in sigmas])

    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    neighbor_max = ndimage.maximum_filter(resp, footprint=footprint,
                                          mode="constant", cval=-np.inf)
    is_max = (resp >= neighbor_max) & (resp > threshold)
    is_max[0] = False
    is_max[-1] = False

    ks, ys, xs = np.nonzero(is_max)
    blobs = []
    for k, y, x in zip(ks, ys, xs):
        s = float(sigmas[k])
        win = 3.0 * s
        border = (x - win < 0 or x + win > w - 1 or
                  y - win < 0 or y + win > h - 1)
        blobs.append(ScaleSpaceBlob(int(x), int(y), s, float(resp[k, y, x]),
                                    at_border=bool(border)))
    blobs.sort(key=lambda b: (-b.sigma, -b.response, b.y, b.x))
    return blobs


def largest_region_bbox(img: np.ndarray, blobs) -> BoundingBox:
    """Straight bounding box of the largest detected region.

    Picks the maximal-sigma blob, thresholds the image at 50% of the local
    intensity range inside a window of half-width 3 sigma around it, and
    returns the box of the connected component (8-connected) containing the
    blob center.  The box is clamped to the image by construction.
    """
    if not blobs:
        raise ValueError("no region found")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    top = max(blobs, key=lambda b: (b.sigma, b.response))
    win = math.ceil(3 * top.sigma)
    r0, r1 = max(0, top.y - win), min(h, top.y + win + 1)
    c0, c1 = max(0, top.x - win), min(w, top.x + win + 1)
    sub = img[r0:r1, c0:c1]
    thr = 0.5 * (sub.min() + sub.max())
    mask = sub >= thr
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    center_label = labels[top.y - r0, top.x - c0]
    if center_label == 0:
        # blob center below threshold (rare); fall back to the largest component
        if n == 0:
            raise ValueError("no region found")
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
        center_label = 1 + int(np.argmax(sizes))
    rows, cols = np.nonzero(labels == center_label)
    x, y = c0 + cols.min(), r0 + rows.min()
    return BoundingBox(int(x), int(y), int(cols.max() - cols.min() + 1),
                       int(rows.max() - rows.min() + 1))


def blobs_to_json(blobs):
    return [b.to_dict() for b in blobs]
