"""PSNR and SSIM between normalized images, plus report/table plumbing.

PSNR is ``10 log10(MAX^2 / MSE)`` with MAX = 1 on [0, 1] images, averaged
over all pixels and channels.  Identical images (MSE = 0) are reported with
the 99 dB cap and flagged.

SSIM follows the standard windowed formulation: an 11x11 Gaussian window
(sigma 1.5), stabilizers C1 = 0.01^2 and C2 = 0.03^2 on unit range, local
statistics compared per window, averaged over all valid window positions and
channels.  The score lies in [-1, 1], 1 only for identical inputs.

Color images are scored per channel and averaged; pass ``grayscale=True`` to
convert (luma weights) first.  All functions are pure and symmetric.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

PSNR_CAP_DB = 99.0

_LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; capped at 99 for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()

_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _ssim_single(a, b, win) -> float:
    half = win.shape[0] // 2
    if min(a.shape) < win.shape[0]:
        raise ValueError("image smaller than the SSIM window")

    def filt(x):
        return signal.fftconvolve(x, win, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    # shared expressions keep ssim(a, a) exactly 1 in floating point
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_ab
    num = (2.0 * mu_ab + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def ssim(a, b, grayscale: bool = False) -> float:
    """Mean structural similarity; 1.0 exactly iff the inputs are identical."""
    a, b = _check_pair(a, b)
    win = _gaussian_window()
    if a.ndim == 2:
        return _ssim_single(a, b, win)
    if grayscale:
        return _ssim_single(a @ _LUMA, b @ _LUMA, win)
    scores = [_ssim_single(a[..., c], b[..., c], win) for c in range(a.shape[2])]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-view and aggregate scores for one pipeline arm on one scene."""

    scene: str
    label: str                  # "standard" | "optimized"
    protocol: str               # "holdout" | "novel"
    views: list = field(default_factory=list)

    def add_view(self, name: str, a, b) -> None:
        err = mse(a, b)
        self.views.append({"view": name, "psnr": psnr(a, b),
                           "ssim": ssim(a, b), "identical": err == 0.0})

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v["psnr"] for v in self.views]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v["ssim"] for v in self.views]))

    def to_dict(self) -> dict:
        return {"scene": self.scene, "label": self.label,
                "protocol": self.protocol, "views": self.views,
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        r = cls(d["scene"], d["label"], d["protocol"])
        r.views = list(d["views"])
        return r

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def relative_change_pct(old: float, new: float) -> float:
    if old == 0.0:
        return float("inf") if new != 0 else 0.0
    return 100.0 * (new - old) / old


COMPARISON_COLUMNS = ["scene", "protocol", "psnr_standard", "psnr_optimized",
                      "psnr_change_pct", "ssim_standard", "ssim_optimized",
                      "ssim_change_pct"]


def comparison_rows(standard: MetricReport, optimized: MetricReport) -> dict:
    if standard.scene != optimized.scene:
        raise ValueError("reports come from different scenes")
    if standard.protocol != optimized.protocol:
        raise ValueError("reports use different evaluation protocols")
    return {
        "scene": standard.scene,
        "protocol": standard.protocol,
        "psnr_standard": standard.mean_psnr,
        "psnr_optimized": optimized.mean_psnr,
        "psnr_change_pct": relative_change_pct(standard.mean_psnr,
                                               optimized.mean_psnr),
        "ssim_standard": standard.mean_ssim,
        "ssim_optimized": optimized.mean_ssim,
        "ssim_change_pct": relative_change_pct(standard.mean_ssim,
                                               optimized.mean_ssim),
    }


def format_comparison_table(rows) -> str:
    lines = ["%-16s %-8s %10s %10s %8s %8s %8s %8s" % (
        "scene", "protocol", "PSNR std", "PSNR opt", "dPSNR%",
        "SSIM std", "SSIM opt", "dSSIM%")]
    for r in rows:
        lines.append("%-16s %-8s %10.2f %10.2f %+7.0f%% %8.3f %8.3f %+7.0f%%" % (
            r["scene"], r["protocol"], r["psnr_standard"], r["psnr_optimized"],
            r["psnr_change_pct"], r["ssim_standard"], r["ssim_optimized"],
            r["ssim_change_pct"]))
    return "\n".join(lines)


def comparison_csv(rows, seed=None) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    writer = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS)
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in COMPARISON_COLUMNS})
    return buf.getvalue()
