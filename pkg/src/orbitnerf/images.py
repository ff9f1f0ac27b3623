"""8-bit PNG I/O for the float images used everywhere else.

Internal math works on normalized float arrays: grayscale ``(H, W)`` or RGB
``(H, W, 3)`` with values in [0, 1].  PNG writes quantize to 8 bits; an
optional text chunk records the run seed so every emitted artifact carries it.
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def validate_image(img: np.ndarray) -> None:
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) array, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray, seed=None) -> None:
    arr = to_uint8(img)
    pil = Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB")
    info = PngInfo()
    if seed is not None:
        info.add_text("seed", str(seed))
    pil.save(path, format="PNG", pnginfo=info)


def load_png(path) -> np.ndarray:
    """Read a PNG back to float [0, 1]; grayscale stays (H, W)."""
    pil = Image.open(path)
    if pil.mode == "L":
        return np.asarray(pil, dtype=np.float64) / 255.0
    return np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
