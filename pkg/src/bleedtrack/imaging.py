"""Small image utilities shared by the generator and the models."""

from __future__ import annotations

import cv2
import numpy as np


def red_score(image: np.ndarray) -> np.ndarray:
    """Red prior in [0, 1]: ``(R/255) * max(0, R - max(G, B)) / 255``.

    Achromatic pixels score 0; saturated red scores 1.
    """
    img = np.asarray(image, dtype=np.float32)
    r = img[..., 0]
    gb = np.maximum(img[..., 1], img[..., 2])
    return (r / 255.0) * np.maximum(0.0, r - gb) / 255.0


def limit_red(image: np.ndarray, max_score: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Lower the R channel so ``red_score`` stays at or below ``max_score``.

    Only pixels where ``mask`` is true are touched. Works on uint8 images.
    """
    img = image.astype(np.float32)
    m = np.maximum(img[..., 1], img[..., 2])
    # largest R with (R/255)(R-m)/255 <= s:  R^2 - mR - s*255^2 <= 0
    r_max = np.floor((m + np.sqrt(m * m + 4.0 * max_score * 255.0 ** 2)) / 2.0)
    over = img[..., 0] > r_max
    if mask is not None:
        over &= mask
    out = image.copy()
    out[..., 0] = np.where(over, r_max, img[..., 0]).astype(np.uint8)
    return out


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """HSV with every channel scaled to [0, 1]."""
    hsv = cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2HSV_FULL).astype(np.float32)
    return hsv / 255.0


def hsv_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Absolute HSV difference, with hue treated as circular."""
    d = np.abs(a - b)
    d[..., 0] = np.minimum(d[..., 0], 1.0 - d[..., 0])
    return d


def to_gray(image: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2GRAY)


def pool(x: np.ndarray, stride: int, op: str = "mean") -> np.ndarray:
    """Non-overlapping ``stride`` x ``stride`` pooling of an HxWxC array (edges cropped)."""
    h, w = x.shape[0] // stride, x.shape[1] // stride
    x = x[: h * stride, : w * stride]
    if op == "mean" and x.dtype == np.float32:
        out = cv2.resize(x, (w, h), interpolation=cv2.INTER_AREA)
        return out.reshape(h, w, *x.shape[2:])
    x = x.reshape(h, stride, w, stride, *x.shape[2:])
    return x.max(axis=(1, 3)) if op == "max" else x.mean(axis=(1, 3))
