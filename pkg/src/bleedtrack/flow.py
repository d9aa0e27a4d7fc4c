"""Optical flow backends.

``block_flow`` is a coarse-to-fine block matcher: at each pyramid level the
second image is warped by the current estimate, a small integer search picks
the best residual shift per pixel (SSD over a box window), and a parabola fit
gives the sub-pixel part. A few dense Lucas-Kanade iterations finish it off. It is dense, deterministic and cheap at desk
resolutions. ``lk_points`` wraps OpenCV's pyramidal Lucas-Kanade for sparse
point propagation.
"""

from __future__ import annotations

from typing import Callable

import cv2
import numpy as np

from .imaging import to_gray

FlowFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _gray_f32(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        image = to_gray(image)
    return image.astype(np.float32)


def highpass(gray: np.ndarray, sigma: float) -> np.ndarray:
    """Subtract a Gaussian local mean; static shading (vignette, flicker) would otherwise bias flow to zero."""
    g = gray.astype(np.float32)
    return g - cv2.GaussianBlur(g, (0, 0), sigma)


def _refine(a: np.ndarray, b: np.ndarray, flow: np.ndarray, radius: int, window: int) -> np.ndarray:
    h, w = a.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    warped = cv2.remap(b, gx + flow[..., 0], gy + flow[..., 1], cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_REPLICATE)
    pad = cv2.copyMakeBorder(warped, radius, radius, radius, radius, cv2.BORDER_REPLICATE)
    side = 2 * radius + 1
    cost = np.empty((side, side, h, w), np.float32)
    for j in range(side):
        for i in range(side):
            d = a - pad[j:j + h, i:i + w]
            cost[j, i] = cv2.boxFilter(d * d, -1, (window, window), normalize=True,
                                       borderType=cv2.BORDER_REFLECT)
    flat = cost.reshape(side * side, h, w)
    best = np.argmin(flat, axis=0)
    by, bx = np.divmod(best, side)

    def sub(c_minus, c0, c_plus):
        den = c_minus - 2 * c0 + c_plus
        off = np.where(den > 1e-6, 0.5 * (c_minus - c_plus) / np.maximum(den, 1e-6), 0.0)
        return np.clip(off, -0.5, 0.5)

    yy, xx = np.mgrid[0:h, 0:w]
    c0 = cost[by, bx, yy, xx]
    sx = np.zeros((h, w), np.float32)
    sy = np.zeros((h, w), np.float32)
    inner_x = (bx > 0) & (bx < side - 1)
    inner_y = (by > 0) & (by < side - 1)
    bxm, bxp = np.clip(bx - 1, 0, side - 1), np.clip(bx + 1, 0, side - 1)
    bym, byp = np.clip(by - 1, 0, side - 1), np.clip(by + 1, 0, side - 1)
    sx[inner_x] = sub(cost[by, bxm, yy, xx], c0, cost[by, bxp, yy, xx])[inner_x]
    sy[inner_y] = sub(cost[bym, bx, yy, xx], c0, cost[byp, bx, yy, xx])[inner_y]
    step = np.stack([bx - radius + sx, by - radius + sy], axis=-1).astype(np.float32)
    return flow + step


def _polish(a: np.ndarray, b: np.ndarray, flow: np.ndarray, window: int, iters: int) -> np.ndarray:
    """Dense Lucas-Kanade steps on top of the integer search; removes pixel-locking bias.

    The window is Gaussian, not a box: each step subtracts a window-filtered copy of
    the flow error, and the negative lobes of a box response make per-pixel noise grow.
    """
    h, w = a.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    ix = cv2.Sobel(a, cv2.CV_32F, 1, 0, ksize=3) / 8.0
    iy = cv2.Sobel(a, cv2.CV_32F, 0, 1, ksize=3) / 8.0
    box = lambda m: cv2.GaussianBlur(m, (0, 0), window / 4.0, borderType=cv2.BORDER_REFLECT)
    sxx, sxy, syy = box(ix * ix), box(ix * iy), box(iy * iy)
    det = sxx * syy - sxy * sxy
    good = det > 1e-3
    det = np.where(good, det, 1.0)
    flow = np.dstack([box(flow[..., 0]), box(flow[..., 1])])
    for _ in range(iters):
        warped = cv2.remap(b, gx + flow[..., 0], gy + flow[..., 1], cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_REPLICATE)
        it = warped - a
        bx, by = box(ix * it), box(iy * it)
        du = -(syy * bx - sxy * by) / det
        dv = -(sxx * by - sxy * bx) / det
        step = np.stack([np.where(good, np.clip(du, -1, 1), 0), np.where(good, np.clip(dv, -1, 1), 0)], -1)
        flow = flow + step.astype(np.float32)
    return flow


def block_flow(prev: np.ndarray, curr: np.ndarray, levels: int = 3, radius: int = 2,
               window: int = 15, polish: int = 3, highpass_sigma: float = 3.0) -> np.ndarray:
    """Dense flow ``prev -> curr`` as an HxWx2 float32 array of (dx, dy).

    A pixel at ``p`` in ``prev`` is found near ``p + flow[p]`` in ``curr``.
    """
    a, b = _gray_f32(prev), _gray_f32(curr)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if highpass_sigma > 0:
        a, b = highpass(a, highpass_sigma), highpass(b, highpass_sigma)
    pyr_a, pyr_b = [a], [b]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 16:
            break
        pyr_a.append(cv2.pyrDown(pyr_a[-1]))
        pyr_b.append(cv2.pyrDown(pyr_b[-1]))
    flow = np.zeros((*pyr_a[-1].shape, 2), np.float32)
    for lvl in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[lvl], pyr_b[lvl]
        if flow.shape[:2] != la.shape:
            flow = 2.0 * cv2.resize(flow, (la.shape[1], la.shape[0]), interpolation=cv2.INTER_LINEAR)
        flow = _refine(la, lb, flow, radius, window)
    return _polish(a, b, flow, window, polish) if polish else flow


def sample_flow(flow: np.ndarray, xy) -> np.ndarray:
    """Bilinear lookup of a dense flow field at sub-pixel ``(x, y)``."""
    h, w = flow.shape[:2]
    x = float(np.clip(xy[0], 0, w - 1))
    y = float(np.clip(xy[1], 0, h - 1))
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = (1 - fx) * flow[y0, x0] + fx * flow[y0, x1]
    bot = (1 - fx) * flow[y1, x0] + fx * flow[y1, x1]
    return ((1 - fy) * top + fy * bot).astype(float)


LK_PARAMS = dict(winSize=(15, 15), maxLevel=3,
                 criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01))


def lk_image(image: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """8-bit high-passed gray image, the input ``lk_points`` expects."""
    if image.ndim == 2 and image.dtype == np.uint8 and sigma <= 0:
        return image
    g = _gray_f32(image)
    if sigma > 0:
        g = 3.0 * highpass(g, sigma) + 128.0
    return np.clip(g, 0, 255).astype(np.uint8)


def lk_points(prev: np.ndarray, curr: np.ndarray, points: np.ndarray,
              max_error: float = 30.0, highpass_sigma: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Move ``points`` (n, 2) from ``prev`` to ``curr``. Returns (new_points, ok mask)."""
    pts = np.asarray(points, np.float32).reshape(-1, 1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros(0, bool)
    g0 = lk_image(prev, highpass_sigma)
    g1 = lk_image(curr, highpass_sigma)
    nxt, status, err = cv2.calcOpticalFlowPyrLK(g0, g1, pts, None, **LK_PARAMS)
    ok = (status.ravel() == 1) & (err.ravel() < max_error) & np.all(np.isfinite(nxt.reshape(-1, 2)), 1)
    return nxt.reshape(-1, 2).astype(float), ok
