"""Independent per-axis smoother used as the reference for kalman_smooth."""

import numpy as np

from bleedtrack.pseudo import SPAN, KalmanConfig


def reference_smoother(z: np.ndarray, anchor: np.ndarray, cfg: KalmanConfig) -> np.ndarray:
    """Per-axis two-state filter and smoother. The constant-velocity axes decouple, so each
    coordinate is processed on its own with scalar gains.
    """
    n = len(z)
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    Qa = cfg.q * np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]])
    out = np.zeros((n, 2))
    for ax in range(2):
        m = np.array([z[0, ax], 0.0])
        P = np.diag([cfg.p0_pos, cfg.p0_vel])
        ms, Ps, mp, Pp_all = [m], [P], [None], [None]
        for t in range(1, n):
            mpred = A @ m
            Ppred = A @ P @ A.T + Qa
            mp.append(mpred)
            Pp_all.append(Ppred)
            if t < n - 1:
                y, r = z[t, ax], cfg.r
            else:
                mpred = np.array([z[t, ax], mpred[1]])
                y, r = anchor[ax], cfg.r_anchor
            s = Ppred[0, 0] + r
            k = Ppred[:, 0] / s
            m = mpred + k * (y - mpred[0])
            P = Ppred - np.outer(k, Ppred[0, :])
            ms.append(m)
            Ps.append(P)
        sm = ms[-1]
        out[-1, ax] = sm[0]
        for t in range(n - 2, -1, -1):
            G = Ps[t] @ A.T @ np.linalg.solve(Pp_all[t + 1], np.eye(2))
            sm = ms[t] + G @ (sm - mp[t + 1])
            out[t, ax] = sm[0]
    return out


def random_track(rng, n=SPAN + 1):
    v = rng.normal(0, 1, 2)
    base = rng.uniform(20, 100, 2) + np.arange(n)[:, None] * v
    z = base + rng.normal(0, 1.5, (n, 2))
    anchor = base[-1] + rng.normal(0, 3, 2)
    return z, anchor
