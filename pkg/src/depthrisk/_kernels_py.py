"""numpy implementations of the compiled kernels (same signatures and results)."""
import numpy as np


def video_edge_weights(points, mask, alpha_d, alpha_m, eps, scale, squared):
    points = np.asarray(points, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    T, N, _ = points.shape

    vel = np.zeros_like(points)
    has_prev = np.zeros_like(mask)
    has_prev[1:] = mask[1:] & mask[:-1]
    vel[1:] = points[1:] - points[:-1]
    vel[~has_prev] = 0.0
    unit = vel / (np.linalg.norm(vel, axis=-1, keepdims=True) + eps)

    diff = (points[:, :, None, :] - points[:, None, :, :]) * np.asarray(scale)
    d = np.sum(diff * diff, axis=-1)
    if not squared:
        d = np.sqrt(d)
    m = np.linalg.norm(unit[:, :, None, :] - unit[:, None, :, :], axis=-1)
    q = alpha_d * d + alpha_m * m

    pair = mask[:, :, None] & mask[:, None, :] & ~np.eye(N, dtype=bool)
    q = np.where(pair, q, -np.inf)
    qmax = q.reshape(T, -1).max(axis=1)
    valid = mask.sum(axis=1) >= 2
    qmax = np.where(valid, qmax, 0.0)
    e = np.where(pair, np.exp(q - qmax[:, None, None]), 0.0)
    total = e.reshape(T, -1).sum(axis=1)
    total = np.where(valid, total, 1.0)
    return e / total[:, None, None]


def first_crossings(scores, thresholds):
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    running = np.maximum.accumulate(scores, axis=1)
    out = np.empty((scores.shape[0], thresholds.shape[0]), dtype=np.int64)
    for v in range(scores.shape[0]):
        idx = np.searchsorted(running[v], thresholds, side="left")
        out[v] = np.where(idx < scores.shape[1], idx + 1, 0)
    return out
