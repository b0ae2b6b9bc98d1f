"""Depth lifting and collision-graph construction.

Objects are lifted to ``(cx, cy, depth)`` from their box centers, pairs are
scored by a mix of squared distance and motion-direction divergence, and
the scores are softmax-normalized over all present ordered pairs of a
frame. The 2D variant drops the depth coordinate and is otherwise
identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels

MODES = ("3d", "2d")


class GeometryError(ValueError):
    """Invalid geometric input (padded box, center outside the depth grid...)."""


class DepthMissingError(GeometryError):
    """A 3D graph was requested for a sample that carries no depth maps."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)

    @property
    def is_sentinel(self) -> bool:
        return self.x1 == self.y1 == self.x2 == self.y2 == -1.0


class Point3D(NamedTuple):
    cx: float
    cy: float
    z: float


@dataclass(frozen=True)
class EdgeWeightConfig:
    """Mixing weights for the distance and motion terms of an edge."""

    alpha_d: float = 0.6
    alpha_m: float = 0.4
    coordinate_scaling: tuple = (1.0, 1.0, 1.0)
    epsilon: float = 1e-8
    squared: bool = True

    def __post_init__(self):
        if self.alpha_d < 0 or self.alpha_m < 0:
            raise ValueError("alpha_d and alpha_m must be nonnegative")
        if abs(self.alpha_d + self.alpha_m - 1.0) > 1e-9:
            raise ValueError(f"alpha_d + alpha_m must equal 1, got {self.alpha_d + self.alpha_m}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if len(self.coordinate_scaling) != 3:
            raise ValueError("coordinate_scaling needs three factors (x, y, z)")
        object.__setattr__(self, "coordinate_scaling",
                           tuple(float(s) for s in self.coordinate_scaling))


@dataclass
class CollisionGraph:
    node_features: np.ndarray  # (N, 2D), zero rows for absent objects
    mask: np.ndarray  # (N,) bool
    edges: list = field(default_factory=list)
    weights: Optional[np.ndarray] = None  # (N, N)

    @property
    def is_empty(self) -> bool:
        return not self.edges


def box_center(box) -> tuple:
    if not isinstance(box, BoundingBox):
        box = BoundingBox.from_array(box)
    if box.is_sentinel or not (box.x1 < box.x2 and box.y1 < box.y2):
        raise GeometryError(f"cannot take the center of a padded or degenerate box {box}")
    return (box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0


def _pixel_index(c: float) -> int:
    # round half up, not half to even
    return int(math.floor(c + 0.5))


def lift_to_3d(box, depth: np.ndarray) -> Point3D:
    """Center of ``box`` plus the depth sampled at the nearest pixel."""
    cx, cy = box_center(box)
    height, width = depth.shape
    ix, iy = _pixel_index(cx), _pixel_index(cy)
    if not (0 <= ix < width and 0 <= iy < height):
        raise GeometryError(f"box center ({cx}, {cy}) lies outside the {width}x{height} depth grid")
    return Point3D(cx, cy, float(depth[iy, ix]))


def pair_distance(a, b, cfg: EdgeWeightConfig = EdgeWeightConfig()) -> float:
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    diff = diff * np.asarray(cfg.coordinate_scaling)
    if not np.all(np.isfinite(diff)):
        raise GeometryError("pair_distance needs finite points")
    sq = float(np.dot(diff, diff))
    return sq if cfg.squared else math.sqrt(sq)


def velocity(current, previous) -> tuple:
    """Frame-to-frame displacement and whether a previous position existed."""
    if previous is None:
        return np.zeros(3), False
    return np.asarray(current, dtype=np.float64) - np.asarray(previous, dtype=np.float64), True


def motion_difference(v_i, v_j, epsilon: float = 1e-8) -> float:
    u_i = np.asarray(v_i, dtype=np.float64)
    u_j = np.asarray(v_j, dtype=np.float64)
    u_i = u_i / (np.linalg.norm(u_i) + epsilon)
    u_j = u_j / (np.linalg.norm(u_j) + epsilon)
    return float(np.linalg.norm(u_i - u_j))


def edge_weight(d: float, m: float, cfg: EdgeWeightConfig = EdgeWeightConfig()) -> float:
    return cfg.alpha_d * d + cfg.alpha_m * m


def normalize_weights(Q: np.ndarray, mask) -> np.ndarray:
    """Softmax of raw edge scores over present ordered pairs (i != j)."""
    Q = np.asarray(Q, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = len(mask)
    pair = mask[:, None] & mask[None, :] & ~np.eye(n, dtype=bool)
    W = np.zeros((n, n))
    if mask.sum() < 2:
        return W
    q = Q[pair]
    if not np.all(np.isfinite(q)):
        raise GeometryError("raw edge weights must be finite on present pairs")
    e = np.exp(q - q.max())
    W[pair] = e / e.sum()
    return W


def raw_edge_weights(points, velocities, mask, cfg: EdgeWeightConfig = EdgeWeightConfig()) -> np.ndarray:
    """Matrix of q_ij = alpha_d * d_ij + alpha_m * m_ij for one frame."""
    n = len(mask)
    Q = np.zeros((n, n))
    for i in range(n):
        if not mask[i]:
            continue
        for j in range(n):
            if i == j or not mask[j]:
                continue
            d = pair_distance(points[i], points[j], cfg)
            m = motion_difference(velocities[i], velocities[j], cfg.epsilon)
            Q[i, j] = edge_weight(d, m, cfg)
    return Q


def frame_points(frame, mode: str = "3d") -> np.ndarray:
    """(N, 3) lifted positions of one frame; absent slots are zero."""
    _check_mode(mode)
    n = len(frame.presence_mask)
    pts = np.zeros((n, 3))
    if mode == "3d" and frame.depth is None:
        raise DepthMissingError("3D collision graph requested but the sample has no depth maps")
    for i in range(n):
        if not frame.presence_mask[i]:
            continue
        if mode == "3d":
            pts[i] = lift_to_3d(frame.boxes[i], frame.depth)
        else:
            pts[i, :2] = box_center(frame.boxes[i])
    return pts


def build_graph(frame, prev=None, context_vec=None, mode: str = "3d",
                cfg: EdgeWeightConfig = EdgeWeightConfig()) -> CollisionGraph:
    """Collision graph of one frame.

    ``prev`` is the previous frame (or None at the start of a video); an
    object absent from ``prev`` gets a zero velocity.
    """
    mask = np.asarray(frame.presence_mask, dtype=bool)
    pts = frame_points(frame, mode)
    prev_pts = frame_points(prev, mode) if prev is not None else None

    vels = np.zeros_like(pts)
    for i in np.flatnonzero(mask):
        if prev_pts is not None and prev.presence_mask[i]:
            vels[i], _ = velocity(pts[i], prev_pts[i])

    objects = np.asarray(frame.object_features, dtype=np.float64)
    if context_vec is None:
        context_vec = frame.context_feature
    context = np.broadcast_to(np.asarray(context_vec, dtype=np.float64), (len(mask), objects.shape[1]))
    nodes = np.concatenate([context, objects], axis=1) * mask[:, None]

    W = normalize_weights(raw_edge_weights(pts, vels, mask, cfg), mask)
    present = np.flatnonzero(mask)
    edges = [(int(i), int(j)) for i in present for j in present if i != j] if len(present) >= 2 else []
    return CollisionGraph(node_features=nodes, mask=mask, edges=edges, weights=W)


def lift_video(boxes: np.ndarray, mask: np.ndarray, depth: Optional[np.ndarray],
               mode: str = "3d") -> np.ndarray:
    """Vectorized lifting of a whole video: (T, N, 4) boxes -> (T, N, 3) points."""
    _check_mode(mode)
    boxes = np.asarray(boxes, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    pts = np.zeros(boxes.shape[:2] + (3,))
    if not mask.any():
        return pts
    b = boxes[mask]
    if np.any((b[:, 0] >= b[:, 2]) | (b[:, 1] >= b[:, 3])):
        raise GeometryError("present object with a padded or degenerate box")
    cx = (b[:, 0] + b[:, 2]) / 2.0
    cy = (b[:, 1] + b[:, 3]) / 2.0
    pts[mask, 0] = cx
    pts[mask, 1] = cy
    if mode == "2d":
        return pts
    if depth is None:
        raise DepthMissingError("3D collision graph requested but the sample has no depth maps")
    T, height, width = depth.shape
    ix = np.floor(cx + 0.5).astype(np.int64)
    iy = np.floor(cy + 0.5).astype(np.int64)
    if np.any((ix < 0) | (ix >= width) | (iy < 0) | (iy >= height)):
        raise GeometryError("box center lies outside the depth grid")
    t_idx = np.nonzero(mask)[0]
    pts[mask, 2] = depth[t_idx, iy, ix]
    return pts


def video_weights(sample, mode: str = "3d", cfg: EdgeWeightConfig = EdgeWeightConfig(),
                  backend: Optional[str] = None) -> np.ndarray:
    """(T, N, N) normalized weights for every frame of a sample."""
    pts = lift_video(sample.boxes, sample.mask, sample.depth, mode)
    return kernels.video_edge_weights(pts, sample.mask, cfg.alpha_d, cfg.alpha_m, cfg.epsilon,
                                      cfg.coordinate_scaling, cfg.squared, backend=backend)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
