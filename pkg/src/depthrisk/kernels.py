"""Backend selection for the hot loops.

The compiled extension is used when it was built; set
``DEPTHRISK_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("DEPTHRISK_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        _impl = _compiled


def video_edge_weights(points, mask, alpha_d=0.6, alpha_m=0.4, eps=1e-8,
                       scale=(1.0, 1.0, 1.0), squared=True, backend=None):
    """Normalized collision-graph weights for every frame of one video.

    points: (T, N, 3) lifted object positions; mask: (T, N) presence.
    Returns a (T, N, N) array; frames with fewer than two present
    objects are all zero.
    """
    impl = _select(backend)
    points = np.ascontiguousarray(points, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    scale = np.ascontiguousarray(scale, dtype=np.float64)
    if impl is _kernels_py:
        mask = mask.astype(bool)
    return impl.video_edge_weights(points, mask, float(alpha_d), float(alpha_m),
                                   float(eps), scale, bool(squared))


def first_crossings(scores, thresholds, backend=None):
    """1-based index of the first frame with score >= threshold, 0 if none.

    scores: (V, T); thresholds: (K,). Returns (V, K) int64.
    """
    impl = _select(backend)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    return impl.first_crossings(scores, thresholds)


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "compiled":
        if BACKEND != "compiled":
            raise RuntimeError("compiled kernels are not available in this install")
        return _impl
    raise ValueError(f"unknown backend {backend!r}")
