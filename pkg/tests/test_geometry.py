import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthrisk import geometry, kernels
from depthrisk.geometry import BoundingBox, EdgeWeightConfig, Point3D
from depthrisk.scenekit import FrameObservation

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def test_box_center_examples():
    assert geometry.box_center(BoundingBox(10, 20, 30, 60)) == (20, 40)
    assert geometry.box_center((0, 0, 100, 100)) == (50, 50)
    with pytest.raises(geometry.GeometryError):
        geometry.box_center((-1, -1, -1, -1))


def test_lift_to_3d_examples():
    depth = np.zeros((50, 30))
    depth[40, 20] = 7.5
    assert geometry.lift_to_3d((10, 20, 30, 60), depth) == Point3D(20, 40, 7.5)
    uniform = np.full((50, 30), 3.0)
    assert geometry.lift_to_3d((1, 2, 5, 9), uniform).z == 3.0
    X = 30
    with pytest.raises(geometry.GeometryError):
        geometry.lift_to_3d((X + 4, 9, X + 6, 11), uniform)


def test_lift_rounds_half_up():
    depth = np.arange(4 * 4, dtype=float).reshape(4, 4)
    # center (1.5, 2.5) -> pixel (2, 3)
    assert geometry.lift_to_3d((1, 2, 2, 3), depth).z == depth[3, 2]


def test_pair_distance_examples():
    assert geometry.pair_distance((0, 0, 0), (3, 4, 0)) == 25
    assert geometry.pair_distance((1, 2, 3), (1, 2, 3)) == 0
    cfg = EdgeWeightConfig(coordinate_scaling=(1, 1, 10))
    assert geometry.pair_distance((0, 0, 0), (0, 0, 1), cfg) == pytest.approx(100)
    plain = EdgeWeightConfig(squared=False)
    assert geometry.pair_distance((0, 0, 0), (3, 4, 0), plain) == 5


def test_velocity_examples():
    v, ok = geometry.velocity((13, 14, 5), (10, 10, 5))
    assert ok and tuple(v) == (3, 4, 0)
    v, ok = geometry.velocity((1, 1, 1), (1, 1, 1))
    assert ok and not v.any()
    v, ok = geometry.velocity((1, 1, 1), None)
    assert not ok and not v.any()


def test_motion_difference_examples():
    assert geometry.motion_difference((1, 0, 0), (0, 1, 0), 1e-12) == pytest.approx(math.sqrt(2))
    assert geometry.motion_difference((2, 3, 1), (2, 3, 1)) == pytest.approx(0, abs=1e-12)
    assert geometry.motion_difference((2, 0, 0), (-2, 0, 0), 1e-12) == pytest.approx(2)
    assert geometry.motion_difference((0, 0, 0), (0, 0, 0)) == 0


def test_edge_weight_examples():
    assert geometry.edge_weight(25, math.sqrt(2)) == pytest.approx(15.565685424949238)
    assert geometry.edge_weight(7.0, 3.0, EdgeWeightConfig(alpha_d=1.0, alpha_m=0.0)) == 7.0
    assert geometry.edge_weight(0, 0) == 0


def test_edge_config_validation():
    with pytest.raises(ValueError):
        EdgeWeightConfig(alpha_d=0.5, alpha_m=0.4)
    with pytest.raises(ValueError):
        EdgeWeightConfig(epsilon=0)


def test_normalize_weights_examples():
    mask = np.array([True, True])
    W = geometry.normalize_weights(np.array([[0, 1.3], [1.3, 0]]), mask)
    assert W[0, 1] == pytest.approx(0.5) and W[1, 0] == pytest.approx(0.5)
    Q = np.array([[0, 0.0], [math.log(3), 0]])
    W = geometry.normalize_weights(Q, mask)
    assert W[0, 1] == pytest.approx(0.25) and W[1, 0] == pytest.approx(0.75)
    W = geometry.normalize_weights(np.zeros((3, 3)), np.array([True, False, False]))
    assert not W.any()


def _frame(boxes, mask, depth=None, D=2):
    n = len(mask)
    return FrameObservation(np.ones(D), np.arange(n * D, dtype=float).reshape(n, D),
                            np.asarray(boxes, dtype=float), np.asarray(mask), depth)


def test_build_graph_three_objects():
    depth = np.full((40, 40), 5.0)
    f = _frame([(0, 0, 4, 4), (10, 10, 14, 14), (20, 5, 24, 9), (-1, -1, -1, -1)],
               [True, True, True, False], depth)
    g = geometry.build_graph(f, mode="3d")
    assert len(g.edges) == 6
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert not g.weights[3].any() and not g.weights[:, 3].any()
    assert np.all(np.diag(g.weights) == 0)
    # nodes are context ++ object features, zero for absent slots
    assert g.node_features.shape == (4, 4)
    assert not g.node_features[3].any()


def test_build_graph_single_object_is_empty():
    f = _frame([(0, 0, 4, 4), (-1, -1, -1, -1)], [True, False], np.ones((10, 10)))
    g = geometry.build_graph(f)
    assert g.is_empty and not g.weights.any()


def test_build_graph_depth_free_3d_errors():
    f = _frame([(0, 0, 4, 4), (5, 5, 8, 8)], [True, True], None)
    with pytest.raises(geometry.DepthMissingError):
        geometry.build_graph(f, mode="3d")
    assert geometry.build_graph(f, mode="2d").weights.sum() == pytest.approx(1.0)


def test_trap_pair_distance_2d_below_3d(small_dataset):
    traps = [s for s in small_dataset if s.kind == "trap"]
    assert traps
    for s in traps:
        a, b = s.key_pair
        pts3 = geometry.lift_video(s.boxes, s.mask, s.depth, "3d")
        pts2 = geometry.lift_video(s.boxes, s.mask, s.depth, "2d")
        both = s.mask[:, a] & s.mask[:, b]
        d3 = np.sum((pts3[:, a] - pts3[:, b]) ** 2, axis=-1)[both]
        d2 = np.sum((pts2[:, a] - pts2[:, b]) ** 2, axis=-1)[both]
        assert np.all(d2 < d3)


def test_build_graph_matches_video_weights(small_dataset):
    s = small_dataset[0]
    W = geometry.video_weights(s, "3d")
    for t in range(s.num_frames):
        prev = s.frame(t - 1) if t > 0 else None
        g = geometry.build_graph(s.frame(t), prev, mode="3d")
        np.testing.assert_allclose(g.weights, W[t], rtol=0, atol=1e-12)


@pytest.mark.parametrize("squared", [True, False])
def test_compiled_and_python_kernels_agree(rng, squared):
    if kernels.BACKEND != "compiled":
        pytest.skip("compiled kernels not built")
    pts = rng.uniform(0, 50, size=(30, 6, 3))
    mask = rng.random((30, 6)) < 0.7
    a = kernels.video_edge_weights(pts, mask, squared=squared, scale=(1, 2, 0.5), backend="python")
    b = kernels.video_edge_weights(pts, mask, squared=squared, scale=(1, 2, 0.5), backend="compiled")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    s = rng.random((7, 20))
    th = np.linspace(0.01, 0.99, 99)
    np.testing.assert_array_equal(kernels.first_crossings(s, th, "python"),
                                  kernels.first_crossings(s, th, "compiled"))


# ---------------------------------------------------------------------------
# properties

@given(vec3, vec3)
def test_pair_distance_symmetric(a, b):
    assert geometry.pair_distance(a, b) == geometry.pair_distance(b, a)


@given(vec3, vec3)
def test_motion_difference_symmetric_and_bounded(u, v):
    m = geometry.motion_difference(u, v)
    assert m == pytest.approx(geometry.motion_difference(v, u), abs=1e-12)
    assert 0.0 <= m <= 2.0 + 1e-9


@given(vec3, vec3, vec3, vec3, vec3)
def test_motion_difference_translation_invariant(p0, p1, q0, q1, shift):
    s = np.asarray(shift)
    vi, _ = geometry.velocity(p1, p0)
    vj, _ = geometry.velocity(q1, q0)
    wi, _ = geometry.velocity(np.asarray(p1) + s, np.asarray(p0) + s)
    wj, _ = geometry.velocity(np.asarray(q1) + s, np.asarray(q0) + s)
    assert geometry.motion_difference(vi, vj) == pytest.approx(geometry.motion_difference(wi, wj), abs=1e-6)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    pts, mask = (rng.uniform(0, 60, size=(4, 6, 3)), rng.random((4, 6)) < 0.6)
    W = kernels.video_edge_weights(pts, mask)
    for t in range(4):
        if mask[t].sum() >= 2:
            assert abs(W[t].sum() - 1.0) <= 1e-6
        else:
            assert not W[t].any()
        assert np.all(W[t] >= 0)
        assert not W[t][~mask[t]].any() and not W[t][:, ~mask[t]].any()
