import math

import numpy as np
import pytest

from trirender import scene as S
from trirender import tokenizer as tok
from trirender.errors import ShapeError
from trirender.tensor import Tensor

from helpers import rng


def test_default_frequencies():
    assert tok.FREQUENCIES == (1.0, 1.3797, 1.9037, 2.6265, 3.6239, 5.0)


def test_rope_angles_zero_anchor_identity():
    pairs = tok.rope_angles(np.zeros(9))
    assert pairs.shape == (54, 2)
    np.testing.assert_array_equal(pairs[:, 0], 0.0)
    np.testing.assert_array_equal(pairs[:, 1], 1.0)


def test_rope_angles_against_direct_math():
    anchor = np.zeros(9)
    anchor[4] = 0.7
    pairs = tok.rope_angles(anchor)
    # component-major: component 4, frequency index 2 lands at 4*6+2
    i = 4 * 6 + 2
    assert pairs[i, 0] == pytest.approx(math.sin(0.7 * 1.9037), abs=1e-15)
    assert pairs[i, 1] == pytest.approx(math.cos(0.7 * 1.9037), abs=1e-15)
    # all other components untouched
    mask = np.ones(54, bool)
    mask[4 * 6 : 5 * 6] = False
    np.testing.assert_array_equal(pairs[mask, 0], 0.0)


def test_pair_layout_full_is_component_major():
    layout = tok.rope_pair_layout(9, 6, 54)
    assert layout == [(c, f) for c in range(9) for f in range(6)]


def test_pair_layout_truncation_keeps_low_frequencies_everywhere():
    layout = tok.rope_pair_layout(9, 6, 12)
    # every component keeps its lowest frequency; leftover slots go to
    # the next frequency starting from the first components
    assert [(c, 0) for c in range(9)] == [p for p in layout if p[1] == 0]
    assert [p for p in layout if p[1] == 1] == [(0, 1), (1, 1), (2, 1)]
    assert layout == sorted(layout)


def test_rope_table_shapes_desk_and_full():
    r = rng(0)
    anchors = r.normal(size=(5, 9))
    full = tok.RopeTable.for_anchors(anchors, head_dim=128)
    assert full.n_pairs == 54 and full.sin.shape == (5, 54)
    assert full.head_dim - 2 * full.n_pairs == 20
    desk = tok.RopeTable.for_anchors(anchors, head_dim=32, n_pairs=12)
    assert desk.n_pairs == 12
    # without an explicit count the head is packed to capacity
    assert tok.RopeTable.for_anchors(anchors, head_dim=32).n_pairs == 16
    with pytest.raises(ShapeError):
        tok.RopeTable(np.zeros((5, 54)), np.ones((5, 54)), head_dim=64)


def test_apply_rope_identity_at_zero_anchor():
    r = rng(1)
    x = r.normal(size=(2, 4, 32)).astype(np.float32)
    table = tok.RopeTable.identity(4, head_dim=32, n_pairs=12)
    out = tok.apply_rope(Tensor(x), table)
    np.testing.assert_array_equal(out.data, x)


def test_apply_rope_preserves_norm():
    r = rng(2)
    anchors = r.normal(size=(6, 9)) * 2
    table = tok.RopeTable.for_anchors(anchors, head_dim=32, dtype=np.float64)
    x = r.normal(size=(3, 6, 32))
    out = tok.apply_rope(Tensor(x), table)
    np.testing.assert_allclose(
        np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-5
    )


def test_apply_rope_rotates_only_selected_block():
    # anchor with only component 8 set: in the 12-pair desk layout that
    # pair is the last block, dims 22 and 23
    anchors = np.zeros((1, 9))
    anchors[0, 8] = 1.3
    table = tok.RopeTable.for_anchors(anchors, head_dim=32, n_pairs=12, dtype=np.float64)
    x = np.arange(32, dtype=np.float64)[None, None, :] + 1
    out = tok.apply_rope(Tensor(x.copy()), table).data[0, 0]
    changed = np.nonzero(out != x[0, 0])[0]
    np.testing.assert_array_equal(changed, [22, 23])
    c, s = math.cos(1.3), math.sin(1.3)
    assert out[22] == pytest.approx(23 * c - 24 * s, rel=1e-12)
    assert out[23] == pytest.approx(23 * s + 24 * c, rel=1e-12)


def rotated_dot(q, k, aq, ak, head_dim=32):
    tq = tok.RopeTable.for_anchors(aq[None, :], head_dim, dtype=np.float64)
    tk = tok.RopeTable.for_anchors(ak[None, :], head_dim, dtype=np.float64)
    rq = tok.apply_rope(Tensor(q[None, None, :]), tq).data[0, 0]
    rk = tok.apply_rope(Tensor(k[None, None, :]), tk).data[0, 0]
    return float(rq @ rk)


def test_rope_relative_shift_invariance():
    r = rng(3)
    for _ in range(50):
        q = r.normal(size=32)
        k = r.normal(size=32)
        aq = r.normal(size=9)
        ak = r.normal(size=9)
        t = np.tile(r.normal(size=3), 3)  # rigid translation of all vertices
        d0 = rotated_dot(q, k, aq, ak)
        d1 = rotated_dot(q, k, aq + t, ak + t)
        assert abs(d0 - d1) < 1e-4, (d0, d1)


def test_rope_mismatched_head_dim_rejected():
    table = tok.RopeTable.identity(4, head_dim=32, n_pairs=12)
    with pytest.raises(ShapeError):
        tok.apply_rope(Tensor(np.zeros((1, 4, 64))), table)


def embed_weights(d, seed=0):
    r = rng(seed)
    return (
        Tensor(r.normal(size=(108, d)).astype(np.float32) / math.sqrt(108)),
        Tensor(np.ones(d, dtype=np.float32)),
        Tensor(r.normal(size=(10, d)).astype(np.float32) / math.sqrt(10)),
        Tensor(np.ones(d, dtype=np.float32)),
    )


def two_triangle_scene(offset):
    mat = S.Material([0.5, 0.4, 0.3], [0.2, 0.2, 0.2], 0.4, [0, 0, 0])
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    n = np.tile([0, 0, 1.0], (3, 1))
    lightmat = S.Material([0, 0, 0], [0, 0, 0], 1.0, [5, 5, 5])
    tris = [
        S.Triangle(v, n, mat),
        S.Triangle(v + np.asarray(offset), n, mat),
        S.Triangle(v + np.array([0, 0, 3.0]), n, lightmat),
    ]
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 45, (8, 8))
    return S.Scene.from_triangles(tris, cam)


def test_embed_triangles_position_free():
    sc = two_triangle_scene([2.5, -1.0, 0.7])
    w1, g1, w2, g2 = embed_weights(64)
    toks = tok.embed_triangles(sc, w1, g1, w2, g2)
    assert toks.data.shape == (3, 64)
    np.testing.assert_array_equal(toks.data[0], toks.data[1])
    assert not np.array_equal(toks.data[0], toks.data[2])


def test_embed_triangles_material_order_matters():
    sc = two_triangle_scene([1, 0, 0])
    w1, g1, w2, g2 = embed_weights(32, seed=5)
    base = tok.embed_triangles(sc, w1, g1, w2, g2).data
    # permuting the 10-vector stacking (diffuse <-> emission) must change tokens
    swapped = sc.material_vectors()[:, [7, 8, 9, 3, 4, 5, 6, 0, 1, 2]]
    alt = Tensor(swapped.astype(np.float32)) @ w2
    pe = tok.sincos_features(sc.normals.reshape(len(sc), 9))
    geo = (Tensor(pe.astype(np.float32)) @ w1).rms_norm(g1)
    alt_tok = geo + alt.rms_norm(g2)
    assert not np.allclose(base[0], alt_tok.data[0])


def test_register_anchor_is_tiled_mean_vertex():
    sc = two_triangle_scene([1, 0, 0])
    a = tok.register_anchor(sc)
    mean = sc.vertices.reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(a, np.tile(mean, 3), rtol=1e-12)
    moved = S.transform_scene(sc, np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(
        tok.register_anchor(moved), a + np.tile([1.0, 2.0, 3.0], 3), rtol=1e-12
    )


def test_ray_bundle_grid_counts():
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 45, (16, 16))
    dirs = tok.ray_bundle_directions(cam)
    assert dirs.shape == (4, 64, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-6)


def test_ray_bundle_row_major_interleaved_order():
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 60, (16, 8))
    dirs = tok.ray_bundle_directions(cam)
    assert dirs.shape == (2, 64, 3)
    # bundle 1 is the right half; its ray (row 2, col 3) goes through
    # pixel center (x=8+3+0.5, y=2+0.5)
    expect = S.pixel_directions_cam(cam, np.array([11.5]), np.array([2.5]))[0]
    np.testing.assert_allclose(dirs[1, 2 * 8 + 3], expect, atol=1e-12)
    feats = dirs.reshape(dirs.shape[0], -1)
    np.testing.assert_array_equal(feats[1, (2 * 8 + 3) * 3 : (2 * 8 + 3) * 3 + 3], expect)


def test_ray_bundle_mean_direction_points_down_axis():
    cam = S.make_camera([1, 2, 3], [1, 2, -4], [0, 1, 0], 50, (8, 8))
    dirs = tok.ray_bundle_directions(cam)
    mean = dirs[0].mean(axis=0)
    mean /= np.linalg.norm(mean)
    np.testing.assert_allclose(mean, [0, 0, -1], atol=1e-6)


def test_ray_bundles_ignore_world_pose():
    # camera-space tokens: same intrinsics, different pose -> same embedding
    r = rng(9)
    w = Tensor(r.normal(size=(192, 48)).astype(np.float32))
    g = Tensor(np.ones(48, dtype=np.float32))
    cam_a = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 41, (16, 16))
    cam_b = S.make_camera([9, -2, 1], [8, 0, 2], [0, 0, 1], 41, (16, 16))
    ta = tok.embed_ray_bundles(cam_a, w, g)
    tb = tok.embed_ray_bundles(cam_b, w, g)
    np.testing.assert_array_equal(ta.data, tb.data)


def test_ray_bundle_weight_shape_checked():
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 45, (8, 8))
    with pytest.raises(ShapeError):
        tok.embed_ray_bundles(cam, Tensor(np.zeros((64, 8), np.float32)), Tensor(np.ones(8, np.float32)))


def test_rope_gradients_flow_through():
    r = rng(11)
    anchors = r.normal(size=(3, 9))
    table = tok.RopeTable.for_anchors(anchors, head_dim=16, n_pairs=6, dtype=np.float64)
    x = Tensor(r.normal(size=(2, 3, 16)), requires_grad=True)
    out = tok.apply_rope(x, table)
    (out * out).sum().backward()
    # orthogonal per-token map: gradient of the squared norm is 2x
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=5e-6)
