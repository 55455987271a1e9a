import math

import numpy as np
import pytest

from trirender import model as M
from trirender import scene as S
from trirender import tensor as T
from trirender.errors import ShapeError, ValidationError
from trirender.tokenizer import RopeTable

from helpers import rng


def tiny_cfg(**over):
    args = dict(
        d_model=32,
        n_heads=2,
        head_dim=16,
        vi_layers=2,
        vd_layers=2,
        dpt_taps=2,
        dpt_channels=8,
        rope_pairs=8,
        registers=4,
    )
    args.update(over)
    return M.ModelConfig(**args)


def make_scene(n_tris=3, seed=0, res=(16, 16)):
    r = rng(seed)
    tris = []
    for i in range(n_tris):
        v = r.normal(size=(3, 3)) * 0.6
        while np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])) < 1e-3:
            v = r.normal(size=(3, 3)) * 0.6
        nrm = np.cross(v[1] - v[0], v[2] - v[0])
        nrm = nrm / np.linalg.norm(nrm)
        d = r.uniform(0.1, 0.6, size=3)
        mat = S.Material(d, r.uniform(0, 0.3, size=3), float(r.uniform(0.05, 1.0)), [0, 0, 0])
        tris.append(S.Triangle(v, np.tile(nrm, (3, 1)), mat, flat=True))
    cam = S.make_camera([0, 0.5, 3.5], [0, 0, 0], [0, 1, 0], 45, res)
    return S.Scene.from_triangles(tris, cam)


def test_config_defaults_full_and_desk():
    p = M.ModelConfig.full()
    assert (p.d_model, p.n_heads, p.head_dim) == (768, 6, 128)
    assert (p.vi_layers, p.vd_layers) == (12, 6)
    assert p.rope_pairs == 54 and p.head_dim - 2 * p.rope_pairs == 20
    d = M.ModelConfig.desk()
    assert (d.d_model, d.n_heads, d.head_dim) == (128, 4, 32)
    assert (d.vi_layers, d.vd_layers) == (4, 2)
    assert d.rope_pairs == 12


def test_config_invariants_enforced():
    with pytest.raises(ShapeError):
        M.ModelConfig(d_model=100, n_heads=6, head_dim=128)
    with pytest.raises(ShapeError):
        M.ModelConfig.desk(dpt_taps=3)
    with pytest.raises(ShapeError):
        M.ModelConfig.desk(rope_pairs=20)


def test_param_count_matches_closed_form():
    cfg = M.ModelConfig.desk()
    w = M.ModelWeights.init(cfg)
    d, hd, c, f = cfg.d_model, cfg.head_dim, cfg.dpt_channels, cfg.ffn_hidden
    attn = 4 * d * d + 2 * hd + d
    ffn = 3 * d * f + d
    expected = (
        (108 * d + d) + (10 * d + d) + (192 * d + d) + cfg.registers * d
        + cfg.vi_layers * (attn + ffn)
        + cfg.vd_layers * (attn + d + attn + ffn)  # cross (+kv norm) + self + ffn
        + cfg.dpt_taps * d * c
        + (cfg.dpt_taps - 1) * 9 * c * c
        + 3 * 9 * c * c
        + 9 * c * 3
    )
    assert w.param_count == expected


def test_weight_table_matches_shapes():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=1)
    shapes = M.parameter_shapes(cfg)
    assert list(shapes) == [k for k, _ in w.items()]
    for name, t in w.items():
        assert t.data.shape == shapes[name]
        assert np.isfinite(t.data).all()
    gains = w["vi.0.attn.q_gain"]
    np.testing.assert_array_equal(gains.data, np.ones(cfg.head_dim, np.float32))


def test_view_independent_shape_and_anchor_passthrough():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=2)
    sc = make_scene(4)
    tokens, anchors = M.scene_tokens(sc, w)
    assert tokens.data.shape == (4 + cfg.registers, cfg.d_model)
    rope = RopeTable.for_anchors(anchors, cfg.head_dim, cfg.rope_pairs)
    out = M.view_independent_forward(tokens, rope, w)
    assert out.data.shape == tokens.data.shape


def test_view_independent_translation_invariance():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=3)
    sc = make_scene(4, seed=1)
    moved = S.transform_scene(sc, np.eye(3), np.array([1.3, -0.2, 4.0]))
    outs = []
    for scene in (sc, moved):
        tokens, anchors = M.scene_tokens(scene, w)
        rope = RopeTable.for_anchors(anchors, cfg.head_dim, cfg.rope_pairs)
        outs.append(M.view_independent_forward(tokens, rope, w).data)
    denom = np.abs(outs[0]).max()
    assert np.abs(outs[0] - outs[1]).max() / denom < 1e-3


def test_view_independent_permutation_equivariance():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=4)
    sc = make_scene(5, seed=2)
    perm = [3, 0, 4, 1, 2]
    sc_p = S.Scene.from_triangles([sc.triangles[i] for i in perm], sc.camera)
    outs = []
    for scene in (sc, sc_p):
        tokens, anchors = M.scene_tokens(scene, w)
        rope = RopeTable.for_anchors(anchors, cfg.head_dim, cfg.rope_pairs)
        outs.append(M.view_independent_forward(tokens, rope, w).data)
    np.testing.assert_allclose(outs[0][perm], outs[1][: len(perm)], atol=1e-5)
    np.testing.assert_allclose(outs[0][len(perm) :], outs[1][len(perm) :], atol=1e-5)


def test_cross_attention_single_key_broadcasts_value():
    cfg = tiny_cfg(registers=0)
    w = M.ModelWeights.init(cfg, seed=5)
    sc = make_scene(1, seed=3, res=(16, 8))
    capture = []
    M.render_tensor(sc, w, capture)
    assert len(capture) == cfg.vd_layers
    for probs in capture:
        np.testing.assert_allclose(probs.data, 1.0, atol=1e-7)


def test_feature_stack_shape():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=6)
    sc = make_scene(3, res=(24, 16))
    capture = []
    y = M.render_tensor(sc, w, capture)
    assert y.data.shape == (16, 24, 3)
    assert len(capture) == cfg.vd_layers


def test_zero_head_renders_black():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=7)
    w["dpt.head.w"].data[:] = 0
    img = M.render(make_scene(2), w)
    np.testing.assert_array_equal(img.pixels, 0.0)


def test_render_deterministic():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=8)
    sc = make_scene(3, seed=5)
    a = M.render(sc, w)
    b = M.render(sc, w)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_render_translation_invariance():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=9)
    sc = make_scene(4, seed=6)
    moved = S.transform_scene(sc, np.eye(3), np.array([0.7, 2.0, -1.1]))
    ya = M.render_tensor(sc, w).data
    yb = M.render_tensor(moved, w).data
    assert np.abs(ya - yb).mean() < 1e-3


def test_render_permutation_invariance():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=10)
    sc = make_scene(5, seed=7)
    perm = [4, 2, 0, 3, 1]
    sc_p = S.Scene.from_triangles([sc.triangles[i] for i in perm], sc.camera)
    ya = M.render_tensor(sc, w).data
    yb = M.render_tensor(sc_p, w).data
    assert np.abs(ya - yb).mean() < 1e-4


def test_registers_are_live():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=11)
    sc = make_scene(3, seed=8)
    ya = M.render_tensor(sc, w).data.copy()
    w["registers"].data[:] = 0
    yb = M.render_tensor(sc, w).data
    assert not np.array_equal(ya, yb)


def test_max_triangles_enforced():
    cfg = tiny_cfg(max_triangles=2)
    w = M.ModelWeights.init(cfg, seed=12)
    with pytest.raises(ValidationError):
        M.render_tensor(make_scene(3), w)


def test_attention_maps_are_distributions():
    cfg = tiny_cfg()
    w = M.ModelWeights.init(cfg, seed=13)
    sc = make_scene(4, seed=9, res=(16, 16))
    totals, per = M.attention_maps(sc, w, bundle_index=1)
    n_tokens = 4 + cfg.registers
    assert totals.shape == (n_tokens,)
    assert per.shape == (cfg.vd_layers, cfg.n_heads, n_tokens)
    assert (per >= 0).all()
    np.testing.assert_allclose(per.sum(axis=-1), 1.0, atol=1e-5)
    assert totals.sum() == pytest.approx(cfg.vd_layers * cfg.n_heads, abs=1e-4)
    with pytest.raises(ValidationError):
        M.attention_maps(sc, w, bundle_index=4)


def grad_cfg():
    return M.ModelConfig(
        d_model=16,
        n_heads=2,
        head_dim=8,
        vi_layers=2,
        vd_layers=1,
        dpt_taps=1,
        dpt_channels=4,
        rope_pairs=4,
        registers=2,
    )


def test_end_to_end_gradients_sampled():
    # spot check: a handful of entries per tensor against central differences
    cfg = grad_cfg()
    w = M.ModelWeights.init(cfg, seed=14, dtype=np.float64)
    sc = make_scene(2, seed=10, res=(8, 8))

    def loss():
        y = M.render_tensor(sc, w)
        return (y * y).sum()

    w.zero_grad()
    loss().backward()
    r = rng(99)
    eps = 1e-6
    worst = 0.0
    for name, t in w.items():
        flat = t.data.reshape(-1)
        g = t.grad.reshape(-1)
        for idx in r.choice(flat.size, size=min(3, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + eps
            lo_hi = loss().item()
            flat[idx] = keep - eps
            lo_lo = loss().item()
            flat[idx] = keep
            fd = (lo_hi - lo_lo) / (2 * eps)
            denom = max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, abs(fd - g[idx]) / denom)
    assert worst < 1e-3, worst
