"""Two-stage transformer renderer.

Stage one runs full self-attention over triangle tokens in world space
and resolves view-independent transport. Stage two decodes radiance for
one camera: each layer cross-attends ray-bundle tokens into the
triangle sequence (expressed in camera space), then lets ray tokens
talk to each other, then applies a feed-forward block. A dense decoder
head fuses the last few layers into a log-encoded HDR image.

All blocks are pre-normed (RMS), feed-forwards are SwiGLU, queries and
keys are RMS-normalized with learned per-layer gains and rotated by the
relative spatial rotary encoding before the dot product. Linear maps
carry no biases.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ShapeError, ValidationError
from .hdr import HdrImage
from .scene import Scene, to_camera_space
from .tensor import Tensor, concat, rms_norm, softmax, swiglu_ffn, conv3x3, upsample2x
from .tokenizer import (
    FREQUENCIES,
    PATCH,
    RopeTable,
    apply_rope,
    embed_ray_bundles,
    embed_triangles,
    ray_bundle_directions,
    register_anchor,
)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    n_heads: int = 6
    head_dim: int = 128
    vi_layers: int = 12
    vd_layers: int = 6
    ffn_ratio: int = 4
    registers: int = 16
    patch: int = PATCH
    dpt_taps: int = 4
    dpt_channels: int = 256
    rope_pairs: int = 54
    frequencies: tuple = FREQUENCIES
    max_triangles: int = 4096

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.d_model:
            raise ShapeError(
                f"n_heads*head_dim must equal d_model: "
                f"{self.n_heads}*{self.head_dim} != {self.d_model}"
            )
        if self.dpt_taps > self.vd_layers:
            raise ShapeError(
                f"dpt_taps {self.dpt_taps} exceeds vd_layers {self.vd_layers}"
            )
        if 2 * self.rope_pairs > self.head_dim:
            raise ShapeError(
                f"head_dim {self.head_dim} too small for {self.rope_pairs} rotated pairs"
            )

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        args = dict(
            d_model=128,
            n_heads=4,
            head_dim=32,
            vi_layers=4,
            vd_layers=2,
            dpt_taps=2,
            dpt_channels=64,
            rope_pairs=12,
        )
        args.update(overrides)
        return cls(**args)

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_ratio * self.d_model


def _attention_param_shapes(d: int, head_dim: int):
    return {
        "norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "q_gain": (head_dim,),
        "k_gain": (head_dim,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape table; the single source of truth for layout."""
    d, hd, c = cfg.d_model, cfg.head_dim, cfg.dpt_channels
    pe_dim = 9 * len(cfg.frequencies) * 2
    shapes = {
        "embed.geometry.w": (pe_dim, d),
        "embed.geometry.gain": (d,),
        "embed.material.w": (10, d),
        "embed.material.gain": (d,),
        "embed.ray.w": (3 * cfg.patch * cfg.patch, d),
        "embed.ray.gain": (d,),
        "registers": (cfg.registers, d),
    }

    def ffn(prefix):
        shapes[f"{prefix}.norm"] = (d,)
        shapes[f"{prefix}.w_gate"] = (d, cfg.ffn_hidden)
        shapes[f"{prefix}.w_up"] = (d, cfg.ffn_hidden)
        shapes[f"{prefix}.w_down"] = (cfg.ffn_hidden, d)

    def attn(prefix, kv_norm=False):
        for k, s in _attention_param_shapes(d, hd).items():
            shapes[f"{prefix}.{k}"] = s
        if kv_norm:
            shapes[f"{prefix}.kv_norm"] = (d,)

    for i in range(cfg.vi_layers):
        attn(f"vi.{i}.attn")
        ffn(f"vi.{i}.ffn")
    for i in range(cfg.vd_layers):
        attn(f"vd.{i}.cross", kv_norm=True)
        attn(f"vd.{i}.self")
        ffn(f"vd.{i}.ffn")
    for t in range(cfg.dpt_taps):
        shapes[f"dpt.tap.{t}.w"] = (d, c)
    for t in range(cfg.dpt_taps - 1):
        shapes[f"dpt.fuse.{t}.w"] = (3, 3, c, c)
    for s in range(3):
        shapes[f"dpt.up.{s}.w"] = (3, 3, c, c)
    shapes["dpt.head.w"] = (3, 3, c, 3)
    return shapes


class ModelWeights:
    """Flat ordered mapping of parameter name to Tensor."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelWeights":
        r = np.random.Generator(np.random.Philox(seed))
        tensors = {}
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith("gain") or name.endswith("norm"):
                data = np.ones(shape, dtype=dtype)
            elif name == "registers":
                data = r.normal(size=shape).astype(dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                data = (r.normal(size=shape) / math.sqrt(fan_in)).astype(dtype)
            tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            self.cfg,
            {
                k: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype)
                for k, t in self.items()
            },
        )

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def _heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    t = x.data.shape[0]
    return x.reshape((t, n_heads, head_dim)).transpose((1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, hd = x.data.shape
    return x.transpose((1, 0, 2)).reshape((t, h * hd))


def _mha(
    xq: Tensor,
    xkv: Tensor,
    weights: ModelWeights,
    prefix: str,
    rope_q: RopeTable | None,
    rope_k: RopeTable | None,
    capture: list | None = None,
) -> Tensor:
    """Multi-head attention with QK RMS-normalization and optional rotary
    rotation. Rotation happens after normalization and right before the
    dot product so scores depend only on relative anchors."""
    cfg = weights.cfg
    q = _heads(xq @ weights[f"{prefix}.wq"], cfg.n_heads, cfg.head_dim)
    k = _heads(xkv @ weights[f"{prefix}.wk"], cfg.n_heads, cfg.head_dim)
    v = _heads(xkv @ weights[f"{prefix}.wv"], cfg.n_heads, cfg.head_dim)
    q = rms_norm(q, weights[f"{prefix}.q_gain"])
    k = rms_norm(k, weights[f"{prefix}.k_gain"])
    if rope_q is not None:
        q = apply_rope(q, rope_q)
    if rope_k is not None:
        k = apply_rope(k, rope_k)
    scores = (q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(cfg.head_dim))
    probs = softmax(scores, axis=-1)
    if capture is not None:
        capture.append(probs)
    out = _merge_heads(probs @ v)
    return out @ weights[f"{prefix}.wo"]


def _ffn_block(x: Tensor, weights: ModelWeights, prefix: str) -> Tensor:
    h = rms_norm(x, weights[f"{prefix}.norm"])
    return x + swiglu_ffn(
        h, weights[f"{prefix}.w_gate"], weights[f"{prefix}.w_up"], weights[f"{prefix}.w_down"]
    )


def view_independent_forward(
    tokens: Tensor, rope: RopeTable, weights: ModelWeights
) -> Tensor:
    """Full self-attention over triangle + register tokens, world space."""
    cfg = weights.cfg
    x = tokens
    for i in range(cfg.vi_layers):
        h = rms_norm(x, weights[f"vi.{i}.attn.norm"])
        x = x + _mha(h, h, weights, f"vi.{i}.attn", rope, rope)
        x = _ffn_block(x, weights, f"vi.{i}.ffn")
    return x


def view_dependent_forward(
    ray_tokens: Tensor,
    tri_tokens: Tensor,
    tri_rope_cam: RopeTable,
    weights: ModelWeights,
    capture: list | None = None,
) -> list:
    """Per-layer: rays cross-attend to triangles, then self-attend, then
    feed-forward. Returns every layer's output for the decoder taps."""
    cfg = weights.cfg
    n_rays = ray_tokens.data.shape[0]
    ray_rope = RopeTable.identity(
        n_rays, cfg.head_dim, tri_rope_cam.n_pairs, dtype=ray_tokens.data.dtype
    )
    x = ray_tokens
    stack = []
    for i in range(cfg.vd_layers):
        hq = rms_norm(x, weights[f"vd.{i}.cross.norm"])
        hkv = rms_norm(tri_tokens, weights[f"vd.{i}.cross.kv_norm"])
        x = x + _mha(hq, hkv, weights, f"vd.{i}.cross", ray_rope, tri_rope_cam, capture)
        hs = rms_norm(x, weights[f"vd.{i}.self.norm"])
        x = x + _mha(hs, hs, weights, f"vd.{i}.self", None, None)
        x = _ffn_block(x, weights, f"vd.{i}.ffn")
        stack.append(x)
    return stack


def dpt_decode(stack: list, grid_hw: tuple, weights: ModelWeights) -> Tensor:
    """Fuse the last dpt_taps layer features into a full-resolution
    log-encoded image: per-tap linear reassembly on the patch grid,
    conv fusion from the deepest tap backwards, then three 2x
    upsample+conv stages and a 3-channel head."""
    cfg = weights.cfg
    gh, gw = grid_hw
    taps = stack[-cfg.dpt_taps :]
    grids = [
        (t @ weights[f"dpt.tap.{j}.w"]).reshape((gh, gw, cfg.dpt_channels))
        for j, t in enumerate(taps)
    ]
    x = grids[-1]
    for j in range(len(grids) - 2, -1, -1):
        x = conv3x3(x, weights[f"dpt.fuse.{j}.w"]).swish() + grids[j]
    for s in range(3):
        x = conv3x3(upsample2x(x), weights[f"dpt.up.{s}.w"]).swish()
    return conv3x3(x, weights["dpt.head.w"])


def scene_tokens(scene: Scene, weights: ModelWeights) -> tuple:
    """Triangle + register tokens and their world anchors."""
    cfg = weights.cfg
    tri = embed_triangles(
        scene,
        weights["embed.geometry.w"],
        weights["embed.geometry.gain"],
        weights["embed.material.w"],
        weights["embed.material.gain"],
    )
    tokens = concat([tri, weights["registers"]], axis=0)
    anchors = np.concatenate(
        [scene.anchors(), np.tile(register_anchor(scene), (cfg.registers, 1))], axis=0
    )
    return tokens, anchors


def render_tensor(
    scene: Scene, weights: ModelWeights, capture: list | None = None
) -> Tensor:
    """Full forward pass producing the log(1+radiance) image tensor."""
    cfg = weights.cfg
    if len(scene) > cfg.max_triangles:
        raise ValidationError(
            f"scene has {len(scene)} triangles, config allows {cfg.max_triangles}"
        )
    dtype = weights["registers"].data.dtype
    tokens, anchors_world = scene_tokens(scene, weights)
    rope_world = RopeTable.for_anchors(
        anchors_world, cfg.head_dim, cfg.rope_pairs, cfg.frequencies, dtype=dtype
    )
    tri_out = view_independent_forward(tokens, rope_world, weights)

    cam_scene = to_camera_space(scene)
    anchors_cam = np.concatenate(
        [cam_scene.anchors(), np.tile(register_anchor(cam_scene), (cfg.registers, 1))],
        axis=0,
    )
    rope_cam = RopeTable.for_anchors(
        anchors_cam, cfg.head_dim, cfg.rope_pairs, cfg.frequencies, dtype=dtype
    )
    rays = embed_ray_bundles(scene.camera, weights["embed.ray.w"], weights["embed.ray.gain"])
    stack = view_dependent_forward(rays, tri_out, rope_cam, weights, capture)

    w, h = scene.camera.resolution
    grid = (h // cfg.patch, w // cfg.patch)
    return dpt_decode(stack, grid, weights)


def render(scene: Scene, weights: ModelWeights) -> HdrImage:
    y = render_tensor(scene, weights)
    return HdrImage.from_log_encoded(y.data.astype(np.float32))


def attention_maps(scene: Scene, weights: ModelWeights, bundle_index: int):
    """Cross-attention probability mass per key token for one ray bundle.

    Returns (totals, per_layer_head): totals is (tokens,) summed over all
    layers and heads; per_layer_head is (vd_layers, n_heads, tokens).
    Key tokens are the triangles followed by the registers.
    """
    cfg = weights.cfg
    n_bundles = len(ray_bundle_directions(scene.camera))
    if not 0 <= bundle_index < n_bundles:
        raise ValidationError(
            f"bundle index {bundle_index} out of range [0, {n_bundles})"
        )
    capture: list = []
    render_tensor(scene, weights, capture)
    per = np.stack([p.data[:, bundle_index, :] for p in capture], axis=0)
    return per.sum(axis=(0, 1)), per
