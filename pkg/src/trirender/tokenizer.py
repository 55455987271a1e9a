"""Scene and camera tokenization.

Triangles become d-dimensional tokens carrying reflectance and surface
orientation; their positions live separately as 9D anchors (the three
vertices concatenated) that drive a relative rotary encoding inside
attention. Cameras become one token per 8x8 pixel patch encoding the 64
ray directions through the pixel centers.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .scene import Camera, Scene, pixel_directions_cam
from .tensor import Tensor, concat

FREQUENCIES = (1.0, 1.3797, 1.9037, 2.6265, 3.6239, 5.0)
PATCH = 8


def sincos_features(values: np.ndarray, frequencies=FREQUENCIES) -> np.ndarray:
    """(N, C) -> (N, C*len(freqs)*2) with (sin, cos) pairs, component-major."""
    v = np.asarray(values, dtype=np.float64)
    freqs = np.asarray(frequencies, dtype=np.float64)
    ang = v[:, :, None] * freqs[None, None, :]  # (N, C, F)
    pairs = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (N, C, F, 2)
    return pairs.reshape(v.shape[0], -1)


def rope_angles(anchor: np.ndarray, frequencies=FREQUENCIES) -> np.ndarray:
    """All (sin, cos) pairs for one 9D anchor: component-major, frequency-minor."""
    return sincos_features(np.asarray(anchor, dtype=np.float64)[None, :], frequencies)[0].reshape(
        -1, 2
    )


def rope_pair_layout(n_components: int, n_frequencies: int, n_pairs: int):
    """Which (component, frequency) pairs survive truncation, and their order.

    The full table is component-major. When fewer pairs fit in a head,
    the lowest frequencies win (sweeping all components before moving to
    the next frequency) so every anchor coordinate stays represented;
    the surviving pairs are then laid out component-major again.
    """
    full = n_components * n_frequencies
    if not 1 <= n_pairs <= full:
        raise ShapeError(f"n_pairs must be in [1, {full}], got {n_pairs}")
    by_freq = sorted(
        ((f, c) for c in range(n_components) for f in range(n_frequencies)),
    )
    kept = sorted(((c, f) for f, c in by_freq[:n_pairs]))
    return kept


class RopeTable:
    """Per-token rotation coefficients for the spatial rotary encoding."""

    __slots__ = ("sin", "cos", "n_pairs", "head_dim")

    def __init__(self, sin: np.ndarray, cos: np.ndarray, head_dim: int):
        self.sin = sin
        self.cos = cos
        self.n_pairs = sin.shape[-1]
        self.head_dim = head_dim
        if 2 * self.n_pairs > head_dim:
            raise ShapeError(
                f"head_dim {head_dim} too small for {self.n_pairs} rotated pairs"
            )

    @classmethod
    def for_anchors(
        cls,
        anchors: np.ndarray,
        head_dim: int,
        n_pairs: int | None = None,
        frequencies=FREQUENCIES,
        dtype=np.float32,
    ) -> "RopeTable":
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.ndim != 2:
            raise ShapeError(f"anchors must be (tokens, components), got {anchors.shape}")
        n_comp = anchors.shape[1]
        n_freq = len(frequencies)
        if n_pairs is None:
            n_pairs = min(n_comp * n_freq, head_dim // 2)
        layout = rope_pair_layout(n_comp, n_freq, n_pairs)
        freqs = np.asarray(frequencies, dtype=np.float64)
        comp_idx = np.array([c for c, _ in layout])
        freq_idx = np.array([f for _, f in layout])
        ang = anchors[:, comp_idx] * freqs[freq_idx][None, :]
        return cls(np.sin(ang).astype(dtype), np.cos(ang).astype(dtype), head_dim)

    @classmethod
    def identity(cls, n_tokens: int, head_dim: int, n_pairs: int, dtype=np.float32) -> "RopeTable":
        """Zero-anchor table: apply_rope becomes the identity map."""
        return cls(
            np.zeros((n_tokens, n_pairs), dtype=dtype),
            np.ones((n_tokens, n_pairs), dtype=dtype),
            head_dim,
        )


def apply_rope(x: Tensor, table: RopeTable) -> Tensor:
    """Rotate the leading 2*n_pairs coefficients of each head in 2x2 blocks.

    ``x`` is (heads, tokens, head_dim); trailing coefficients pass
    through untouched. Block rotations are orthogonal, so per-token norms
    are preserved.
    """
    if x.data.shape[-1] != table.head_dim:
        raise ShapeError(
            f"head_dim mismatch: x has {x.data.shape[-1]}, table expects {table.head_dim}"
        )
    p = table.n_pairs
    rot = x[..., : 2 * p]
    rest = x[..., 2 * p :]
    even = rot[..., 0::2]
    odd = rot[..., 1::2]
    cos = Tensor(table.cos, dtype=x.data.dtype)
    sin = Tensor(table.sin, dtype=x.data.dtype)
    out_even = even * cos - odd * sin
    out_odd = even * sin + odd * cos
    lead = x.data.shape[:-1]
    paired = concat(
        [out_even.reshape(lead + (p, 1)), out_odd.reshape(lead + (p, 1))], axis=-1
    ).reshape(lead + (2 * p,))
    if rest.data.shape[-1] == 0:
        return paired
    return concat([paired, rest], axis=-1)


def embed_triangles(
    scene: Scene,
    w_geometry: Tensor,
    g_geometry: Tensor,
    w_material: Tensor,
    g_material: Tensor,
) -> Tensor:
    """Per-triangle tokens: normal encoding plus reflectance, each
    linearly projected and RMS-normalized, then summed. Positions do not
    enter; they live in the anchors."""
    normals = scene.normals.reshape(len(scene), 9)
    pe = sincos_features(normals)
    mats = scene.material_vectors()
    dtype = w_geometry.data.dtype
    geo = Tensor(pe, dtype=dtype) @ w_geometry
    mat = Tensor(mats, dtype=dtype) @ w_material
    return geo.rms_norm(g_geometry) + mat.rms_norm(g_material)


def register_anchor(scene: Scene) -> np.ndarray:
    """All register tokens anchor at the scene's mean vertex, tiled to 9D."""
    return np.tile(scene.mean_vertex(), 3)


def ray_bundle_directions(camera: Camera) -> np.ndarray:
    """(bundles, 64, 3) unit camera-space directions through pixel centers.

    Bundles scan the patch grid row-major; rays scan each 8x8 patch
    row-major.
    """
    w, h = camera.resolution
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    gx, gy = np.meshgrid(xs, ys)  # (h, w)
    dirs = pixel_directions_cam(camera, gx.ravel(), gy.ravel()).reshape(h, w, 3)
    bh, bw = h // PATCH, w // PATCH
    tiled = dirs.reshape(bh, PATCH, bw, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return tiled.reshape(bh * bw, PATCH * PATCH, 3)


def embed_ray_bundles(camera: Camera, w_ray: Tensor, g_ray: Tensor) -> Tensor:
    """One token per 8x8 patch from its 64 stacked (x, y, z) directions."""
    dirs = ray_bundle_directions(camera)
    feats = dirs.reshape(dirs.shape[0], -1)  # xyz interleaved, row-major rays
    if feats.shape[1] != w_ray.data.shape[0]:
        raise ShapeError(
            f"ray feature size {feats.shape[1]} does not match weight {w_ray.data.shape}"
        )
    out = Tensor(feats, dtype=w_ray.data.dtype) @ w_ray
    return out.rms_norm(g_ray)
