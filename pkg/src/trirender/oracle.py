"""Reference renderer: a unidirectional path tracer.

Monte Carlo estimation with next-event estimation toward emissive
triangles, power-heuristic multiple importance sampling (beta = 2),
Russian roulette after three bounces, and uniform-by-area light
sampling. Emitters are two-sided. Every random number is a pure hash of
(seed, pixel index, sample index, dimension), so images are bitwise
reproducible no matter how rays are batched.

All tracing math runs in float64; images are stored as float32.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .hdr import HdrImage
from .scene import Scene, pixel_rays_world, validate_scene

MAX_DEPTH_DEFAULT = 8
_RR_START = 3  # bounces before Russian roulette kicks in
_T_MIN = 1e-7
_OFFSET = 1e-6
_SHADOW_SHRINK = 1.0 - 1e-4
_DIMS_PER_BOUNCE = 8

_U64 = np.uint64


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def rand01(seed: int, pixel, sample, dim: int) -> np.ndarray:
    """Counter-based uniform in [0, 1): hash of (seed, pixel, sample, dim)."""
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        z = _mix64(_U64(seed & 0xFFFFFFFFFFFFFFFF) + _U64(0x9E3779B97F4A7C15))
        z = _mix64(z ^ (np.asarray(pixel, dtype=np.uint64) * _U64(0xA0761D6478BD642F)))
        z = _mix64(z ^ (np.asarray(sample, dtype=np.uint64) * _U64(0xE7037ED1A0B428DB)))
        z = _mix64(z ^ (_U64(dim) * _U64(0x8EBC6AF09C88C6E3)))
    return (z >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))


# -- GGX microfacet BRDF --------------------------------------------------------


def ggx_brdf(wi, wo, n, params):
    """Evaluate the BRDF: Lambertian diffuse plus a GGX specular lobe.

    ``wi`` points toward the light, ``wo`` toward the viewer, both away
    from the surface. ``params`` carries diffuse, specular and roughness
    (scalars or batched arrays). The GGX alpha is the roughness value
    itself. Directions below the horizon return zero. Shapes broadcast
    over leading dimensions; the result has a trailing RGB axis.
    """
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    diffuse = np.asarray(params.diffuse, dtype=np.float64)
    specular = np.asarray(params.specular, dtype=np.float64)
    alpha = np.asarray(params.roughness, dtype=np.float64)

    cos_i = np.sum(n * wi, axis=-1)
    cos_o = np.sum(n * wo, axis=-1)
    above = (cos_i > 0) & (cos_o > 0)
    cos_i = np.maximum(cos_i, 1e-12)
    cos_o = np.maximum(cos_o, 1e-12)

    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    cos_h = np.clip(np.sum(n * h, axis=-1), 0.0, 1.0)

    a2 = alpha * alpha
    d = a2 / np.maximum(math.pi * (cos_h * cos_h * (a2 - 1.0) + 1.0) ** 2, 1e-300)
    # Smith height-correlated visibility: V = G / (4 cos_i cos_o)
    v = 0.5 / np.maximum(
        cos_o * np.sqrt(a2 + (1.0 - a2) * cos_i * cos_i)
        + cos_i * np.sqrt(a2 + (1.0 - a2) * cos_o * cos_o),
        1e-300,
    )
    # Base reflectivity only; a grazing-angle Fresnel boost would add energy
    # beyond the diffuse+specular <= 1 budget and break the furnace bound.
    spec = specular * (d * v)[..., None]
    out = diffuse / math.pi + spec
    return np.where(above[..., None], out, 0.0)


class _Params:
    __slots__ = ("diffuse", "specular", "roughness")

    def __init__(self, diffuse, specular, roughness):
        self.diffuse = diffuse
        self.specular = specular
        self.roughness = roughness


def _bsdf_pdf(wi, wo, n, diffuse, specular, alpha):
    """Solid-angle pdf of the mixture sampler for direction wi."""
    wd = diffuse.mean(axis=-1)
    ws = specular.mean(axis=-1)
    tot = wd + ws
    p_spec = np.where(tot > 0, ws / np.maximum(tot, 1e-300), 0.0)
    cos_i = np.sum(n * wi, axis=-1)
    pdf_d = np.maximum(cos_i, 0.0) / math.pi

    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    cos_h = np.clip(np.sum(n * h, axis=-1), 0.0, 1.0)
    hdoto = np.sum(h * wo, axis=-1)
    a2 = alpha * alpha
    d = a2 / np.maximum(math.pi * (cos_h * cos_h * (a2 - 1.0) + 1.0) ** 2, 1e-300)
    pdf_s = np.where(hdoto > 1e-9, d * cos_h / np.maximum(4.0 * hdoto, 1e-300), 0.0)
    return (1.0 - p_spec) * pdf_d + p_spec * pdf_s, p_spec


def _onb(n: np.ndarray):
    """Branchless orthonormal basis around unit normals (N, 3)."""
    s = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + s * n[:, 0] * n[:, 0] * a, s * b, -s * n[:, 0]], axis=-1)
    bt = np.stack([b, s + n[:, 1] * n[:, 1] * a, -n[:, 1]], axis=-1)
    return t, bt


def _sample_bsdf(u_lobe, u1, u2, wo, n, diffuse, specular, alpha):
    """Draw wi from the diffuse/specular mixture. Returns (wi, pdf)."""
    wd = diffuse.mean(axis=-1)
    ws = specular.mean(axis=-1)
    tot = wd + ws
    p_spec = np.where(tot > 0, ws / np.maximum(tot, 1e-300), 0.0)
    take_spec = u_lobe < p_spec

    t, bt = _onb(n)

    # cosine-weighted diffuse direction
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - u1, 0.0))], axis=-1)
    wi_diff = local[:, 0:1] * t + local[:, 1:2] * bt + local[:, 2:3] * n

    # GGX half-vector from the NDF, then reflect
    a2 = alpha * alpha
    cos_h = np.sqrt(np.clip((1.0 - u1) / np.maximum(1.0 + (a2 - 1.0) * u1, 1e-300), 0.0, 1.0))
    sin_h = np.sqrt(np.clip(1.0 - cos_h * cos_h, 0.0, 1.0))
    h = (
        (sin_h * np.cos(phi))[:, None] * t
        + (sin_h * np.sin(phi))[:, None] * bt
        + cos_h[:, None] * n
    )
    wi_spec = 2.0 * np.sum(wo * h, axis=-1, keepdims=True) * h - wo

    wi = np.where(take_spec[:, None], wi_spec, wi_diff)
    wi = wi / np.maximum(np.linalg.norm(wi, axis=-1, keepdims=True), 1e-300)
    pdf, _ = _bsdf_pdf(wi, wo, n, diffuse, specular, alpha)
    dead = (tot <= 0) | (pdf <= 1e-12) | (np.sum(n * wi, axis=-1) <= 0)
    return wi, pdf, dead


def _power_heuristic(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    # clip so squaring cannot overflow; weights for masked-out lanes with
    # near-delta pdfs stay finite instead of turning into inf/inf
    pa2 = np.square(np.minimum(pa, 1e150))
    pb2 = np.square(np.minimum(pb, 1e150))
    return pa2 / np.maximum(pa2 + pb2, 1e-300)


# -- geometry --------------------------------------------------------------------


class _TraceGeometry:
    """Per-scene arrays the tracing loop consumes."""

    def __init__(self, scene: Scene):
        self.v0 = scene.vertices[:, 0]
        self.e1 = scene.vertices[:, 1] - self.v0
        self.e2 = scene.vertices[:, 2] - self.v0
        gn = np.cross(self.e1, self.e2)
        self.areas = 0.5 * np.linalg.norm(gn, axis=-1)
        self.n_geo = gn / np.maximum(np.linalg.norm(gn, axis=-1, keepdims=True), 1e-300)
        self.vn = scene.normals
        self.diffuse = scene.diffuse
        self.specular = scene.specular
        self.roughness = scene.roughness
        self.emission = scene.emission
        self.lights = np.where((scene.emission > 0).any(axis=-1))[0]
        la = self.areas[self.lights]
        self.total_light_area = float(la.sum())
        self.light_cdf = np.cumsum(la) / max(self.total_light_area, 1e-300)
        self.count = len(scene)

    def intersect(self, origins, dirs, t_max=None):
        """Nearest hit via Moller-Trumbore. Returns (t, tri, u, v)."""
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        best_u = np.zeros(n)
        best_v = np.zeros(n)
        batch = max(1, 4_000_000 // max(self.count, 1))
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            o = origins[lo:hi]
            d = dirs[lo:hi]
            p = np.cross(d[:, None, :], self.e2[None, :, :])
            det = np.einsum("tj,ntj->nt", self.e1, p)
            inv = np.where(np.abs(det) > 1e-14, 1.0 / np.where(det == 0, 1.0, det), 0.0)
            s = o[:, None, :] - self.v0[None, :, :]
            u = np.einsum("ntj,ntj->nt", s, p) * inv
            q = np.cross(s, self.e1[None, :, :])
            v = np.einsum("nj,ntj->nt", d, q) * inv
            t = np.einsum("tj,ntj->nt", self.e2, q) * inv
            ok = (
                (np.abs(det) > 1e-14)
                & (u >= -1e-12)
                & (v >= -1e-12)
                & (u + v <= 1.0 + 1e-12)
                & (t > _T_MIN)
            )
            if t_max is not None:
                ok &= t < t_max[lo:hi, None]
            t = np.where(ok, t, np.inf)
            k = np.argmin(t, axis=1)
            rows = np.arange(hi - lo)
            tm = t[rows, k]
            best_t[lo:hi] = tm
            best_tri[lo:hi] = np.where(np.isfinite(tm), k, -1)
            best_u[lo:hi] = u[rows, k]
            best_v[lo:hi] = v[rows, k]
        return best_t, best_tri, best_u, best_v

    def occluded(self, origins, dirs, dist) -> np.ndarray:
        t, tri, _, _ = self.intersect(origins, dirs, t_max=dist * _SHADOW_SHRINK)
        return tri >= 0


# -- the integrator ----------------------------------------------------------------


def path_trace(
    scene: Scene,
    spp: int,
    seed: int,
    max_depth: int = MAX_DEPTH_DEFAULT,
    return_stderr: bool = False,
):
    """Render the scene. Returns an HdrImage (and per-pixel standard error
    of the mean when ``return_stderr`` is set)."""
    validate_scene(scene)
    if spp < 1:
        raise ValidationError(f"spp must be >= 1, got {spp}")
    if max_depth < 1:
        raise ValidationError(f"max_depth must be >= 1, got {max_depth}")
    geo = _TraceGeometry(scene)
    if geo.lights.size == 0:
        raise ValidationError("scene has no emissive triangles")

    w, h = scene.camera.resolution
    n_pix = w * h
    acc = np.zeros((n_pix, 3))
    acc_sq = np.zeros((n_pix, 3))

    # flatten (pixel, sample) pairs into wavefronts of roughly 64k paths
    per_round = max(1, 65536 // n_pix)
    pix_idx_all = np.arange(n_pix, dtype=np.int64)
    for s0 in range(0, spp, per_round):
        s1 = min(s0 + per_round, spp)
        k = s1 - s0
        pix_rep = np.tile(pix_idx_all, k)
        samp_rep = np.repeat(np.arange(s0, s1, dtype=np.int64), n_pix)
        rad = _trace_paths(scene, geo, pix_rep, samp_rep, seed, max_depth)
        rad = rad.reshape(k, n_pix, 3)
        acc += rad.sum(axis=0)
        acc_sq += (rad * rad).sum(axis=0)

    mean = acc / spp
    img = HdrImage(mean.reshape(h, w, 3).astype(np.float32))
    if not return_stderr:
        return img
    if spp > 1:
        var = np.maximum(acc_sq - spp * mean * mean, 0.0) / (spp - 1)
        stderr = np.sqrt(var / spp)
    else:
        stderr = np.zeros_like(mean)
    return img, stderr.reshape(h, w, 3)


def _trace_paths(scene, geo, pix, samp, seed, max_depth):
    """Trace one path per (pixel, sample) pair; returns (N, 3) radiance."""
    w, h = scene.camera.resolution
    n = pix.shape[0]
    jx = rand01(seed, pix, samp, 0)
    jy = rand01(seed, pix, samp, 1)
    xs = (pix % w).astype(np.float64) + jx
    ys = (pix // w).astype(np.float64) + jy
    origins, dirs = pixel_rays_world(scene.camera, xs, ys)

    radiance = np.zeros((n, 3))
    throughput = np.ones((n, 3))
    pdf_prev = np.zeros(n)  # solid-angle pdf of the ray that produced this hit
    alive = np.arange(n)

    for depth in range(max_depth):
        if alive.size == 0:
            break
        t, tri, bu, bv = geo.intersect(origins, dirs)
        hit = tri >= 0
        alive = alive[hit]
        if alive.size == 0:
            break
        t, tri, bu, bv = t[hit], tri[hit], bu[hit], bv[hit]
        origins, dirs = origins[hit], dirs[hit]
        throughput = throughput[hit]
        pdf_prev = pdf_prev[hit]
        pk = pix[alive]
        sk = samp[alive]

        bw = 1.0 - bu - bv
        x = (
            bw[:, None] * geo.v0[tri]
            + bu[:, None] * (geo.v0[tri] + geo.e1[tri])
            + bv[:, None] * (geo.v0[tri] + geo.e2[tri])
        )
        n_geo = geo.n_geo[tri]
        vn = geo.vn[tri]
        n_sh = bw[:, None] * vn[:, 0] + bu[:, None] * vn[:, 1] + bv[:, None] * vn[:, 2]
        n_sh = n_sh / np.maximum(np.linalg.norm(n_sh, axis=-1, keepdims=True), 1e-300)

        wo = -dirs
        side = np.where(np.sum(n_geo * wo, axis=-1) >= 0.0, 1.0, -1.0)[:, None]
        n_geo_f = n_geo * side
        n_sh_f = n_sh * side
        backfacing = np.sum(n_sh_f * wo, axis=-1) <= 1e-9
        n_sh_f = np.where(backfacing[:, None], n_geo_f, n_sh_f)

        # emission picked up by the path ray itself
        le = geo.emission[tri]
        is_emitter = (le > 0).any(axis=-1)
        if is_emitter.any():
            if depth == 0:
                mis = np.ones(alive.size)
            else:
                cos_l = np.abs(np.sum(geo.n_geo[tri] * dirs, axis=-1))
                pdf_light = np.where(
                    cos_l > 1e-9,
                    (t * t) / np.maximum(geo.total_light_area * cos_l, 1e-300),
                    np.inf,
                )
                mis = _power_heuristic(pdf_prev, pdf_light)
            radiance[alive] += throughput * le * (mis * is_emitter)[:, None]

        diffuse = geo.diffuse[tri]
        specular = geo.specular[tri]
        alpha = geo.roughness[tri]
        reflective = (diffuse.mean(axis=-1) + specular.mean(axis=-1)) > 0

        if depth == max_depth - 1:
            break  # no budget left for the shadow segment

        # next-event estimation toward an area-sampled emitter
        u_pick = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 0)
        u_l1 = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 1)
        u_l2 = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 2)
        li = geo.lights[np.searchsorted(geo.light_cdf, u_pick, side="right").clip(0, geo.lights.size - 1)]
        su = np.sqrt(u_l1)
        b0 = 1.0 - su
        b1 = su * (1.0 - u_l2)
        b2 = su * u_l2
        lp = (
            b0[:, None] * geo.v0[li]
            + b1[:, None] * (geo.v0[li] + geo.e1[li])
            + b2[:, None] * (geo.v0[li] + geo.e2[li])
        )
        to_l = lp - x
        dist = np.linalg.norm(to_l, axis=-1)
        wi = to_l / np.maximum(dist[:, None], 1e-300)
        cos_x = np.sum(n_sh_f * wi, axis=-1)
        cos_geo = np.sum(n_geo_f * wi, axis=-1)
        cos_l = np.abs(np.sum(geo.n_geo[li] * wi, axis=-1))
        candidate = reflective & (cos_x > 1e-9) & (cos_geo > 1e-9) & (cos_l > 1e-9) & (dist > 1e-6)
        if candidate.any():
            pdf_l = (dist * dist) / np.maximum(geo.total_light_area * cos_l, 1e-300)
            f = ggx_brdf(wi, wo, n_sh_f, _Params(diffuse, specular, alpha))
            pdf_b, _ = _bsdf_pdf(wi, wo, n_sh_f, diffuse, specular, alpha)
            w_mis = _power_heuristic(pdf_l, pdf_b)
            contrib = throughput * f * (cos_x / np.maximum(pdf_l, 1e-300) * w_mis)[:, None]
            contrib *= geo.emission[li]
            ci = np.where(candidate)[0]
            if ci.size:
                so = x[ci] + n_geo_f[ci] * _OFFSET
                blocked = geo.occluded(so, wi[ci], dist[ci])
                ok = ci[~blocked]
                radiance[alive[ok]] += contrib[ok]

        # Russian roulette on the throughput after a few bounces
        if depth >= _RR_START:
            u_rr = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 6)
            q = np.clip(throughput.max(axis=-1), 0.05, 1.0)
            die = u_rr >= q
            throughput = throughput / np.maximum(q, 1e-300)[:, None]
        else:
            die = np.zeros(alive.size, dtype=bool)

        u_lb = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 3)
        u_d1 = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 4)
        u_d2 = rand01(seed, pk, sk, 2 + depth * _DIMS_PER_BOUNCE + 5)
        wi_new, pdf_new, dead = _sample_bsdf(u_lb, u_d1, u_d2, wo, n_sh_f, diffuse, specular, alpha)
        cos_new = np.sum(n_sh_f * wi_new, axis=-1)
        geo_ok = np.sum(n_geo_f * wi_new, axis=-1) > 1e-9
        dead |= die | ~reflective | ~geo_ok | (cos_new <= 1e-9)

        f_new = ggx_brdf(wi_new, wo, n_sh_f, _Params(diffuse, specular, alpha))
        throughput = throughput * f_new * (cos_new / np.maximum(pdf_new, 1e-300))[:, None]
        dead |= ~(np.isfinite(throughput).all(axis=-1)) | (throughput.max(axis=-1) <= 0)

        keep = ~dead
        alive = alive[keep]
        if alive.size == 0:
            break
        origins = x[keep] + n_geo_f[keep] * _OFFSET
        dirs = wi_new[keep]
        throughput = throughput[keep]
        pdf_prev = pdf_new[keep]

    return radiance
