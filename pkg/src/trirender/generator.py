"""Procedural training-scene generation.

Each scene is a tiny room: a jittered template made of ground/back/side
walls, one to three primitive objects resting on the ground, emissive
triangle lights placed outside the room, and cameras aimed at the scene
center from outside. Every sampled quantity is drawn from the ranges
declared in :class:`GenConfig` and every finished scene passes
``validate_scene``.

Distances in GenConfig are expressed in "units", where one unit is the
maximum extent of the bounding box of the non-emissive geometry. After
assembly the whole scene is rescaled and centered so that all vertex
coordinates, lights included, land roughly in [-2, 2] per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, ValidationError
from .scene import Camera, Scene, make_camera, transform_scene, validate_scene

# Scale chosen so light anchors at the far end of their distance range
# stay inside [-2, 2] after normalization: 2.7 * 0.7 + light size < 2.
_WORLD_SCALE = 0.7

_LIGHT_SIDE = 0.18  # equilateral light side length, in units
_AIM_JITTER = 0.08  # look-at perturbation radius, in units
_CAMERA_ELEVATION = (12.0, 65.0)  # degrees above the horizon
_LIGHT_ELEVATION = (8.0, 70.0)
_PLACE_ATTEMPTS = 256


@dataclass(frozen=True)
class GenConfig:
    """Sampling ranges for scene generation. All (lo, hi) pairs are inclusive."""

    templates: int = 4  # how many of the room templates to draw from
    objects: tuple = (1, 3)
    lights: tuple = (1, 8)
    intensity: tuple = (2500.0, 5000.0)  # emitted radiance, white
    camera_distance: tuple = (1.5, 2.0)  # units
    light_distance: tuple = (2.1, 2.7)  # units
    fov: tuple = (30.0, 60.0)  # degrees, vertical
    roughness: tuple = (0.01, 1.0)  # log-uniform
    albedo_sum: tuple = (0.9, 1.0)  # max(diffuse) + specular
    per_triangle_ratio: float = 0.5  # chance a mesh gets per-triangle materials
    max_triangles: int = 64
    resolution: tuple = (32, 32)
    views: int = 4

    def __post_init__(self):
        object.__setattr__(self, "objects", _int_range("objects", self.objects, 1))
        object.__setattr__(self, "lights", _int_range("lights", self.lights, 1))
        object.__setattr__(self, "intensity", _float_range("intensity", self.intensity, 1e-6))
        object.__setattr__(
            self, "camera_distance", _float_range("camera_distance", self.camera_distance, 1.0)
        )
        object.__setattr__(
            self, "light_distance", _float_range("light_distance", self.light_distance, 1.0)
        )
        object.__setattr__(self, "fov", _float_range("fov", self.fov, 1.0))
        object.__setattr__(self, "roughness", _float_range("roughness", self.roughness, 0.01))
        if self.roughness[1] > 1.0:
            raise ValidationError("roughness upper bound must not exceed 1")
        object.__setattr__(self, "albedo_sum", _float_range("albedo_sum", self.albedo_sum, 0.0))
        if not (1 <= int(self.templates) <= len(_TEMPLATE_WALLS)):
            raise ValidationError(f"templates must be in [1, {len(_TEMPLATE_WALLS)}]")
        object.__setattr__(self, "templates", int(self.templates))
        if not (0.0 <= self.per_triangle_ratio <= 1.0):
            raise ValidationError("per_triangle_ratio must lie in [0, 1]")
        if self.fov[1] >= 180.0:
            raise ValidationError("fov upper bound must be below 180 degrees")
        if self.albedo_sum[1] > 1.0:
            raise ValidationError("albedo_sum upper bound must not exceed 1")
        if int(self.max_triangles) < 5:
            raise ValidationError("max_triangles too small for any scene")
        object.__setattr__(self, "max_triangles", int(self.max_triangles))
        w, h = self.resolution
        if int(w) % 8 or int(h) % 8 or int(w) <= 0 or int(h) <= 0:
            raise ValidationError(f"resolution {w}x{h} must be positive and divisible by 8")
        object.__setattr__(self, "resolution", (int(w), int(h)))
        if int(self.views) < 1:
            raise ValidationError("views must be at least 1")
        object.__setattr__(self, "views", int(self.views))

    def to_json(self) -> dict:
        return {
            "templates": self.templates,
            "objects": list(self.objects),
            "lights": list(self.lights),
            "intensity": list(self.intensity),
            "camera_distance": list(self.camera_distance),
            "light_distance": list(self.light_distance),
            "fov": list(self.fov),
            "roughness": list(self.roughness),
            "albedo_sum": list(self.albedo_sum),
            "per_triangle_ratio": self.per_triangle_ratio,
            "max_triangles": self.max_triangles,
            "resolution": list(self.resolution),
            "views": self.views,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GenConfig":
        known = set(cls().to_json())
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown GenConfig fields: {sorted(extra)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**kwargs)


def _int_range(name, pair, lo_min) -> tuple:
    lo, hi = int(pair[0]), int(pair[1])
    if lo > hi:
        raise ValidationError(f"{name} range has min > max: {pair}")
    if lo < lo_min:
        raise ValidationError(f"{name} lower bound must be >= {lo_min}")
    return (lo, hi)


def _float_range(name, pair, lo_min) -> tuple:
    lo, hi = float(pair[0]), float(pair[1])
    if lo > hi:
        raise ValidationError(f"{name} range has min > max: {pair}")
    if lo < lo_min:
        raise ValidationError(f"{name} lower bound must be >= {lo_min}")
    return (lo, hi)


# -- primitive object library -------------------------------------------------------


def _quad(a, b, c, d, normal_hint) -> np.ndarray:
    """Two triangles covering the quad a-b-c-d, wound to face along the hint."""
    a, b, c, d = (np.asarray(p, dtype=np.float64) for p in (a, b, c, d))
    n = np.cross(b - a, c - a)
    if np.dot(n, normal_hint) < 0:
        tris = [(a, c, b), (a, d, c)]
    else:
        tris = [(a, b, c), (a, c, d)]
    return np.array(tris)


def _box_tris(half, center) -> np.ndarray:
    half = np.asarray(half, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    lo, hi = center - half, center + half
    p = {}
    for i in range(2):
        for j in range(2):
            for k in range(2):
                p[(i, j, k)] = np.array(
                    [(lo[0], hi[0])[i], (lo[1], hi[1])[j], (lo[2], hi[2])[k]]
                )
    faces = [
        (((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)), (-1, 0, 0)),
        (((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)), (1, 0, 0)),
        (((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)), (0, -1, 0)),
        (((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)), (0, 1, 0)),
        (((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)), (0, 0, -1)),
        (((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)), (0, 0, 1)),
    ]
    quads = [_quad(*(p[k] for k in corners), hint) for corners, hint in faces]
    return np.concatenate(quads)


def _radial_normals(verts, centers) -> np.ndarray:
    d = verts - centers
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def primitive_cube():
    """Unit cube centered at the origin; smooth normals point out of the corners."""
    verts = _box_tris((0.5, 0.5, 0.5), (0.0, 0.0, 0.0))
    return verts, _radial_normals(verts, np.zeros(3))


def primitive_icosphere(subdivisions: int = 0):
    """Icosphere of diameter 1; 20 * 4**subdivisions triangles."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    raw = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    raw *= 0.5 / np.linalg.norm(raw[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    tris = raw[np.array(faces)]
    out = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    flip = (out * tris.mean(axis=1)).sum(axis=-1) < 0
    tris[flip] = tris[flip][:, ::-1]
    for _ in range(subdivisions):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        for m in (ab, bc, ca):
            m *= 0.5 / np.linalg.norm(m, axis=-1, keepdims=True)
        tris = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
    return tris, _radial_normals(tris, np.zeros(3))


def primitive_pedestal():
    """Column with a wider top slab; two stacked boxes, 24 triangles."""
    column = _box_tris((0.30, 0.375, 0.30), (0.0, -0.125, 0.0))
    slab = _box_tris((0.50, 0.125, 0.50), (0.0, 0.375, 0.0))
    verts = np.concatenate([column, slab])
    normals = np.concatenate(
        [
            _radial_normals(column, np.array([0.0, -0.125, 0.0])),
            _radial_normals(slab, np.array([0.0, 0.375, 0.0])),
        ]
    )
    return verts, normals


def primitive_plane():
    """Unit square card standing upright in the XY plane."""
    verts = _quad(
        (-0.5, -0.5, 0.0), (0.5, -0.5, 0.0), (0.5, 0.5, 0.0), (-0.5, 0.5, 0.0), (0, 0, 1)
    )
    normals = np.tile(np.array([0.0, 0.0, 1.0]), (2, 3, 1))
    return verts, normals


PRIMITIVES = (
    ("cube", primitive_cube),
    ("icosphere", primitive_icosphere),
    ("pedestal", primitive_pedestal),
    ("plane", primitive_plane),
)

# Wall selection per room template: ground, then optional back/left/right walls.
_TEMPLATE_WALLS = (
    (),
    ("back",),
    ("back", "left"),
    ("back", "left", "right"),
)


# -- geometric helpers --------------------------------------------------------------


def _segment_blocked(p0, p1, tris) -> bool:
    """True when the open segment p0 -> p1 crosses any triangle."""
    if len(tris) == 0:
        return False
    d = np.asarray(p1, dtype=np.float64) - p0
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    pv = np.cross(d, e2)
    det = (e1 * pv).sum(axis=-1)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = p0 - tris[:, 0]
    u = (tv * pv).sum(axis=-1) * inv
    qv = np.cross(tv, e1)
    v = (d * qv).sum(axis=-1) * inv
    t = (e2 * qv).sum(axis=-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-6) & (t < 1.0 - 1e-6)
    return bool(hit.any())


def _unit_ball(rng) -> np.ndarray:
    v = rng.normal(size=3)
    v /= max(np.linalg.norm(v), 1e-12)
    return v * rng.random() ** (1.0 / 3.0)


def _yaw_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation matrix (random unit quaternion)."""
    u1, u2, u3 = rng.random(3)
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    x = a * math.sin(2.0 * math.pi * u2)
    y = a * math.cos(2.0 * math.pi * u2)
    z = b * math.sin(2.0 * math.pi * u3)
    w = b * math.cos(2.0 * math.pi * u3)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# -- material sampling --------------------------------------------------------------


def _sample_material(rng, gen: GenConfig):
    """Diffuse RGB, monochromatic specular, log-uniform roughness.

    max(diffuse) + specular lands uniformly inside gen.albedo_sum.
    """
    total = rng.uniform(*gen.albedo_sum)
    spec = rng.uniform(0.0, total)
    base = rng.uniform(0.05, 1.0, size=3)
    diffuse = base / base.max() * (total - spec)
    lo, hi = gen.roughness
    rough = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    return diffuse, np.full(3, spec), min(max(rough, lo), hi)


class _SceneBuilder:
    def __init__(self):
        self.verts = []
        self.normals = []
        self.diffuse = []
        self.specular = []
        self.roughness = []
        self.emission = []
        self.flat = []

    def add_mesh(self, rng, gen, verts, smooth, use_flat):
        count = len(verts)
        if use_flat:
            gn = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
            gn /= np.linalg.norm(gn, axis=-1, keepdims=True)
            normals = np.repeat(gn[:, None, :], 3, axis=1)
        else:
            normals = smooth
        self.verts.append(verts)
        self.normals.append(normals)
        self.flat.append(np.full(count, use_flat))
        per_triangle = rng.random() < gen.per_triangle_ratio
        draws = count if per_triangle else 1
        d, s, r = [], [], []
        for _ in range(draws):
            di, si, ri = _sample_material(rng, gen)
            d.append(di)
            s.append(si)
            r.append(ri)
        reps = 1 if per_triangle else count
        self.diffuse.append(np.tile(np.array(d), (reps, 1)))
        self.specular.append(np.tile(np.array(s), (reps, 1)))
        self.roughness.append(np.tile(np.array(r), reps))
        self.emission.append(np.zeros((count, 3)))

    def add_light(self, verts, normal, intensity):
        self.verts.append(verts[None])
        self.normals.append(np.tile(normal, (1, 3, 1)))
        self.diffuse.append(np.zeros((1, 3)))
        self.specular.append(np.zeros((1, 3)))
        self.roughness.append(np.ones(1))
        self.emission.append(np.full((1, 3), intensity))
        self.flat.append(np.ones(1, dtype=bool))

    def count(self) -> int:
        return sum(len(v) for v in self.verts)

    def arrays(self):
        return (
            np.concatenate(self.verts),
            np.concatenate(self.normals),
            np.concatenate(self.diffuse),
            np.concatenate(self.specular),
            np.concatenate(self.roughness),
            np.concatenate(self.emission),
            np.concatenate(self.flat),
        )


def _build_room(rng, gen: GenConfig, builder: _SceneBuilder):
    """Jittered ground plus the template's back/side walls. Returns wall tris."""
    template = int(rng.integers(gen.templates))
    sx = rng.uniform(1.0, 1.3)
    sz = rng.uniform(1.0, 1.3)
    hx, hz = sx / 2.0, sz / 2.0
    height = rng.uniform(0.5, 0.8) * max(sx, sz)
    gx, gz = rng.uniform(-0.05, 0.05, size=2)

    ground = _quad(
        (-hx, 0.0, -hz), (hx, 0.0, -hz), (hx, 0.0, hz), (-hx, 0.0, hz), (0, 1, 0)
    )
    ground = ground @ _yaw_matrix(rng.uniform(-0.17, 0.17)).T + np.array([gx, 0.0, gz])
    walls = [ground]

    def upright(c0, c1, hint):
        h0 = rng.uniform(0.9, 1.1) * height
        base = _quad(
            (*c0,), (*c1,), (c1[0], h0, c1[2]), (c0[0], h0, c0[2]), hint
        )
        center = base.reshape(-1, 3).mean(axis=0)
        r = _yaw_matrix(rng.uniform(-0.09, 0.09))
        off = rng.uniform(0.0, 0.06)
        return (base - center) @ r.T + center + np.asarray(hint) * -off

    for name in _TEMPLATE_WALLS[template]:
        if name == "back":
            walls.append(upright((-hx, 0.0, -hz), (hx, 0.0, -hz), (0, 0, 1)))
        elif name == "left":
            walls.append(upright((-hx, 0.0, -hz), (-hx, 0.0, hz), (1, 0, 0)))
        elif name == "right":
            walls.append(upright((hx, 0.0, -hz), (hx, 0.0, hz), (-1, 0, 0)))

    for w in walls:
        smooth = np.cross(w[:, 1] - w[:, 0], w[:, 2] - w[:, 0])
        smooth /= np.linalg.norm(smooth, axis=-1, keepdims=True)
        builder.add_mesh(rng, gen, w, np.repeat(smooth[:, None, :], 3, axis=1), True)

    return np.concatenate(walls), hx, hz, (gx, gz)


def _place_objects(rng, gen: GenConfig, builder: _SceneBuilder, n_objects, budget, hx, hz, gcenter, library):
    placed = []  # (x, z, radius)
    smallest = min(len(b()[0]) for _, b in library)
    for slot in range(n_objects):
        reserve = smallest * (n_objects - slot - 1)
        fitting = [b for _, b in library if len(b()[0]) <= budget - reserve]
        if not fitting:
            raise GenerationError(
                f"triangle budget exhausted: {budget} left for {n_objects - slot} objects"
            )
        verts, smooth = fitting[int(rng.integers(len(fitting)))]()
        scale = rng.uniform(0.22, 0.42) * min(hx, hz) * 2.0
        rot = _yaw_matrix(rng.uniform(0.0, 2.0 * math.pi))
        for attempt in range(_PLACE_ATTEMPTS):
            v = (verts * scale) @ rot.T
            radius = float(np.sqrt(v[..., 0] ** 2 + v[..., 2] ** 2).max())
            limit = 0.88 * min(hx, hz) - radius
            if limit <= 0.01:
                scale *= 0.78
                continue
            r = limit * math.sqrt(rng.random())
            theta = rng.uniform(0.0, 2.0 * math.pi)
            x, z = gcenter[0] + r * math.cos(theta), gcenter[1] + r * math.sin(theta)
            if all(math.hypot(x - px, z - pz) >= 0.85 * (radius + pr) for px, pz, pr in placed):
                lift = 0.002 * scale - v[..., 1].min()
                v = v + np.array([x, lift, z])
                n = smooth @ rot.T
                use_flat = bool(rng.random() < 0.5)
                builder.add_mesh(rng, gen, v, n, use_flat)
                placed.append((x, z, radius))
                budget -= len(v)
                break
            if attempt and attempt % 48 == 0:
                scale *= 0.78
        else:
            raise GenerationError(f"could not place object {slot} after {_PLACE_ATTEMPTS} tries")
    return budget


def _sample_outside_point(rng, dist_range, elevation, center, unit, walls, aim):
    """Point at a units-distance from center whose line of sight clears the walls."""
    for _ in range(_PLACE_ATTEMPTS):
        el = math.radians(rng.uniform(*elevation))
        az = rng.uniform(-math.pi, math.pi)
        direction = np.array(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )
        dist = rng.uniform(*dist_range) * unit
        pos = center + direction * dist
        if not _segment_blocked(pos, aim, walls):
            return pos
    raise GenerationError("no unobstructed placement found outside the walls")


def _light_triangle(rng, center_point, toward, side):
    n = toward - center_point
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    r = side / math.sqrt(3.0)
    spin = rng.uniform(0.0, 2.0 * math.pi)
    angles = spin + np.array([0.0, 2.0, 4.0]) * math.pi / 3.0
    verts = center_point + r * (np.cos(angles)[:, None] * e1 + np.sin(angles)[:, None] * e2)
    if np.dot(np.cross(verts[1] - verts[0], verts[2] - verts[0]), n) < 0:
        verts = verts[::-1].copy()
    return verts, n


# -- public sampling API --------------------------------------------------------------


def scene_and_views(rng, gen: GenConfig, library=PRIMITIVES):
    """Sample one scene plus ``gen.views`` cameras; the first is the scene camera."""
    builder = _SceneBuilder()
    walls, hx, hz, gcenter = _build_room(rng, gen, builder)

    n_lights = int(rng.integers(gen.lights[0], gen.lights[1] + 1))
    n_objects = int(rng.integers(gen.objects[0], gen.objects[1] + 1))
    budget = gen.max_triangles - builder.count() - n_lights
    smallest = min(len(b()[0]) for _, b in library)
    if budget < smallest * n_objects:
        raise GenerationError(
            f"max_triangles={gen.max_triangles} cannot fit {len(walls)} wall triangles, "
            f"{n_lights} lights and {n_objects} objects"
        )
    _place_objects(rng, gen, builder, n_objects, budget, hx, hz, gcenter, library)

    body = np.concatenate(builder.verts).reshape(-1, 3)
    lo, hi = body.min(axis=0), body.max(axis=0)
    center = (lo + hi) / 2.0
    unit = float((hi - lo).max())

    for _ in range(n_lights):
        pos = _sample_outside_point(
            rng, gen.light_distance, _LIGHT_ELEVATION, center, unit, walls, center
        )
        verts, normal = _light_triangle(rng, pos, center, _LIGHT_SIDE * unit)
        builder.add_light(verts, normal, rng.uniform(*gen.intensity))

    views = []
    for _ in range(gen.views):
        aim = center + _unit_ball(rng) * (_AIM_JITTER * unit)
        # the ground plane sits at y=0; an aim below it would hide behind
        # the floor from every elevated viewpoint
        aim[1] = max(aim[1], 0.02 * unit)
        pos = _sample_outside_point(
            rng, gen.camera_distance, _CAMERA_ELEVATION, center, unit, walls, aim
        )
        views.append((pos, aim, rng.uniform(*gen.fov)))

    k = _WORLD_SCALE / unit
    arrays = builder.arrays()
    verts = (arrays[0] - center) * k
    cameras = [
        make_camera((pos - center) * k, (aim - center) * k, (0, 1, 0), fov, gen.resolution)
        for pos, aim, fov in views
    ]
    scene = Scene(verts, *arrays[1:], cameras[0])
    validate_scene(scene, gen.max_triangles)
    return scene, cameras


def sample_scene(rng, gen: GenConfig, library=PRIMITIVES) -> Scene:
    """Sample a single random scene with one camera."""
    scene, _ = scene_and_views(rng, gen, library)
    return scene


def rotate_augment(scene: Scene, rng) -> Scene:
    """Apply a uniformly random rotation to the scene, camera included.

    Light transport is invariant under rigid motion, so the reference
    image of the unrotated scene remains valid supervision.
    """
    return transform_scene(scene, random_rotation(rng), np.zeros(3))


# -- distribution audit ---------------------------------------------------------------


def unit_and_center(scene: Scene):
    """(center, unit) of the non-emissive bounding box; unit is its max extent."""
    mask = ~scene.emissive_mask()
    if not mask.any():
        raise ValidationError("scene has no non-emissive geometry")
    pts = scene.vertices[mask].reshape(-1, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (lo + hi) / 2.0, float((hi - lo).max())


def audit_scene(scene: Scene, gen: GenConfig, eps: float = 1e-6) -> list:
    """Re-derive every GenConfig range from the scene alone; returns violations."""
    problems = []
    try:
        validate_scene(scene, gen.max_triangles)
    except ValidationError as e:
        problems.append(f"validation: {e}")
        return problems

    em = scene.emissive_mask()
    n_lights = int(em.sum())
    if not (gen.lights[0] <= n_lights <= gen.lights[1]):
        problems.append(f"light count {n_lights} outside {gen.lights}")
    for i in np.where(em)[0]:
        e = scene.emission[i]
        if not (abs(e[0] - e[1]) <= eps and abs(e[1] - e[2]) <= eps):
            problems.append(f"light {i} emission not white: {e}")
        if not (gen.intensity[0] - eps <= e[0] <= gen.intensity[1] + eps):
            problems.append(f"light {i} intensity {e[0]} outside {gen.intensity}")
        if scene.diffuse[i].any() or scene.specular[i].any():
            problems.append(f"light {i} is not a pure emitter")

    d, s, r = scene.diffuse[~em], scene.specular[~em], scene.roughness[~em]
    if s.size and (np.abs(s - s[:, :1]) > eps).any():
        problems.append("specular albedo not monochromatic")
    total = d.max(axis=-1) + s[:, 0]
    bad = (total < gen.albedo_sum[0] - eps) | (total > gen.albedo_sum[1] + eps)
    if bad.any():
        problems.append(f"albedo sum {total[bad][0]:.6f} outside {gen.albedo_sum}")
    if r.size and ((r < gen.roughness[0] - 1e-9) | (r > gen.roughness[1] + 1e-9)).any():
        problems.append(f"roughness outside {gen.roughness}")
    if scene.emission[~em].any():
        problems.append("non-light triangle has emission")

    center, unit = unit_and_center(scene)
    cam_d = float(np.linalg.norm(scene.camera.position - center)) / unit
    if not (gen.camera_distance[0] - eps <= cam_d <= gen.camera_distance[1] + eps):
        problems.append(f"camera distance {cam_d:.6f} units outside {gen.camera_distance}")
    if not (gen.fov[0] - eps <= scene.camera.fov_y_deg <= gen.fov[1] + eps):
        problems.append(f"fov {scene.camera.fov_y_deg} outside {gen.fov}")
    for i in np.where(em)[0]:
        ld = float(np.linalg.norm(scene.vertices[i].mean(axis=0) - center)) / unit
        if not (gen.light_distance[0] - eps <= ld <= gen.light_distance[1] + eps):
            problems.append(f"light {i} distance {ld:.6f} units outside {gen.light_distance}")

    if np.abs(scene.vertices).max() > 2.0:
        problems.append(f"vertex coordinate {np.abs(scene.vertices).max():.3f} exceeds 2")
    return problems
