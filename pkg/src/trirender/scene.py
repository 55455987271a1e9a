"""Scene representation and I/O.

A scene is a flat triangle soup with per-triangle materials plus one
camera. Geometry is stored per triangle (three vertices, three vertex
normals) in float64 structure-of-arrays form; the ``triangles`` property
materializes individual records when object-style access is wanted.

Camera convention: right-handed, camera looks down -z in camera space,
y is up, square pixels, vertical field of view, both resolution extents
divisible by 8.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneParseError, ValidationError

log = logging.getLogger(__name__)

MAX_TRIANGLES = 4096
DEGENERATE_AREA = 1e-12
_ORTHO_TOL = 1e-5


@dataclass
class Material:
    diffuse: np.ndarray  # (3,) albedo in [0, 1]
    specular: np.ndarray  # (3,) albedo in [0, 1]
    roughness: float  # GGX alpha, [0.01, 1]
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))  # radiance, >= 0

    def __post_init__(self):
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64)
        self.specular = np.asarray(self.specular, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        self.roughness = float(self.roughness)


@dataclass
class Triangle:
    vertices: np.ndarray  # (3, 3)
    normals: np.ndarray  # (3, 3) unit vertex normals
    material: Material
    flat: bool = False


@dataclass
class Camera:
    position: np.ndarray  # (3,)
    orientation: np.ndarray  # (3, 3) world-to-camera rotation, rows [right, up, -forward]
    fov_y_deg: float
    resolution: tuple  # (width, height)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        self.fov_y_deg = float(self.fov_y_deg)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    @property
    def forward(self) -> np.ndarray:
        return -self.orientation[2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world-space points (..., 3) into camera space."""
        return (points - self.position) @ self.orientation.T


def make_camera(position, look_at, up, fov_y_deg, resolution) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    look_at = np.asarray(look_at, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = look_at - position
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise ValidationError("camera look_at coincides with position")
    fwd = fwd / dist
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValidationError("camera up vector is parallel to the view direction")
    right = right / rn
    true_up = np.cross(right, fwd)
    orientation = np.stack([right, true_up, -fwd])
    return Camera(position, orientation, fov_y_deg, resolution)


def pixel_directions_cam(camera: Camera, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Unit camera-space ray directions for fractional pixel coordinates.

    ``xs`` runs along width (0 at the left edge), ``ys`` along height
    (0 at the top edge). Pixel centers sit at half-integers.
    """
    w, h = camera.resolution
    tan_y = math.tan(math.radians(camera.fov_y_deg) / 2.0)
    tan_x = tan_y * w / h
    ndc_x = (np.asarray(xs, dtype=np.float64) / w) * 2.0 - 1.0
    ndc_y = 1.0 - (np.asarray(ys, dtype=np.float64) / h) * 2.0
    d = np.stack(
        [ndc_x * tan_x, ndc_y * tan_y, -np.ones_like(ndc_x)],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_rays_world(camera: Camera, xs: np.ndarray, ys: np.ndarray):
    """World-space (origins, unit directions) through fractional pixel coords."""
    d_cam = pixel_directions_cam(camera, xs, ys)
    d_world = d_cam @ camera.orientation  # == orientation.T applied from the left
    origins = np.broadcast_to(camera.position, d_world.shape).copy()
    return origins, d_world


class Scene:
    """Triangle soup plus camera. Treat instances as immutable."""

    def __init__(self, vertices, normals, diffuse, specular, roughness, emission, flat, camera):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3, 3)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3, 3)
        self.diffuse = np.asarray(diffuse, dtype=np.float64).reshape(-1, 3)
        self.specular = np.asarray(specular, dtype=np.float64).reshape(-1, 3)
        self.roughness = np.asarray(roughness, dtype=np.float64).reshape(-1)
        self.emission = np.asarray(emission, dtype=np.float64).reshape(-1, 3)
        self.flat = np.asarray(flat, dtype=bool).reshape(-1)
        self.camera = camera

    @classmethod
    def from_triangles(cls, triangles, camera) -> "Scene":
        return cls(
            np.stack([t.vertices for t in triangles]),
            np.stack([t.normals for t in triangles]),
            np.stack([t.material.diffuse for t in triangles]),
            np.stack([t.material.specular for t in triangles]),
            np.array([t.material.roughness for t in triangles]),
            np.stack([t.material.emission for t in triangles]),
            np.array([t.flat for t in triangles]),
            camera,
        )

    def __len__(self) -> int:
        return self.vertices.shape[0]

    @property
    def triangles(self) -> list:
        out = []
        for i in range(len(self)):
            out.append(
                Triangle(
                    self.vertices[i],
                    self.normals[i],
                    Material(self.diffuse[i], self.specular[i], self.roughness[i], self.emission[i]),
                    bool(self.flat[i]),
                )
            )
        return out

    def geometric_normals(self) -> np.ndarray:
        e1 = self.vertices[:, 1] - self.vertices[:, 0]
        e2 = self.vertices[:, 2] - self.vertices[:, 0]
        n = np.cross(e1, e2)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def areas(self) -> np.ndarray:
        e1 = self.vertices[:, 1] - self.vertices[:, 0]
        e2 = self.vertices[:, 2] - self.vertices[:, 0]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)

    def anchors(self) -> np.ndarray:
        """Per-triangle 9-vector of concatenated vertex positions."""
        return self.vertices.reshape(-1, 9)

    def mean_vertex(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3).mean(axis=0)

    def emissive_mask(self) -> np.ndarray:
        return (self.emission > 0).any(axis=-1)

    def material_vectors(self) -> np.ndarray:
        """(T, 10) stacked material channels: diffuse, specular, roughness, emission."""
        return np.concatenate(
            [self.diffuse, self.specular, self.roughness[:, None], self.emission], axis=-1
        )


# -- validation ----------------------------------------------------------------


def validate_scene(scene: Scene, max_triangles: int = MAX_TRIANGLES) -> None:
    n = len(scene)
    if n < 1:
        raise ValidationError("scene has no triangles")
    if n > max_triangles:
        raise ValidationError(f"triangle count {n} exceeds maximum {max_triangles}")
    areas = scene.areas()
    bad = np.where(areas <= DEGENERATE_AREA)[0]
    if bad.size:
        raise ValidationError(f"degenerate triangle at index {bad[0]} (area {areas[bad[0]]:.3e})")
    norms = np.linalg.norm(scene.normals, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-4:
        i = int(np.abs(norms - 1.0).max(axis=-1).argmax())
        raise ValidationError(f"vertex normal not unit length on triangle {i}")
    if scene.diffuse.min() < 0 or scene.diffuse.max() > 1:
        raise ValidationError("diffuse albedo outside [0, 1]")
    if scene.specular.min() < 0 or scene.specular.max() > 1:
        raise ValidationError("specular albedo outside [0, 1]")
    if ((scene.diffuse + scene.specular) > 1.0 + 1e-6).any():
        raise ValidationError("diffuse + specular exceeds 1 on some channel")
    if scene.roughness.min() < 0.01 or scene.roughness.max() > 1.0:
        raise ValidationError("roughness outside [0.01, 1.0]")
    if scene.emission.min() < 0:
        raise ValidationError("negative emission")
    validate_camera(scene.camera)


def validate_camera(camera: Camera) -> None:
    w, h = camera.resolution
    if w <= 0 or h <= 0:
        raise ValidationError(f"resolution {w}x{h} not positive")
    if w % 8 or h % 8:
        raise ValidationError(f"resolution {w}x{h} not divisible by 8")
    if not (0.0 < camera.fov_y_deg < 180.0):
        raise ValidationError(f"fov_y {camera.fov_y_deg} outside (0, 180) degrees")
    o = camera.orientation
    if np.abs(o @ o.T - np.eye(3)).max() > _ORTHO_TOL:
        raise ValidationError("camera orientation not orthonormal")
    if np.linalg.det(o) < 0:
        raise ValidationError("camera orientation is not a proper rotation")


def _check_rotation(r: np.ndarray, what: str) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValidationError(f"{what} rotation must be 3x3, got {r.shape}")
    if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL:
        raise ValidationError(f"{what} rotation not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValidationError(f"{what} rotation is a reflection")
    return r


# -- mesh files ------------------------------------------------------------------


def load_mesh(path: str):
    """Parse the text mesh format: ``v x y z``, ``vn x y z``, ``f i j k``.

    Face indices are 1-based. Returns (vertices, normals-or-None, faces).
    """
    verts, normals, faces = [], [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "v" and len(parts) == 4:
                    verts.append([float(p) for p in parts[1:]])
                elif parts[0] == "vn" and len(parts) == 4:
                    normals.append([float(p) for p in parts[1:]])
                elif parts[0] == "f" and len(parts) == 4:
                    faces.append([int(p) - 1 for p in parts[1:]])
                else:
                    raise SceneParseError(f"{path}:{lineno}: unrecognized line {line!r}")
            except ValueError as e:
                raise SceneParseError(f"{path}:{lineno}: {e}") from e
    if not verts:
        raise SceneParseError(f"{path}: mesh has no vertices")
    if not faces:
        raise SceneParseError(f"{path}: mesh has no faces")
    v = np.array(verts, dtype=np.float64)
    f = np.array(faces, dtype=np.int64)
    if f.min() < 0 or f.max() >= len(v):
        raise SceneParseError(f"{path}: face index out of range (1..{len(v)})")
    n = None
    if normals:
        if len(normals) != len(verts):
            raise SceneParseError(
                f"{path}: {len(normals)} normals for {len(verts)} vertices"
            )
        n = np.array(normals, dtype=np.float64)
    return v, n, f


def vertex_normals_from_faces(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals (the cross product carries the area)."""
    out = np.zeros_like(vertices)
    fv = vertices[faces]
    fn = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
    for k in range(3):
        np.add.at(out, faces[:, k], fn)
    lens = np.linalg.norm(out, axis=-1, keepdims=True)
    zero = lens[:, 0] < 1e-12
    if zero.any():
        # isolated or fully degenerate fans; give them a stable placeholder
        out[zero] = np.array([0.0, 0.0, 1.0])
        lens = np.linalg.norm(out, axis=-1, keepdims=True)
    return out / lens


# -- scene JSON -------------------------------------------------------------------


def _get(obj: dict, key: str, where: str):
    if key not in obj:
        raise SceneParseError(f"missing field {key!r} in {where}")
    return obj[key]


def _material_from_json(m: dict, where: str) -> Material:
    return Material(
        np.asarray(_get(m, "diffuse", where), dtype=np.float64),
        np.asarray(_get(m, "specular", where), dtype=np.float64),
        float(_get(m, "roughness", where)),
        np.asarray(_get(m, "emission", where), dtype=np.float64),
    )


def load_scene(path: str, max_triangles: int = MAX_TRIANGLES) -> Scene:
    """Load and validate a scene JSON file.

    Mesh entries either reference a mesh file (resolved relative to the
    scene file) or carry inline vertices/indices and optional normals.
    """
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise SceneParseError(f"{path}: invalid JSON: {e}") from e

    meshes = _get(doc, "meshes", path)
    if not isinstance(meshes, list) or not meshes:
        raise SceneParseError(f"{path}: 'meshes' must be a non-empty list")

    base = os.path.dirname(os.path.abspath(path))
    all_v, all_n = [], []
    all_d, all_s, all_r, all_e, all_flat = [], [], [], [], []

    for mi, entry in enumerate(meshes):
        where = f"{path} meshes[{mi}]"
        if "file" in entry:
            mesh_path = entry["file"]
            if not os.path.isabs(mesh_path):
                mesh_path = os.path.join(base, mesh_path)
            v, n, f = load_mesh(mesh_path)
        elif "vertices" in entry:
            v = np.asarray(_get(entry, "vertices", where), dtype=np.float64)
            f = np.asarray(_get(entry, "indices", where), dtype=np.int64)
            if v.ndim != 2 or v.shape[1] != 3:
                raise SceneParseError(f"{where}: vertices must be (n, 3)")
            if f.ndim != 2 or f.shape[1] != 3:
                raise SceneParseError(f"{where}: indices must be (n, 3)")
            if f.size and (f.min() < 0 or f.max() >= len(v)):
                raise SceneParseError(f"{where}: index out of range")
            n = None
            if "normals" in entry and entry["normals"] is not None:
                n = np.asarray(entry["normals"], dtype=np.float64)
                if n.shape != v.shape:
                    raise SceneParseError(f"{where}: normals shape {n.shape} != vertices {v.shape}")
        else:
            raise SceneParseError(f"{where}: needs either 'file' or 'vertices'")

        mat = _material_from_json(_get(entry, "material", where), where)
        flat = bool(entry.get("flat_shaded", False))

        tr = entry.get("transform")
        if tr is not None:
            rot = _check_rotation(tr.get("rotation", np.eye(3)), where)
            trans = np.asarray(tr.get("translation", np.zeros(3)), dtype=np.float64)
            scale = float(tr.get("scale", 1.0))
            if scale <= 0:
                raise ValidationError(f"{where}: scale must be positive")
            v = (scale * v) @ rot.T + trans
            if n is not None:
                n = n @ rot.T

        if n is None:
            n = vertex_normals_from_faces(v, f)
        else:
            lens = np.linalg.norm(n, axis=-1, keepdims=True)
            degen = lens[:, 0] < 1e-12
            if degen.any():
                log.warning("%s: %d zero-length normals replaced by geometric ones", where, degen.sum())
                geo = vertex_normals_from_faces(v, f)
                n = np.where(degen[:, None], geo, n / np.maximum(lens, 1e-300))
            else:
                n = n / lens

        tv = v[f]  # (F, 3, 3)
        if flat:
            gn = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
            gl = np.linalg.norm(gn, axis=-1, keepdims=True)
            gn = gn / np.maximum(gl, 1e-300)
            tn = np.repeat(gn[:, None, :], 3, axis=1)
        else:
            tn = n[f]

        count = len(f)
        all_v.append(tv)
        all_n.append(tn)
        all_d.append(np.tile(mat.diffuse, (count, 1)))
        all_s.append(np.tile(mat.specular, (count, 1)))
        all_r.append(np.full(count, mat.roughness))
        all_e.append(np.tile(mat.emission, (count, 1)))
        all_flat.append(np.full(count, flat))

    cam_doc = _get(doc, "camera", path)
    camera = make_camera(
        _get(cam_doc, "position", "camera"),
        _get(cam_doc, "look_at", "camera"),
        _get(cam_doc, "up", "camera"),
        float(_get(cam_doc, "fov_y_deg", "camera")),
        _get(cam_doc, "resolution", "camera"),
    )

    scene = Scene(
        np.concatenate(all_v),
        np.concatenate(all_n),
        np.concatenate(all_d),
        np.concatenate(all_s),
        np.concatenate(all_r),
        np.concatenate(all_e),
        np.concatenate(all_flat),
        camera,
    )
    validate_scene(scene, max_triangles)
    return scene


def save_scene(scene: Scene, path: str) -> None:
    """Serialize a scene as JSON with one inline mesh entry per triangle."""
    meshes = []
    for i in range(len(scene)):
        meshes.append(
            {
                "vertices": scene.vertices[i].tolist(),
                "indices": [[0, 1, 2]],
                "normals": scene.normals[i].tolist(),
                "material": {
                    "diffuse": scene.diffuse[i].tolist(),
                    "specular": scene.specular[i].tolist(),
                    "roughness": float(scene.roughness[i]),
                    "emission": scene.emission[i].tolist(),
                },
                "flat_shaded": bool(scene.flat[i]),
            }
        )
    cam = scene.camera
    doc = {
        "meshes": meshes,
        "camera": {
            "position": cam.position.tolist(),
            "look_at": (cam.position + cam.forward).tolist(),
            "up": cam.orientation[1].tolist(),
            "fov_y_deg": cam.fov_y_deg,
            "resolution": list(cam.resolution),
        },
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


# -- rigid transforms ----------------------------------------------------------------


def transform_scene(scene: Scene, rotation, translation) -> Scene:
    """Apply the rigid transform x -> R x + t to geometry and camera."""
    r = _check_rotation(rotation, "transform")
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    cam = scene.camera
    new_cam = Camera(
        r @ cam.position + t,
        cam.orientation @ r.T,
        cam.fov_y_deg,
        cam.resolution,
    )
    return Scene(
        scene.vertices @ r.T + t,
        scene.normals @ r.T,
        scene.diffuse,
        scene.specular,
        scene.roughness,
        scene.emission,
        scene.flat,
        new_cam,
    )


def to_camera_space(scene: Scene) -> Scene:
    """Re-express the scene in camera space: camera at origin, looking down -z."""
    o = scene.camera.orientation
    return transform_scene(scene, o, -o @ scene.camera.position)
