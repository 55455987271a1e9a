import json

import numpy as np
import pytest

from trirender import scene as S
from trirender.errors import SceneParseError, ValidationError

from helpers import rng


def unit_quad(y=0.0, half=1.0):
    """Two triangles spanning [-half, half]^2 at height y, facing +y."""
    v = np.array(
        [[-half, y, -half], [half, y, -half], [half, y, half], [-half, y, half]]
    )
    idx = np.array([[0, 2, 1], [0, 3, 2]])
    return v, idx


def simple_scene(res=(32, 32)) -> S.Scene:
    v, idx = unit_quad()
    tris = []
    n = np.array([0.0, 1.0, 0.0])
    for f in idx:
        tris.append(
            S.Triangle(
                v[f],
                np.tile(n, (3, 1)),
                S.Material([0.5, 0.4, 0.3], [0.2, 0.2, 0.2], 0.5, [0, 0, 0]),
                flat=True,
            )
        )
    light = S.Triangle(
        np.array([[-0.2, 2.0, -0.2], [0.2, 2.0, -0.2], [0.0, 2.0, 0.2]]),
        np.tile([0.0, -1.0, 0.0], (3, 1)),
        S.Material([0, 0, 0], [0, 0, 0], 1.0, [5.0, 5.0, 5.0]),
        flat=True,
    )
    tris.append(light)
    cam = S.make_camera([0, 1.0, 3.0], [0, 0, 0], [0, 1, 0], 45.0, res)
    return S.Scene.from_triangles(tris, cam)


def test_camera_convention_example():
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 45.0, (32, 32))
    np.testing.assert_allclose(cam.to_camera(np.zeros(3)), [0, 0, -5], atol=1e-12)
    np.testing.assert_allclose(cam.orientation, np.eye(3), atol=1e-12)


def test_center_pixel_direction_is_minus_z():
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 45.0, (32, 32))
    d = S.pixel_directions_cam(cam, np.array([16.0]), np.array([16.0]))
    np.testing.assert_allclose(d[0], [0, 0, -1], atol=1e-12)


def test_pixel_direction_signs():
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 60.0, (64, 32))
    # top-left pixel: left of center (x < 0), above center (y > 0)
    d = S.pixel_directions_cam(cam, np.array([0.5]), np.array([0.5]))[0]
    assert d[0] < 0 and d[1] > 0 and d[2] < 0
    # horizontal fov wider than vertical for a 2:1 image
    dr = S.pixel_directions_cam(cam, np.array([64.0]), np.array([16.0]))[0]
    du = S.pixel_directions_cam(cam, np.array([32.0]), np.array([0.0]))[0]
    assert abs(dr[0]) > abs(du[1])


def test_scene_roundtrip_identity(tmp_path):
    sc = simple_scene()
    p = str(tmp_path / "scene.json")
    S.save_scene(sc, p)
    sc2 = S.load_scene(p)
    np.testing.assert_allclose(sc2.vertices, sc.vertices, atol=1e-6)
    np.testing.assert_allclose(sc2.normals, sc.normals, atol=1e-6)
    np.testing.assert_allclose(sc2.diffuse, sc.diffuse, atol=1e-6)
    np.testing.assert_allclose(sc2.specular, sc.specular, atol=1e-6)
    np.testing.assert_allclose(sc2.roughness, sc.roughness, atol=1e-6)
    np.testing.assert_allclose(sc2.emission, sc.emission, atol=1e-6)
    np.testing.assert_allclose(sc2.camera.position, sc.camera.position, atol=1e-6)
    np.testing.assert_allclose(sc2.camera.orientation, sc.camera.orientation, atol=1e-6)
    assert sc2.camera.resolution == sc.camera.resolution
    assert sc2.camera.fov_y_deg == pytest.approx(sc.camera.fov_y_deg, abs=1e-6)
    assert (sc2.flat == sc.flat).all()


def test_mesh_file_loading(tmp_path):
    mesh = tmp_path / "tri.mesh"
    mesh.write_text("# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    doc = {
        "meshes": [
            {
                "file": "tri.mesh",
                "material": {
                    "diffuse": [0.5, 0.5, 0.5],
                    "specular": [0.1, 0.1, 0.1],
                    "roughness": 0.3,
                    "emission": [0, 0, 0],
                },
            },
            {
                "vertices": [[-1, 2, -1], [1, 2, -1], [0, 2, 1]],
                "indices": [[0, 1, 2]],
                "material": {
                    "diffuse": [0, 0, 0],
                    "specular": [0, 0, 0],
                    "roughness": 1.0,
                    "emission": [3, 3, 3],
                },
                "flat_shaded": True,
            },
        ],
        "camera": {
            "position": [0, 0, 5],
            "look_at": [0, 0, 0],
            "up": [0, 1, 0],
            "fov_y_deg": 45,
            "resolution": [16, 16],
        },
    }
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(doc))
    sc = S.load_scene(str(p))
    assert len(sc) == 2
    # computed normal of the flat ccw triangle is +z
    np.testing.assert_allclose(sc.normals[0], np.tile([0, 0, 1.0], (3, 1)), atol=1e-12)
    assert sc.emissive_mask().tolist() == [False, True]


def test_mesh_parse_errors(tmp_path):
    bad = tmp_path / "bad.mesh"
    bad.write_text("v 0 0 0\nvt 1 2\n")
    with pytest.raises(SceneParseError) as ei:
        S.load_mesh(str(bad))
    assert ":2:" in str(ei.value)

    oob = tmp_path / "oob.mesh"
    oob.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(SceneParseError):
        S.load_mesh(str(oob))


def test_mesh_transform_applied(tmp_path):
    theta = np.pi / 2
    rot = np.array(
        [[np.cos(theta), 0, np.sin(theta)], [0, 1, 0], [-np.sin(theta), 0, np.cos(theta)]]
    )
    doc = {
        "meshes": [
            {
                "vertices": [[1, 0, 0], [2, 0, 0], [1, 1, 0]],
                "indices": [[0, 1, 2]],
                "material": {
                    "diffuse": [0.5, 0.5, 0.5],
                    "specular": [0, 0, 0],
                    "roughness": 0.5,
                    "emission": [0, 0, 0],
                },
                "transform": {
                    "rotation": rot.tolist(),
                    "translation": [0, 5, 0],
                    "scale": 2.0,
                },
            }
        ],
        "camera": {
            "position": [0, 0, 5],
            "look_at": [0, 0, 0],
            "up": [0, 1, 0],
            "fov_y_deg": 45,
            "resolution": [8, 8],
        },
    }
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(doc))
    sc = S.load_scene(str(p))
    expected_v0 = rot @ (2.0 * np.array([1, 0, 0])) + np.array([0, 5, 0])
    np.testing.assert_allclose(sc.vertices[0, 0], expected_v0, atol=1e-12)


def test_vertex_normals_area_weighted_oracle():
    # independent oracle: accumulate cross products triangle by triangle
    r = rng(31)
    verts = r.normal(size=(8, 3))
    faces = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [0, 5, 7], [1, 2, 4]])
    expected = np.zeros_like(verts)
    for f in faces:
        a, b, c = verts[f]
        fn = np.cross(b - a, c - a)  # length is 2x area
        for vi in f:
            expected[vi] += fn
    lens = np.linalg.norm(expected, axis=-1, keepdims=True)
    safe = lens[:, 0] > 1e-12
    got = S.vertex_normals_from_faces(verts, faces)
    np.testing.assert_allclose(got[safe], (expected / np.maximum(lens, 1e-300))[safe], atol=1e-12)
    assert np.abs(np.linalg.norm(got, axis=-1) - 1).max() < 1e-12


def test_flat_shading_uses_geometric_normal(tmp_path):
    sc = simple_scene()
    geo = sc.geometric_normals()
    for i in range(len(sc)):
        if sc.flat[i]:
            for k in range(3):
                np.testing.assert_allclose(sc.normals[i, k], geo[i], atol=1e-12)


def test_validation_degenerate_triangle():
    tris = [
        S.Triangle(
            np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float),
            np.tile([0, 0, 1.0], (3, 1)),
            S.Material([0.5] * 3, [0.1] * 3, 0.5, [0, 0, 0]),
        )
    ]
    cam = S.make_camera([0, 0, 5], [0, 0, 0], [0, 1, 0], 45, (8, 8))
    with pytest.raises(ValidationError, match="degenerate"):
        S.validate_scene(S.Scene.from_triangles(tris, cam))


def test_validation_resolution_not_divisible_by_8():
    sc = simple_scene()
    sc.camera.resolution = (100, 100)
    with pytest.raises(ValidationError, match="divisible by 8"):
        S.validate_scene(sc)


def test_validation_material_ranges():
    sc = simple_scene()
    sc.roughness = sc.roughness.copy()
    sc.roughness[0] = 0.001
    with pytest.raises(ValidationError, match="roughness"):
        S.validate_scene(sc)

    sc2 = simple_scene()
    sc2.diffuse = sc2.diffuse.copy()
    sc2.specular = sc2.specular.copy()
    sc2.diffuse[0] = [0.9, 0.9, 0.9]
    sc2.specular[0] = [0.3, 0.3, 0.3]
    with pytest.raises(ValidationError, match="diffuse"):
        S.validate_scene(sc2)


def test_validation_normals_unit():
    sc = simple_scene()
    sc.normals = sc.normals.copy()
    sc.normals[0, 0] *= 1.5
    with pytest.raises(ValidationError, match="normal"):
        S.validate_scene(sc)


def test_camera_up_parallel_to_view_rejected():
    with pytest.raises(ValidationError, match="parallel"):
        S.make_camera([0, 5, 0], [0, 0, 0], [0, 1, 0], 45, (8, 8))


def test_transform_scene_and_camera_space_invariance():
    sc = simple_scene()
    r = rng(77)
    q = r.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    t = np.array([3.0, -2.0, 7.0])
    moved = S.transform_scene(sc, rot, t)
    a = S.to_camera_space(sc)
    b = S.to_camera_space(moved)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-5)
    np.testing.assert_allclose(a.normals, b.normals, atol=1e-5)
    np.testing.assert_allclose(b.camera.position, np.zeros(3), atol=1e-9)
    np.testing.assert_allclose(b.camera.orientation, np.eye(3), atol=1e-9)


def test_transform_rejects_non_rotation():
    sc = simple_scene()
    with pytest.raises(ValidationError, match="rotation"):
        S.transform_scene(sc, np.eye(3) * 2.0, np.zeros(3))
    refl = np.diag([-1.0, 1.0, 1.0])
    with pytest.raises(ValidationError, match="reflection"):
        S.transform_scene(sc, refl, np.zeros(3))


def test_material_vectors_stacking_order():
    sc = simple_scene()
    m = sc.material_vectors()
    assert m.shape == (len(sc), 10)
    np.testing.assert_allclose(m[0, :3], sc.diffuse[0])
    np.testing.assert_allclose(m[0, 3:6], sc.specular[0])
    assert m[0, 6] == sc.roughness[0]
    np.testing.assert_allclose(m[0, 7:], sc.emission[0])


def test_missing_scene_file_raises_oserror():
    with pytest.raises(OSError):
        S.load_scene("/nonexistent/scene.json")


def test_max_triangle_budget():
    sc = simple_scene()
    with pytest.raises(ValidationError, match="exceeds"):
        S.validate_scene(sc, max_triangles=2)
