import math

import numpy as np
import pytest

from armpose import (
    CameraIntrinsics,
    Mesh,
    RenderSettings,
    RigidTransform,
    bresenham_line,
    builtin_chain,
    default_link_meshes,
    draw_segment,
    load_obj,
    pose_mesh,
    read_pgm,
    render_chain_silhouette,
    render_link_clouds,
    render_silhouette,
    sample_link_clouds,
    sample_surface,
    save_obj,
    segment_reference,
    silhouette_iou,
    write_pgm,
)


def _cube_mesh(center, half):
    c = np.asarray(center, dtype=float)
    signs = [(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    verts = np.array([c + half * np.array(s) for s in signs])
    tris = np.array(
        [
            (0, 1, 3), (0, 3, 2),
            (4, 6, 7), (4, 7, 5),
            (0, 4, 5), (0, 5, 1),
            (2, 3, 7), (2, 7, 6),
            (0, 2, 6), (0, 6, 4),
            (1, 5, 7), (1, 7, 3),
        ]
    )
    return Mesh(verts, tris)


def _camera(width=224, height=224, f=260.0):
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


# ---------------------------------------------------------------------------
# meshes


def test_mesh_validation():
    with pytest.raises(ValueError):
        Mesh(np.zeros((0, 3)), None)
    with pytest.raises(ValueError):
        Mesh(np.array([[0.0, 0.0, np.inf]]), None)
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


def test_obj_round_trip(tmp_path):
    mesh = _cube_mesh([0.0, 0.0, 0.0], 0.5)
    path = tmp_path / "cube.obj"
    save_obj(mesh, path)
    again = load_obj(path)
    assert np.max(np.abs(again.vertices - mesh.vertices)) == 0.0
    assert np.array_equal(again.triangles, mesh.triangles)


def test_load_obj_slash_forms_and_fan(tmp_path):
    path = tmp_path / "pentagon.obj"
    path.write_text(
        "v 0 0 0\nv 1 0 0\nv 1.3 1 0\nv 0.5 1.7 0\nv -0.3 1 0\n"
        "f 1/1 2/2/2 3//3 4 5\n",
        encoding="utf-8",
    )
    mesh = load_obj(path)
    assert mesh.vertices.shape == (5, 3)
    assert mesh.triangles.shape == (3, 3)  # 5-gon fans into 3 triangles
    assert np.array_equal(mesh.triangles[:, 0], [0, 0, 0])


def test_load_obj_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        load_obj(path)


# ---------------------------------------------------------------------------
# surface sampling


def test_sample_surface_points_lie_on_triangle():
    tri = Mesh(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([[0, 1, 2]]))
    pts = sample_surface(tri, 4000, seed=1)
    assert pts.shape == (4000, 3)
    assert np.all(pts[:, 2] == 0.0)
    # inside the triangle: x/2 + y <= 1, x >= 0, y >= 0
    assert np.all(pts[:, 0] >= -1e-12)
    assert np.all(pts[:, 1] >= -1e-12)
    assert np.all(pts[:, 0] / 2.0 + pts[:, 1] <= 1.0 + 1e-9)
    centroid = np.array([2.0 / 3.0, 1.0 / 3.0, 0.0])
    assert np.max(np.abs(pts.mean(axis=0) - centroid)) < 0.03


def test_sample_surface_area_weighting():
    # two triangles with areas 0.5 and 1.5: expect ~75% of samples on the big one
    verts = np.array(
        [
            [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
            [5.0, 0.0, 0.0], [8.0, 0.0, 0.0], [5.0, 1.0, 0.0],
        ]
    )
    mesh = Mesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    n = 20000
    pts = sample_surface(mesh, n, seed=3)
    frac = np.mean(pts[:, 0] >= 4.0)
    sigma = math.sqrt(0.75 * 0.25 / n)
    assert abs(frac - 0.75) < 4.0 * sigma


def test_sample_surface_prefix_stable():
    mesh = _cube_mesh([0.0, 0.0, 0.0], 1.0)
    a = sample_surface(mesh, 100, seed=9)
    b = sample_surface(mesh, 400, seed=9)
    assert np.array_equal(b[:100], a)


def test_sample_surface_vertex_cycling_without_triangles():
    cloud = Mesh(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), None)
    pts = sample_surface(cloud, 5, seed=0)
    assert np.array_equal(pts[0], [1.0, 2.0, 3.0])
    assert np.array_equal(pts[1], [4.0, 5.0, 6.0])
    assert np.array_equal(pts[2], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# rendering


def test_render_is_deterministic_and_clips_behind_camera():
    k = _camera()
    settings = RenderSettings(samples_per_link=200, splat_radius=1, seed=0)
    mesh = _cube_mesh([0.0, 0.0, 0.0], 0.3)
    pts = sample_surface(mesh, 500, seed=2)
    pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, 3.0]))
    a = render_silhouette(pts, pose, k, settings)
    b = render_silhouette(pts, pose, k, settings)
    assert a.dtype == bool and a.shape == (224, 224)
    assert np.array_equal(a, b)
    assert a.any()
    behind = RigidTransform(np.eye(3), np.array([0.0, 0.0, -3.0]))
    empty = render_silhouette(pts, behind, k, settings)
    assert not empty.any()


def test_render_half_up_rounding_single_point():
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=0.0, cy=0.0, width=32, height=32)
    settings = RenderSettings(samples_per_link=1, splat_radius=0, seed=0)
    # u = 100*0.105 = 10.5 rounds up to 11; v = 100*0.203 = 20.3 rounds to 20
    pts = np.array([[0.105, 0.203, 1.0]])
    img = render_silhouette(pts, RigidTransform.identity(), k, settings)
    on = np.argwhere(img)
    assert on.shape == (1, 2)
    assert (on[0] == [20, 11]).all()  # row = v, column = u


def test_render_splat_disc_shape():
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32)
    settings = RenderSettings(samples_per_link=1, splat_radius=2, seed=0)
    pts = np.array([[0.0, 0.0, 1.0]])
    img = render_silhouette(pts, RigidTransform.identity(), k, settings)
    want = set()
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            if dx * dx + dy * dy <= 4:
                want.add((16 + dy, 16 + dx))
    assert set(map(tuple, np.argwhere(img))) == want


def test_cube_scene_bounding_box_analytic():
    # unit cube centered 4 units ahead: the front face (z = 3.5) bounds the
    # projected extent at cx +- f*0.5/3.5
    k = CameraIntrinsics(fx=500.0, fy=500.0, cx=112.0, cy=112.0, width=224, height=224)
    r = 1
    settings = RenderSettings(samples_per_link=10000, splat_radius=r, seed=0)
    mesh = _cube_mesh([0.0, 0.0, 4.0], 0.5)
    pts = sample_surface(mesh, 10000, seed=0)
    img = render_silhouette(pts, RigidTransform.identity(), k, settings)
    on = np.argwhere(img)
    lo_a = 112.0 - 500.0 * 0.5 / 3.5
    hi_a = 112.0 + 500.0 * 0.5 / 3.5
    tol = 1 + r
    for axis in (0, 1):
        assert abs(on[:, axis].min() - lo_a) <= tol
        assert abs(on[:, axis].max() - hi_a) <= tol


def test_render_resolution_consistency():
    # doubling the image grid and intrinsics doubles every projected center to
    # within half a fine pixel; a fine splat of radius 2r+2 therefore covers
    # the 2x2 fine block of every coarse on-pixel
    k = _camera(width=64, height=64, f=80.0)
    k2 = CameraIntrinsics(fx=160.0, fy=160.0, cx=64.0, cy=64.0, width=128, height=128)
    mesh = _cube_mesh([0.05, -0.02, 2.5], 0.4)
    pts = sample_surface(mesh, 800, seed=4)
    pose = RigidTransform.identity()
    r = 1
    coarse = render_silhouette(pts, pose, k, RenderSettings(800, splat_radius=r, seed=0))
    fine = render_silhouette(pts, pose, k2, RenderSettings(800, splat_radius=2 * r + 2, seed=0))
    for i, j in np.argwhere(coarse):
        assert fine[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].any()


def test_render_chain_and_clouds_agree():
    chain = builtin_chain("panda7")
    k = _camera()
    meshes = default_link_meshes(chain)
    settings = RenderSettings(samples_per_link=150, splat_radius=1, seed=0)
    theta = np.zeros(chain.dof)
    pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, 2.5]))
    direct = render_chain_silhouette(chain, theta, meshes, pose, k, settings)
    clouds = sample_link_clouds(meshes, settings)
    from armpose import forward_kinematics

    frames = [chain.base_frame] + forward_kinematics(chain, theta)
    via_clouds = render_link_clouds(clouds, frames, pose, k, settings)
    assert np.array_equal(direct, via_clouds)


def test_pose_mesh_counts():
    chain = builtin_chain("panda7")
    meshes = default_link_meshes(chain)
    assert len(meshes) == chain.dof + 1
    stacked = pose_mesh(chain, np.zeros(chain.dof), meshes)
    assert stacked.shape[1] == 3
    assert stacked.shape[0] == sum(m.vertices.shape[0] for m in meshes if m is not None)


# ---------------------------------------------------------------------------
# lines


def test_bresenham_oracle():
    got = bresenham_line((0, 0), (5, 2))
    want = np.array([[0, 0], [1, 0], [2, 1], [3, 1], [4, 2], [5, 2]])
    assert np.array_equal(got, want)
    # endpoints always included, any octant
    for p0, p1 in [((3, 7), (-2, -1)), ((0, 0), (0, 4)), ((5, 5), (5, 5))]:
        line = bresenham_line(p0, p1)
        assert tuple(line[0]) == p0
        assert tuple(line[-1]) == p1
        steps = np.abs(np.diff(line, axis=0))
        assert steps.max(initial=0) <= 1


def test_draw_segment_clips_out_of_bounds():
    img = np.zeros((10, 10), dtype=np.uint8)
    draw_segment(img, (-3, 5), (4, 5), value=200)
    assert img[5, 4] == 200
    assert img[5, 0] == 200
    assert img.sum() == 200 * 5  # columns 0..4 of row 5


# ---------------------------------------------------------------------------
# IoU and files


def test_iou_properties():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0:2, :] = True
    b[1:3, :] = True
    assert silhouette_iou(a, b) == pytest.approx(1.0 / 3.0)
    assert silhouette_iou(a, b) == silhouette_iou(b, a)
    assert silhouette_iou(a, a) == 1.0
    c = np.zeros((8, 8), dtype=bool)
    c[5:, :] = True
    assert silhouette_iou(a, c) == 0.0
    empty = np.zeros((8, 8), dtype=bool)
    assert silhouette_iou(empty, empty) == 1.0
    with pytest.raises(ValueError):
        silhouette_iou(a, np.zeros((4, 4), dtype=bool))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mask = rng.random((16, 12)) > 0.5
    path = tmp_path / "m.pgm"
    write_pgm(path, mask)
    raw = path.read_bytes()
    assert raw.startswith(b"P5")
    arr = read_pgm(path)
    assert arr.dtype == np.uint8
    assert set(np.unique(arr)).issubset({0, 255})
    assert np.array_equal(arr > 0, mask)
    write_pgm(path, arr)  # uint8 passthrough
    assert np.array_equal(read_pgm(path), arr)


def test_read_pgm_rejects_bad_headers(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n4 4\n255\n" + bytes(16))
    with pytest.raises(ValueError):
        read_pgm(path)
    path.write_bytes(b"P5\n4 4\n65535\n" + bytes(32))
    with pytest.raises(ValueError):
        read_pgm(path)
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(3))  # truncated payload
    with pytest.raises(ValueError):
        read_pgm(path)


def test_segment_reference_threshold():
    img = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    mask = segment_reference(img)
    assert mask.tolist() == [[False, False], [True, True]]
    k = _camera(width=2, height=2)
    assert segment_reference(img, k).shape == (2, 2)
    with pytest.raises(ValueError):
        segment_reference(img, _camera(width=4, height=4))
