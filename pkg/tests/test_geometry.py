import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import poses
from touchloc import shapes
from touchloc.geometry import (MeshError, Pose, TriangleMesh, apply, compose, invert, load_mesh, rotation_about,
                               sample_surface, save_obj, save_stl_binary, save_xyz)


def unit_cube():
    return shapes.box((1.0, 1.0, 1.0), (0.5, 0.5, 0.5))


def test_identity_compose_is_noop():
    p = Pose(rotation_about([1, 2, 3], 0.4), [1.0, -2.0, 0.5])
    q = compose(Pose.identity(), p)
    assert np.array_equal(q.rotation, p.rotation)
    assert np.array_equal(q.translation, p.translation)


def test_compose_matches_matrix_product():
    rz = Pose(rotation_about([0, 0, 1], np.pi / 2), [1.0, 0.0, 0.0])
    rx = Pose(rotation_about([1, 0, 0], np.pi / 2), [0.0, 2.0, 0.0])
    got = compose(rz, rx).matrix()
    A, B = rz.matrix(), rx.matrix()
    want = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            want[i, j] = sum(A[i, k] * B[k, j] for k in range(4))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_apply_translation_and_identity():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    np.testing.assert_array_equal(apply(Pose.identity(), pts), pts)
    np.testing.assert_allclose(apply(Pose.from_translation([1, 2, 3]), np.zeros((1, 3))), [[1, 2, 3]])


def test_apply_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    p = Pose(rotation_about(rng.normal(size=3), 1.1), rng.normal(size=3) * 10)
    pts = rng.normal(size=(100, 3)) * 5
    got = apply(p, pts)
    R, t = p.rotation, p.translation
    for n, (x, y, z) in enumerate(pts):
        for i in range(3):
            assert abs(got[n, i] - (R[i, 0] * x + R[i, 1] * y + R[i, 2] * z + t[i])) < 1e-9


@given(poses(), poses(), poses())
def test_compose_is_associative(a, b, c):
    left = compose(compose(a, b), c).matrix()
    right = compose(a, compose(b, c)).matrix()
    np.testing.assert_allclose(left, right, atol=1e-9)


@given(poses())
def test_inverse_cancels(p):
    np.testing.assert_allclose(compose(p, invert(p)).matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(compose(invert(p), p).matrix(), np.eye(4), atol=1e-9)


@given(poses())
def test_rotation_stays_proper(p):
    R = p.rotation
    assert abs(np.linalg.det(R) - 1) < 1e-9
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)


@given(poses(), st.integers(0, 2**31 - 1))
def test_apply_preserves_distances(p, seed):
    pts = np.random.default_rng(seed).normal(size=(12, 3)) * 10
    before = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    q = apply(p, pts)
    after = np.linalg.norm(q[:, None] - q[None], axis=-1)
    np.testing.assert_allclose(after, before, atol=1e-9)


def test_long_composition_chain_stays_orthonormal():
    step = Pose(rotation_about([0.3, -0.5, 0.8], 0.013), [0.01, 0.0, 0.0])
    p = Pose.identity()
    for _ in range(10_000):
        p = compose(p, step)
    assert abs(np.linalg.det(p.rotation) - 1) < 1e-9
    np.testing.assert_allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-9)


def test_quaternion_roundtrip():
    p = Pose.from_quaternion([0.9, 0.1, -0.3, 0.2], [1, 2, 3])
    q = Pose.from_quaternion(p.quaternion(), p.translation)
    np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-12)


def test_reflection_rejected():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]))


# -------------------------------------------------------------------- meshes

def test_obj_cube_counts(tmp_path):
    path = tmp_path / "cube.obj"
    save_obj(unit_cube(), path)
    m = load_mesh(path)
    assert (len(m.vertices), len(m.triangles)) == (8, 12)


def test_stl_matches_obj_vertex_set(tmp_path):
    save_obj(unit_cube(), tmp_path / "c.obj")
    save_stl_binary(unit_cube(), tmp_path / "c.stl")
    a = load_mesh(tmp_path / "c.obj").vertices
    b = load_mesh(tmp_path / "c.stl").vertices
    assert len(a) == len(b) == 8
    a = a[np.lexsort(a.T[::-1])]
    b = b[np.lexsort(b.T[::-1])]
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_ascii_stl_and_off(tmp_path):
    (tmp_path / "t.stl").write_text(
        "solid t\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 0 1 0\n"
        "endloop\nendfacet\nendsolid t\n")
    (tmp_path / "q.off").write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert len(load_mesh(tmp_path / "t.stl").triangles) == 1
    assert len(load_mesh(tmp_path / "q.off").triangles) == 2


def test_zero_area_triangle_dropped_with_warning(tmp_path, caplog):
    path = tmp_path / "deg.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n")
    with caplog.at_level(logging.WARNING):
        m = load_mesh(path)
    assert len(m.triangles) == 1 and m.dropped == 1
    assert "degenerate" in caplog.text


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 zz\n")
    with pytest.raises(MeshError, match="line 2"):
        load_mesh(path)


def test_truncated_binary_stl_reports_offset(tmp_path):
    save_stl_binary(unit_cube(), tmp_path / "c.stl")
    data = (tmp_path / "c.stl").read_bytes()
    (tmp_path / "cut.stl").write_bytes(data[:200])
    with pytest.raises(MeshError, match="byte 200"):
        load_mesh(tmp_path / "cut.stl")


def test_empty_mesh_rejected(tmp_path):
    path = tmp_path / "empty.obj"
    path.write_text("v 0 0 0\n")
    with pytest.raises(MeshError):
        load_mesh(path)


def test_xyz_export_precision(tmp_path):
    save_xyz([[1.0 / 3, 2.0, -1e-5]], tmp_path / "p.xyz")
    assert (tmp_path / "p.xyz").read_text() == "0.333333333 2 -1e-05\n"


# ------------------------------------------------------------------ sampling

def test_single_triangle_samples_stay_in_plane():
    tri = TriangleMesh([[0, 0, 1], [2, 0, 3], [0, 1, -1]], [[0, 1, 2]])
    pts = sample_surface(tri, 1000, seed=3)
    n = np.cross(tri.vertices[1] - tri.vertices[0], tri.vertices[2] - tri.vertices[0])
    n /= np.linalg.norm(n)
    assert np.abs((pts - tri.vertices[0]) @ n).max() < 1e-9
    # barycentric coordinates inside [0, 1]
    A = np.c_[tri.vertices[1] - tri.vertices[0], tri.vertices[2] - tri.vertices[0]]
    uv = np.linalg.lstsq(A, (pts - tri.vertices[0]).T, rcond=None)[0]
    assert uv.min() > -1e-9 and uv.sum(axis=0).max() < 1 + 1e-9


def _face_counts(pts, size):
    half = np.asarray(size) / 2
    rel = pts / half
    face = np.argmax(np.abs(rel), axis=1) * 2 + (np.take_along_axis(rel, np.argmax(np.abs(rel), 1)[:, None], 1)[:, 0] > 0)
    return np.bincount(face, minlength=6)


def test_cube_face_counts_within_binomial_band():
    n = 60_000
    counts = _face_counts(sample_surface(shapes.box(), n, seed=0), (1, 1, 1))
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) < 3 * sigma), counts


def test_box_area_uniform_chi_square():
    size = (1.0, 2.0, 3.0)
    n = 100_000
    counts = _face_counts(sample_surface(shapes.box(size), n, seed=11), size)
    sx, sy, sz = size
    area = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    expected = n * area / area.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.001


def test_sampling_is_deterministic():
    m = shapes.bracket()
    np.testing.assert_array_equal(sample_surface(m, 500, 7), sample_surface(m, 500, 7))
    assert not np.array_equal(sample_surface(m, 500, 7), sample_surface(m, 500, 8))
