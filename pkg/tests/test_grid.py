import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import rotations
from oracles import all_pairs_nn
from touchloc import fixtures, shapes
from touchloc.geometry import Pose, rotation_about, sample_surface
from touchloc.grid import (GridError, GridFileError, GridSpec, PoseGrid, build_grid, canonical_rotation,
                           compute_mean_nn, cyclic_group, fibonacci_cap, load_grid, nearest_pose, pose_distance,
                           save_grid, view_roll_rotation)
from touchloc.render import SensorModel, project_to_contact, render_contact_shape
from touchloc.similarity import encode_grid


def linear_scan(grid, q):
    d = np.array([pose_distance(q, grid.pose(i), grid.sample_points) for i in range(len(grid))])
    return int(np.argmin(d)), float(d.min())


# ------------------------------------------------------------ pose distance

def test_pose_distance_trivial_cases():
    pts = np.random.default_rng(0).normal(size=(500, 3))
    p = Pose(rotation_about([1, 0, 0], 0.3), [1, 2, 3])
    assert pose_distance(p, p, pts) == 0.0
    q = Pose(p.rotation, p.translation + [0.3, -0.4, 0.0])
    assert pose_distance(p, q, pts) == pytest.approx(0.5, abs=1e-12)


def test_pose_distance_ten_degrees_on_unit_ball():
    rng = np.random.default_rng(0)
    n = 1_000_000
    x = rng.normal(size=(n, 3))
    ball = x / np.linalg.norm(x, axis=1, keepdims=True) * rng.random(n)[:, None] ** (1 / 3)
    theta = np.radians(10)
    axis = np.array([0.0, 0.0, 1.0])
    rot = Pose(rotation_about(axis, theta))
    got = pose_distance(rot, Pose.identity(), ball)
    # mean distance to the axis of a uniform unit ball is 3π/16
    oracle = 2 * np.sin(theta / 2) * 3 * np.pi / 16
    assert got == pytest.approx(oracle, rel=0.005)


@given(rotations(), rotations())
def test_pose_distance_symmetric(Ra, Rb):
    pts = np.random.default_rng(1).normal(size=(200, 3))
    a, b = Pose(Ra, [1, 0, 0]), Pose(Rb, [0, 2, 0])
    assert pose_distance(a, b, pts) == pytest.approx(pose_distance(b, a, pts), abs=1e-12)


def test_internal_metric_close_to_reported_metric(small_grid, bracket_mesh):
    # fixture-level error scale with the 1000 cached points vs 10000 fresh ones
    from touchloc.evaluation import random_baseline
    fresh = sample_surface(bracket_mesh, 10_000, 99)
    cached = random_baseline(small_grid, bracket_mesh, 1000, 0, small_grid.sample_points)
    assert cached == pytest.approx(random_baseline(small_grid, bracket_mesh, 1000, 0, fresh), rel=0.01)


# ------------------------------------------------------------------ build

def test_every_pose_is_a_contact_pose(small_grid, bracket_mesh):
    from touchloc.render import window_min_z
    for i in range(0, len(small_grid), 7):
        assert window_min_z(bracket_mesh, small_grid.pose(i), small_grid.sensor) == pytest.approx(25.0, abs=1e-6)
        assert (small_grid.codes[i] < 65535).any()


def test_rerender_is_bit_exact(small_grid, bracket_mesh):
    for i in range(0, len(small_grid), 5):
        cs = render_contact_shape(bracket_mesh, small_grid.pose(i), small_grid.sensor)
        np.testing.assert_array_equal(cs.codes(), small_grid.codes[i])


def test_full_symmetry_collapses_rotations():
    sensor = SensorModel.default().scaled(40)
    spec = GridSpec(x_range=(-2, 2), y_range=(-2, 2), x_step=1, y_step=1, n_view_dirs=6, n_rolls=5, symmetry="full")
    grid = build_grid(shapes.icosphere(10.0, 3), sensor, spec)
    assert len(grid) == 25
    assert all(np.array_equal(R, np.eye(3)) for R in grid.rotations)


def test_cyclic_symmetry_quotient_preserves_shapes():
    # square prism, 4-fold symmetric about its own z axis, viewed along that axis
    mesh = shapes.box((6.0, 6.0, 3.0))
    sym = cyclic_group(4)
    sensor = SensorModel.default().scaled(64)
    spec = GridSpec(x_range=(-1, 1), y_range=(0, 0), x_step=1, n_rolls=12, symmetry=sym)
    grid = build_grid(mesh, sensor, spec)
    plain = build_grid(mesh, sensor, GridSpec(x_range=(-1, 1), y_range=(0, 0), x_step=1, n_rolls=12))
    assert len(grid) * 4 == len(plain)
    for roll in spec.rolls():
        R = view_roll_rotation(spec.view_axis, roll)
        C = canonical_rotation(R, sym)
        assert any(np.allclose(C, G) for G in grid.rotations)
        p, _ = project_to_contact(mesh, Pose(R, [0.3, 0, 0]), sensor)
        q, _ = project_to_contact(mesh, Pose(C, [0.3, 0, 0]), sensor)
        a = render_contact_shape(mesh, p, sensor).codes().astype(int)
        b = render_contact_shape(mesh, q, sensor).codes().astype(int)
        assert np.abs(a - b).max() <= 1


def test_empty_spec_raises():
    spec = GridSpec(x_range=(500, 501), y_range=(0, 0))
    with pytest.raises(GridError):
        build_grid(shapes.box(), SensorModel.default().scaled(20), spec)


def test_fibonacci_cap_directions():
    v = fibonacci_cap(50, (0, 0, -1), np.radians(30))
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    assert (v @ [0, 0, -1]).min() >= np.cos(np.radians(30)) - 1e-12


def test_threads_do_not_change_result(bracket_mesh, small_sensor, small_spec, small_grid):
    g2 = build_grid(bracket_mesh, small_sensor, small_spec, threads=3)
    np.testing.assert_array_equal(g2.codes, small_grid.codes)
    np.testing.assert_array_equal(g2.rotations, small_grid.rotations)


# --------------------------------------------------------------- density

def test_mean_nn_matches_all_pairs_oracle():
    sensor = SensorModel.default().scaled(40)
    spec = GridSpec(x_range=(-2, 2), y_range=(-2, 2), x_step=1, y_step=1, n_view_dirs=2, view_cone_deg=10, n_rolls=4)
    grid = build_grid(shapes.box((8, 8, 8)), sensor, spec)
    assert len(grid) <= 200
    oracle = all_pairs_nn(grid.rotations, grid.translations, grid.sample_points).mean()
    assert grid.mean_nn_distance == pytest.approx(oracle, rel=1e-9)


def test_shipped_stud_grid_density():
    _, rig, _ = fixtures.stud_rig(n_sensors=1)
    assert rig.grids[0].mean_nn_distance <= 2.0


# ---------------------------------------------------------------- nearest

def test_nearest_exact_and_perturbed(small_grid):
    for k in (0, 17, len(small_grid) - 1):
        p = small_grid.pose(k)
        assert nearest_pose(small_grid, p) == (k, 0.0)
        q = Pose(p.rotation, p.translation + [0.1, 0.0, 0.0])
        i, d = nearest_pose(small_grid, q)
        assert i == k and d == pytest.approx(0.1, abs=1e-12)


def test_nearest_matches_linear_scan(small_grid):
    rng = np.random.default_rng(5)
    for _ in range(100):
        R = rotation_about(rng.normal(size=3), rng.uniform(0, np.pi))
        q = Pose(R, rng.uniform(-4, 4, 3) + [0, 0, 28])
        i, d = nearest_pose(small_grid, q)
        j, e = linear_scan(small_grid, q)
        assert (i, d) == (j, pytest.approx(e, abs=1e-9))


@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_nearest_many_matches_scan(small_grid, seed, scale):
    # near-grid queries, where pruning is most delicate
    grid = small_grid
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(grid), size=4)
    R = np.stack([rotation_about(rng.normal(size=3), scale * 0.1) @ grid.rotations[k] for k in idx])
    t = grid.translations[idx] + rng.normal(size=(4, 3)) * scale
    got_i, got_d = grid.index.nearest_many(R, t)
    for n in range(4):
        j, e = linear_scan(grid, Pose(R[n], t[n]))
        assert got_i[n] == j and got_d[n] == pytest.approx(e, abs=1e-9)


def test_nearest_with_exclusion(small_grid):
    R, t = small_grid.rotations, small_grid.translations
    i, d = small_grid.index.nearest_many(R, t, exclude=np.arange(len(small_grid)))
    assert not np.any(i == np.arange(len(small_grid)))
    for k in range(0, len(small_grid), 9):
        dist = [pose_distance(small_grid.pose(k), small_grid.pose(j), small_grid.sample_points) if j != k else np.inf
                for j in range(len(small_grid))]
        assert i[k] == int(np.argmin(dist)) and d[k] == pytest.approx(min(dist), abs=1e-9)
    assert compute_mean_nn(small_grid) == pytest.approx(small_grid.mean_nn_distance, abs=1e-12)


def test_empty_grid_nearest_raises(small_grid):
    with pytest.raises(GridError):
        nearest_pose(small_grid.subset(np.array([], int)), Pose.identity())


# -------------------------------------------------------------------- I/O

def test_save_load_roundtrip(tmp_path, encoded_grid):
    save_grid(encoded_grid, tmp_path / "g.tlg")
    g = load_grid(tmp_path / "g.tlg")
    np.testing.assert_allclose(g.rotations, encoded_grid.rotations, atol=1e-12)
    np.testing.assert_allclose(g.translations, encoded_grid.translations, atol=1e-12)
    np.testing.assert_array_equal(g.codes, encoded_grid.codes)
    np.testing.assert_allclose(g.descriptors, encoded_grid.descriptors, atol=1e-12)
    assert g.fingerprint() == encoded_grid.fingerprint()
    assert g.mean_nn_distance == encoded_grid.mean_nn_distance
    assert g.encoder_fingerprint == encoded_grid.encoder_fingerprint


def test_roundtrip_without_descriptors(tmp_path, small_grid):
    save_grid(small_grid, tmp_path / "g.tlg")
    g = load_grid(tmp_path / "g.tlg")
    assert g.descriptors is None
    np.testing.assert_array_equal(g.codes, small_grid.codes)


def test_truncated_or_corrupt_file(tmp_path, small_grid):
    save_grid(small_grid, tmp_path / "g.tlg")
    data = (tmp_path / "g.tlg").read_bytes()
    (tmp_path / "cut.tlg").write_bytes(data[: len(data) // 2])
    with pytest.raises(GridFileError):
        load_grid(tmp_path / "cut.tlg")
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    (tmp_path / "flip.tlg").write_bytes(bytes(flipped))
    with pytest.raises(GridFileError, match="checksum"):
        load_grid(tmp_path / "flip.tlg")
    (tmp_path / "ver.tlg").write_bytes(b"TLGRID02" + data[8:])
    with pytest.raises(GridFileError, match="version"):
        load_grid(tmp_path / "ver.tlg")


def test_no_temp_file_left_behind(tmp_path, small_grid):
    save_grid(small_grid, tmp_path / "g.tlg")
    assert [p.name for p in tmp_path.iterdir()] == ["g.tlg"]
