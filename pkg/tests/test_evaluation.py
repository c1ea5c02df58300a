import json
import statistics
from dataclasses import replace

import numpy as np
import pytest

from touchloc.evaluation import (ExperimentReport, NoiseModel, TrialRecord, add_error, random_baseline,
                                 run_multi_contact_experiment, run_single_contact_experiment, summarize,
                                 synth_query)
from touchloc.geometry import Pose, TriangleMesh, rotation_about
from touchloc.grid import GridSpec, build_grid
from touchloc.posterior import SensorRig
from touchloc.registration import RegistrationParams
from touchloc.render import SensorModel, render_contact_shape
from touchloc.similarity import Encoder, encode_grid


def grid_sampler(grid, offset=0):
    return lambda rng: grid.pose(int(rng.integers(len(grid))))


def test_zero_noise_query_equals_render(small_grid, bracket_mesh):
    pose = small_grid.pose(42)
    q = synth_query(bracket_mesh, small_grid.sensor, pose, NoiseModel.none(), np.random.default_rng(0))
    np.testing.assert_array_equal(q.value, render_contact_shape(bracket_mesh, pose, small_grid.sensor).value)


def test_full_dropout_removes_contact(small_grid, bracket_mesh):
    noise = NoiseModel(None, 1.0, 0.0, (0.0, 0.0))
    q = synth_query(bracket_mesh, small_grid.sensor, small_grid.pose(5), noise, np.random.default_rng(0))
    assert q.n_contact() == 0


def test_dropout_rate_within_binomial_band(small_grid, bracket_mesh):
    pose = small_grid.pose(60)
    base = render_contact_shape(bracket_mesh, pose, small_grid.sensor).n_contact()
    noise = NoiseModel(None, 0.1, 0.0, (0.0, 0.0))
    rng = np.random.default_rng(1)
    kept = sum(synth_query(bracket_mesh, small_grid.sensor, pose, noise, rng).n_contact() for _ in range(1000))
    n = 1000 * base
    assert abs((n - kept) - 0.1 * n) < 3 * np.sqrt(n * 0.1 * 0.9)


def test_noise_is_reproducible(small_grid, bracket_mesh):
    noise = NoiseModel()
    a = synth_query(bracket_mesh, small_grid.sensor, small_grid.pose(9), noise, np.random.default_rng([3, 4]))
    b = synth_query(bracket_mesh, small_grid.sensor, small_grid.pose(9), noise, np.random.default_rng([3, 4]))
    np.testing.assert_array_equal(a.value, b.value)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(pixel_dropout=1.5)
    with pytest.raises(ValueError):
        NoiseModel(delta_d_jitter=(2.0, 1.0))


# ---------------------------------------------------------------- metrics

def test_add_error_cases(bracket_mesh):
    p = Pose(rotation_about([0, 1, 0], 0.7), [1, 2, 30])
    assert add_error(p, p, bracket_mesh) == 0.0
    q = Pose(p.rotation, p.translation + [0.0, 3.0, 4.0])
    assert add_error(p, q, bracket_mesh) == pytest.approx(5.0, abs=1e-12)


def test_random_baseline_tiny_grids(small_grid, bracket_mesh):
    one = small_grid.subset(np.array([0]))
    assert random_baseline(one, bracket_mesh, 200) == 0.0
    k = int(np.flatnonzero(np.all(small_grid.rotations == small_grid.rotations[0], axis=(1, 2)))[1])
    two = small_grid.subset(np.array([0, k]))
    e = add_error(two.pose(0), two.pose(1), bracket_mesh)
    trials = 1000
    got = random_baseline(two, bracket_mesh, trials)
    assert abs(got - e / 2) < 3 * e * np.sqrt(0.25 / trials)


def test_summary_statistics_match_stdlib():
    rng = np.random.default_rng(0)
    vals = rng.exponential(2.0, 101)
    s = summarize(vals)
    assert s["median"] == pytest.approx(statistics.median(vals), abs=1e-12)
    assert s["mean"] == pytest.approx(statistics.fmean(vals), abs=1e-12)
    assert s["std"] == pytest.approx(statistics.pstdev(vals), abs=1e-12)


def test_report_files(tmp_path):
    rep = ExperimentReport(random_mean=10.0, mean_nn_distance=1.0)
    p = Pose.identity()
    for t, e in enumerate([0.0, 1.0, 3.0]):
        rep.add(TrialRecord(t, 1, "Best-1", p, p, e, e / 10.0))
    rep.write(tmp_path)
    assert sorted(f.name for f in tmp_path.iterdir()) == ["hist_Best-1.dat", "records.csv", "summary.json"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["methods"]["Best-1"]["add_mm"]["median"] == 1.0
    assert summary["methods"]["Best-1"]["normalized"]["mean"] == pytest.approx(4 / 30)
    assert len((tmp_path / "records.csv").read_text().splitlines()) == 4


# ------------------------------------------------------------ experiments

def test_exact_grid_queries_without_noise(encoded_grid, bracket_mesh, baseline):
    rep = run_single_contact_experiment(bracket_mesh, encoded_grid.sensor, encoded_grid, baseline,
                                        NoiseModel.none(), n_trials=30, methods=("Best-1", "Best-10"),
                                        pose_sampler=grid_sampler(encoded_grid))
    assert rep.median("Best-1") == 0.0
    assert np.all(rep.errors("Best-10") <= rep.errors("Best-1"))
    perfect = [r for r in rep.records if r.add_mm == 0.0]
    assert perfect and all(r.normalized == 0.0 for r in perfect)


def test_candidate_sets_are_nested(encoded_grid, bracket_mesh, baseline):
    rep = run_single_contact_experiment(bracket_mesh, encoded_grid.sensor, encoded_grid, baseline, NoiseModel(),
                                        n_trials=15, methods=("Best-1", "Best-10", "Best-50"), seed=2,
                                        random_mean=10.0)
    b1, b10, b50 = (rep.errors(m) for m in ("Best-1", "Best-10", "Best-50"))
    assert np.all(b50 <= b10) and np.all(b10 <= b1)


def test_multi_with_one_sensor_equals_single(encoded_grid, bracket_mesh, baseline):
    rig = SensorRig([(encoded_grid.sensor, Pose.identity())], [encoded_grid])
    kw = dict(seed=4, random_mean=10.0, pose_sampler=grid_sampler(encoded_grid))
    multi = run_multi_contact_experiment(rig, bracket_mesh, baseline, NoiseModel(), n_examples=12, max_contacts=1,
                                         **kw)
    single = run_single_contact_experiment(bracket_mesh, encoded_grid.sensor, encoded_grid, baseline, NoiseModel(),
                                           n_trials=12, methods=("Best-1",), **kw)
    np.testing.assert_array_equal(multi.errors("Best-1", 1), single.errors("Best-1"))


def test_errors_scale_with_the_scene(bracket_mesh):
    """Scaling every length (mesh, sensor, grid, noise, registration) by s scales every ADD by s."""
    s = 2.0
    sensor = SensorModel.default().scaled(48)
    spec = GridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0), x_step=1.0, y_step=1.0, n_rolls=6)
    noise = NoiseModel(delta_d_jitter=(1.0, 2.0), pixel_dropout=0.02, depth_noise_sigma=0.05, pose_jitter=(0.1, 0.5))
    reg = RegistrationParams(sigma=1.0, max_iterations=3)

    def run(k):
        mesh = TriangleMesh(bracket_mesh.vertices * k, bracket_mesh.triangles)
        sens = replace(sensor, d=sensor.d * k, delta_d=sensor.delta_d * k,
                       sensor_extent=tuple(e * k for e in sensor.sensor_extent))
        sp = replace(spec, x_range=(-2.0 * k, 2.0 * k), y_range=(-2.0 * k, 2.0 * k), x_step=k, y_step=k)
        nz = replace(noise, delta_d_jitter=(k, 2.0 * k), depth_noise_sigma=0.05 * k, pose_jitter=(0.1 * k, 0.5))
        grid = encode_grid(Encoder.baseline(), build_grid(mesh, sens, sp))
        rep = run_single_contact_experiment(mesh, sens, grid, Encoder.baseline(), nz, n_trials=10,
                                            methods=("Best-1", "Reg-1", "Best-10"), seed=1,
                                            reg_params=replace(reg, sigma=reg.sigma * k, sigma_min=reg.sigma_min * k,
                                                               convergence_tol=reg.convergence_tol * k))
        return grid, rep

    g1, r1 = run(1.0)
    g2, r2 = run(s)
    assert g2.mean_nn_distance == pytest.approx(s * g1.mean_nn_distance, rel=1e-9)
    assert r2.random_mean == pytest.approx(s * r1.random_mean, rel=1e-9)
    for m in ("Best-1", "Reg-1", "Best-10"):
        np.testing.assert_allclose(r2.errors(m), s * r1.errors(m), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(r2.errors(m, normalized=True), r1.errors(m, normalized=True), rtol=1e-6, atol=1e-9)
