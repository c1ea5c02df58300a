"""Synthetic queries, pose-error metrics and the benchmark protocols.

Every trial draws from its own RNG streams, ``default_rng([seed, trial])`` for
the true pose and ``default_rng([seed, trial, sensor])`` for the sensor noise,
so results do not depend on trial order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, TriangleMesh, rotation_about, sample_surface
from ._io import atomic_write
from .grid import PoseGrid, pose_distance, sample_contact_pose
from .posterior import (EmptySupportError, SensorRig, best_k, fuse_multi_contact, kinematic_posterior,
                        single_contact_posterior)
from .registration import RegistrationParams, refine_pose
from .render import (CONTACT_TOL, ContactShape, SensorModel, project_to_contact, render_contact_shape,
                     window_min_z)
from .similarity import Encoder

log = logging.getLogger(__name__)

N_METRIC_POINTS = 10_000
METHODS = ("Best-1", "Reg-1", "Best-10", "Reg-10", "Best-50", "kinematic", "random")


@dataclass
class NoiseModel:
    delta_d_jitter: tuple[float, float] | None = (1.0, 2.0)  # None: the sensor's delta_d
    pixel_dropout: float = 0.02
    depth_noise_sigma: float = 0.05
    pose_jitter: tuple[float, float] = (0.1, 0.5)  # translation sigma mm, rotation sigma deg
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pixel_dropout <= 1.0:
            raise ValueError("pixel_dropout must be a probability")
        if self.depth_noise_sigma < 0 or min(self.pose_jitter) < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.delta_d_jitter is not None:
            lo, hi = self.delta_d_jitter
            if not 0 < lo <= hi:
                raise ValueError("delta_d_jitter must satisfy 0 < lo <= hi")
            self.delta_d_jitter = (float(lo), float(hi))
        self.pose_jitter = tuple(float(v) for v in self.pose_jitter)

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(None, 0.0, 0.0, (0.0, 0.0))


def jitter_pose(pose: Pose, noise: NoiseModel, rng) -> Pose:
    st, sr = noise.pose_jitter
    if st == 0 and sr == 0:
        return pose
    axis = rng.normal(size=3)
    angle = np.radians(rng.normal(0.0, sr)) if sr > 0 else 0.0
    dt = rng.normal(0.0, st, 3) if st > 0 else np.zeros(3)
    R = rotation_about(axis, angle)
    return Pose(R @ pose.rotation, pose.translation + dt)


def synth_query(mesh: TriangleMesh, sensor: SensorModel, true_pose: Pose, noise: NoiseModel,
                rng=None) -> ContactShape:
    """Noisy contact shape observed at ``true_pose``.

    Draw order per call: pose jitter, threshold, depth noise, dropout.
    """
    rng = np.random.default_rng(noise.seed) if rng is None else rng
    pose = jitter_pose(true_pose, noise, rng)
    if pose is not true_pose:
        pose, tz = project_to_contact(mesh, pose, sensor)
        if abs(tz) > CONTACT_TOL:
            log.debug("pose jitter broke contact; re-projected by %.4g mm", tz)
    dd = sensor.delta_d if noise.delta_d_jitter is None else float(rng.uniform(*noise.delta_d_jitter))
    cs = render_contact_shape(mesh, pose, sensor, delta_d_override=dd, check=False)
    value = cs.value.copy()
    contact = value < dd
    if noise.depth_noise_sigma > 0:
        noisy = value + rng.normal(0.0, noise.depth_noise_sigma, value.shape)
        value = np.where(contact, np.clip(noisy, 0.0, dd), value)
    if noise.pixel_dropout > 0:
        drop = rng.random(value.shape) < noise.pixel_dropout
        value[contact & drop] = dd
    return ContactShape(value, dd)


def add_error(a: Pose, b: Pose, mesh: TriangleMesh, n: int = N_METRIC_POINTS, seed: int = 0) -> float:
    """Reported pose error: ADD over ``n`` fresh area-uniform surface samples."""
    return pose_distance(a, b, sample_surface(mesh, n, seed))


def random_baseline(grid: PoseGrid, mesh: TriangleMesh, trials: int = 1000, seed: int = 0,
                    points: np.ndarray | None = None) -> float:
    """Mean ADD between independently drawn uniform grid poses."""
    pts = sample_surface(mesh, N_METRIC_POINTS, seed) if points is None else points
    rng = np.random.default_rng([seed, 7])
    i = rng.integers(len(grid), size=trials)
    j = rng.integers(len(grid), size=trials)
    return float(np.mean([pose_distance(grid.pose(a), grid.pose(b), pts) for a, b in zip(i, j)]))


# ---------------------------------------------------------------- reports

def _pose_cols(p: Pose | None) -> list[float]:
    if p is None:
        return [float("nan")] * 7
    return list(p.translation) + list(p.quaternion())


@dataclass
class TrialRecord:
    trial: int
    n_contacts: int
    method: str
    true_pose: Pose
    estimate: Pose | None
    add_mm: float
    normalized: float
    failed: bool = False


def summarize(values) -> dict:
    v = np.asarray(values, float)
    return {"n": int(len(v)), "median": float(np.median(v)), "mean": float(np.mean(v)), "std": float(np.std(v))}


@dataclass
class ExperimentReport:
    records: list = field(default_factory=list)
    random_mean: float = float("nan")
    mean_nn_distance: float = float("nan")
    meta: dict = field(default_factory=dict)

    def add(self, rec: TrialRecord) -> None:
        self.records.append(rec)

    def errors(self, method: str, n_contacts: int | None = None, normalized: bool = False) -> np.ndarray:
        return np.array([r.normalized if normalized else r.add_mm for r in self.records
                         if r.method == method and (n_contacts is None or r.n_contacts == n_contacts)])

    def groups(self) -> list[tuple[str, int]]:
        seen = []
        for r in self.records:
            if (r.method, r.n_contacts) not in seen:
                seen.append((r.method, r.n_contacts))
        return seen

    def summary(self) -> dict:
        out = {}
        for method, n in self.groups():
            key = method if n == 1 and not self.meta.get("multi") else f"{method}@{n}"
            recs = [r for r in self.records if r.method == method and r.n_contacts == n]
            out[key] = {
                "add_mm": summarize([r.add_mm for r in recs]),
                "normalized": summarize([r.normalized for r in recs]),
                "failures": int(sum(r.failed for r in recs)),
            }
        return {"random_mean_mm": self.random_mean, "grid_mean_nn_mm": self.mean_nn_distance,
                "meta": self.meta, "methods": out}

    def median(self, method: str, n_contacts: int | None = None) -> float:
        return float(np.median(self.errors(method, n_contacts)))

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "n_contacts", "method", "true_x", "true_y", "true_z", "true_qw", "true_qx", "true_qy",
                    "true_qz", "est_x", "est_y", "est_z", "est_qw", "est_qx", "est_qy", "est_qz", "add_mm",
                    "normalized", "failed"])
        for r in self.records:
            vals = _pose_cols(r.true_pose) + _pose_cols(r.estimate) + [r.add_mm, r.normalized]
            w.writerow([r.trial, r.n_contacts, r.method] + [f"{v:.17g}" for v in vals] + [int(r.failed)])
        return buf.getvalue()

    def histogram(self, method: str, n_contacts: int | None = None, bins: int = 30) -> str:
        e = self.errors(method, n_contacts)
        hi = max(float(e.max()) if len(e) else 1.0, 1e-9)
        counts, edges = np.histogram(e, bins=bins, range=(0.0, hi))
        lines = [f"# {method} ADD histogram (mm)", "# bin_left bin_right count"]
        lines += [f"{edges[k]:.9g} {edges[k + 1]:.9g} {counts[k]}" for k in range(bins)]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "records.csv", self.records_csv().encode())
        atomic_write(out / "summary.json", (json.dumps(self.summary(), indent=2, sort_keys=True) + "\n").encode())
        for method, n in self.groups():
            name = method if not self.meta.get("multi") else f"{method}_N{n}"
            atomic_write(out / f"hist_{name}.dat", self.histogram(method, n).encode())


# ----------------------------------------------------------- experiments

def _best_of(cands, true_pose, pts):
    errs = [pose_distance(p, true_pose, pts) for p in cands]
    k = int(np.argmin(errs))
    return cands[k], errs[k]


def run_single_contact_experiment(mesh: TriangleMesh, sensor: SensorModel, grid: PoseGrid, enc: Encoder,
                                  noise: NoiseModel, n_trials: int = 150, methods=("Best-1", "Reg-1", "Best-10",
                                                                                  "Reg-10", "Best-50"),
                                  seed: int = 0, reg_params: RegistrationParams | None = None,
                                  random_mean: float | None = None, pose_sampler=None) -> ExperimentReport:
    """Localize synthetic queries; Best-K / Reg-K pick the lowest-error candidate among the top K."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    pts = sample_surface(mesh, N_METRIC_POINTS, seed)
    rmean = random_baseline(grid, mesh, 1000, seed, pts) if random_mean is None else random_mean
    report = ExperimentReport(random_mean=rmean, mean_nn_distance=grid.mean_nn_distance,
                              meta={"n_trials": n_trials, "seed": seed, "grid_size": len(grid),
                                    "noise": asdict(noise)})
    sampler = pose_sampler or (lambda rng: sample_contact_pose(mesh, sensor, grid.spec, rng))
    kmax = max([int(m.split("-")[1]) for m in methods if "-" in m] + [1])
    for trial in range(n_trials):
        true_pose = sampler(np.random.default_rng([seed, trial]))
        query = synth_query(mesh, sensor, true_pose, noise, np.random.default_rng([seed, trial, 0]))
        post = single_contact_posterior(query, grid, enc)
        top = [i for i, _ in best_k(post, kmax)]
        refined = {}
        for m in methods:
            if m == "random" or m == "kinematic":
                # one sensor in contact: every grid pose is kinematically consistent
                est = grid.pose(int(np.random.default_rng([seed, trial, 1000]).integers(len(grid))))
                err = pose_distance(est, true_pose, pts)
            else:
                kind, k = m.split("-")
                cands = top[:int(k)]
                if kind == "Reg" and query.n_contact() > 0:
                    poses = []
                    for i in cands:
                        if i not in refined:
                            refined[i] = refine_pose(grid, i, query, sensor, reg_params)
                        poses.append(refined[i])
                else:
                    poses = [grid.pose(i) for i in cands]
                est, err = _best_of(poses, true_pose, pts)
            report.add(TrialRecord(trial, 1, m, true_pose, est, err, err / rmean))
    return report


def observe_rig(mesh: TriangleMesh, rig: SensorRig, true_pose: Pose, noise: NoiseModel, seed: int, trial: int,
                n: int | None = None) -> list[ContactShape]:
    """Synthetic contact shape for each sensor; sensors the object does not touch see nothing."""
    shapes = []
    for i, (sensor, E) in enumerate(rig.sensors[:n]):
        p = E.inverse() @ true_pose
        zmin = window_min_z(mesh, p, sensor)
        if np.isfinite(zmin) and abs(zmin - sensor.d) <= 1e-5:
            shapes.append(synth_query(mesh, sensor, p, noise, np.random.default_rng([seed, trial, i])))
        else:
            shapes.append(ContactShape.empty(sensor))
    return shapes


def run_multi_contact_experiment(rig: SensorRig, mesh: TriangleMesh, enc: Encoder, noise: NoiseModel,
                                 n_examples: int = 100, max_contacts: int = 7, seed: int = 0,
                                 random_mean: float | None = None, pose_sampler=None,
                                 contact_factor: float = 1.5) -> ExperimentReport:
    """Fused Best-1 and kinematic errors for the first N = 1..max_contacts sensors."""
    if len(rig) < max_contacts:
        raise ValueError(f"rig has {len(rig)} sensors, need {max_contacts}")
    grid = rig.grids[0]
    pts = sample_surface(mesh, N_METRIC_POINTS, seed)
    rmean = random_baseline(grid, mesh, 1000, seed, pts) if random_mean is None else random_mean
    report = ExperimentReport(random_mean=rmean, mean_nn_distance=grid.mean_nn_distance,
                              meta={"multi": True, "n_examples": n_examples, "max_contacts": max_contacts,
                                    "seed": seed, "grid_size": len(grid), "noise": asdict(noise)})
    sensor1 = rig.sensors[0][0]
    sampler = pose_sampler or (lambda rng: sample_contact_pose(mesh, sensor1, grid.spec, rng))
    for trial in range(n_examples):
        true_pose = sampler(np.random.default_rng([seed, trial]))
        shapes = observe_rig(mesh, rig, true_pose, noise, seed, trial, max_contacts)
        posts = [single_contact_posterior(cs, rig.grids[i], enc) if cs.n_contact() else None
                 for i, cs in enumerate(shapes)]
        for n in range(1, max_contacts + 1):
            sub = rig.prefix(n)
            try:
                fused = fuse_multi_contact(sub, shapes[:n], enc, contact_factor=contact_factor,
                                           posteriors=posts[:n])
                est = grid.pose(best_k(fused, 1)[0][0])
                err, failed = pose_distance(est, true_pose, pts), False
            except EmptySupportError:
                est, err, failed = None, rmean, True
            report.add(TrialRecord(trial, n, "Best-1", true_pose, est, err, err / rmean, failed))
            try:
                kin = kinematic_posterior(sub, [cs.n_contact() > 0 for cs in shapes[:n]], contact_factor)
                pick = np.random.default_rng([seed, trial, 1000 + n]).choice(kin.support)
                est = grid.pose(int(pick))
                err, failed = pose_distance(est, true_pose, pts), False
            except EmptySupportError:
                est, err, failed = None, rmean, True
            report.add(TrialRecord(trial, n, "kinematic", true_pose, est, err, err / rmean, failed))
    return report
