"""Shipped benchmark fixtures: the single-contact bracket and the stud-plate rig."""
from __future__ import annotations

import numpy as np

from . import shapes
from .geometry import Pose, TriangleMesh
from .grid import GridSpec, PoseGrid, build_grid
from .posterior import SensorRig
from .render import SensorModel, project_to_contact

WORK_RESOLUTION = 200

# Identical studs under a flat plate; integer coordinates so the sensor offsets
# below land exactly on the grid lattice. No two studs share a displacement.
STUDS = ((0, 0), (17, 3), (-16, 5), (4, 18), (-3, -17), (19, -14), (-18, -13))
STUD_PLATE = (46.0, 42.0, 2.0)
STUD_SHIFT = 2.0  # true poses are drawn within ±STUD_SHIFT mm of the home position


def work_sensor(resolution: int = WORK_RESOLUTION) -> SensorModel:
    """The default sensor resampled to the work resolution."""
    return SensorModel.default().scaled(resolution)


def bracket_spec() -> GridSpec:
    """Single-face grid for the bracket: small tilts, full roll."""
    return GridSpec(x_range=(-3.0, 3.0), y_range=(-3.0, 3.0), x_step=1.5, y_step=1.5,
                    n_view_dirs=5, n_rolls=48, view_cone_deg=8.0)


def stud_mesh() -> TriangleMesh:
    return shapes.studded_plate(STUDS, STUD_PLATE)


def stud_sensor() -> SensorModel:
    """Small floor sensor: a 10 x 10 mm window imaged at 40 x 40 pixels."""
    return SensorModel(fx=100.0, fy=100.0, cx=19.5, cy=19.5, width=40, height=40, d=25.0, delta_d=2.0)


def stud_spec() -> GridSpec:
    """Translations putting any stud over the sensor; the orientation is fixed.

    The plate slides in a guide, so every sensor sees its stud from the same
    angle and the seven stud hypotheses give pixel-identical masks.
    """
    s = np.array(STUDS, float)
    reach = 7.0
    return GridSpec(x_range=(np.floor(-s[:, 0].max() - reach), np.ceil(-s[:, 0].min() + reach)),
                    y_range=(np.floor(-s[:, 1].max() - reach), np.ceil(-s[:, 1].min() + reach)),
                    x_step=1.0, y_step=1.0, n_view_dirs=1, n_rolls=1, roll_range=(0.0, 0.0))


def stud_rig(grid: PoseGrid | None = None, n_sensors: int = len(STUDS), threads: int = 1) -> tuple:
    """Floor sensors under each stud; returns (mesh, rig, true-pose sampler).

    One sensor sees one stud and cannot tell which, so a single contact leaves
    a seven-way ambiguity that any second contact resolves.
    """
    mesh = stud_mesh()
    sensor = stud_sensor()
    if grid is None:
        grid = build_grid(mesh, sensor, stud_spec(), threads=threads)
    sensors = [(sensor, Pose.from_translation([x - STUDS[0][0], y - STUDS[0][1], 0.0])) for x, y in STUDS[:n_sensors]]
    rig = SensorRig(sensors, [grid] * n_sensors)

    def sampler(rng) -> Pose:
        dx, dy = rng.uniform(-STUD_SHIFT, STUD_SHIFT, 2)
        pose = Pose.from_translation([dx - STUDS[0][0], dy - STUDS[0][1], 0.0])
        return project_to_contact(mesh, pose, sensor)[0]

    return mesh, rig, sampler
