"""Tactile pose localization from simulated contact shapes."""
from .geometry import Pose, TriangleMesh, compose, invert, apply, load_mesh, sample_surface
from .render import (SensorModel, DepthImage, ContactShape, render_depth, project_to_contact,
                     render_contact_shape, to_mask, to_pointcloud)
from .grid import GridSpec, PoseGrid, build_grid, pose_distance, nearest_pose, save_grid, load_grid

__version__ = "0.1.0"
