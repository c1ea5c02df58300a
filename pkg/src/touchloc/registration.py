"""Rigid point-set registration by EM over Gaussian mixtures.

Each cloud is treated as an isotropic Gaussian mixture (bandwidth sigma) with a
uniform outlier component, and the objective is the sum of both directional
negative log-likelihoods: target under the transformed source mixture and
transformed source under the target mixture. The E-step gives soft
correspondences in both directions, and their sum weights a closed-form
Procrustes M-step. Because the combined weights are symmetric, an exactly
transformed copy of the source is a fixed point at any bandwidth.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._kernels import gmm_weights
from .geometry import Pose
from .grid import PoseGrid
from .render import ContactShape, SensorModel, to_pointcloud

log = logging.getLogger(__name__)

RigidTransform = Pose


@dataclass
class RegistrationParams:
    sigma: float = 1.0
    outlier_weight: float = 0.1
    max_iterations: int = 1
    convergence_tol: float = 1e-4
    update_sigma: bool = True
    sigma_min: float = 1e-4
    max_points: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0 or self.sigma_min <= 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.outlier_weight < 1:
            raise ValueError("outlier_weight must be in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class RegistrationResult:
    transform: Pose
    degenerate: bool = False
    iterations: int = 0
    sigma: float = float("nan")
    objective: list = field(default_factory=list)  # value before the first and after every iteration


def _subsample(pts: np.ndarray, n: int, rng) -> np.ndarray:
    if len(pts) <= n:
        return pts
    return pts[np.sort(rng.choice(len(pts), n, replace=False))]


def _weighted_sqdist(X, Y, W) -> float:
    """sum W_mn |x_n - y_m|² without forming the distance matrix."""
    cross = np.einsum("ni,ni->", X, W.T @ Y)
    return max(float(W.sum(axis=0) @ np.sum(X * X, 1) + W.sum(axis=1) @ np.sum(Y * Y, 1) - 2.0 * cross), 0.0)


def _e_step(X, TY, sigma, w):
    """Symmetric weights W (M, N) and the objective value."""
    return gmm_weights(np.ascontiguousarray(X), np.ascontiguousarray(TY), float(sigma), float(w))


def weighted_procrustes(X, Y, W):
    """Rotation and translation minimizing sum W_mn |x_n - R y_m - t|².

    Returns (R, t, degenerate); rank < 2 of the cross-covariance is degenerate.
    """
    s = W.sum()
    if not s > 0:
        return np.eye(3), np.zeros(3), True
    wx = W.sum(axis=0)
    wy = W.sum(axis=1)
    mx = wx @ X / s
    my = wy @ Y / s
    A = (X - mx).T @ W.T @ (Y - my)  # 3x3, sum W_mn (x_n - mx)(y_m - my)^T
    U, S, Vt = np.linalg.svd(A)
    if S[0] <= 0 or S[1] <= 1e-12 * S[0]:
        return np.eye(3), np.zeros(3), True
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mx - R @ my, False


def register(source, target, params: RegistrationParams | None = None) -> RegistrationResult:
    """Rigid transform mapping ``source`` onto ``target``."""
    params = params or RegistrationParams()
    Y = np.asarray(source, float).reshape(-1, 3)
    X = np.asarray(target, float).reshape(-1, 3)
    if len(Y) < 3 or len(X) < 3:
        raise ValueError("registration needs at least 3 points per cloud")
    # same seed per cloud, so equal-sized clouds keep corresponding subsets
    Y = _subsample(Y, params.max_points, np.random.default_rng(params.seed))
    X = _subsample(X, params.max_points, np.random.default_rng(params.seed))
    R, t = np.eye(3), np.zeros(3)
    sigma = params.sigma
    W, obj = _e_step(X, Y, sigma, params.outlier_weight)
    history = [obj]
    degenerate = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        R_new, t_new, degenerate = weighted_procrustes(X, Y, W)
        if degenerate:
            log.warning("degenerate cross-covariance; returning identity")
            return RegistrationResult(Pose.identity(), True, it, sigma, history)
        TY = Y @ R_new.T + t_new
        if params.update_sigma:
            sigma = max(np.sqrt(_weighted_sqdist(X, TY, W) / (3.0 * W.sum())), params.sigma_min)
        step = np.max(np.linalg.norm(TY - (Y @ R.T + t), axis=1))
        R, t = R_new, t_new
        W, obj = _e_step(X, TY, sigma, params.outlier_weight)
        history.append(obj)
        if step < params.convergence_tol:
            break
    return RegistrationResult(Pose(R, t), degenerate, it, sigma, history)


def refine_pose(grid: PoseGrid, index: int, query: ContactShape, sensor: SensorModel,
                params: RegistrationParams | None = None) -> Pose:
    """Register the stored contact shape of ``grid[index]`` to ``query``; returns the corrected pose."""
    target = to_pointcloud(query, sensor)
    source = to_pointcloud(grid.shape(index), grid.sensor)
    res = register(source, target, params)
    return res.transform @ grid.pose(index)
