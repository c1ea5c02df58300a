"""Pose posteriors over grid indices and multi-contact fusion.

All arithmetic is in log space. A grid-1 pose ``x`` is transferred to sensor
``i`` as ``inv(E_i) ∘ x`` (``E_i`` is sensor i's pose in the sensor-1 frame)
and matched to its nearest grid-i pose; it counts as touching sensor i when
that nearest pose lies within ``contact_factor × mean_nn_distance``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose
from .grid import PoseGrid
from .render import ContactShape
from .similarity import Encoder, log_softmax, score

log = logging.getLogger(__name__)

CONTACT_FACTOR = 1.5


class EmptySupportError(RuntimeError):
    """Every grid pose was excluded."""


def logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return m
    return float(m + np.log(np.sum(np.exp(a - m))))


@dataclass(eq=False)
class PosePosterior:
    grid_ref: str
    log_prob: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.log_prob = np.asarray(self.log_prob, float)
        if np.isnan(self.log_prob).any() or np.isposinf(self.log_prob).any():
            raise ValueError("log_prob entries must be finite or -inf")

    def __len__(self):
        return len(self.log_prob)

    @property
    def prob(self) -> np.ndarray:
        return np.exp(self.log_prob)

    def argmax(self) -> int:
        return int(np.argmax(self.log_prob))

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.log_prob))


def normalized(grid_ref: str, logits: np.ndarray, **flags) -> PosePosterior:
    z = logsumexp(logits)
    if not np.isfinite(z):
        raise EmptySupportError("posterior has empty support")
    return PosePosterior(grid_ref, logits - z, flags)


def single_contact_posterior(cs: ContactShape, grid: PoseGrid, enc: Encoder) -> PosePosterior:
    return PosePosterior(grid.fingerprint(), log_softmax(score(enc, enc.encode(cs), grid)))


def best_k(p: PosePosterior, k: int) -> list[tuple[int, float]]:
    """Top-k ``(index, prob)`` in descending probability, lower index first on ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(p):
        log.warning("k=%d exceeds grid size %d; clamping", k, len(p))
        k = len(p)
    order = np.lexsort((np.arange(len(p)), -p.log_prob))[:k]
    return [(int(i), float(np.exp(p.log_prob[i]))) for i in order]


# ------------------------------------------------------------------- priors

@dataclass
class PriorSpec:
    """Per-index weights over grid 1; ``None`` means uniform."""
    task_prior: np.ndarray | None = None
    train_prior: np.ndarray | None = None

    def __post_init__(self):
        for name in ("task_prior", "train_prior"):
            w = getattr(self, name)
            if w is None:
                continue
            w = np.asarray(w, float)
            if (w < 0).any() or not (w > 0).any():
                raise ValueError(f"{name} weights must be >= 0 and not all zero")
            setattr(self, name, w)

    @property
    def uniform(self) -> bool:
        return self.task_prior is None and self.train_prior is None

    def log_terms(self, n: int, n_sensors: int) -> np.ndarray:
        """``log P_task - N log P_train`` up to an additive constant."""
        out = np.zeros(n)
        with np.errstate(divide="ignore"):
            if self.task_prior is not None:
                out += np.log(_check_len(self.task_prior, n))
            if self.train_prior is not None:
                lt = np.log(_check_len(self.train_prior, n))
                # a pose never seen in training carries no evidence; drop it
                out = np.where(np.isfinite(lt), out - n_sensors * lt, -np.inf)
        return out


def _check_len(w, n):
    if len(w) != n:
        raise ValueError(f"prior has {len(w)} weights, grid has {n} poses")
    return w


def load_prior(src) -> np.ndarray | None:
    """Prior weights from a CSV ``index,weight`` file, or ``None`` for the literal "uniform"."""
    if isinstance(src, str) and src.strip() == "uniform":
        return None
    rows = list(csv.reader(io.StringIO(Path(src).read_text())))
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    idx = np.array([int(r[0]) for r in rows])
    w = np.zeros(idx.max() + 1 if len(idx) else 0)
    w[idx] = [float(r[1]) for r in rows]
    return w


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


# --------------------------------------------------------------------- rig

@dataclass(eq=False)
class SensorRig:
    sensors: list  # [(SensorModel, Pose)], extrinsic = pose of sensor i in the sensor-1 frame
    grids: list    # PoseGrid per sensor
    _transfer: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.sensors:
            raise ValueError("rig needs at least one sensor")
        if len(self.grids) != len(self.sensors):
            raise ValueError("one grid per sensor required")
        E0 = self.sensors[0][1]
        if not (np.allclose(E0.rotation, np.eye(3), atol=1e-12) and np.allclose(E0.translation, 0, atol=1e-12)):
            raise ValueError("sensor 1 extrinsic must be the identity")

    def __len__(self):
        return len(self.sensors)

    def prefix(self, n: int) -> "SensorRig":
        """The first ``n`` sensors, sharing this rig's transfer cache."""
        return SensorRig(self.sensors[:n], self.grids[:n], self._transfer)

    def transfer(self, i: int, factor: float = CONTACT_FACTOR) -> tuple[np.ndarray, np.ndarray]:
        """Nearest grid-i index of every grid-1 pose and whether it touches sensor i."""
        key = (i, factor)
        if key not in self._transfer:
            g1, gi = self.grids[0], self.grids[i]
            if i == 0 or (gi is g1 and _is_identity(self.sensors[i][1])):
                idx, ok = np.arange(len(g1)), np.ones(len(g1), bool)
            else:
                E_inv = self.sensors[i][1].inverse()
                R = E_inv.rotation @ g1.rotations
                t = g1.translations @ E_inv.rotation.T + E_inv.translation
                idx, dist = gi.index.nearest_many(R, t)
                ok = dist <= factor * gi.mean_nn_distance
            self._transfer[key] = (idx, ok)
        return self._transfer[key]


def _is_identity(p: Pose) -> bool:
    return bool(np.array_equal(p.rotation, np.eye(3)) and not p.translation.any())


def _stable_sum(terms: np.ndarray) -> np.ndarray:
    """Column sums that do not depend on the row order."""
    return np.sort(terms, axis=0).sum(axis=0) if len(terms) > 1 else terms[0].copy()


def fuse_multi_contact(rig: SensorRig, shapes, enc: Encoder, priors: PriorSpec | None = None,
                       contact_factor: float = CONTACT_FACTOR, exclusion_log_eps: float | None = None,
                       posteriors=None) -> PosePosterior:
    """Fused posterior over grid 1 from one contact shape per sensor.

    A sensor with contact contributes ``log P(x | CS_i)`` read from its own
    single-contact posterior at the transferred index; poses that would not
    touch it are excluded. A sensor reporting no contact excludes the poses
    that would touch it and is flat elsewhere. ``exclusion_log_eps`` replaces
    the hard exclusion by a finite log weight.
    """
    priors = priors or PriorSpec()
    if len(shapes) != len(rig):
        raise ValueError("one contact shape per sensor required")
    n1 = len(rig.grids[0])
    excl = -np.inf if exclusion_log_eps is None else float(exclusion_log_eps)
    terms = []
    singles = []
    for i, cs in enumerate(shapes):
        idx, ok = rig.transfer(i, contact_factor)
        if cs.n_contact() > 0:
            post = posteriors[i] if posteriors is not None else single_contact_posterior(cs, rig.grids[i], enc)
            singles.append(post)
            terms.append(np.where(ok, post.log_prob[idx], excl))
        else:
            singles.append(None)
            terms.append(np.where(ok, excl, 0.0))
    if len(shapes) == 1 and priors.uniform and singles[0] is not None:
        # identical to the single-contact posterior; skip the renormalization round-off
        lp = terms[0]
        if np.isfinite(logsumexp(lp)) and abs(logsumexp(lp)) < 1e-12:
            return PosePosterior(rig.grids[0].fingerprint(), lp, {"n_sensors": 1})
    total = _stable_sum(np.stack(terms)) + priors.log_terms(n1, len(shapes))
    return normalized(rig.grids[0].fingerprint(), total, n_sensors=len(shapes))


def kinematic_posterior(rig: SensorRig, contact_flags, contact_factor: float = CONTACT_FACTOR) -> PosePosterior:
    """Uniform over grid-1 poses whose contact pattern matches every flag."""
    if len(contact_flags) != len(rig):
        raise ValueError("one flag per sensor required")
    keep = np.ones(len(rig.grids[0]), bool)
    for i, flag in enumerate(contact_flags):
        keep &= rig.transfer(i, contact_factor)[1] == bool(flag)
    if not keep.any():
        raise EmptySupportError("no grid pose is consistent with the contact flags")
    lp = np.where(keep, -np.log(keep.sum()), -np.inf)
    return PosePosterior(rig.grids[0].fingerprint(), lp, {"kinematic": True})


# --------------------------------------------------------------------- I/O

def posterior_csv(p: PosePosterior, grid: PoseGrid) -> str:
    out = io.StringIO()
    out.write("index,x,y,z,qw,qx,qy,qz,log_prob\n")
    for i in range(len(p)):
        pose = grid.pose(i)
        vals = list(pose.translation) + list(pose.quaternion())
        out.write(f"{i}," + ",".join(f"{v:.12g}" for v in vals) + f",{p.log_prob[i]:.17g}\n")
    return out.getvalue()


def read_posterior_csv(path) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    return np.array([float(r["log_prob"]) for r in rows])
