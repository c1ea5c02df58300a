"""Contact-shape descriptors, grid scoring and contrastive training.

Contact shapes are binarized, area-averaged to 32x32 and flattened. The
``baseline_mask`` encoder L2-normalizes that vector; ``linear_contrastive``
applies a learned ``embed_dim x 1024`` map first. Training follows the
grid-as-queue scheme: each grid pose owns a fixed slot, keys are re-encoded
with the current weights at the start of every epoch, and the loss is the
cross-entropy of the temperature-scaled cosine logits against the index of
the grid pose nearest to the sampled training pose.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from ._io import atomic_write
from .grid import PoseGrid, nearest_pose, sample_contact_pose
from .geometry import TriangleMesh
from .render import ContactShape, PGM_MAX, SensorModel, area_weights, render_contact_shape, to_mask

log = logging.getLogger(__name__)

INPUT_SIZE = 32
ENC_MAGIC = b"TLENC001"


class FingerprintError(ValueError):
    """Grid descriptors were not produced by this encoder."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(eq=False)
class Encoder:
    kind: str = "baseline_mask"
    embed_dim: int = INPUT_SIZE * INPUT_SIZE
    weights: np.ndarray | None = None  # float32 (embed_dim, 1024)
    temperature: float = 0.07
    input_size: int = INPUT_SIZE
    grid_fingerprint: str = ""
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("baseline_mask", "linear_contrastive"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "linear_contrastive":
            if self.weights is None:
                raise ValueError("linear_contrastive encoder needs weights")
            self.weights = np.asarray(self.weights, np.float32)
            self.embed_dim = self.weights.shape[0]
        else:
            self.embed_dim = self.input_size ** 2

    @classmethod
    def baseline(cls, temperature: float = 0.07) -> "Encoder":
        return cls("baseline_mask", temperature=temperature)

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.kind}|{self.input_size}|{self.temperature!r}".encode())
        if self.weights is not None:
            h.update(np.ascontiguousarray(self.weights, "<f4").tobytes())
        return h.hexdigest()[:16]

    def embed(self, feats: np.ndarray) -> np.ndarray:
        """Descriptors for mask features of shape (n, 1024)."""
        feats = np.atleast_2d(feats)
        z = feats if self.weights is None else feats @ self.weights.astype(np.float64).T
        return normalize_rows(z)

    def encode(self, cs: ContactShape) -> np.ndarray:
        return self.embed(mask_features(to_mask(cs), self.input_size))[0]


def normalize_rows(z: np.ndarray) -> np.ndarray:
    """Unit rows; all-zero rows map to e1."""
    n = np.linalg.norm(z, axis=1, keepdims=True)
    out = np.divide(z, n, out=np.zeros_like(z), where=n > 0)
    zero = n[:, 0] == 0
    out[zero] = 0.0
    out[zero, 0] = 1.0
    return out


def mask_features(masks: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Area-mean binary masks (H, W) or (n, H, W) to (n, size*size) in [0, 1]."""
    masks = np.asarray(masks, np.float64)
    if masks.ndim == 2:
        masks = masks[None]
    _, H, W = masks.shape
    Wh, Ww = area_weights(H, size), area_weights(W, size)
    return np.einsum("ih,nhw,jw->nij", Wh, masks, Ww).reshape(len(masks), size * size)


def grid_features(grid: PoseGrid, size: int = INPUT_SIZE, chunk: int = 2048) -> np.ndarray:
    out = [mask_features(grid.codes[i:i + chunk] < PGM_MAX, size) for i in range(0, len(grid), chunk)]
    return np.concatenate(out)


def encode_grid(enc: Encoder, grid: PoseGrid, feats: np.ndarray | None = None) -> PoseGrid:
    """Copy of ``grid`` carrying descriptors from ``enc``."""
    feats = grid_features(grid, enc.input_size) if feats is None else feats
    return replace(grid, descriptors=enc.embed(feats), encoder_fingerprint=enc.fingerprint(), _index=grid._index)


def score(enc: Encoder, query: np.ndarray, grid: PoseGrid) -> np.ndarray:
    """Logits ``<query, descriptor_i> / temperature`` for every grid pose."""
    if grid.descriptors is None or grid.encoder_fingerprint != enc.fingerprint():
        raise FingerprintError("grid descriptors were computed with a different encoder")
    return _score_matrix(grid) @ np.asarray(query, np.float64) / enc.temperature


SPARSE_DENSITY = 0.3


def _score_matrix(grid: PoseGrid):
    # mask descriptors are mostly zero; a cached CSR copy cuts the memory traffic of each query
    D = grid.descriptors
    if grid._scorer is None or grid._scorer[0] is not D:
        grid._scorer = (D, sparse.csr_matrix(D) if np.count_nonzero(D) < SPARSE_DENSITY * D.size else D)
    return grid._scorer[1]


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.03
    weight_decay: float = 1e-4
    batch_size: int = 32
    samples_per_epoch: int = 256
    delta_d_min: float = 1.0
    delta_d_max: float = 2.0
    momentum: float = 0.0
    embed_dim: int = 128
    temperature: float = 0.07
    init_collapse: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.delta_d_min < self.delta_d_max:
            raise ValueError("delta_d_min must be < delta_d_max")


def init_weights(cfg: TrainConfig, dim_in: int = INPUT_SIZE ** 2) -> np.ndarray:
    """Seeded Gaussian weights plus a shared rank-one component.

    The rank-one part pulls every mask toward a shared direction, so the
    untrained softmax over the grid starts close to uniform. ``init_collapse``
    sets its weight relative to the Gaussian part; too large a value shrinks
    the gradient through the normalization and stalls training.
    """
    rng = np.random.default_rng(cfg.seed)
    G = rng.standard_normal((cfg.embed_dim, dim_in)) / np.sqrt(dim_in)
    u = rng.standard_normal(cfg.embed_dim)
    u /= np.linalg.norm(u)
    return (G + cfg.init_collapse * np.outer(u, np.ones(dim_in))).astype(np.float32)


def contrastive_loss_and_grad(W, keys, feats, labels, temperature):
    """Mean cross-entropy and its gradient w.r.t. ``W`` (keys held fixed).

    ``W`` (D, F), ``keys`` (N, D) unit rows, ``feats`` (B, F), ``labels`` (B,).
    """
    W = np.asarray(W, np.float64)
    q = feats @ W.T
    qn_norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qn_norm
    logits = qn @ keys.T / temperature
    lp = log_softmax(logits)
    B = len(labels)
    loss = -lp[np.arange(B), labels].mean()
    p = np.exp(lp)
    p[np.arange(B), labels] -= 1.0
    g_qn = p @ keys / temperature / B
    g_q = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / qn_norm
    return loss, g_q.T @ feats, logits


def draw_training_batch(grid: PoseGrid, mesh: TriangleMesh, sensor: SensorModel, cfg: TrainConfig, rng, n: int):
    """Random contact poses rendered at a random threshold, labelled by nearest grid pose."""
    feats, labels = [], []
    for _ in range(n):
        pose = sample_contact_pose(mesh, sensor, grid.spec, rng)
        dd = rng.uniform(cfg.delta_d_min, cfg.delta_d_max)
        cs = render_contact_shape(mesh, pose, sensor, delta_d_override=dd, check=False)
        feats.append(mask_features(to_mask(cs))[0])
        labels.append(nearest_pose(grid, pose)[0])
    return np.array(feats), np.array(labels)


def train_contrastive(grid: PoseGrid, mesh: TriangleMesh, sensor: SensorModel, cfg: TrainConfig) -> Encoder:
    rng = np.random.default_rng([cfg.seed, 1])
    W = init_weights(cfg)
    enc = Encoder("linear_contrastive", weights=W, temperature=cfg.temperature, grid_fingerprint=grid.fingerprint())
    if cfg.epochs == 0:
        return enc
    gfeats = grid_features(grid)
    vel = np.zeros(W.shape)
    Wd = W.astype(np.float64)
    steps_per_epoch = max(1, int(np.ceil(cfg.samples_per_epoch / cfg.batch_size)))
    total = cfg.epochs * steps_per_epoch
    step = 0
    initial = None
    bad = 0
    for epoch in range(cfg.epochs):
        keys = normalize_rows(gfeats @ Wd.T)  # queue re-encoded with current weights
        feats, labels = draw_training_batch(grid, mesh, sensor, cfg, rng, cfg.samples_per_epoch)
        losses, hits = [], 0
        for b in range(0, len(labels), cfg.batch_size):
            lr = cfg.learning_rate * 0.5 * (1 + np.cos(np.pi * step / total))
            loss, g, logits = contrastive_loss_and_grad(Wd, keys, feats[b:b + cfg.batch_size],
                                                        labels[b:b + cfg.batch_size], cfg.temperature)
            hits += int((np.argmax(logits, axis=1) == labels[b:b + cfg.batch_size]).sum())
            losses.append(loss * len(logits))
            vel = cfg.momentum * vel + g + cfg.weight_decay * Wd
            Wd = Wd - lr * vel
            step += 1
        mean_loss = float(np.sum(losses) / len(labels))
        acc = hits / len(labels)
        enc.loss_curve.append((epoch, mean_loss, acc))
        log.info("epoch %d loss %.4f top1 %.3f", epoch, mean_loss, acc)
        if initial is None:
            initial = mean_loss
        bad = bad + 1 if mean_loss > 10 * initial else 0
        if bad >= 3 or not np.isfinite(mean_loss):
            raise TrainingDiverged(f"loss diverged: initial {initial:.4f}, curve {enc.loss_curve}")
    enc.weights = Wd.astype(np.float32)
    return enc


# -------------------------------------------------------------------- I/O

def save_encoder(enc: Encoder, path) -> None:
    header = {"kind": enc.kind, "dims": [enc.embed_dim, enc.input_size ** 2], "input_size": enc.input_size,
              "temperature": enc.temperature, "grid_fingerprint": enc.grid_fingerprint}
    hb = json.dumps(header, sort_keys=True).encode()
    w = b"" if enc.weights is None else np.ascontiguousarray(enc.weights, "<f4").tobytes()
    atomic_write(path, ENC_MAGIC + struct.pack("<Q", len(hb)) + hb + w)


def load_encoder(path) -> Encoder:
    data = Path(path).read_bytes()
    if data[:8] != ENC_MAGIC:
        raise ValueError("not an encoder file")
    (hl,) = struct.unpack_from("<Q", data, 8)
    h = json.loads(data[16:16 + hl])
    weights = None
    if h["kind"] == "linear_contrastive":
        D, F = h["dims"]
        if len(data) - 16 - hl != D * F * 4:
            raise ValueError("truncated encoder weights")
        weights = np.frombuffer(data, "<f4", D * F, 16 + hl).reshape(D, F).astype(np.float32)
    return Encoder(h["kind"], weights=weights, temperature=h["temperature"], input_size=h["input_size"],
                   grid_fingerprint=h["grid_fingerprint"])


def save_loss_curve(enc: Encoder, path) -> None:
    rows = ["epoch,mean_loss,top1_acc"] + [f"{e},{l:.9g},{a:.6f}" for e, l, a in enc.loss_curve]
    atomic_write(path, ("\n".join(rows) + "\n").encode())
