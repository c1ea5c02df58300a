"""``touchloc`` command-line front end.

Every subcommand reads one JSON config (``--config``), writes its outputs into
``output_dir`` through temp-file renames, and drops the resolved config next to
them. Exit codes: 0 ok, 2 config, 3 geometry, 4 I/O, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .config import ConfigError, RunConfig, dump_config, load_config, parse_pose
from .evaluation import NoiseModel, random_baseline, run_multi_contact_experiment, run_single_contact_experiment
from .geometry import MeshError
from .grid import GridError, GridFileError, PoseGrid, build_grid, load_grid, save_grid
from .posterior import (EmptySupportError, PriorSpec, SensorRig, best_k, fuse_multi_contact, load_prior,
                        posterior_csv, single_contact_posterior)
from .registration import refine_pose
from .render import (PGM_MAX, ContactShape, DepthImage, GeometryError, downsample, load_contact_shape,
                     project_to_contact, render_contact_shape, render_depth, save_contact_shape)
from .similarity import (Encoder, FingerprintError, TrainingDiverged, encode_grid, load_encoder, save_encoder,
                         save_loss_curve, train_contrastive)

log = logging.getLogger("touchloc")

EXIT_OK, EXIT_CONFIG, EXIT_GEOMETRY, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class NumericalError(RuntimeError):
    pass


# ----------------------------------------------------------------- helpers

def _prepare(cfg: RunConfig, command: str) -> Path:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / f"{command}.config.json", dump_config(cfg))
    return out


def _artifact(cfg: RunConfig, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else cfg.out / p


def _load_encoded_grid(cfg: RunConfig) -> tuple[PoseGrid, Encoder]:
    grid = load_grid(_artifact(cfg, cfg.paths.grid))
    if cfg.encoder.kind == "baseline_mask":
        enc = Encoder.baseline(cfg.encoder.temperature)
    else:
        enc = load_encoder(_artifact(cfg, cfg.paths.encoder))
        if enc.grid_fingerprint and enc.grid_fingerprint != grid.fingerprint():
            raise FingerprintError("encoder was trained on a different grid")
    if grid.encoder_fingerprint != enc.fingerprint():
        log.info("encoding %d grid poses", len(grid))
        grid = encode_grid(enc, grid)
    return grid, enc


def _load_query(cfg: RunConfig, path, grid: PoseGrid) -> ContactShape:
    cs, meta = load_contact_shape(cfg.resolve(path))
    if abs(meta["delta_d_mm"] - grid.sensor.delta_d) > 1e-12:
        log.warning("query delta_d %.6g differs from the grid's %.6g", meta["delta_d_mm"], grid.sensor.delta_d)
    if (cs.height, cs.width) != (grid.sensor.height, grid.sensor.width):
        if cs.width < grid.sensor.width:
            raise ConfigError(f"query is {cs.width}x{cs.height}, smaller than the grid's sensor")
        cs = downsample(cs, grid.sensor.width, grid.sensor.height)
    return cs


def _topk_csv(post, grid: PoseGrid, k: int) -> str:
    buf = io.StringIO()
    buf.write("rank,index,prob,x,y,z,qw,qx,qy,qz\n")
    for rank, (i, p) in enumerate(best_k(post, k), 1):
        pose = grid.pose(i)
        vals = list(pose.translation) + list(pose.quaternion())
        buf.write(f"{rank},{i},{p:.17g}," + ",".join(f"{v:.12g}" for v in vals) + "\n")
    return buf.getvalue()


def _pose_json(pose) -> bytes:
    d = {"translation": [float(v) for v in pose.translation], "quaternion": [float(v) for v in pose.quaternion()]}
    return (json.dumps(d, indent=1) + "\n").encode()


def _save_depth(depth: DepthImage, path: Path) -> None:
    """16-bit PGM of depth in units of ``scale_mm``; code 65535 marks a miss."""
    z = depth.depth
    finite = np.isfinite(z)
    top = float(z[finite].max()) if finite.any() else 1.0
    scale = top / (PGM_MAX - 1)
    codes = np.full(z.shape, PGM_MAX, np.uint16)
    codes[finite] = np.rint(z[finite] / scale).astype(np.uint16)
    header = f"P5\n{depth.width} {depth.height}\n{PGM_MAX}\n".encode()
    atomic_write(path, header + codes.astype(">u2").tobytes())
    meta = {"scale_mm": scale, "miss_code": PGM_MAX}
    atomic_write(str(path) + ".json", (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode())


# ---------------------------------------------------------------- commands

def cmd_render(cfg: RunConfig, threads: int = 1) -> None:
    out = _prepare(cfg, "render")
    mesh = cfg.load_mesh()
    sensor = cfg.sensor.build()
    pose = parse_pose(cfg.render.pose)
    if cfg.render.project_to_contact:
        pose, _ = project_to_contact(mesh, pose, sensor)
    cs = render_contact_shape(mesh, pose, sensor)
    _save_depth(render_depth(mesh, pose, sensor), out / "depth.pgm")
    save_contact_shape(cs, sensor, out / "contact.pgm")
    atomic_write(out / "pose.json", _pose_json(pose))


def cmd_build_grid(cfg: RunConfig, threads: int = 1) -> None:
    out = _prepare(cfg, "build-grid")
    grid = build_grid(cfg.load_mesh(), cfg.sensor.build(), cfg.grid_spec(), threads=threads)
    save_grid(grid, _artifact(cfg, cfg.paths.grid))
    info = {"n_poses": len(grid), "mean_nn_distance_mm": grid.mean_nn_distance, "fingerprint": grid.fingerprint()}
    atomic_write(out / "grid_summary.json", (json.dumps(info, indent=1, sort_keys=True) + "\n").encode())


def cmd_train_encoder(cfg: RunConfig, threads: int = 1) -> None:
    _prepare(cfg, "train-encoder")
    grid = load_grid(_artifact(cfg, cfg.paths.grid))
    if cfg.encoder.kind == "baseline_mask":
        enc = Encoder.baseline(cfg.encoder.temperature)
    else:
        enc = train_contrastive(grid, cfg.load_mesh(), grid.sensor, cfg.encoder.train_config(cfg.seed))
    path = _artifact(cfg, cfg.paths.encoder)
    save_encoder(enc, path)
    save_loss_curve(enc, path.with_name(path.name + ".loss.csv"))


def cmd_localize(cfg: RunConfig, threads: int = 1) -> None:
    out = _prepare(cfg, "localize")
    grid, enc = _load_encoded_grid(cfg)
    query = _load_query(cfg, cfg.localize.query, grid)
    post = single_contact_posterior(query, grid, enc)
    atomic_write(out / "posterior.csv", posterior_csv(post, grid).encode())
    atomic_write(out / "topk.csv", _topk_csv(post, grid, cfg.localize.top_k).encode())
    if cfg.localize.refine:
        pose = refine_pose(grid, post.argmax(), query, grid.sensor, cfg.registration_params())
        atomic_write(out / "refined_pose.json", _pose_json(pose))


def cmd_fuse(cfg: RunConfig, threads: int = 1) -> None:
    out = _prepare(cfg, "fuse")
    fc = cfg.fuse
    if not fc.queries:
        raise ConfigError("fuse.queries is empty")
    extr = fc.extrinsics or [{}]
    if len(extr) != len(fc.queries):
        raise ConfigError("fuse.extrinsics needs one pose per query")
    grid, enc = _load_encoded_grid(cfg)
    rig = SensorRig([(grid.sensor, parse_pose(e)) for e in extr], [grid] * len(extr))
    shapes = [ContactShape.empty(grid.sensor) if q is None else _load_query(cfg, q, grid) for q in fc.queries]
    priors = PriorSpec(*(load_prior(p if p == "uniform" else cfg.resolve(p)) for p in (fc.task_prior, fc.train_prior)))
    post = fuse_multi_contact(rig, shapes, enc, priors, contact_factor=fc.contact_factor)
    atomic_write(out / "fused_posterior.csv", posterior_csv(post, grid).encode())
    atomic_write(out / "topk.csv", _topk_csv(post, grid, cfg.localize.top_k).encode())


def cmd_evaluate(cfg: RunConfig, threads: int = 1) -> None:
    out = _prepare(cfg, "evaluate")
    ex = cfg.experiment
    noise: NoiseModel = cfg.noise_model()
    grid, enc = _load_encoded_grid(cfg)
    if ex.kind == "single":
        mesh = cfg.load_mesh()
        rmean = random_baseline(grid, mesh, ex.random_trials, cfg.seed)
        report = run_single_contact_experiment(mesh, grid.sensor, grid, enc, noise, ex.n_trials, tuple(ex.methods),
                                               cfg.seed, cfg.registration_params(), rmean)
    else:
        if ex.fixture == "studs":
            from .fixtures import stud_rig
            mesh, rig, sampler = stud_rig(grid, n_sensors=ex.max_contacts)
        else:
            mesh, sampler = cfg.load_mesh(), None
            extr = cfg.fuse.extrinsics
            if len(extr) < ex.max_contacts:
                raise ConfigError("multi-contact evaluation needs fuse.extrinsics for every sensor")
            rig = SensorRig([(grid.sensor, parse_pose(e)) for e in extr], [grid] * len(extr))
        rmean = random_baseline(grid, mesh, ex.random_trials, cfg.seed)
        report = run_multi_contact_experiment(rig, mesh, enc, noise, ex.n_trials, ex.max_contacts, cfg.seed,
                                              rmean, sampler, cfg.fuse.contact_factor)
    report.write(out)


COMMANDS = {"render": cmd_render, "build-grid": cmd_build_grid, "train-encoder": cmd_train_encoder,
            "localize": cmd_localize, "fuse": cmd_fuse, "evaluate": cmd_evaluate}


# -------------------------------------------------------------------- main

def _exit_code(e: BaseException) -> int:
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, (GridFileError, FingerprintError, OSError)):
        return EXIT_IO
    if isinstance(e, (GeometryError, MeshError, GridError)):
        return EXIT_GEOMETRY
    if isinstance(e, (TrainingDiverged, EmptySupportError, NumericalError, FloatingPointError,
                      np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="touchloc", description="Object pose estimation from tactile contact shapes.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    return p


def main(argv=None) -> int:
    level = os.environ.get("TOUCHLOC_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](cfg, threads=args.threads)
    except (ConfigError, GeometryError, MeshError, GridError, OSError, FingerprintError, TrainingDiverged,
            EmptySupportError, NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return _exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
