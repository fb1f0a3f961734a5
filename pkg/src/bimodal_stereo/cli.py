"""Command-line entry point.

Every subcommand reads its inputs from files, writes its outputs under
``--out`` together with ``manifest.json`` (SHA-256 of every emitted file)
and exits 0 on success, 2 on a configuration or input error and 3 when
registration fails.  ``BIMODAL_LOG_LEVEL`` sets the logging verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import io
from .core import angular_error, depth_to_normals, depth_to_pointcloud
from .integrate import IntegrationError, integrate_gradients, normals_to_gradients
from .lighting import STANDARD_LIGHTING, build_m_matrices, load_lighting, render_log_shading, save_lighting
from .pipeline import PipelineConfig, run_bimodal_stereo
from .refine import RefineConfig, refine_depth, refine_normals
from .registration import (
    MeshSurface,
    RansacConfig,
    RegistrationConfig,
    RegistrationError,
    register,
    rotation_error,
)
from .sfs import PriorField, SfsConfig, solve_field
from .synth import (
    SWEEP_BETAS,
    SWEEP_DEPTH_NOISE,
    SWEEP_OVERLAPS,
    SynthSpec,
    face_surface,
    run_sweep,
    synthesize_pair,
)

log = logging.getLogger("bimodal_stereo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REGISTRATION = 3


class ConfigError(ValueError):
    pass


# config-file sections and the dataclasses they fill
_SECTIONS = {
    "sfs": SfsConfig,
    "registration": RegistrationConfig,
    "ransac": RansacConfig,
    "refine": RefineConfig,
    "pipeline": PipelineConfig,
}
_NESTED = {"sfs", "registration", "refine", "ransac"}


@dataclass(frozen=True)
class RunConfig:
    shading: str = None
    depth: str = None
    lighting: str = None
    out: str = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: int = 0
    pitch: tuple = (1.0, 1.0)

    def __post_init__(self):
        for name in ("shading", "depth", "lighting"):
            path = getattr(self, name)
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{name} file not found: {path}")
        if self.seed is None:
            raise ConfigError("a seed is required")


def _section(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in fields(cls)} - _NESTED
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(sorted(unknown))}")
    return values


def read_config(path):
    """Parse a TOML or JSON config file into a plain dict."""
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        if str(path).endswith(".json"):
            with open(path) as fh:
                data = json.load(fh)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib

            with open(path, "rb") as fh:
                data = tomllib.load(fh)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(data) - set(_SECTIONS) - {"seed", "pitch"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    return data


def pipeline_config(data, seed):
    """Assemble a :class:`PipelineConfig` from config-file sections."""
    try:
        sfs = SfsConfig(**_section(SfsConfig, data.get("sfs", {}), "sfs"))
        ransac = RansacConfig(**_section(RansacConfig, data.get("ransac", {}), "ransac"))
        reg = RegistrationConfig(ransac=ransac,
                                 **_section(RegistrationConfig, data.get("registration", {}), "registration"))
        ref = RefineConfig(**_section(RefineConfig, data.get("refine", {}), "refine"))
        top = dict(_section(PipelineConfig, data.get("pipeline", {}), "pipeline"))
        top["seed"] = seed
        return PipelineConfig(sfs=sfs, registration=reg, refine=ref, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _pitch(args, data):
    p = getattr(args, "pitch", None) or data.get("pitch") or (1.0, 1.0)
    p = tuple(float(v) for v in np.broadcast_to(np.asarray(p, dtype=float), (2,)))
    if min(p) <= 0:
        raise ConfigError("pitch must be positive")
    return p


def _seed(args, data):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(data.get("seed", 0))


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _lighting(path):
    return build_m_matrices(STANDARD_LIGHTING) if path is None else load_lighting(path)


def _finish(out, names, command, seed=None):
    doc = {"command": command}
    if seed is not None:
        doc["seed"] = seed
    io.write_manifest(out, names, doc)


def _load_cloud(path, pitch):
    if str(path).lower().endswith(".ply"):
        return io.read_ply(path)
    return depth_to_pointcloud(io.load_depth(path, pitch))


def cmd_synth(args):
    source = face_surface(args.size) if args.source is None else io.load_depth(args.source, _pitch(args, {}))
    lighting = _lighting(args.lighting)
    spec = SynthSpec(source, lighting, (args.alpha, args.beta, args.gamma), args.pw, args.stride,
                     seed=args.seed, depth_noise=args.noise, raster=args.raster)
    pair = synthesize_pair(spec)
    out = args.out
    io.save_shading(os.path.join(out, "shading.pfm"), pair.shading)
    io.save_depth(os.path.join(out, "depth.pfm"), pair.depth)
    io.save_depth(os.path.join(out, "source.pfm"), source)
    io.save_pose(os.path.join(out, "pose_gt.json"), pair.pose)
    io.save_normals(os.path.join(out, "normals_gt.pfm"), pair.normals)
    io.save_normal_map(os.path.join(out, "normals_gt.png"), pair.normals)
    save_lighting(os.path.join(out, "lighting.json"), lighting)
    names = ["shading.pfm", "depth.pfm", "source.pfm", "pose_gt.json", "normals_gt.pfm",
             "normals_gt.png", "lighting.json"]
    _finish(out, names, "synth", args.seed)
    return EXIT_OK


def cmd_render(args):
    depth = io.load_depth(args.depth, _pitch(args, {}))
    normals = depth_to_normals(depth)
    shading = render_log_shading(_lighting(args.lighting), normals)
    io.save_shading(os.path.join(args.out, "shading.pfm"), shading)
    io.save_normals(os.path.join(args.out, "normals.pfm"), normals)
    io.save_normal_map(os.path.join(args.out, "normals.png"), normals)
    _finish(args.out, ["shading.pfm", "normals.pfm", "normals.png"], "render")
    return EXIT_OK


def cmd_sfs(args):
    data = read_config(args.config)
    cfg = pipeline_config(data, 0).sfs
    shading = io.load_shading(args.shading)
    priors = None
    if args.prior is not None:
        priors = PriorField.from_normals(io.load_normals(args.prior))
    res = solve_field(shading, _lighting(args.lighting), priors, cfg)
    io.save_normals(os.path.join(args.out, "normals.pfm"), res.normals)
    io.save_normal_map(os.path.join(args.out, "normals.png"), res.normals)
    io.write_pfm(os.path.join(args.out, "objective.pfm"), res.objective)
    _finish(args.out, ["normals.pfm", "normals.png", "objective.pfm"], "sfs")
    return EXIT_OK


def cmd_integrate(args):
    normals = io.load_normals(args.normals)
    depth = integrate_gradients(normals_to_gradients(normals), _pitch(args, {}))
    io.save_depth(os.path.join(args.out, "depth.pfm"), depth)
    io.write_ply(os.path.join(args.out, "cloud.ply"), depth_to_pointcloud(depth))
    _finish(args.out, ["depth.pfm", "cloud.ply"], "integrate")
    return EXIT_OK


def cmd_register(args):
    data = read_config(args.config)
    seed = _seed(args, data)
    cfg = pipeline_config(data, seed)
    pitch = _pitch(args, data)
    source = _load_cloud(args.source, pitch)
    target = _load_cloud(args.target, pitch)
    fine = None
    if not str(args.target).lower().endswith(".ply") and cfg.surface_matching:
        fine = MeshSurface(io.load_depth(args.target, pitch))
    reg_cfg = replace(cfg.registration, ransac=replace(cfg.registration.ransac, seed=seed))
    res = register(source, target, reg_cfg, fine_target=fine)
    io.save_pose(os.path.join(args.out, "pose.json"), res.pose)
    with open(os.path.join(args.out, "correspondences.csv"), "w") as fh:
        fh.write("source,target,distance\n")
        for a, b, d in zip(res.correspondences.source, res.correspondences.target,
                           res.correspondences.distance):
            fh.write(f"{int(a)},{int(b)},{float(d)!r}\n")
    _finish(args.out, ["pose.json", "correspondences.csv"], "register", seed)
    return EXIT_OK


def cmd_refine(args):
    data = read_config(args.config)
    cfg = pipeline_config(data, _seed(args, data))
    pitch = _pitch(args, data)
    depth = io.load_depth(args.depth, pitch)
    shading = io.load_shading(args.shading)
    pose = io.load_pose(args.pose)
    n_est = io.load_normals(args.normals)
    est_depth = integrate_gradients(normals_to_gradients(n_est), pitch)
    from .registration import build_correspondences

    corr = build_correspondences(pose, depth_to_pointcloud(depth), depth_to_pointcloud(est_depth),
                                 cfg.registration.correspondence_threshold)
    res = refine_normals(depth_to_normals(depth), shading, _lighting(args.lighting), pose, corr,
                         n_est, cfg.refine)
    refined = refine_depth(res.normals, depth, res.region)
    io.save_normals(os.path.join(args.out, "normals_refined.pfm"), res.normals)
    io.save_depth(os.path.join(args.out, "depth_refined.pfm"), refined)
    _finish(args.out, ["normals_refined.pfm", "depth_refined.pfm"], "refine")
    return EXIT_OK


def cmd_run(args):
    data = read_config(args.config)
    seed = _seed(args, data)
    run = RunConfig(args.shading, args.depth, args.lighting, args.out,
                    pipeline_config(data, seed), seed, _pitch(args, data))
    shading = io.load_shading(run.shading)
    depth = io.load_depth(run.depth, run.pitch)
    lighting = load_lighting(run.lighting)
    out = run.out
    try:
        res = run_bimodal_stereo(shading, depth, lighting, run.pipeline)
    except RegistrationError as exc:
        io.write_json(os.path.join(out, "trace.json"), getattr(exc, "trace", []))
        _finish(out, ["trace.json"], "run", seed)
        raise
    io.save_pose(os.path.join(out, "pose.json"), res.pose)
    io.save_normals(os.path.join(out, "normals.pfm"), res.normals)
    io.save_depth(os.path.join(out, "depth_est.pfm"), res.depth)
    io.save_depth(os.path.join(out, "depth_refined.pfm"), res.depth_refined)
    io.write_json(os.path.join(out, "trace.json"), res.trace)
    io.save_normal_map(os.path.join(out, "normals.png"), res.normals)
    names = ["pose.json", "normals.pfm", "depth_est.pfm", "depth_refined.pfm", "trace.json",
             "normals.png"]
    _finish(out, names, "run", seed)
    print(json.dumps({"converged": res.converged, "iterations": len(res.trace),
                      **{k: res.pose.to_dict()[k] for k in ("s", "alpha_deg", "beta_deg", "gamma_deg")}}))
    return EXIT_OK


def cmd_eval(args):
    est = io.load_pose(args.pose_est)
    gt = io.load_pose(args.pose_gt)
    err = rotation_error(est.R, gt.R)
    print(f"rotation_error {err:.6f}")
    de = np.subtract(est.euler, gt.euler)
    print(f"scale_error {est.s - gt.s:+.6g}")
    print("euler_error_deg " + " ".join(f"{v:+.6g}" for v in de))
    if args.normals_est and args.normals_gt:
        a, b = io.load_normals(args.normals_est), io.load_normals(args.normals_gt)
        both = a.mask & b.mask
        ang = np.degrees(angular_error(a.n[both], b.n[both]))
        print(f"normal_error_deg mean {ang.mean():.6g} median {np.median(ang):.6g}")
    return EXIT_OK


def cmd_sweep(args):
    data = read_config(args.config)
    seed = _seed(args, data)
    cfg = pipeline_config(data, seed)
    betas = _floats(args.betas)
    overlaps = _floats(args.pw)
    if not betas or not overlaps:
        raise ConfigError("sweep lists must be nonempty")
    if any(not 0 < p <= 1 for p in overlaps):
        raise ConfigError("overlap fractions must lie in (0, 1]")
    source = face_surface(args.size) if args.source is None else io.load_depth(args.source, _pitch(args, data))
    res = run_sweep(source, _lighting(args.lighting), betas, overlaps, cfg, seed, args.stride, args.noise)
    io.write_sweep_csv(os.path.join(args.out, "sweep.csv"), res)
    io.write_json(os.path.join(args.out, "sweep.json"), res.to_dict())
    _finish(args.out, ["sweep.csv", "sweep.json"], "sweep", seed)
    with open(os.path.join(args.out, "sweep.csv")) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="bimodal-stereo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        return sp

    def out(sp):
        sp.add_argument("--out", required=True, help="output directory")

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="TOML or JSON config file")
        if seed:
            sp.add_argument("--seed", type=int, help="global seed (default: config value or 0)")
        sp.add_argument("--pitch", type=float, nargs=2, metavar=("PX", "PY"), help="pixel pitch")

    sp = add("synth", cmd_synth, "generate a synthetic colour/depth pair")
    out(sp)
    sp.add_argument("--source", help="source depth map (default: the built-in surface)")
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--lighting", help="27 SH coefficients (default: standard lighting)")
    sp.add_argument("--alpha", type=float, default=0.0)
    sp.add_argument("--beta", type=float, default=20.0)
    sp.add_argument("--gamma", type=float, default=0.0)
    sp.add_argument("--pw", type=float, default=1.0, help="overlap fraction")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--noise", type=float, default=0.0, help="depth noise sigma")
    sp.add_argument("--raster", choices=("mesh", "splat"), default="mesh")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--pitch", type=float, nargs=2, metavar=("PX", "PY"))

    sp = add("render", cmd_render, "render log shading from a depth map")
    out(sp)
    sp.add_argument("--depth", required=True)
    sp.add_argument("--lighting")
    common(sp, config=False, seed=False)

    sp = add("sfs", cmd_sfs, "per-pixel shape from shading")
    out(sp)
    sp.add_argument("--shading", required=True)
    sp.add_argument("--lighting")
    sp.add_argument("--prior", help="prior normals (3-channel PFM)")
    common(sp, seed=False)

    sp = add("integrate", cmd_integrate, "integrate a normal field to depth")
    out(sp)
    sp.add_argument("--normals", required=True)
    common(sp, config=False, seed=False)

    sp = add("register", cmd_register, "similarity registration of two clouds or depth maps")
    out(sp)
    sp.add_argument("--source", required=True, help="depth-view cloud (PLY) or depth map")
    sp.add_argument("--target", required=True, help="shading-view cloud (PLY) or depth map")
    common(sp)

    sp = add("refine", cmd_refine, "refine a depth map against a shading image")
    out(sp)
    sp.add_argument("--depth", required=True)
    sp.add_argument("--shading", required=True)
    sp.add_argument("--lighting")
    sp.add_argument("--pose", required=True)
    sp.add_argument("--normals", required=True, help="shading-view normal estimate")
    common(sp)

    sp = add("run", cmd_run, "full alternating estimation")
    out(sp)
    sp.add_argument("--shading", required=True)
    sp.add_argument("--depth", required=True)
    sp.add_argument("--lighting", required=True)
    common(sp)

    sp = add("eval", cmd_eval, "compare an estimated pose with ground truth")
    sp.add_argument("--pose-est", required=True)
    sp.add_argument("--pose-gt", required=True)
    sp.add_argument("--normals-est")
    sp.add_argument("--normals-gt")

    sp = add("sweep", cmd_sweep, "rotation/overlap accuracy sweep on synthetic data")
    out(sp)
    sp.add_argument("--betas", default=",".join(f"{b:g}" for b in SWEEP_BETAS))
    sp.add_argument("--pw", default=",".join(f"{p:g}" for p in SWEEP_OVERLAPS))
    sp.add_argument("--source")
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--lighting")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--noise", type=float, default=SWEEP_DEPTH_NOISE)
    common(sp)
    return p


def _setup_logging():
    level = os.environ.get("BIMODAL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def cli_dispatch(argv=None):
    """Run one subcommand; returns the exit status."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
    try:
        return args.func(args)
    except RegistrationError as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        return EXIT_REGISTRATION
    except (ValueError, OSError, IntegrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
