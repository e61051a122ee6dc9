"""Command-line entry point: ``featalign <command> [--flags]``.

Exit codes: 0 success, 1 malformed or missing input, 2 solve failure.
Every command writes a ``manifest.json`` run manifest into ``--out``, on
failure as well.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import PerturbSchedule, basin, convergence_sweep
from .errors import FeatAlignError, FormatError, InitializationFailed
from .features import aggregate_reference
from .geometry import load_pose, pose_from_json, project_points
from .initpose import average_or_best, load_priors, perturb
from .jsonio import write_json
from .learning import TrainSample, fit_damping, training_config
from .scene import SceneSpec, generate, load_map, load_query, save_bundle
from .solver import DampingParams, ScenePoints, SolverConfig, load_damping, optimize

EXIT_OK, EXIT_INPUT, EXIT_SOLVE = 0, 1, 2


class InputError(Exception):
    """Bad or missing user input (exit code 1)."""


# --- output helpers -----------------------------------------------------------

def _digest(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


class RunManifest:
    def __init__(self, command, args):
        self.data = {
            "command": command,
            "version": __version__,
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                     if k != "func"},
            "inputs": {},
            "outputs": [],
            "config": None,
            "timings": {},
            "exit_status": None,
            "message": "",
        }
        self._t0 = time.perf_counter()

    def add_input(self, path):
        if path is not None:
            self.data["inputs"][str(path)] = _digest(path)

    def add_output(self, path):
        self.data["outputs"].append(str(path))

    def time(self, name, seconds):
        self.data["timings"][name] = seconds

    def finish(self, out_dir, status, message=""):
        self.data["exit_status"] = status
        self.data["message"] = message
        self.data["timings"]["total"] = time.perf_counter() - self._t0
        out = Path(out_dir) if out_dir else Path(".")
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "manifest.json", self.data)
        except OSError as exc:
            print(f"featalign: cannot write run manifest: {exc}", file=sys.stderr)


# --- input helpers ------------------------------------------------------------

def _require(path, what):
    if path is None:
        raise InputError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: file not found")
    return p


def _load_config(path, manifest):
    if path is None:
        return SolverConfig()
    p = _require(path, "config")
    manifest.add_input(p)
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(p, exc.pos, exc.msg) from None
    if not isinstance(obj, dict):
        raise FormatError(p, 0, "config must be a JSON object")
    return SolverConfig.from_json(obj, p)


def _load_damping(path, n_levels, manifest):
    if path is None or not Path(path).exists():
        where = "no --damping given" if path is None else f"{path} not found"
        print(f"featalign: warning: {where}; using default damping (theta = 0)", file=sys.stderr)
        return DampingParams.zeros(n_levels)
    manifest.add_input(path)
    params = load_damping(path)
    if params.n_levels != n_levels:
        raise FormatError(path, 0, f"damping has {params.n_levels} levels, the features have {n_levels}")
    return params


def _load_problem(args, manifest):
    """Map, query and aggregated point features for every image scale."""
    map_path = _require(args.map, "map")
    query_path = _require(args.query, "query")
    manifest.add_input(map_path)
    manifest.add_input(query_path)
    bundle = load_map(map_path)
    query, cam, scales = load_query(query_path)
    if len(query) != len(bundle.scales):
        raise FormatError(query_path, 0, f"{len(query)} query pyramids but the map has "
                          f"{len(bundle.scales)} scales")
    feats = []
    for si, s in enumerate(scales):
        views = [(pyrs[si], pose, c if s == 1.0 else c.scaled(s)) for pyrs, pose, c in bundle.refs]
        feats.append(aggregate_reference(bundle.points, views))
    return bundle, ScenePoints(bundle.points, feats), query, cam, tuple(scales)


def _map_gt(bundle, map_path):
    if "gt" not in bundle.manifest:
        raise InputError(f"{map_path}: map has no ground-truth pose")
    return pose_from_json(bundle.manifest["gt"], f"{map_path}:gt")


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FEATALIGN_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise InputError(f"FEATALIGN_THREADS={env!r} is not an integer") from None


# --- commands -----------------------------------------------------------------

def _solve_outputs(out, pose, report, manifest):
    out.mkdir(parents=True, exist_ok=True)
    manifest.add_output(write_json(out / "pose.json", pose.to_json()))
    manifest.add_output(write_json(out / "report.json", report.to_json()))


def cmd_localize(args, manifest):
    out = Path(args.out)
    config = _load_config(args.config, manifest)
    bundle, scene, query, cam, scales = _load_problem(args, manifest)
    prior_path = _require(args.prior, "prior")
    manifest.add_input(prior_path)
    if not prior_path.read_bytes().strip():
        raise InputError(f"{prior_path}: no prior poses")
    priors = load_priors(prior_path)
    if not priors:
        raise InputError(f"{prior_path}: no prior poses")
    config = config.replace(image_pyramid_scales=scales)
    manifest.data["config"] = config.to_json()
    damping = _load_damping(args.damping, len(query[-1]), manifest)
    pose0 = average_or_best(priors)
    t = time.perf_counter()
    pose, report = optimize(pose0, scene, query, cam, config, damping)
    manifest.time("solve", time.perf_counter() - t)
    _solve_outputs(out, pose.primal(), report, manifest)
    return EXIT_OK


def cmd_refine(args, manifest):
    """Refine a given pose on the finest image scale, skipping the coarsest
    feature level."""
    out = Path(args.out)
    config = _load_config(args.config, manifest)
    bundle, scene, query, cam, scales = _load_problem(args, manifest)
    pose_path = _require(args.pose, "pose")
    manifest.add_input(pose_path)
    pose0 = load_pose(pose_path)
    fine = query[-1]
    n_levels = len(fine)
    levels = list(range(1, n_levels)) if n_levels > 1 else [0]
    config = config.replace(image_pyramid_scales=(1.0,), levels=levels)
    manifest.data["config"] = config.to_json()
    damping = _load_damping(args.damping, n_levels, manifest)
    fine_scene = ScenePoints(scene.points, [scene.features[-1]])
    cam_f = cam if scales[-1] == 1.0 else cam.scaled(scales[-1])
    t = time.perf_counter()
    pose, report = optimize(pose0, fine_scene, [fine], cam_f, config, damping)
    manifest.time("solve", time.perf_counter() - t)
    _solve_outputs(out, pose.primal(), report, manifest)
    return EXIT_OK


def cmd_make_scene(args, manifest):
    overrides = {}
    if args.spec is not None:
        p = _require(args.spec, "spec")
        manifest.add_input(p)
        try:
            overrides = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(p, exc.pos, exc.msg) from None
    for key, val in (("field_type", args.field), ("n_points", args.points),
                     ("uncertainty", args.uncertainty), ("seed", args.seed)):
        if val is not None:
            overrides[key] = val
    try:
        spec = SceneSpec.from_json(overrides)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad scene spec: {exc}") from None
    manifest.data["config"] = spec.to_json()
    t = time.perf_counter()
    scene = generate(spec)
    manifest.time("generate", time.perf_counter() - t)
    for p in save_bundle(scene, args.out).values():
        manifest.add_output(p)
    return EXIT_OK


def cmd_sweep(args, manifest):
    if args.trials is None or args.trials < 1:
        raise InputError("--trials must be at least 1")
    out = Path(args.out)
    config = _load_config(args.config, manifest)
    bundle, scene, query, cam, scales = _load_problem(args, manifest)
    gt = _map_gt(bundle, args.map)
    config = config.replace(image_pyramid_scales=scales)
    manifest.data["config"] = config.to_json()
    damping = _load_damping(args.damping, len(query[-1]), manifest)
    schedule = PerturbSchedule(args.max_rot_deg, args.max_trans_frac)
    t = time.perf_counter()
    res = convergence_sweep(scene, query, cam, gt, config, damping, args.trials, schedule,
                            seed=args.seed or 0, n_bins=args.bins, threads=_threads(args))
    manifest.time("sweep", time.perf_counter() - t)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "sweep.csv")
    manifest.add_output(out / "sweep.csv")
    trials = [{"index": r.index, "initial_error": r.initial_error, "rot_error": r.rot_error,
               "trans_error": r.trans_error, "success": r.success} for r in res.records]
    manifest.add_output(write_json(out / "trials.json", trials))
    return EXIT_OK


def cmd_basin(args, manifest):
    out = Path(args.out)
    bundle, scene, query, cam, scales = _load_problem(args, manifest)
    feats = scene.features[-1]
    k = args.point
    if not 0 <= k < len(scene):
        raise InputError(f"--point {k} out of range (map has {len(scene)} points)")
    if not all(lv.valid[k] for lv in feats.levels):
        raise InputError(f"point {k} has no reference descriptor at every level")
    if args.pixel is not None:
        seed = tuple(args.pixel)
    else:
        gt = _map_gt(bundle, args.map)
        cam_f = cam if scales[-1] == 1.0 else cam.scaled(scales[-1])
        uv, front = project_points(cam_f, gt.transform(scene.points[k:k + 1]))
        if not front[0]:
            raise InputError(f"point {k} is behind the ground-truth camera")
        seed = tuple(int(v) for v in np.rint(uv[0]))
    refs = [lv.desc[k] for lv in feats.levels]
    t = time.perf_counter()
    raster = basin(query[-1], refs, seed)
    manifest.time("basin", time.perf_counter() - t)
    for p in raster.write_pgm(out):
        manifest.add_output(p)
    return EXIT_OK


def cmd_fit_damping(args, manifest):
    if args.steps is None or args.steps < 0:
        raise InputError("--steps must be nonnegative")
    if args.samples < 1:
        raise InputError("--samples must be at least 1")
    out = Path(args.out)
    config = _load_config(args.config, manifest)
    bundle, scene, query, cam, scales = _load_problem(args, manifest)
    gt = _map_gt(bundle, args.map)
    config = training_config(config.replace(image_pyramid_scales=scales))
    manifest.data["config"] = config.to_json()
    n_levels = len(query[-1])
    if args.damping is not None:
        init = _load_damping(args.damping, n_levels, manifest)
    else:
        init = DampingParams.zeros(n_levels)
    rng = np.random.default_rng(args.seed or 0)
    diam = bundle.manifest.get("diameter") or 1.0
    mask = None if args.planar is False else (1, 0, 1, 0, 1, 0)

    def make(n):
        return [TrainSample(scene, query, cam, gt,
                            perturb(gt, np.radians(args.rot_deg), args.trans_frac * diam,
                                    int(rng.integers(2**31)), mask))
                for _ in range(n)]

    train = make(args.samples)
    val = make(args.val_samples) if args.val_samples else None
    t = time.perf_counter()
    res = fit_damping(train, config, init, lr=args.lr, steps=args.steps, val_samples=val)
    manifest.time("fit", time.perf_counter() - t)
    out.mkdir(parents=True, exist_ok=True)
    manifest.add_output(write_json(out / "damping.json", res.params.to_json()))
    res.write_history(out / "loss.csv")
    manifest.add_output(out / "loss.csv")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="featalign", allow_abbrev=False,
                                description="Feature-metric camera pose refinement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, solve=True):
        sp.add_argument("--map")
        sp.add_argument("--query")
        sp.add_argument("--out", required=True)
        if solve:
            sp.add_argument("--config")
            sp.add_argument("--damping")

    sp = sub.add_parser("localize", help="localize from weighted prior poses")
    common(sp)
    sp.add_argument("--prior")
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("refine", help="refine a pose on the medium and fine levels")
    common(sp)
    sp.add_argument("--pose")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("make-scene", help="generate a synthetic scene bundle")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--field", choices=("random-smooth", "quadratic-basin", "bimodal"))
    sp.add_argument("--points", type=int)
    sp.add_argument("--uncertainty", choices=("zero", "random", "occluder-patch"))
    sp.add_argument("--spec", help="JSON file with scene spec fields")
    sp.set_defaults(func=cmd_make_scene)

    sp = sub.add_parser("sweep", help="success rate versus initial reprojection error")
    common(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--bins", type=int, default=5)
    sp.add_argument("--max-rot-deg", type=float, default=PerturbSchedule.max_rot_deg)
    sp.add_argument("--max-trans-frac", type=float, default=PerturbSchedule.max_trans_frac)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("basin", help="rasterize the attraction basin of one point")
    common(sp, solve=False)
    sp.add_argument("--point", type=int, default=0)
    sp.add_argument("--pixel", type=int, nargs=2, metavar=("X", "Y"))
    sp.set_defaults(func=cmd_basin)

    sp = sub.add_parser("fit-damping", help="fit per-level damping on perturbed samples")
    common(sp)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--lr", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--val-samples", type=int, default=0)
    sp.add_argument("--rot-deg", type=float, default=5.0)
    sp.add_argument("--trans-frac", type=float, default=0.05)
    sp.add_argument("--planar", action="store_true", default=False,
                    help="restrict perturbations to x/z translation and yaw")
    sp.set_defaults(func=cmd_fit_damping)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    manifest = RunManifest(args.command, args)
    status, message = EXIT_OK, ""
    try:
        status = args.func(args, manifest)
    except (InputError, FormatError) as exc:
        status, message = EXIT_INPUT, str(exc)
    except InitializationFailed as exc:
        status, message = EXIT_SOLVE, str(exc)
        if exc.report is not None:
            try:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                manifest.add_output(write_json(out / "report.json", exc.report.to_json()))
            except OSError:
                pass
    except FeatAlignError as exc:
        status, message = EXIT_SOLVE, str(exc)
    except ValueError as exc:
        status, message = EXIT_INPUT, str(exc)
    if message:
        print(f"featalign {args.command}: {message}", file=sys.stderr)
    manifest.finish(getattr(args, "out", None), status, message)
    return status


if __name__ == "__main__":
    sys.exit(main())
