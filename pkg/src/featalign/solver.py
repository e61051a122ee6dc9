"""Feature-metric pose refinement with learned per-axis LM damping.

The cost at one feature level is

    E(R, t) = sum_i w_i * rho(|F_q[pi(R P_i + t)] - d_i|^2)

with ``w_i = u_q * u_ref`` and a Cauchy ``rho``. Each iteration builds the
weighted Gauss-Newton system, damps its diagonal per pose axis, solves by
Cholesky, and applies the step on the left of the pose. The damping is a
fixed per-level parameter, so every step is accepted.

All numerical paths accept :class:`featalign.dual.Dual` poses and damping
parameters; the discrete decisions (validity masks, stopping) read primal
values only.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .dual import is_dual, primal, spd_solve
from .errors import FormatError, InitializationFailed, NoValidObservations, SingularSystem
from .features import BORDER_MARGIN, PointFeatures, confidence_from_uncertainty, sample
from .geometry import Pose, left_update, point_jacobians, project_points

LAMBDA_MIN = -6.0
LAMBDA_MAX = 5.0
RIDGE = 1e-10
_EYE6 = np.eye(6)


@dataclass(eq=False)
class ScenePoints:
    """3D model plus aggregated reference features, one entry per image scale."""

    points: np.ndarray  # (N, 3)
    features: List[PointFeatures]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValueError("points must be a nonempty (N, 3) array")
        if isinstance(self.features, PointFeatures):
            self.features = [self.features]

    def __len__(self):
        return len(self.points)


@dataclass(eq=False)
class DampingParams:
    theta: np.ndarray  # (L, 6), unconstrained
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self):
        th = self.theta
        if not is_dual(th):
            th = np.atleast_2d(np.asarray(th, dtype=float))
        if th.ndim != 2 or th.shape[1] != 6:
            raise ValueError("theta must be (L, 6)")
        self.theta = th

    @classmethod
    def zeros(cls, n_levels):
        return cls(np.zeros((n_levels, 6)))

    @classmethod
    def from_lambda(cls, lam, n_levels, lambda_min=LAMBDA_MIN, lambda_max=LAMBDA_MAX):
        """Parameters whose damping equals ``lam`` (scalar or 6-vector) at every level."""
        frac = (np.log10(np.broadcast_to(lam, (6,))) - lambda_min) / (lambda_max - lambda_min)
        if np.any((frac <= 0) | (frac >= 1)):
            raise ValueError("lambda outside the open damping bounds")
        theta = np.log(frac / (1.0 - frac))
        return cls(np.tile(theta, (n_levels, 1)), lambda_min, lambda_max)

    @property
    def n_levels(self):
        return self.theta.shape[0]

    def level(self, i):
        return damping(self.theta[i], self.lambda_min, self.lambda_max)

    def lambdas(self):
        return primal(damping(self.theta, self.lambda_min, self.lambda_max))

    def to_json(self):
        return {
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "theta": [[float(x) for x in row] for row in primal(self.theta)],
        }

    @classmethod
    def from_json(cls, obj, source="<damping>"):
        try:
            params = cls(np.asarray(obj["theta"], dtype=float),
                         float(obj.get("lambda_min", LAMBDA_MIN)),
                         float(obj.get("lambda_max", LAMBDA_MAX)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(source, 0, f"bad damping parameters: {exc}") from None
        if not np.all(np.isfinite(params.theta)):
            raise FormatError(source, 0, "theta must be finite")
        return params


def load_damping(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from None
    return DampingParams.from_json(obj, path)


@dataclass
class SolverConfig:
    max_iters_per_level: int = 100
    cost_scale: float = 0.1
    step_tol: float = 1e-5
    grad_tol: float = 1e-7
    border_margin: float = BORDER_MARGIN
    image_pyramid_scales: Sequence[float] = (0.25, 1.0)
    levels: Optional[Sequence[int]] = None  # pyramid levels to run; None = all

    def __post_init__(self):
        if self.max_iters_per_level < 1:
            raise ValueError("max_iters_per_level must be >= 1")
        if self.cost_scale <= 0 or self.step_tol < 0 or self.grad_tol < 0:
            raise ValueError("cost scale must be positive and tolerances nonnegative")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return SolverConfig(**d)

    def to_json(self):
        d = asdict(self)
        d["image_pyramid_scales"] = list(d["image_pyramid_scales"])
        if d["levels"] is not None:
            d["levels"] = list(d["levels"])
        return d

    @classmethod
    def from_json(cls, obj, source="<config>"):
        try:
            return cls(**obj)
        except (TypeError, ValueError) as exc:
            raise FormatError(source, 0, f"bad solver config: {exc}") from None


@dataclass
class IterationRecord:
    cost: float
    step_norm: float
    grad_norm: float
    n_valid: int
    R: list
    t: list


@dataclass
class LevelTrace:
    scale: float
    level: int
    iterations: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    skipped: bool = False
    lost: bool = False
    dropped: int = 0
    reason: str = ""

    @property
    def n_iters(self):
        return len(self.iterations)


@dataclass
class SolveReport:
    levels: List[LevelTrace] = field(default_factory=list)
    pose: Optional[Pose] = None

    @property
    def converged(self):
        run = [lv for lv in self.levels if not lv.skipped]
        return bool(run) and all(lv.converged for lv in run)

    def to_json(self):
        out = {"converged": self.converged, "levels": []}
        for lv in self.levels:
            d = asdict(lv)
            d["n_iters"] = lv.n_iters
            out["levels"].append(d)
        if self.pose is not None:
            out["pose"] = self.pose.primal().to_json()
        return out


def residual(query_feat, ref_feat):
    return query_feat - ref_feat


def cauchy(s, c):
    """Cauchy cost ``c^2 log(1 + s/c^2)`` and its derivative."""
    c2 = c * c
    return c2 * np.log1p(s / c2), 1.0 / (1.0 + s / c2)


def damping(theta_l, lambda_min=LAMBDA_MIN, lambda_max=LAMBDA_MAX):
    """Per-axis damping factors from unconstrained parameters."""
    sig = 1.0 / (1.0 + np.exp(-theta_l))
    return np.exp(np.log(10.0) * (lambda_min + sig * (lambda_max - lambda_min)))


def lm_step(H, g, lam):
    """``-(H + diag(lam * diag(H)) + eps I)^{-1} g`` via Cholesky."""
    A = H + (lam * np.diagonal(H) + RIDGE) * _EYE6
    try:
        return -spd_solve(A, g)
    except np.linalg.LinAlgError:
        raise SingularSystem("damped system is not positive definite") from None


@dataclass
class _Eval:
    cost: object
    n_valid: int
    H: object = None
    g: object = None
    cells: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None
    edge: float = 0.5  # closest approach of any lookup to a cell boundary


def _evaluate(pose, points, desc, cam, level, c, margin, system=True):
    """Cost (and optionally the GN system) at one pyramid level."""
    Pc = pose.transform(points)
    uv, in_front = project_points(cam, Pc)
    look = sample(level, uv, margin)
    valid = look.valid & in_front & desc.valid
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidObservations("no point projects into the valid image region")
    # avoid copying (N, D) rows when nothing was dropped
    idx = slice(None) if n_valid == len(valid) else np.flatnonzero(valid)
    r = look.feature[idx] - desc.desc[idx]
    s = np.sum(r * r, axis=1)
    w = confidence_from_uncertainty(look.uncertainty[idx]) * desc.conf[idx]
    rho, drho = cauchy(s, c)
    cost = np.sum(w * rho)
    # clamped axes sit exactly on 0 or 1 and are not cell crossings
    frac = look.frac[idx]
    inner = (frac > 0.0) & (frac < 1.0)
    edge = float(np.min(np.minimum(frac, 1.0 - frac)[inner], initial=0.5))
    out = _Eval(cost, n_valid, cells=look.cell[idx], valid=valid, edge=edge)
    if system:
        # contract the feature dimension first: J^T J = Jp^T (G G^T) Jp
        Jp = point_jacobians(cam, Pc[idx])  # (n, 2, 6)
        grad = look.grad[idx]  # (n, 2, D)
        wt = (w * drho)[:, None, None]
        gram = wt * (grad @ np.swapaxes(grad, 1, 2))
        gr = wt * (grad @ r[:, :, None])
        JpT = np.swapaxes(Jp, 1, 2)
        out.H = np.sum(JpT @ (gram @ Jp), axis=0)
        out.g = np.sum(JpT @ gr, axis=0)[:, 0]
    return out


def total_cost(pose, scene, query, cam, level, config=None, scale_index=-1):
    """Robust weighted cost and the number of valid observations."""
    config = config or SolverConfig()
    ev = _evaluate(pose, scene.points, scene.features[scale_index][level], cam,
                   query[level], config.cost_scale, config.border_margin, system=False)
    return ev.cost, ev.n_valid


def build_system(pose, scene, query, cam, level, config=None, scale_index=-1):
    """Weighted Gauss-Newton ``(H, g, E, n_valid)`` at one level."""
    config = config or SolverConfig()
    ev = _evaluate(pose, scene.points, scene.features[scale_index][level], cam,
                   query[level], config.cost_scale, config.border_margin)
    return ev.H, ev.g, ev.cost, ev.n_valid


def optimize_level(pose0, scene, query, cam, level, config, damping_params,
                   scale_index=-1, scale=1.0, record=None):
    """Iterate damped GN steps at one level; returns ``(pose, LevelTrace)``.

    Stops when the gradient or the applied step falls below tolerance, or
    after ``max_iters_per_level`` steps. A level where no point is valid at
    the start is skipped with the pose unchanged. ``record``, when given, is
    a list that receives the discrete decisions taken (used to detect
    nonsmooth paths when differentiating).
    """
    lam = damping_params.level(level)
    desc = scene.features[scale_index][level]
    trace = LevelTrace(scale=scale, level=level)
    pose = pose0
    for it in range(config.max_iters_per_level):
        try:
            ev = _evaluate(pose, scene.points, desc, cam, query[level],
                           config.cost_scale, config.border_margin)
        except NoValidObservations:
            if it == 0:
                trace.skipped = True
                trace.reason = "no valid observations"
            else:
                trace.lost = True
                trace.reason = "all observations left the image"
            break
        if record is not None:
            record.append((scale_index, level, it, ev.valid.copy(), ev.cells.copy(), ev.edge))
        trace.dropped += len(scene) - ev.n_valid
        grad_norm = float(np.linalg.norm(primal(ev.g)))
        pv = pose.primal()
        rec = IterationRecord(float(primal(ev.cost)), 0.0, grad_norm, ev.n_valid,
                              pv.R.tolist(), pv.t.tolist())
        trace.iterations.append(rec)
        if grad_norm < config.grad_tol:
            trace.converged = True
            break
        delta = lm_step(ev.H, ev.g, lam)
        pose = left_update(pose, delta)
        rec.step_norm = float(np.linalg.norm(primal(delta)))
        if rec.step_norm < config.step_tol:
            trace.converged = True
            break
    if record is not None:
        record.append((scale_index, level, "end", trace.n_iters, trace.converged))
    return pose, trace


def optimize(pose0, scene, query_multiscale, cam, config, damping_params, record=None,
             stage_poses=None):
    """Coarse-to-fine refinement over image scales and pyramid levels.

    ``query_multiscale`` holds one pyramid per entry of
    ``config.image_pyramid_scales`` (a single pyramid is taken as scale 1).
    ``scene.features`` must be aligned with it. When ``stage_poses`` is a
    list, the pose after every stage is appended to it. Raises
    InitializationFailed when every stage is skipped.
    """
    if not isinstance(query_multiscale, (list, tuple)):
        query_multiscale = [query_multiscale]
    scales = list(config.image_pyramid_scales)
    if len(query_multiscale) != len(scales):
        if len(query_multiscale) == 1:
            scales = [1.0]
        else:
            raise ValueError(f"{len(query_multiscale)} query pyramids for {len(scales)} scales")
    if len(scene.features) != len(query_multiscale):
        raise ValueError("scene features and query pyramids disagree on the number of scales")
    report = SolveReport()
    pose = pose0
    for si, (scale, pyr) in enumerate(zip(scales, query_multiscale)):
        cam_s = cam if scale == 1.0 else cam.scaled(scale)
        levels = range(len(pyr)) if config.levels is None else config.levels
        for li in levels:
            pose, trace = optimize_level(pose, scene, pyr, cam_s, li, config, damping_params,
                                         scale_index=si, scale=scale, record=record)
            report.levels.append(trace)
            if stage_poses is not None:
                stage_poses.append(pose)
    report.pose = pose.primal()
    if all(lv.skipped for lv in report.levels):
        raise InitializationFailed("every stage of the schedule was skipped", report)
    return pose, report
