"""Training objective for the damping parameters and its exact gradient.

The loss compares the pose reached after every stage of the coarse-to-fine
solve against ground truth through the Huber-robustified reprojection error
of the 3D points. Its derivative with respect to the damping parameters is
obtained by running the unrolled solver on dual numbers, one tangent per
parameter.
"""

import csv
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .dual import Dual, primal, tangent
from .errors import FeatAlignError, NoVisiblePoints
from .geometry import Z_MIN, Camera, Pose, project_points
from .solver import DampingParams, ScenePoints, SolverConfig, optimize

HUBER_DELTA = 1.0
GATE_THRESHOLD = 50.0
LOSS_CLAMP = 50.0
TRAIN_ITERS = 15
GRAD_CLIP = 1.0
# lookups closer than this to a cell edge (cell units) may cross it under FD
EDGE_EPS = 1e-4


@dataclass(eq=False)
class TrainSample:
    scene: ScenePoints
    query: list  # one FeaturePyramid per image scale
    camera: Camera
    gt: Pose
    init: Pose

    def __post_init__(self):
        if not isinstance(self.query, (list, tuple)):
            self.query = [self.query]
        _, front = project_points(self.camera, self.gt.transform(self.scene.points))
        if not front.any():
            raise NoVisiblePoints("no point lies in front of the ground-truth camera")


@dataclass
class LossReport:
    terms: List[float]  # per-level loss (0 where gated off)
    errors: List[float]  # per-level mean reprojection error, pixels
    active: List[bool]
    total: object  # float, or Dual when differentiating
    skipped_points: int = 0

    def to_json(self):
        return {"terms": self.terms, "errors": self.errors, "active": self.active,
                "total": float(primal(self.total)), "skipped_points": self.skipped_points}


def huber(e, delta=HUBER_DELTA):
    """``e^2/2`` up to ``delta``, then ``delta e - delta^2/2``."""
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, 0.5 * e * e, delta * e - 0.5 * delta * delta)


def _reprojection_terms(pose, gt, points, cam, delta):
    """Per-point Huber losses, raw errors, and the number of skipped points."""
    Pc = pose.transform(points)
    Pg = gt.transform(points)
    keep = (primal(Pc)[:, 2] > Z_MIN) & (Pg[:, 2] > Z_MIN)
    n_skip = int(len(points) - keep.sum())
    if not keep.any():
        raise NoVisiblePoints("no point is in front of both cameras")
    idx = np.flatnonzero(keep)
    uv, _ = project_points(cam, Pc[idx])
    uv_gt, _ = project_points(cam, Pg[idx])
    d = uv - uv_gt
    s = np.sum(d * d, axis=1)
    e = np.sqrt(primal(s))
    # the quadratic branch is written in s so the derivative at e = 0 is finite
    big = e > delta
    lin = delta * np.sqrt(np.where(big, s, 1.0)) - 0.5 * delta * delta
    return np.where(big, lin, 0.5 * s), e, n_skip


def reprojection_loss(pose, gt, points, cam, huber_delta=HUBER_DELTA):
    """Mean Huber reprojection error of ``points`` between two poses."""
    terms, _, _ = _reprojection_terms(pose, gt, np.asarray(points, dtype=float), cam, huber_delta)
    return np.mean(terms)


def gated_total_loss(per_level_poses, sample, gate_threshold=GATE_THRESHOLD,
                     clamp=LOSS_CLAMP, huber_delta=HUBER_DELTA):
    """Sum of per-level losses, each applied only while every previous level
    ended within ``gate_threshold`` pixels mean error; divided by the number
    of levels."""
    n_levels = len(per_level_poses)
    if n_levels == 0:
        raise ValueError("need at least one level pose")
    total = 0.0
    terms, errors, active = [], [], []
    skipped = 0
    on = True
    for pose in per_level_poses:
        t, e, n_skip = _reprojection_terms(pose, sample.gt, sample.scene.points, sample.camera,
                                           huber_delta)
        skipped += n_skip
        err = float(np.mean(e))
        term = np.minimum(np.mean(t), clamp)
        active.append(on)
        errors.append(err)
        terms.append(float(primal(term)) if on else 0.0)
        if on:
            total = total + term
        on = on and err < gate_threshold
    return LossReport(terms, errors, active, total / n_levels, skipped)


def training_config(config=None):
    """``config`` with the fixed training iteration budget."""
    config = config or SolverConfig(image_pyramid_scales=(1.0,))
    return config.replace(max_iters_per_level=TRAIN_ITERS)


def unrolled_loss(sample, config, params, record=None, **loss_kw):
    """Run the solver from ``sample.init`` and score every stage."""
    stages = []
    optimize(sample.init, sample.scene, sample.query, sample.camera, config, params,
             record=record, stage_poses=stages)
    return gated_total_loss(stages, sample, **loss_kw)


def decision_signature(record):
    """Discrete decisions of a solve (validity masks, cells, stopping), for
    comparing two runs' computation paths."""
    sig = []
    for item in record:
        if item[2] == "end":
            sig.append(item)
        else:
            si, li, it, valid, cells = item[:5]
            sig.append((si, li, it, valid.tobytes(), cells.tobytes()))
    return sig


def _min_edge(record):
    edges = [item[5] for item in record if item[2] != "end"]
    return min(edges) if edges else 0.5


@dataclass
class ThetaGradient:
    grad: np.ndarray  # (L, 6)
    loss: float
    report: LossReport
    min_edge: float  # closest lookup approach to a cell boundary, cell units
    near_boundary: bool  # a lookup sat close enough to a cell edge to be nonsmooth
    signature: list = field(repr=False, default_factory=list)


def theta_gradient(sample, config, damping_params, **loss_kw):
    """Exact derivative of the gated loss with respect to every ``theta``
    component, by forward-mode dual numbers through the unrolled solver."""
    theta = primal(damping_params.theta)
    seeded = DampingParams(Dual.seed(theta), damping_params.lambda_min, damping_params.lambda_max)
    record = []
    report = unrolled_loss(sample, config, seeded, record=record, **loss_kw)
    total = report.total
    if isinstance(total, Dual):
        grad = tangent(total).reshape(theta.shape)
    else:
        grad = np.zeros_like(theta)
    report.total = float(primal(total))
    edge = _min_edge(record)
    return ThetaGradient(grad, report.total, report, edge, edge < EDGE_EPS,
                         decision_signature(record))


def finite_difference_gradient(sample, config, damping_params, h=1e-4, **loss_kw):
    """Central differences of the loss in ``theta``.

    Returns ``(grad, crossed)`` where ``crossed[l, k]`` is True when either
    perturbed run took a different discrete path than the unperturbed one.
    """
    theta = np.array(primal(damping_params.theta), dtype=float)
    base = []
    unrolled_loss(sample, config, damping_params, record=base, **loss_kw)
    base_sig = decision_signature(base)
    grad = np.zeros_like(theta)
    crossed = np.zeros(theta.shape, dtype=bool)
    for idx in np.ndindex(*theta.shape):
        vals = []
        for sgn in (1.0, -1.0):
            th = theta.copy()
            th[idx] += sgn * h
            rec = []
            p = DampingParams(th, damping_params.lambda_min, damping_params.lambda_max)
            vals.append(float(primal(unrolled_loss(sample, config, p, record=rec, **loss_kw).total)))
            crossed[idx] |= decision_signature(rec) != base_sig
        grad[idx] = (vals[0] - vals[1]) / (2.0 * h)
    return grad, crossed


def batch_loss(samples, config, params, **loss_kw):
    """Mean loss over samples; a failed solve scores the clamp value."""
    losses = []
    for s in samples:
        try:
            losses.append(float(primal(unrolled_loss(s, config, params, **loss_kw).total)))
        except FeatAlignError:
            losses.append(loss_kw.get("clamp", LOSS_CLAMP))
    return float(np.mean(losses))


@dataclass
class FitResult:
    params: DampingParams
    history: List[tuple]  # (step, train_loss, val_loss)
    failures: int = 0

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_loss"])
            for step, tr, va in self.history:
                w.writerow([step, repr(tr), "" if va is None else repr(va)])


def fit_damping(samples, config=None, init_theta=None, lr=0.1, steps=50,
                val_samples=None, clip=GRAD_CLIP, **loss_kw):
    """Plain gradient descent on ``theta`` over the mean training loss.

    Gradients are clipped elementwise to ``[-clip, clip]``. ``history`` holds
    the training loss at each step's starting point (and the validation loss
    when ``val_samples`` is given), plus a final row for the fitted result.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    config = config or training_config()
    if init_theta is None:
        n_levels = len(samples[0].query[-1])
        init_theta = np.zeros((n_levels, 6))
    params = init_theta if isinstance(init_theta, DampingParams) else DampingParams(np.array(init_theta, dtype=float))
    theta = np.array(params.theta, dtype=float)
    history = []
    failures = 0
    for step in range(steps + 1):
        cur = DampingParams(theta.copy(), params.lambda_min, params.lambda_max)
        val = batch_loss(val_samples, config, cur, **loss_kw) if val_samples else None
        if step == steps:
            history.append((step, batch_loss(samples, config, cur, **loss_kw), val))
            break
        grads, losses = [], []
        for s in samples:
            try:
                tg = theta_gradient(s, config, cur, **loss_kw)
            except FeatAlignError:
                failures += 1
                continue
            grads.append(tg.grad)
            losses.append(tg.loss)
        if not grads:
            history.append((step, float("nan"), val))
            break
        history.append((step, float(np.mean(losses)), val))
        g = np.clip(np.mean(grads, axis=0), -clip, clip)
        theta = theta - lr * g
    return FitResult(DampingParams(theta, params.lambda_min, params.lambda_max), history, failures)


def success_auc(errors, max_error=5.0):
    """Area under the recall-vs-threshold curve of final reprojection errors
    on ``[0, max_error]`` pixels, normalized to ``[0, 1]``."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors given")
    e = np.where(np.isfinite(e), e, np.inf)
    return float(np.mean(np.clip(1.0 - e / max_error, 0.0, 1.0)))


def final_errors(samples, config, params):
    """Mean reprojection error (pixels) after a full solve of each sample;
    failed solves count as infinite."""
    out = []
    for s in samples:
        try:
            pose, _ = optimize(s.init, s.scene, s.query, s.camera, config, params)
            _, e, _ = _reprojection_terms(pose, s.gt, s.scene.points, s.camera, HUBER_DELTA)
            out.append(float(np.mean(e)))
        except FeatAlignError:
            out.append(float("inf"))
    return np.array(out)
