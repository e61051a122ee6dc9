"""Evaluation harnesses: convergence versus initial error, and per-point
attraction basins of the feature-metric cost."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
from scipy.spatial.distance import pdist

from .errors import FeatAlignError, NoVisiblePoints, SeedOutOfBounds
from .features import BORDER_MARGIN, sample
from .geometry import Z_MIN, pose_error, project_points
from .initpose import perturb
from .solver import optimize

R_TOL_DEG = 0.5
T_TOL_FRAC = 0.01
BASIN_TOL = 1e-6
_CHUNK = 4096


def diameter(points, max_points=2000):
    """Largest pairwise distance (on a fixed subsample for big sets)."""
    points = np.asarray(points, dtype=float)
    if len(points) > max_points:
        points = points[np.random.default_rng(0).choice(len(points), max_points, replace=False)]
    if len(points) < 2:
        return 0.0
    return float(pdist(points).max())


def initial_reproj_error(pose0, gt, points, cam):
    """Mean pixel distance between projections under ``pose0`` and ``gt``."""
    points = np.asarray(points, dtype=float)
    P0, Pg = pose0.transform(points), gt.transform(points)
    keep = (P0[:, 2] > Z_MIN) & (Pg[:, 2] > Z_MIN)
    if not keep.any():
        raise NoVisiblePoints("no point is in front of both cameras")
    uv0, _ = project_points(cam, P0[keep])
    uvg, _ = project_points(cam, Pg[keep])
    return float(np.mean(np.linalg.norm(uv0 - uvg, axis=1)))


@dataclass(frozen=True)
class PerturbSchedule:
    """Trial ``i`` draws a severity ``u ~ U(0, 1)`` and perturbs by
    ``u * max_rot_deg`` degrees and ``u * max_trans_frac`` of the diameter."""

    max_rot_deg: float = 40.0
    max_trans_frac: float = 0.4


@dataclass
class Trial:
    index: int
    initial_error: float
    rot_error: float
    trans_error: float
    success: bool


@dataclass
class SweepResult:
    edges: np.ndarray  # (B + 1,) pixels, strictly increasing
    trials: np.ndarray  # (B,) counts
    successes: np.ndarray  # (B,)
    records: List[Trial] = field(default_factory=list)

    @property
    def rates(self):
        """Per-bin success rate; NaN for empty bins."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.trials > 0, self.successes / np.maximum(self.trials, 1), np.nan)

    def rows(self):
        for lo, hi, n, k in zip(self.edges[:-1], self.edges[1:], self.trials, self.successes):
            yield float(lo), float(hi), int(n), int(k), (k / n if n else None)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "trials", "successes", "rate"])
            for lo, hi, n, k, rate in self.rows():
                w.writerow([f"{lo:.17g}", f"{hi:.17g}", n, k, "" if rate is None else f"{rate:.17g}"])


def _bin_edges(errors, n_bins):
    edges = np.unique(np.quantile(errors, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) < 2:
        edges = np.array([edges[0], edges[0] + 1.0])
    edges[-1] = np.nextafter(edges[-1], np.inf)  # make the top bin closed
    return edges


def convergence_sweep(scene, query, cam, gt, config, damping, n_trials,
                      schedule=PerturbSchedule(), seed=0, bin_edges=None, n_bins=5,
                      r_tol=R_TOL_DEG, t_tol=None, threads=1):
    """Perturb, solve, and classify ``n_trials`` independent trials.

    Each trial gets its own child of ``SeedSequence(seed)``, so results do
    not depend on ``threads``. Success requires a rotation error below
    ``r_tol`` degrees and a camera-center error below ``t_tol`` (default 1%
    of the point-set diameter). Trials are binned by initial reprojection
    error, on quantile edges unless ``bin_edges`` is given.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    diam = diameter(scene.points)
    if t_tol is None:
        t_tol = T_TOL_FRAC * diam
    children = np.random.SeedSequence(seed).spawn(n_trials)

    def run(i):
        rng = np.random.default_rng(children[i])
        u = rng.uniform()
        pose0 = perturb(gt, np.radians(u * schedule.max_rot_deg),
                        u * schedule.max_trans_frac * diam, rng)
        try:
            err0 = initial_reproj_error(pose0, gt, scene.points, cam)
        except NoVisiblePoints:
            err0 = np.inf
        try:
            pose, _ = optimize(pose0, scene, query, cam, config, damping)
            rot, trans = pose_error(pose, gt)
        except FeatAlignError:
            rot, trans = np.inf, np.inf
        return Trial(i, err0, rot, trans, bool(rot < r_tol and trans < t_tol))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, range(n_trials)))
    else:
        records = [run(i) for i in range(n_trials)]

    errs = np.array([r.initial_error for r in records])
    ok = np.array([r.success for r in records])
    finite = np.isfinite(errs)
    if bin_edges is None:
        edges = _bin_edges(errs[finite], n_bins) if finite.any() else np.array([0.0, 1.0])
    else:
        edges = np.asarray(bin_edges, dtype=float)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
    idx = np.searchsorted(edges, errs, side="right") - 1
    inside = finite & (idx >= 0) & (idx < len(edges) - 1)
    n_bins_out = len(edges) - 1
    counts = np.bincount(idx[inside], minlength=n_bins_out)
    succ = np.bincount(idx[inside], weights=ok[inside], minlength=n_bins_out).astype(int)
    return SweepResult(edges, counts, succ, records)


# --- attraction basin ---------------------------------------------------------

_OFFSETS = np.array([[-1, -1], [0, -1], [1, -1], [-1, 0], [1, 0], [-1, 1], [0, 1], [1, 1]])
_DIRS = _OFFSETS / np.linalg.norm(_OFFSETS, axis=1, keepdims=True)


@dataclass
class BasinRaster:
    levels: List[np.ndarray]  # per pyramid level, (H, W) scores in [0, 1]
    combined: np.ndarray
    seed: tuple  # (x, y) full-resolution pixel

    def write_pgm(self, out_dir, prefix="basin"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, r in enumerate(self.levels):
            paths.append(write_pgm(out / f"{prefix}_level{i}.pgm", r))
        paths.append(write_pgm(out / f"{prefix}_combined.pgm", self.combined))
        return paths


def write_pgm(path, raster):
    """Binary (P5) 8-bit grayscale, ``round(255 * score)``."""
    img = np.clip(np.rint(np.asarray(raster) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return Path(path)


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def _descent_votes(level, ref, width, height, margin):
    """Per pixel, the two neighbors most opposed to the cost gradient and
    their normalized soft weights."""
    ys, xs = np.mgrid[0:height, 0:width]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    gvec = np.empty((len(pix), 2))
    valid = np.empty(len(pix), bool)
    for a in range(0, len(pix), _CHUNK):
        look = sample(level, pix[a:a + _CHUNK], margin)
        r = look.feature - ref
        gvec[a:a + _CHUNK] = (look.grad @ r[:, :, None])[:, :, 0]
        valid[a:a + _CHUNK] = look.valid
    norm = np.linalg.norm(gvec, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (gvec @ _DIRS.T) / norm[:, None]
    cos = np.where(norm[:, None] > 0, cos, 0.0)
    pick = np.argsort(cos, axis=1, kind="stable")[:, :2]  # most negative cosines
    w = np.maximum(0.0, -np.take_along_axis(cos, pick, axis=1))
    wsum = w.sum(axis=1, keepdims=True)
    w = np.where(wsum > 0, w / np.where(wsum > 0, wsum, 1.0), 0.0)
    nb = pix[:, None, :] + _OFFSETS[pick]
    inside = (nb[..., 0] >= 0) & (nb[..., 0] < width) & (nb[..., 1] >= 0) & (nb[..., 1] < height)
    w = np.where(inside & valid[:, None], w, 0.0)
    flat = np.where(inside, nb[..., 1] * width + nb[..., 0], 0).astype(np.int64)
    return flat, w


def _propagate(scores, flat, w, seed_idx, tol, max_sweeps):
    s = scores.copy()
    s[seed_idx] = 1.0
    for _ in range(max_sweeps):
        new = np.maximum(s, np.sum(w * s[flat], axis=1))
        new[seed_idx] = 1.0
        change = float(np.max(new - s))
        s = new
        if change < tol:
            break
    return s


def basin(query, ref_descriptors, seed, margin=BORDER_MARGIN, tol=BASIN_TOL,
          max_sweeps=None, combine="final"):
    """Soft attraction basin of one point at every pyramid level.

    ``ref_descriptors[l]`` is the reference descriptor at level ``l``
    (coarse-to-fine order, as in the pyramid). Scores are propagated on the
    full-resolution pixel grid from the finest level to the coarsest, each
    level starting from the previous one's scores and run until no score
    changes by more than ``tol``. ``levels[l]`` holds the scores after level
    ``l`` was processed. ``combine="final"`` reports the scores after the
    coarsest level as the combined raster; ``"product"`` multiplies the
    per-level rasters instead.
    """
    width, height = (int(round(v)) for v in query[len(query) - 1].image_size)
    x, y = int(seed[0]), int(seed[1])
    if not (margin <= x <= width - 1 - margin and margin <= y <= height - 1 - margin):
        raise SeedOutOfBounds(f"seed {(x, y)} is outside the valid region of a {width}x{height} image")
    if len(ref_descriptors) != len(query):
        raise ValueError("need one reference descriptor per level")
    if combine not in ("final", "product"):
        raise ValueError("combine must be 'final' or 'product'")
    max_sweeps = max_sweeps or width * height
    seed_idx = y * width + x
    scores = np.zeros(width * height)
    rasters = [None] * len(query)
    for li in reversed(range(len(query))):
        flat, w = _descent_votes(query[li], np.asarray(ref_descriptors[li], dtype=float),
                                 width, height, margin)
        scores = _propagate(scores, flat, w, seed_idx, tol, max_sweeps)
        rasters[li] = scores.reshape(height, width).copy()
    if combine == "final":
        combined = rasters[0].copy()
    else:
        combined = np.prod(rasters, axis=0)
        combined[y, x] = 1.0
    return BasinRaster(rasters, combined, (x, y))
