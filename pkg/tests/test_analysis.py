import csv
import math

import numpy as np
import pytest

from featalign.analysis import (
    PerturbSchedule,
    basin,
    convergence_sweep,
    diameter,
    initial_reproj_error,
    read_pgm,
    write_pgm,
)
from featalign.errors import NoVisiblePoints, SeedOutOfBounds
from featalign.features import BORDER_MARGIN, FeatureLevel, FeaturePyramid
from featalign.geometry import Camera, Pose
from featalign.solver import DampingParams, SolverConfig
from conftest import random_pose
from oracles import pinhole

SIZE = 48
STRIDES = (4.0, 2.0, 1.0)


def _pyramid(fn, D, n_levels=1):
    """Levels of strides ``(.., 2, 1)`` sampling ``fn`` at their cell centers."""
    levels = []
    for s in STRIDES[len(STRIDES) - n_levels:]:
        n = int(SIZE / s)
        c = (np.arange(n) + 0.5) * s - 0.5
        xs, ys = np.meshgrid(c, c)
        levels.append(FeatureLevel(fn(xs, ys).reshape(n, n, D), np.zeros((n, n)), s))
    return FeaturePyramid(levels)


def radial(xs, ys):
    return np.stack([(xs - 24) / 10.0, (ys - 24) / 10.0], axis=-1)


def two_wells(xs, ys):
    d1 = (xs - 12) ** 2 + (ys - 24) ** 2
    d2 = (xs - 36) ** 2 + (ys - 24) ** 2
    return (d1 * d2 / 1e4)[..., None]


def _interior(r):
    m = int(BORDER_MARGIN)
    return r[m:SIZE - m, m:SIZE - m]


# --- initial reprojection error ----------------------------------------------

def test_initial_reproj_error_examples():
    cam = Camera(100, 100, 50, 50, 100, 100)
    pts = np.random.default_rng(0).uniform([-1, -1, 2], [1, 1, 2], size=(30, 3))
    gt = Pose.identity()
    assert initial_reproj_error(gt, gt, pts, cam) == 0.0
    # every point at depth 2: a 0.1 sideways shift moves each projection 5 px
    shifted = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
    assert math.isclose(initial_reproj_error(shifted, gt, pts, cam), 5.0, rel_tol=1e-12)
    with pytest.raises(NoVisiblePoints):
        initial_reproj_error(gt, gt, -pts, cam)


def test_initial_reproj_error_matches_loop():
    rng = np.random.default_rng(1)
    cam = Camera(120, 110, 60, 50, 120, 100)
    pts = rng.uniform([-1, -1, 3], [1, 1, 6], size=(40, 3))
    gt = Pose.identity()
    for _ in range(20):
        p0 = random_pose(rng, 0.1, 0.1)
        errs = []
        for P in pts:
            a, b = p0.R @ P + p0.t, gt.R @ P + gt.t
            if a[2] > 1e-6 and b[2] > 1e-6:
                errs.append(np.linalg.norm(pinhole(cam.fx, cam.fy, cam.cx, cam.cy, a)
                                           - pinhole(cam.fx, cam.fy, cam.cx, cam.cy, b)))
        assert math.isclose(initial_reproj_error(p0, gt, pts, cam), np.mean(errs), rel_tol=1e-12)


def test_diameter():
    cube = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    assert math.isclose(diameter(cube), math.sqrt(3.0))
    assert diameter(cube[:1]) == 0.0


# --- convergence sweep --------------------------------------------------------

def _sweep(S, n, **kw):
    kw.setdefault("schedule", PerturbSchedule(3.0, 0.03))
    return convergence_sweep(S.points, S.query, S.camera, S.gt, SolverConfig(),
                             DampingParams.from_lambda(1e-2, 3), n, **kw)


def test_sweep_zero_perturbation_always_succeeds(small_scene):
    res = _sweep(small_scene, 4, schedule=PerturbSchedule(0.0, 0.0))
    assert all(r.success for r in res.records)
    assert all(r.initial_error == 0.0 for r in res.records)
    assert res.trials.sum() == 4 and np.nanmax(res.rates) == 1.0


def test_sweep_explicit_edges_and_empty_bins(small_scene):
    res = _sweep(small_scene, 6, bin_edges=[0.0, 1e6, 2e6])
    assert res.trials.tolist() == [6, 0]
    assert math.isnan(res.rates[1])
    assert list(res.rows())[1][4] is None
    with pytest.raises(ValueError):
        _sweep(small_scene, 2, bin_edges=[1.0, 1.0])


def test_sweep_quantile_bins_cover_all_trials(small_scene):
    res = _sweep(small_scene, 10, n_bins=3)
    assert res.trials.sum() == 10
    assert np.all(np.diff(res.edges) > 0)
    assert np.all((res.successes >= 0) & (res.successes <= res.trials))


def test_sweep_is_deterministic_and_thread_independent(small_scene):
    a = _sweep(small_scene, 6, seed=3)
    b = _sweep(small_scene, 6, seed=3, threads=2)
    assert a.records == b.records
    assert np.array_equal(a.edges, b.edges)
    c = _sweep(small_scene, 6, seed=4)
    assert a.records != c.records


def test_sweep_rejects_zero_trials(small_scene):
    with pytest.raises(ValueError):
        _sweep(small_scene, 0)


def test_sweep_csv(small_scene, tmp_path):
    res = _sweep(small_scene, 4, bin_edges=[0.0, 1e6, 2e6])
    res.write_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["bin_lo", "bin_hi", "trials", "successes", "rate"]
    assert rows[1][2] == "4" and rows[2][2] == "0" and rows[2][4] == ""
    assert float(rows[1][1]) == 1e6


# --- attraction basin ---------------------------------------------------------

def test_basin_of_single_well_covers_the_image():
    q = _pyramid(radial, 2)
    r = basin(q, [np.zeros(2)], (24, 24))
    assert r.combined[24, 24] == 1.0
    inner = _interior(r.combined)
    assert inner.min() > 0.9
    assert np.all((r.combined >= 0) & (r.combined <= 1))


def test_basin_excludes_the_other_well():
    q = _pyramid(two_wells, 1)
    r = basin(q, [np.zeros(1)], (12, 24))
    assert r.combined[24, 12] == 1.0
    # pixels around the second minimum descend into it, not into the seed
    assert r.combined[21:28, 33:40].max() < 0.1
    assert r.combined[21:28, 9:16].min() > 0.9


def test_basin_levels_and_product():
    q = _pyramid(two_wells, 1, n_levels=2)
    fin = basin(q, [np.zeros(1)] * 2, (12, 24))
    prod = basin(q, [np.zeros(1)] * 2, (12, 24), combine="product")
    assert len(fin.levels) == 2
    assert np.array_equal(fin.combined, fin.levels[0])
    assert np.allclose(prod.combined, fin.levels[0] * fin.levels[1])
    assert prod.combined[24, 12] == 1.0
    with pytest.raises(ValueError):
        basin(q, [np.zeros(1)] * 2, (12, 24), combine="sum")
    with pytest.raises(ValueError):
        basin(q, [np.zeros(1)], (12, 24))


def test_basin_seed_bounds():
    q = _pyramid(radial, 2)
    with pytest.raises(SeedOutOfBounds):
        basin(q, [np.zeros(2)], (0, 24))
    with pytest.raises(SeedOutOfBounds):
        basin(q, [np.zeros(2)], (24, SIZE))


def test_basin_is_deterministic():
    q = _pyramid(two_wells, 1)
    a = basin(q, [np.zeros(1)], (12, 24))
    b = basin(q, [np.zeros(1)], (12, 24))
    assert np.array_equal(a.combined, b.combined)


def test_basin_on_bimodal_scene(bimodal_scene):
    from featalign.geometry import project_points
    S = bimodal_scene
    feats = S.points.features[-1]
    uv, front = project_points(S.camera, S.gt.transform(S.points.points))
    ok = front & np.all([lv.valid for lv in feats.levels], axis=0)
    k = int(np.flatnonzero(ok)[0])
    seed = tuple(int(v) for v in np.rint(uv[k]))
    r = basin(S.query[-1], [lv.desc[k] for lv in feats.levels], seed)
    assert r.combined[seed[1], seed[0]] == 1.0
    assert np.all((r.combined >= 0) & (r.combined <= 1))
    # some of the image belongs to the other mode
    assert (r.combined < 0.1).mean() > 0.05


def test_pgm_round_trip(tmp_path):
    raster = np.random.default_rng(0).uniform(size=(7, 9))
    write_pgm(tmp_path / "a.pgm", raster)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (7, 9)
    assert np.array_equal(back, np.rint(raster * 255).astype(np.uint8))
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "b.pgm")


def test_raster_writes_every_level(tmp_path):
    q = _pyramid(radial, 2, n_levels=3)
    r = basin(q, [np.zeros(2)] * 3, (24, 24))
    paths = r.write_pgm(tmp_path)
    assert [p.name for p in paths] == ["basin_level0.pgm", "basin_level1.pgm",
                                       "basin_level2.pgm", "basin_combined.pgm"]
    assert read_pgm(paths[-1])[24, 24] == 255
