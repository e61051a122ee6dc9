"""Synthetic scenes with analytic, world-anchored feature fields.

A scene is the inside of an axis-aligned box. Every feature level owns a
smooth function of 3D position; a camera renders a level by casting the ray
through each cell center, intersecting it with the box walls, and
evaluating the field at the hit point. Because query and reference images
sample the same world function, residuals at the true pose vanish up to
bilinear sampling error, and every property of the solver has a ground
truth to compare against.

Field types:

``random-smooth``
    per channel, a sum of sinusoids with wave vectors drawn below a per-level
    band limit, then channel-normalized.
``quadratic-basin``
    an affine function of position with a constant channel, so features are
    injective and the cost has a single basin.
``bimodal``
    a radial profile around the nearest of two anchor points, so the anchor
    descriptor repeats and the cost has two equal minima.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .analysis import diameter
from .errors import FormatError, InfeasibleSpec
from .features import (
    FeatureLevel,
    FeaturePyramid,
    LevelDescriptors,
    PointFeatures,
    aggregate_reference,
    normalize_channels,
    read_fmap,
    sample,
    write_fmap,
)
from .geometry import Camera, Pose, pose_from_json, project_points, so3_exp
from .initpose import WeightedPose, perturb
from .jsonio import write_json
from .solver import ScenePoints

FIELD_TYPES = ("random-smooth", "quadratic-basin", "bimodal")
UNCERTAINTY_PATTERNS = ("zero", "random", "occluder-patch")
_CHUNK = 8192


def default_camera():
    return Camera(200.0, 200.0, 127.5, 127.5, 256, 256)


@dataclass
class SceneSpec:
    n_points: int = 200
    extent: float = 1.0
    field_type: str = "random-smooth"
    uncertainty: str = "zero"
    strides: Tuple[float, ...] = (16.0, 4.0, 1.0)
    dims: Tuple[int, ...] = (128, 128, 32)
    # field band limit per level, cycles per cell of that level
    bandwidth: Tuple[float, ...] = (0.2, 0.2, 0.05)
    n_waves: int = 12
    camera: Camera = field(default_factory=default_camera)
    scales: Tuple[float, ...] = (1.0,)
    n_refs: int = 3
    ref_rotation_deg: float = 3.0
    ref_translation: float = 0.02  # fraction of extent
    query_rotation_deg: float = 10.0  # spread of the query orientation
    occluder_rect: Optional[Tuple[float, float, float, float]] = None
    occluder_uncertainty: float = 0.0
    # amplitude of an extra smooth field added to the query only (appearance
    # change between query and references); 0 keeps views consistent
    appearance_change: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 6:
            raise ValueError("need at least 6 points for an observable pose")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.appearance_change < 0:
            raise ValueError("appearance_change must be nonnegative")
        if self.field_type not in FIELD_TYPES:
            raise ValueError(f"field_type must be one of {FIELD_TYPES}")
        if self.uncertainty not in UNCERTAINTY_PATTERNS:
            raise ValueError(f"uncertainty must be one of {UNCERTAINTY_PATTERNS}")
        if not (len(self.strides) == len(self.dims) == len(self.bandwidth)):
            raise ValueError("strides, dims and bandwidth need one entry per level")
        self.strides = tuple(float(s) for s in self.strides)
        self.dims = tuple(int(d) for d in self.dims)
        self.bandwidth = tuple(float(b) for b in self.bandwidth)
        self.scales = tuple(float(s) for s in self.scales)
        if isinstance(self.camera, dict):
            self.camera = Camera.from_json(self.camera)
        if self.occluder_rect is not None:
            self.occluder_rect = tuple(float(x) for x in self.occluder_rect)

    def to_json(self):
        d = asdict(self)
        d["camera"] = self.camera.to_json()
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        for key in ("strides", "dims", "bandwidth", "scales", "occluder_rect"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass(frozen=True)
class BoxRoom:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def for_extent(cls, extent):
        return cls(np.array([-0.4, -0.3, 0.0]) * extent, np.array([0.4, 0.3, 1.0]) * extent)

    def intersect(self, origin, dirs):
        """Exit points of rays cast from inside the box."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = (self.hi - origin) / dirs
            t_lo = (self.lo - origin) / dirs
        t = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
        tmin = t.min(axis=1)
        return origin + tmin[:, None] * dirs


class SinusoidField:
    """Per channel ``sum_k a_k sin(2 pi nu_k . X + phi_k)``."""

    def __init__(self, rng, dim, n_waves, max_freq):
        dirs = rng.normal(size=(dim, n_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        mags = max_freq * np.sqrt(rng.uniform(0.05, 1.0, size=(dim, n_waves, 1)))
        self.omega = (2 * np.pi * mags * dirs).reshape(dim * n_waves, 3).T  # (3, D*K)
        self.phase = rng.uniform(0, 2 * np.pi, size=dim * n_waves)
        self.amp = rng.normal(size=(dim, n_waves)) / np.sqrt(n_waves)
        self.dim, self.n_waves = dim, n_waves

    def __call__(self, X):
        out = np.empty((len(X), self.dim))
        for a in range(0, len(X), _CHUNK):
            s = np.sin(X[a:a + _CHUNK] @ self.omega + self.phase)
            out[a:a + _CHUNK] = np.einsum("mdk,dk->md", s.reshape(-1, self.dim, self.n_waves), self.amp)
        return out


class AffineField:
    """Constant channel followed by affine functions of position."""

    def __init__(self, rng, dim, center, scale, gain=1.0):
        if dim < 4:
            raise ValueError("quadratic-basin fields need at least 4 channels")
        A = rng.normal(size=(dim - 1, 3))
        # well-conditioned: orthonormal columns scaled by the gain
        q, _ = np.linalg.qr(A)
        self.A = q * (gain / scale)
        self.center = np.asarray(center, dtype=float)
        self.dim = dim

    def __call__(self, X):
        lin = (X - self.center) @ self.A.T
        return np.concatenate([np.ones((len(X), 1)), lin], axis=1)


class BimodalField:
    """Radial profile around the nearer of two anchors."""

    def __init__(self, rng, dim, anchors, radius):
        self.anchors = np.asarray(anchors, dtype=float)
        self.radius = float(radius)
        self.freqs = np.linspace(0.5, 1.5, dim - 1) * np.pi / 2
        self.phase = rng.uniform(0, 0.2, size=dim - 1)
        self.dim = dim

    def __call__(self, X):
        d = np.linalg.norm(X[:, None, :] - self.anchors[None], axis=-1).min(axis=1)
        rho = np.minimum(d / self.radius, 1.0)
        cols = np.sin(np.outer(rho, self.freqs) + self.phase)
        return np.concatenate([np.full((len(X), 1), 0.5), cols], axis=1)


class ChangedField:
    """``base + amount * extra``: the same world seen under altered appearance."""

    def __init__(self, base, extra, amount):
        self.base, self.extra, self.amount = base, extra, float(amount)
        self.dim = base.dim

    def __call__(self, X):
        return self.base(X) + self.amount * self.extra(X)


class SmoothUncertainty:
    def __init__(self, rng, max_freq, level=1.0, n_waves=6):
        self.f = SinusoidField(rng, 1, n_waves, max_freq)
        self.level = level

    def __call__(self, X):
        return self.level * np.exp(1.5 * self.f(X)[:, 0])


def _rays(cam, pose, pix):
    """World-frame ray directions through full-resolution pixels ``(M, 2)``."""
    d_cam = np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy,
                      np.ones(len(pix))], axis=1)
    return d_cam @ pose.R  # R^T d for each row


def render_level(fld, unc, room, pose, cam, stride, width, height):
    xs = (np.arange(width) + 0.5) * stride - 0.5
    ys = (np.arange(height) + 0.5) * stride - 0.5
    gx, gy = np.meshgrid(xs, ys)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    X = room.intersect(pose.center(), _rays(cam, pose, pix))
    feats = fld(X).reshape(height, width, fld.dim)
    u = np.zeros(len(X)) if unc is None else unc(X)
    return normalize_channels(FeatureLevel(feats, u.reshape(height, width), float(stride)))


def render_pyramid(fields, uncs, room, pose, cam, strides):
    levels = []
    for fld, unc, s in zip(fields, uncs, strides):
        w = int(np.ceil(cam.width / s))
        h = int(np.ceil(cam.height / s))
        levels.append(render_level(fld, unc, room, pose, cam, s, max(w, 2), max(h, 2)))
    return FeaturePyramid(levels)


def render_occluder(pyramid, rect, uncertainty_value, seed=0, mode="noise", shift=None):
    """Overwrite the cells whose centers fall inside ``rect`` at every level.

    ``rect`` is ``(x0, y0, x1, y1)`` in full-resolution pixels. ``mode``
    selects what replaces the features: ``"noise"`` draws i.i.d. unit
    vectors; ``"shifted"`` copies the level's own content from a seeded
    pixel offset, a repeated-pattern distractor that creates a competing
    minimum. The uncertainty inside the rect is set to ``uncertainty_value``.
    """
    x0, y0, x1, y1 = rect
    if x1 <= x0 or y1 <= y0:
        return pyramid
    rng = np.random.default_rng(seed)
    if mode == "shifted" and shift is None:
        ang = rng.uniform(0, 2 * np.pi)
        w, _ = pyramid[len(pyramid) - 1].image_size
        shift = 0.15 * w * np.array([np.cos(ang), np.sin(ang)])
    levels = []
    for lv in pyramid.levels:
        c = lv.cell_centers()
        inside = (c[..., 0] >= x0) & (c[..., 0] < x1) & (c[..., 1] >= y0) & (c[..., 1] < y1)
        feats = lv.features.copy()
        unc = lv.uncertainty.copy()
        n = int(inside.sum())
        if n:
            if mode == "noise":
                noise = rng.normal(size=(n, lv.dim))
                feats[inside] = noise / np.linalg.norm(noise, axis=1, keepdims=True)
            elif mode == "shifted":
                src = c[inside] + shift
                look = sample(lv, src, margin=-np.inf)
                f = look.feature
                feats[inside] = f / np.linalg.norm(f, axis=1, keepdims=True)
            else:
                raise ValueError(f"unknown occluder mode {mode!r}")
            unc[inside] = uncertainty_value
        levels.append(FeatureLevel(feats, unc, lv.stride))
    return FeaturePyramid(levels)


def point_features_from_query(points, query, cam, pose, margin=2.0):
    """Descriptors equal to the raw query lookups at ``pose``.

    With these, every residual is exactly zero at ``pose``; useful for
    checks that need an exact minimizer rather than a sampled one.
    """
    uv, in_front = project_points(cam, pose.transform(np.asarray(points, dtype=float)))
    out = []
    for lv in query.levels:
        look = sample(lv, uv, margin)
        valid = look.valid & in_front
        out.append(LevelDescriptors(np.where(valid[:, None], look.feature, 0.0),
                                    valid.astype(float), valid))
    return PointFeatures(out)


@dataclass(eq=False)
class Scene:
    spec: SceneSpec
    points: ScenePoints
    refs: List[Tuple[List[FeaturePyramid], Pose, Camera]]
    gt: Pose
    query: List[FeaturePyramid]
    camera: Camera
    diameter: float
    priors: List[WeightedPose]
    room: BoxRoom = None
    fields: list = None
    uncertainties: list = None

    def ref_views(self, scale_index=-1):
        return [(pyrs[scale_index], pose, cam) for pyrs, pose, cam in self.refs]

    def render(self, pose, scale_index=-1):
        """Render the scene's fields from another viewpoint."""
        s = self.spec.scales[scale_index]
        cam = self.camera if s == 1.0 else self.camera.scaled(s)
        return render_pyramid(self.fields[scale_index], self.uncertainties[scale_index],
                              self.room, pose, cam, self.spec.strides)


def _look_at_pose(center, yaw, pitch):
    # camera looking down +z of the world, rotated by yaw (about y) and pitch (about x)
    R_wc = so3_exp(np.array([0.0, yaw, 0.0])) @ so3_exp(np.array([pitch, 0.0, 0.0]))
    R = R_wc.T
    return Pose(R, -(R @ center))


def _make_fields(spec, rng, room, gt, anchors):
    cam = spec.camera
    # smallest depth seen by the query bounds the pixel footprint on the walls
    grid = np.stack(np.meshgrid(np.linspace(0, cam.width - 1, 17),
                                np.linspace(0, cam.height - 1, 17)), -1).reshape(-1, 2)
    X = room.intersect(gt.center(), _rays(cam, gt, grid))
    d_min = float(gt.transform(X)[:, 2].min())
    # a frontal pixel covers d_min / fx of wall; grazing walls compress the
    # texture up to ~2x in the image, so budget for twice that footprint
    footprint = 2.0 * d_min / cam.fx
    all_fields, all_uncs = [], []
    for s in spec.scales:
        fields, uncs = [], []
        for stride, dim, bw in zip(spec.strides, spec.dims, spec.bandwidth):
            cell = footprint * stride / s
            max_freq = bw / cell
            if spec.field_type == "random-smooth":
                fld = SinusoidField(rng, dim, spec.n_waves, max_freq)
            elif spec.field_type == "quadratic-basin":
                fld = AffineField(rng, dim, room.hi * np.array([0, 0, 1.0]), spec.extent, gain=2.0)
            else:
                fld = BimodalField(rng, dim, anchors, 0.35 * spec.extent)
            fields.append(fld)
            if spec.uncertainty == "random":
                uncs.append(SmoothUncertainty(rng, 0.5 * max_freq))
            else:
                uncs.append(None)
        all_fields.append(fields)
        all_uncs.append(uncs)
    return all_fields, all_uncs


def generate(spec):
    """Build a :class:`Scene` deterministically from ``spec``.

    Points are drawn by casting rays through uniformly sampled query pixels
    and keeping hits that every reference view also sees inside its valid
    region. Raises InfeasibleSpec if too few points survive.
    """
    rng = np.random.default_rng(spec.seed)
    cam = spec.camera
    room = BoxRoom.for_extent(spec.extent)
    center = np.array([0.0, 0.0, 0.05 * spec.extent]) + rng.uniform(-0.02, 0.02, 3) * spec.extent
    yaw, pitch = np.radians(spec.query_rotation_deg) * rng.uniform(-1, 1, 2)
    gt = _look_at_pose(center, yaw, pitch)

    ref_poses = [
        perturb(gt, np.radians(spec.ref_rotation_deg), spec.ref_translation * spec.extent,
                int(rng.integers(2**31)))
        for _ in range(spec.n_refs)
    ]

    # anchors for the bimodal field: two spots on the back wall inside the view
    back = room.hi[2]
    a_pix = np.array([[0.3 * cam.width, 0.5 * cam.height], [0.75 * cam.width, 0.5 * cam.height]])
    anchors = room.intersect(gt.center(), _rays(cam, gt, a_pix))
    anchors[:, 2] = np.minimum(anchors[:, 2], back)

    margin = 8.0
    pts = []
    if spec.field_type == "bimodal":
        pts.append(anchors[:1])
    need = spec.n_points - sum(len(p) for p in pts)
    for _ in range(50):
        if need <= 0:
            break
        pix = rng.uniform([margin, margin], [cam.width - 1 - margin, cam.height - 1 - margin],
                          size=(4 * need, 2))
        X = room.intersect(gt.center(), _rays(cam, gt, pix))
        ok = np.ones(len(X), bool)
        for s in spec.scales:
            cs = cam if s == 1.0 else cam.scaled(s)
            for pose in ref_poses:
                uv, front = project_points(cs, pose.transform(X))
                ok &= front & np.all((uv >= margin * s) & (uv <= np.array([cs.width, cs.height]) - 1 - margin * s), axis=1)
        X = X[ok][:need]
        pts.append(X)
        need -= len(X)
    if need > 0:
        raise InfeasibleSpec("reference views share too little of the query frustum")
    points = np.concatenate(pts)[: spec.n_points]

    fields, uncs = _make_fields(spec, rng, room, gt, anchors)
    query_fields = fields
    if spec.appearance_change > 0:
        # separate stream so the consistent part of the scene is unchanged
        extra, _ = _make_fields(replace(spec, field_type="random-smooth", uncertainty="zero"),
                                np.random.default_rng([spec.seed, 1]), room, gt, anchors)
        query_fields = [[ChangedField(f, e, spec.appearance_change) for f, e in zip(fs, es)]
                        for fs, es in zip(fields, extra)]
    query, refs = [], [([], pose, cam) for pose in ref_poses]
    for si, s in enumerate(spec.scales):
        cs = cam if s == 1.0 else cam.scaled(s)
        query.append(render_pyramid(query_fields[si], uncs[si], room, gt, cs, spec.strides))
        for pyrs, pose, _ in refs:
            pyrs.append(render_pyramid(fields[si], uncs[si], room, pose, cs, spec.strides))

    if spec.uncertainty == "occluder-patch":
        rect = spec.occluder_rect or (0.3 * cam.width, 0.3 * cam.height, 0.7 * cam.width, 0.7 * cam.height)
        query = [
            render_occluder(q, tuple(np.array(rect) * s), spec.occluder_uncertainty, seed=spec.seed)
            for q, s in zip(query, spec.scales)
        ]

    feats = []
    for si, s in enumerate(spec.scales):
        cs = cam if s == 1.0 else cam.scaled(s)
        feats.append(aggregate_reference(points, [(pyrs[si], pose, cs) for pyrs, pose, _ in refs]))
    scene_points = ScenePoints(points, feats)

    weights = rng.uniform(0.5, 1.0, size=len(ref_poses))
    priors = [WeightedPose(p, float(w)) for p, w in zip(ref_poses, weights)]
    return Scene(spec, scene_points, refs, gt, query, cam, diameter(points), priors,
                 room, fields, uncs)


# --- bundle serialization ------------------------------------------------------

def save_bundle(scene, out_dir):
    """Write FMAP blobs plus map/query/prior manifests; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pts_file = out / "points.bin"
    pts_file.write_bytes(np.ascontiguousarray(scene.points.points, dtype="<f4").tobytes())
    refs = []
    for k, (pyrs, pose, cam) in enumerate(scene.refs):
        blobs = []
        for si, pyr in enumerate(pyrs):
            name = f"ref{k}_s{si}.fmap"
            write_fmap(out / name, pyr)
            blobs.append(name)
        refs.append({"features": blobs, "pose": pose.to_json(), "camera": cam.to_json()})
    query_blobs = []
    for si, pyr in enumerate(scene.query):
        name = f"query_s{si}.fmap"
        write_fmap(out / name, pyr)
        query_blobs.append(name)
    map_manifest = {
        "points": "points.bin",
        "n_points": len(scene.points),
        "scales": list(scene.spec.scales),
        "references": refs,
        "spec": scene.spec.to_json(),
        "gt": scene.gt.to_json(),
        "diameter": scene.diameter,
    }
    query_manifest = {
        "features": query_blobs,
        "scales": list(scene.spec.scales),
        "camera": scene.camera.to_json(),
    }
    prior = [{"pose": wp.pose.to_json(), "weight": wp.weight} for wp in scene.priors]
    paths = {"map": out / "map.json", "query": out / "query.json", "prior": out / "prior.json",
             "gt": out / "gt.json"}
    write_json(paths["map"], map_manifest)
    write_json(paths["query"], query_manifest)
    write_json(paths["prior"], prior)
    write_json(paths["gt"], scene.gt.to_json())
    return paths


def _load_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from None
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read: {exc.strerror}") from None


@dataclass(eq=False)
class MapBundle:
    points: np.ndarray
    refs: List[Tuple[List[FeaturePyramid], Pose, Camera]]
    scales: Tuple[float, ...]
    manifest: dict

    def ref_views(self, scale_index):
        return [(pyrs[scale_index], pose, cam) for pyrs, pose, cam in self.refs]


def load_map(path):
    path = Path(path)
    m = _load_json(path)
    base = path.parent
    try:
        pts_path = base / m["points"]
        raw = pts_path.read_bytes()
        if len(raw) % 12:
            raise FormatError(pts_path, len(raw) - len(raw) % 12, "point file is not f32 triplets")
        points = np.frombuffer(raw, "<f4").astype(float).reshape(-1, 3)
        refs = []
        for i, r in enumerate(m["references"]):
            pyrs = [read_fmap(base / b) for b in r["features"]]
            refs.append((pyrs, pose_from_json(r["pose"], f"{path}:references[{i}]"),
                         Camera.from_json(r["camera"])))
        scales = tuple(m.get("scales", [1.0]))
    except (KeyError, TypeError) as exc:
        raise FormatError(path, 0, f"malformed map manifest: {exc}") from None
    return MapBundle(points, refs, scales, m)


def load_query(path):
    path = Path(path)
    m = _load_json(path)
    try:
        pyrs = [read_fmap(path.parent / b) for b in m["features"]]
        cam = Camera.from_json(m["camera"])
        scales = tuple(m.get("scales", [1.0] * len(pyrs)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, 0, f"malformed query manifest: {exc}") from None
    return pyrs, cam, scales
