"""Multi-level feature grids, sub-pixel lookup, and reference aggregation.

Grid convention: cell ``(i, j)`` of a level with stride ``s`` is centered on
full-resolution pixel ``((i + 0.5) s - 0.5, (j + 0.5) s - 0.5)``. A level of
``W x H`` cells therefore covers an image of ``W s x H s`` pixels. Arrays are
stored row-major and channel-last: ``features[y, x, c]``.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .dual import primal
from .errors import EmptyModel, FormatError
from .geometry import project_points

BORDER_MARGIN = 2.0
_NORM_EPS = 1e-12


def confidence_from_uncertainty(u):
    """Map a nonnegative uncertainty to a confidence in ``[0, 1]``."""
    return 1.0 / (1.0 + u)


@dataclass(frozen=True, eq=False)
class FeatureLevel:
    features: np.ndarray  # (H, W, D)
    uncertainty: np.ndarray  # (H, W)
    stride: float

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValueError("features must be (H, W, D)")
        if self.uncertainty.shape != self.features.shape[:2]:
            raise ValueError("uncertainty must be (H, W) matching the features")
        if self.features.shape[0] < 2 or self.features.shape[1] < 2:
            raise ValueError("a level needs at least 2x2 cells for bilinear lookup")
        if np.any(self.uncertainty < 0):
            raise ValueError("uncertainty must be nonnegative")

    @property
    def height(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    @property
    def dim(self):
        return self.features.shape[2]

    @property
    def image_size(self):
        """Full-resolution (width, height) in pixels covered by the grid."""
        return self.width * self.stride, self.height * self.stride

    def cell_centers(self):
        """Full-resolution pixel coordinates of every cell center, ``(H, W, 2)``."""
        xs = (np.arange(self.width) + 0.5) * self.stride - 0.5
        ys = (np.arange(self.height) + 0.5) * self.stride - 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Levels ordered coarse to fine (strictly decreasing stride)."""

    levels: List[FeatureLevel]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        strides = [lv.stride for lv in self.levels]
        if any(a <= b for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must strictly decrease, got {strides}")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def normalized(self):
        return FeaturePyramid([normalize_channels(lv) for lv in self.levels])


def normalize_channels(level):
    f = level.features
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    out = np.where(norm < _NORM_EPS, 0.0, f / np.where(norm < _NORM_EPS, 1.0, norm))
    return FeatureLevel(out, level.uncertainty, level.stride)


@dataclass
class Lookup:
    """Batched bilinear lookup result for ``N`` query pixels."""

    feature: object  # (N, D)
    grad: object  # (N, 2, D), d feature / d (x, y) in full-resolution pixels
    uncertainty: object  # (N,)
    valid: np.ndarray  # (N,) bool
    cell: np.ndarray  # (N, 2) int, lower-left cell index (x, y)
    frac: np.ndarray  # (N, 2) primal fractional offsets inside the cell


# Bilinear weights over corners (00, 10, 01, 11) as a polynomial in the
# cell offsets: W = C0 + fx C1 + fy C2 + fx fy C3. Row 0 interpolates the
# value, rows 1 and 2 its derivative along x and y (in cell units).
_C = np.array([
    [[1, 0, 0, 0], [-1, 1, 0, 0], [-1, 0, 1, 0]],
    [[-1, 1, 0, 0], [0, 0, 0, 0], [1, -1, -1, 1]],
    [[-1, 0, 1, 0], [1, -1, -1, 1], [0, 0, 0, 0]],
    [[1, -1, -1, 1], [0, 0, 0, 0], [0, 0, 0, 0]],
], dtype=float).transpose(1, 0, 2)  # (3 rows, 4 terms, 4 corners)
_C0, _C1, _C2, _C3 = (_C[:, k, :] for k in range(4))


def sample(level, p, margin=BORDER_MARGIN):
    """Bilinear lookup of features, spatial gradients, and uncertainty.

    ``p`` is ``(N, 2)`` full-resolution pixels (plain array or Dual). Points
    outside the image, or within ``margin`` pixels of its border, come back
    with ``valid=False``; their payload is still finite but meaningless.
    Coordinates beyond the outermost cell centers are clamped, so the
    surface is constant there and its gradient is zero along the clamped
    axis.
    """
    s = level.stride
    W, H = level.width, level.height
    img_w, img_h = level.image_size
    pv = primal(p)
    finite = np.isfinite(pv)
    if not finite.all():
        pv = np.where(finite, pv, -np.inf)
    x, y = pv[:, 0], pv[:, 1]
    valid = (x >= margin) & (x <= img_w - 1.0 - margin) & (y >= margin) & (y <= img_h - 1.0 - margin)

    g = (p + 0.5) / s - 0.5
    gv = (pv + 0.5) / s - 0.5
    hi = np.array([W - 1.0, H - 1.0])
    clamped = (gv < 0.0) | (gv > hi)
    if clamped.any():
        g = np.where(clamped, np.clip(gv, 0.0, hi), g)
        gv = np.clip(gv, 0.0, hi)
    i0 = np.minimum(gv.astype(np.int64), np.array([W - 2, H - 2]))
    frac = g - i0
    fx, fy = frac[:, 0:1, None], frac[:, 1:2, None]

    scale = np.where(clamped, 0.0, 1.0 / s)
    row_scale = np.concatenate([np.ones((len(pv), 1)), scale], axis=1)[:, :, None]
    weights = (_C0 + fx * _C1 + fy * _C2 + (fx * fy) * _C3) * row_scale  # (N, 3, 4)
    corners = (i0[:, 1] * W + i0[:, 0])[:, None] + np.array([0, 1, W, W + 1])
    out = weights @ level.features.reshape(-1, level.dim)[corners]  # (N, 3, D)
    unc = np.sum(weights[:, 0, :] * level.uncertainty.reshape(-1)[corners], axis=-1)
    return Lookup(out[:, 0, :], out[:, 1:, :], unc, valid, i0, primal(frac))


def interpolate(level, p, margin=BORDER_MARGIN):
    """Single-pixel lookup: ``(feature, grad, uncertainty, valid)``.

    Invalid lookups return zeros and ``valid=False``.
    """
    p = np.asarray(p, dtype=float).reshape(1, 2)
    res = sample(level, p, margin)
    if not res.valid[0]:
        return np.zeros(level.dim), np.zeros((level.dim, 2)), 0.0, False
    return res.feature[0], res.grad[0].T, float(res.uncertainty[0]), True


@dataclass(eq=False)
class LevelDescriptors:
    """Aggregated reference descriptors of every point at one level."""

    desc: np.ndarray  # (N, D) unit rows where valid
    conf: np.ndarray  # (N,) in [0, 1]
    valid: np.ndarray  # (N,) bool


@dataclass(eq=False)
class PointFeatures:
    levels: List[LevelDescriptors] = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def aggregate_reference(points, refs, top_k: Optional[int] = None, margin=BORDER_MARGIN):
    """Confidence-weighted average of reference features at each point.

    ``refs`` is a sequence of ``(pyramid, pose, camera)`` in retrieval order;
    only the first ``top_k`` are used when given. Per level, the descriptor is
    ``sum(u_k F_k) / sum(u_k)`` over valid observations, renormalized, and the
    confidence is the largest ``u_k``. A point with no valid observation at a
    level is marked invalid there. Raises EmptyModel when no point is valid
    at any level.
    """
    points = np.asarray(points, dtype=float)
    refs = list(refs)[: top_k if top_k else None]
    if not refs:
        raise EmptyModel("no reference views")
    n_levels = len(refs[0][0])
    if any(len(pyr) != n_levels for pyr, _, _ in refs):
        raise ValueError("reference pyramids disagree on the number of levels")
    out = []
    for li in range(n_levels):
        dim = refs[0][0][li].dim
        acc = np.zeros((len(points), dim))
        wsum = np.zeros(len(points))
        umax = np.zeros(len(points))
        for pyr, pose, cam in refs:
            uv, in_front = project_points(cam, pose.transform(points))
            look = sample(pyr[li], uv, margin)
            ok = look.valid & in_front
            u = np.where(ok, confidence_from_uncertainty(look.uncertainty), 0.0)
            acc += u[:, None] * np.where(ok[:, None], look.feature, 0.0)
            wsum += u
            umax = np.maximum(umax, u)
        mean = acc / np.where(wsum > 0, wsum, 1.0)[:, None]
        norm = np.linalg.norm(mean, axis=1)
        valid = (wsum > 0) & (norm > _NORM_EPS)
        desc = np.where(valid[:, None], mean / np.where(valid, norm, 1.0)[:, None], 0.0)
        out.append(LevelDescriptors(desc, np.where(valid, umax, 0.0), valid))
    if not any(lv.valid.any() for lv in out):
        raise EmptyModel("no point has a valid reference observation")
    return PointFeatures(out)


# --- FMAP binary format ------------------------------------------------------

_MAGIC = b"FMAP"
_VERSION = 1


def write_fmap(path, pyramid):
    """Little-endian: magic, u32 version, u32 L, then per level u32 W, H, D,
    f32 stride, W*H*D f32 features (row-major, channel-last), W*H f32
    uncertainties."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(pyramid)))
        for lv in pyramid.levels:
            fh.write(struct.pack("<IIIf", lv.width, lv.height, lv.dim, lv.stride))
            fh.write(np.ascontiguousarray(lv.features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(lv.uncertainty, dtype="<f4").tobytes())


def read_fmap(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read: {exc.strerror}") from None
    if data[:4] != _MAGIC:
        raise FormatError(path, 0, "missing FMAP magic")
    off = 4
    if len(data) < off + 8:
        raise FormatError(path, off, "truncated header")
    version, n_levels = struct.unpack_from("<II", data, off)
    if version != _VERSION:
        raise FormatError(path, off, f"unsupported version {version}")
    off += 8
    levels = []
    for _ in range(n_levels):
        if len(data) < off + 16:
            raise FormatError(path, off, "truncated level header")
        W, H, D, stride = struct.unpack_from("<IIIf", data, off)
        off += 16
        n_feat, n_unc = W * H * D * 4, W * H * 4
        if len(data) < off + n_feat + n_unc:
            raise FormatError(path, off, "truncated level payload")
        feats = np.frombuffer(data, "<f4", W * H * D, off).astype(float).reshape(H, W, D)
        off += n_feat
        unc = np.frombuffer(data, "<f4", W * H, off).astype(float).reshape(H, W)
        off += n_unc
        try:
            levels.append(FeatureLevel(feats, unc, float(stride)))
        except ValueError as exc:
            raise FormatError(path, off - n_feat - n_unc, str(exc)) from None
    if off != len(data):
        raise FormatError(path, off, "trailing bytes after last level")
    try:
        return FeaturePyramid(levels)
    except ValueError as exc:
        raise FormatError(path, 12, str(exc)) from None
