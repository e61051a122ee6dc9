"""Initial poses from retrieval-style priors."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateRotationSet, FormatError
from .geometry import Pose, left_update, pose_from_json

EIGEN_TIE = 1e-9


@dataclass(frozen=True, eq=False)
class WeightedPose:
    pose: Pose
    weight: float

    def __post_init__(self):
        if not self.weight >= 0:
            raise ValueError("weights must be nonnegative")


def average_poses(candidates):
    """Weighted mean translation and weighted quaternion-average rotation.

    The rotation is the principal eigenvector of ``sum w q q^T`` over
    quaternions sign-aligned with the heaviest candidate. Raises
    DegenerateRotationSet when the top two eigenvalues tie.
    """
    candidates = list(candidates)
    w = np.array([c.weight for c in candidates], dtype=float)
    if not candidates or w.sum() <= 0:
        raise ValueError("need at least one positive weight")
    w = w / w.sum()
    quats = np.array([c.pose.quaternion() for c in candidates])
    ref = quats[int(np.argmax(w))]
    quats = np.where((quats @ ref < 0)[:, None], -quats, quats)
    M = np.einsum("n,ni,nj->ij", w, quats, quats)
    vals, vecs = np.linalg.eigh(M)
    if vals[-1] - vals[-2] <= EIGEN_TIE:
        raise DegenerateRotationSet("top eigenvalues of the quaternion scatter tie")
    q = vecs[:, -1]
    q = q / np.linalg.norm(q)
    t = np.einsum("n,ni->i", w, np.array([c.pose.t for c in candidates]))
    R = Rotation.from_quat(q, scalar_first=True).as_matrix()
    return Pose(R, t)


def average_or_best(candidates):
    """:func:`average_poses`, falling back to the heaviest pose on a tie."""
    try:
        return average_poses(candidates)
    except DegenerateRotationSet:
        return max(candidates, key=lambda c: c.weight).pose


def random_tangent(rng, rot_mag, trans_mag):
    """Rotation uniform on the sphere of radius ``rot_mag``; translation
    uniform in the ball of radius ``trans_mag``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    radius = trans_mag * rng.uniform() ** (1.0 / 3.0)
    return np.concatenate([radius * d, rot_mag * axis])


def perturb(pose, rot_mag, trans_mag, rng_seed, mask=None):
    """Left-perturb ``pose`` by a random tangent (see :func:`random_tangent`).

    ``mask``, a 6-vector of 0/1 in tangent order, zeroes the corresponding
    components after sampling; e.g. ``(1, 0, 1, 0, 1, 0)`` keeps planar
    motion (x/z translation and yaw) in the camera frame.
    """
    if rot_mag < 0 or trans_mag < 0:
        raise ValueError("magnitudes must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    delta = random_tangent(rng, rot_mag, trans_mag)
    if mask is not None:
        delta = delta * np.asarray(mask, dtype=float)
    return left_update(pose, delta)


def load_priors(path):
    """Read ``[{"pose": {...}, "weight": w}, ...]``."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from None
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read: {exc.strerror}") from None
    if not isinstance(obj, list):
        raise FormatError(path, 0, "prior file must hold a JSON list")
    out = []
    for i, item in enumerate(obj):
        try:
            out.append(WeightedPose(pose_from_json(item["pose"], f"{path}[{i}]"),
                                    float(item["weight"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, 0, f"entry {i}: {exc}") from None
    return out
