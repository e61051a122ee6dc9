"""Rigid-body geometry: so(3)/SE(3) maps, poses, pinhole projection, Jacobians.

Conventions used throughout the package:

* A :class:`Pose` maps world points into the camera frame, ``Pc = R P + t``.
* Tangent vectors are ordered ``(translation xyz, rotation xyz)``.
* Pose updates compose on the left, ``T+ = exp(delta^) T``, so the derivative
  of ``Pc`` with respect to ``delta`` at zero is ``[I | -Pc^]``.
* Camera frame is x right, y down, z forward; pixel centers sit at integer
  coordinates.

Every function here also accepts :class:`featalign.dual.Dual` inputs for the
pose or tangent, which is how the learning module differentiates the unrolled
solver.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .dual import is_dual, primal
from .errors import BehindCamera, FormatError

Z_MIN = 1e-4
SMALL_ANGLE = 1e-8
# below this angle the V-matrix third coefficient uses its series (cancellation)
SERIES_ANGLE = 1e-2
ORTHO_DRIFT = 1e-12

_I3 = np.eye(3)


def hat(w):
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = w[0], w[1], w[2]
    if not is_dual(w):
        return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    o = x * 0.0
    return np.stack(
        [np.stack([o, -z, y]), np.stack([z, o, -x]), np.stack([-y, x, o])]
    )


def vee(W):
    return np.stack([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(w):
    """Rodrigues' formula; second-order Taylor expansion near zero."""
    K = hat(w)
    th2 = np.sum(w * w)
    theta = float(np.sqrt(primal(th2)))
    if theta < SMALL_ANGLE:
        return _I3 + K + 0.5 * (K @ K)
    th = np.sqrt(th2)
    a = np.sin(th) / th
    b = 2.0 * np.sin(0.5 * th) ** 2 / th2
    return _I3 + a * K + b * (K @ K)


def so3_log(R):
    """Principal rotation vector of ``R`` (norm at most pi)."""
    R = np.asarray(R, dtype=float)
    axis_sin = 0.5 * vee(R - R.T)  # sin(theta) * axis
    s = np.linalg.norm(axis_sin)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        return axis_sin
    if np.pi - theta > 1e-3:
        return axis_sin * (theta / s)
    # near pi the antisymmetric part vanishes; read the axis off R + R^T
    aat = (0.5 * (R + R.T) - c * _I3) / (1.0 - c)
    j = int(np.argmax(np.diag(aat)))
    axis = aat[:, j] / np.sqrt(aat[j, j])
    if axis @ axis_sin < 0.0:
        axis = -axis
    return theta * axis / np.linalg.norm(axis)


def _v_matrix(w, K=None):
    if K is None:
        K = hat(w)
    th2 = np.sum(w * w)
    theta = float(np.sqrt(primal(th2)))
    if theta < SMALL_ANGLE:
        return _I3 + 0.5 * K + (1.0 / 6.0) * (K @ K)
    th = np.sqrt(th2)
    b = 2.0 * np.sin(0.5 * th) ** 2 / th2
    if theta < SERIES_ANGLE:
        c = 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0 - th2 * th2 * th2 / 362880.0
    else:
        c = (th - np.sin(th)) / (th2 * th)
    return _I3 + b * K + c * (K @ K)


def se3_exp(delta):
    """Exponential of a ``(v, w)`` twist as a :class:`Pose`."""
    v, w = delta[0:3], delta[3:6]
    K = hat(w)
    return Pose(so3_exp(w), _v_matrix(w, K) @ v)


def se3_log(pose):
    w = so3_log(pose.R)
    v = np.linalg.solve(_v_matrix(w), pose.t)
    return np.concatenate([v, w])


def orthonormalize(R):
    """One Newton-Schulz polar step, applied only when ``R`` has drifted."""
    Rv = primal(R)
    drift = np.linalg.norm(Rv.T @ Rv - _I3)
    if drift <= ORTHO_DRIFT:
        return R
    return 0.5 * (R @ (3.0 * _I3 - R.T @ R))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform ``Pc = R @ P + t``."""

    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    @classmethod
    def from_quaternion(cls, q, t):
        """Build from a ``[w, x, y, z]`` quaternion (normalized here)."""
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        R = Rotation.from_quat(q, scalar_first=True).as_matrix()
        return cls(R, np.asarray(t, dtype=float))

    def quaternion(self):
        """Unit quaternion ``[w, x, y, z]`` with ``w >= 0``."""
        q = Rotation.from_matrix(primal(self.R)).as_quat(scalar_first=True)
        return q if q[0] >= 0 else -q

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = primal(self.R)
        T[:3, 3] = primal(self.t)
        return T

    def transform(self, P):
        """Map world points (``(3,)`` or ``(N, 3)``) into the camera frame."""
        if np.ndim(P) == 1:
            return self.R @ P + self.t
        return P @ self.R.T + self.t

    def inverse(self):
        Rt = self.R.T
        return Pose(Rt, -(Rt @ self.t))

    def __matmul__(self, other):
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def center(self):
        """Camera center in world coordinates."""
        return -(self.R.T @ self.t)

    def primal(self):
        return Pose(primal(self.R), primal(self.t))

    def to_json(self):
        return {"q": [float(x) for x in self.quaternion()], "t": [float(x) for x in primal(self.t)]}


def left_update(pose, delta):
    """``exp(delta^) * pose``, re-orthonormalizing the rotation if it drifted."""
    step = se3_exp(delta)
    R = orthonormalize(step.R @ pose.R)
    return Pose(R, step.R @ pose.t + step.t)


def transform(pose, P):
    return pose.transform(P)


def rotation_error(R_est, R_gt):
    """Geodesic angle between two rotations, radians."""
    c = 0.5 * (np.trace(primal(R_est).T @ primal(R_gt)) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_error(est, gt):
    """Rotation error (degrees) and camera-center distance (scene units)."""
    rot = np.degrees(rotation_error(est.R, gt.R))
    dist = float(np.linalg.norm(primal(est.center()) - primal(gt.center())))
    return rot, dist


def pose_from_json(obj, source="<pose>"):
    try:
        q = np.asarray(obj["q"], dtype=float)
        t = np.asarray(obj["t"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(source, 0, f"pose needs 'q' and 't': {exc}") from None
    if q.shape != (4,) or t.shape != (3,):
        raise FormatError(source, 0, "pose 'q' must have 4 entries and 't' 3")
    if abs(np.linalg.norm(q) - 1.0) > 1e-3:
        raise FormatError(source, 0, f"quaternion norm {np.linalg.norm(q):.6f} is not 1")
    return Pose.from_quaternion(q, t)


def load_pose(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from None
    return pose_from_json(obj, path)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def scaled(self, s):
        """Intrinsics of the image resized by factor ``s`` (pixel-center aligned)."""
        return Camera(
            self.fx * s,
            self.fy * s,
            (self.cx + 0.5) * s - 0.5,
            (self.cy + 0.5) * s - 0.5,
            max(1, int(round(self.width * s))),
            max(1, int(round(self.height * s))),
        )

    def to_json(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
            int(obj["width"]), int(obj["height"]),
        )


def project(cam, Pc):
    """Pixel coordinates of one camera-frame point; raises BehindCamera."""
    z = Pc[2]
    if not primal(z) > Z_MIN:
        raise BehindCamera(f"depth {float(primal(z)):.3g} <= z_min")
    return np.stack([cam.fx * Pc[0] / z + cam.cx, cam.fy * Pc[1] / z + cam.cy])


def project_points(cam, Pc):
    """Vectorized projection of ``(N, 3)`` points.

    Returns ``(uv, in_front)``; rows that fail the depth test carry
    meaningless but finite pixel values.
    """
    z = Pc[:, 2]
    in_front = primal(z) > Z_MIN
    z = np.where(in_front, z, 1.0)
    u = cam.fx * Pc[:, 0] / z + cam.cx
    v = cam.fy * Pc[:, 1] / z + cam.cy
    return np.stack([u, v], axis=-1), in_front


def projection_jacobian(cam, Pc):
    """2x3 derivative of ``project`` with respect to the camera-frame point."""
    x, y, z = Pc[0], Pc[1], Pc[2]
    if not primal(z) > Z_MIN:
        raise BehindCamera(f"depth {float(primal(z)):.3g} <= z_min")
    iz = 1.0 / z
    o = x * 0.0
    return np.stack([
        np.stack([cam.fx * iz, o, -cam.fx * x * iz * iz]),
        np.stack([o, cam.fy * iz, -cam.fy * y * iz * iz]),
    ])


def pose_point_jacobian(cam, pose, P):
    """2x6 derivative of the projection of ``P`` under a left pose update."""
    Pc = pose.transform(P)
    Jp = projection_jacobian(cam, Pc)
    return np.concatenate([Jp, -(Jp @ hat(Pc))], axis=1)


def point_jacobians(cam, Pc):
    """``(N, 2, 6)`` pixel Jacobians for camera-frame points (closed form).

    Depth validity is the caller's business (see ``project_points``).
    """
    x, y = Pc[:, 0], Pc[:, 1]
    z = np.where(primal(Pc[:, 2]) > Z_MIN, Pc[:, 2], 1.0)
    iz = 1.0 / z
    xz, yz = x * iz, y * iz
    fx, fy = cam.fx, cam.fy
    if not is_dual(Pc):
        J = np.zeros((len(x), 2, 6))
        J[:, 0, 0] = fx * iz
        J[:, 0, 2] = -fx * xz * iz
        J[:, 0, 3] = -fx * xz * yz
        J[:, 0, 4] = fx * (1.0 + xz * xz)
        J[:, 0, 5] = -fx * yz
        J[:, 1, 1] = fy * iz
        J[:, 1, 2] = -fy * yz * iz
        J[:, 1, 3] = -fy * (1.0 + yz * yz)
        J[:, 1, 4] = fy * xz * yz
        J[:, 1, 5] = fy * xz
        return J
    o = x * 0.0
    du = np.stack([fx * iz, o, -fx * xz * iz, -fx * xz * yz, fx * (1.0 + xz * xz), -fx * yz], axis=-1)
    dv = np.stack([o, fy * iz, -fy * yz * iz, -fy * (1.0 + yz * yz), fy * xz * yz, fy * xz], axis=-1)
    return np.stack([du, dv], axis=1)
