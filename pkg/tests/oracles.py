"""Independent reference implementations used by the tests.

Nothing here calls into the code under test except for plain data types, so
agreement with these is evidence rather than tautology.
"""

import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import expm


def skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp_expm(w):
    """Rotation from the matrix exponential of the skew matrix."""
    return expm(skew(np.asarray(w, dtype=float)))


def se3_exp_expm(delta):
    """4x4 transform from the matrix exponential of the twist ``(v, w)``."""
    X = np.zeros((4, 4))
    X[:3, :3] = skew(delta[3:])
    X[:3, 3] = delta[:3]
    return expm(X)


def screw_translation(v, w):
    """Translation reached by integrating the screw motion ``ds`` over ``[0, 1]``:
    ``t = int_0^1 exp(s w^) v ds``."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    val, _ = quad_vec(lambda s: so3_exp_expm(s * w) @ v, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    return val


def so3_log_trace(R):
    """Axis-angle from the trace (angle) and antisymmetric part (axis);
    valid away from angle pi."""
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(c)
    if theta < 1e-12:
        return np.zeros(3)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta * axis / (2.0 * np.sin(theta))


def homogeneous_transform(R, t, P):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return (T @ np.append(P, 1.0))[:3]


def pinhole(fx, fy, cx, cy, Pc):
    return np.array([fx * Pc[0] / Pc[2] + cx, fy * Pc[1] / Pc[2] + cy])


def central_diff(f, x, h):
    """Jacobian of ``f`` at ``x`` by central differences, shape ``f(x).shape + x.shape``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros(f0.shape + x.shape)
    for idx in np.ndindex(*x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        J[(...,) + idx] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h)
    return J


def bilinear_loop(grid, stride, p):
    """Per-point bilinear value of a ``(H, W, D)`` grid at full-resolution
    pixel ``p``, using explicit weights (no clamping; p must be interior)."""
    gx = (p[0] + 0.5) / stride - 0.5
    gy = (p[1] + 0.5) / stride - 0.5
    x0, y0 = int(np.floor(gx)), int(np.floor(gy))
    ax, ay = gx - x0, gy - y0
    out = np.zeros(grid.shape[2])
    for dx, dy, wgt in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                        (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        out += wgt * grid[y0 + dy, x0 + dx]
    return out


def dense_gn_step(J_rows, r_rows, weights):
    """Minimizer of ``sum_i w_i |r_i + J_i d|^2`` by dense least squares on
    the stacked, square-root-weighted system."""
    sw = np.sqrt(np.asarray(weights, dtype=float))
    A = np.concatenate([s * J for s, J in zip(sw, J_rows)], axis=0)
    b = np.concatenate([s * r for s, r in zip(sw, r_rows)], axis=0)
    d, *_ = np.linalg.lstsq(A, -b, rcond=None)
    return d


def gradient_mismatch(grad, fd):
    """Largest componentwise difference, relative to the largest FD component."""
    grad, fd = np.asarray(grad, dtype=float), np.asarray(fd, dtype=float)
    return float(np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12))
