"""Forward-mode dual arrays.

A :class:`Dual` carries a primal array ``val`` together with ``K`` stacked
tangents ``tan`` of shape ``(K,) + val.shape``. Seeding ``K`` input
directions at once gives the full Jacobian of a computation with respect to
those inputs in a single forward pass.

Duals plug into numpy through ``__array_ufunc__`` and ``__array_function__``,
so code written against plain numpy (``np.sin``, ``np.einsum``, ``@``,
indexing, ``np.where``) runs unchanged on them. Only the operations listed in
``_UFUNCS`` and ``_FUNCTIONS`` are supported; anything else raises
``TypeError`` rather than silently dropping tangents.

Comparisons and ``np.floor`` act on the primal and return plain arrays. This
is what makes branchy numerical code (validity masks, small-angle branches,
bilinear cell selection) differentiable piecewise.
"""

import string

import numpy as np
import scipy.linalg


class Dual:
    __array_priority__ = 100

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        tan = np.asarray(tan, dtype=float)
        if tan.shape[1:] != self.val.shape:
            tan = np.broadcast_to(tan, tan.shape[:1] + self.val.shape).copy()
        self.tan = tan

    @classmethod
    def seed(cls, val):
        """Dual whose tangents are the canonical basis over every entry of ``val``."""
        val = np.asarray(val, dtype=float)
        n = val.size
        return cls(val, np.eye(n).reshape((n,) + val.shape))

    @property
    def nseeds(self):
        return self.tan.shape[0]

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def size(self):
        return self.val.size

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, nseeds={self.nseeds})"

    def __array__(self, dtype=None, copy=None):
        raise TypeError("Dual cannot be converted to a plain ndarray; use primal()")

    def __float__(self):
        return float(self.val)

    # operators route through the ufunc machinery
    def __add__(self, o):
        return np.add(self, o)

    def __radd__(self, o):
        return np.add(o, self)

    def __sub__(self, o):
        return np.subtract(self, o)

    def __rsub__(self, o):
        return np.subtract(o, self)

    def __mul__(self, o):
        return np.multiply(self, o)

    def __rmul__(self, o):
        return np.multiply(o, self)

    def __truediv__(self, o):
        return np.true_divide(self, o)

    def __rtruediv__(self, o):
        return np.true_divide(o, self)

    def __matmul__(self, o):
        return np.matmul(self, o)

    def __rmatmul__(self, o):
        return np.matmul(o, self)

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __pos__(self):
        return self

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("Dual exponents are not supported")
        p = float(p)
        if p == 2.0:
            return np.square(self)
        return Dual(self.val**p, p * self.val ** (p - 1.0) * self.tan)

    def __lt__(self, o):
        return self.val < primal(o)

    def __le__(self, o):
        return self.val <= primal(o)

    def __gt__(self, o):
        return self.val > primal(o)

    def __ge__(self, o):
        return self.val >= primal(o)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.tan[(slice(None),) + idx])

    @property
    def T(self):
        return np.transpose(self)

    def sum(self, axis=None):
        return np.sum(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return np.reshape(self, shape)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        if ufunc in _PRIMAL_ONLY:
            return ufunc(*(primal(x) for x in inputs), **kwargs)
        rule = _UFUNCS.get(ufunc)
        if rule is None:
            raise TypeError(f"ufunc {ufunc.__name__} is not supported on Dual")
        return rule(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        rule = _FUNCTIONS.get(func)
        if rule is None:
            raise TypeError(f"{func.__name__} is not supported on Dual")
        return rule(*args, **kwargs)


def primal(x):
    return x.val if isinstance(x, Dual) else x


def tangent(x):
    return x.tan if isinstance(x, Dual) else None


def is_dual(x):
    return isinstance(x, Dual)


def _nseeds(*xs):
    for x in xs:
        if isinstance(x, Dual):
            return x.nseeds
    raise TypeError("no Dual operand")


def _lift(t, ndim):
    """Insert singleton axes after the seed axis so ``t`` broadcasts at ``ndim``."""
    extra = ndim - (t.ndim - 1)
    if extra > 0:
        t = t.reshape(t.shape[:1] + (1,) * extra + t.shape[1:])
    return t


def _full_tan(x, shape, k):
    if isinstance(x, Dual):
        return np.broadcast_to(_lift(x.tan, len(shape)), (k,) + shape)
    return np.zeros((k,) + shape)


def _combine(val, *terms):
    """Dual from a primal and a sum of (possibly None) tangent contributions."""
    val = np.asarray(val, dtype=float)
    total = None
    for term in terms:
        if term is None:
            continue
        term = _lift(term, val.ndim)
        total = term if total is None else total + term
    return Dual(val, np.broadcast_to(total, total.shape[:1] + val.shape))


def _add(a, b):
    av, bv = primal(a), primal(b)
    out = np.add(av, bv)
    return _combine(out, tangent(a), tangent(b))


def _sub(a, b):
    av, bv = primal(a), primal(b)
    out = np.subtract(av, bv)
    tb = tangent(b)
    return _combine(out, tangent(a), None if tb is None else -tb)


def _mul(a, b):
    av, bv = primal(a), primal(b)
    out = np.multiply(av, bv)
    nd = np.ndim(out)
    terms = []
    if isinstance(a, Dual):
        terms.append(_lift(a.tan, nd) * bv)
    if isinstance(b, Dual):
        terms.append(av * _lift(b.tan, nd))
    return _combine(out, *terms)


def _div(a, b):
    av, bv = primal(a), primal(b)
    out = np.true_divide(av, bv)
    nd = np.ndim(out)
    terms = []
    if isinstance(a, Dual):
        terms.append(_lift(a.tan, nd) / bv)
    if isinstance(b, Dual):
        terms.append(-_lift(b.tan, nd) * (out / bv))
    return _combine(out, *terms)


def _unary(f, df):
    def rule(a):
        out = f(a.val)
        return Dual(out, df(a.val, out) * a.tan)

    return rule


def _matmul(a, b):
    av, bv = primal(a), primal(b)
    squeeze = None
    if np.ndim(bv) == 1:
        bv = bv[:, None]
        if isinstance(b, Dual):
            b = Dual(b.val[:, None], b.tan[..., None])
        squeeze = -1
    if np.ndim(av) == 1:
        av = av[None, :]
        if isinstance(a, Dual):
            a = Dual(a.val[None, :], a.tan[..., None, :])
        squeeze = -2 if squeeze is None else (-2, -1)
    out = av @ bv
    nd = out.ndim
    terms = []
    if isinstance(a, Dual):
        terms.append(_lift(a.tan, nd) @ bv)
    if isinstance(b, Dual):
        terms.append(av @ _lift(b.tan, nd))
    res = _combine(out, *terms)
    if squeeze is not None:
        axes = squeeze if isinstance(squeeze, tuple) else (squeeze,)
        res = Dual(np.squeeze(res.val, axis=axes), np.squeeze(res.tan, axis=axes))
    return res


def _pick(mask_a):
    def rule(a, b):
        av, bv = primal(a), primal(b)
        out = np.where(mask_a(av, bv), av, bv)
        k = _nseeds(a, b)
        shape = np.shape(out)
        ta = _full_tan(a, shape, k)
        tb = _full_tan(b, shape, k)
        return Dual(out, np.where(mask_a(av, bv), ta, tb))

    return rule


_UFUNCS = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.true_divide: _div,
    np.matmul: _matmul,
    np.negative: lambda a: -a,
    np.positive: lambda a: a,
    np.sin: _unary(np.sin, lambda x, y: np.cos(x)),
    np.cos: _unary(np.cos, lambda x, y: -np.sin(x)),
    np.sqrt: _unary(np.sqrt, lambda x, y: 0.5 / y),
    np.exp: _unary(np.exp, lambda x, y: y),
    np.log: _unary(np.log, lambda x, y: 1.0 / x),
    np.log1p: _unary(np.log1p, lambda x, y: 1.0 / (1.0 + x)),
    np.square: _unary(np.square, lambda x, y: 2.0 * x),
    np.reciprocal: _unary(np.reciprocal, lambda x, y: -y * y),
    np.absolute: _unary(np.absolute, lambda x, y: np.sign(x)),
    np.maximum: _pick(lambda a, b: a >= b),
    np.minimum: _pick(lambda a, b: a <= b),
}

_PRIMAL_ONLY = {
    np.greater,
    np.greater_equal,
    np.less,
    np.less_equal,
    np.equal,
    np.not_equal,
    np.floor,
    np.ceil,
    np.isfinite,
    np.isnan,
    np.sign,
    np.logical_and,
    np.logical_or,
    np.logical_not,
}


def _axis_shift(axis):
    if axis is None:
        return None
    if isinstance(axis, tuple):
        return tuple(a + 1 if a >= 0 else a for a in axis)
    return axis + 1 if axis >= 0 else axis


def _sum(a, axis=None, keepdims=False):
    val = np.sum(a.val, axis=axis, keepdims=keepdims)
    if axis is None:
        axis_t = tuple(range(1, a.tan.ndim))
    else:
        axis_t = _axis_shift(axis)
    return Dual(val, np.sum(a.tan, axis=axis_t, keepdims=keepdims))


def _mean(a, axis=None, keepdims=False):
    s = _sum(a, axis=axis, keepdims=keepdims)
    return s / (a.val.size / s.val.size)


def _free_letter(spec):
    for c in string.ascii_letters:
        if c not in spec:
            return c
    raise ValueError("no free einsum subscript")


def _einsum(spec, *operands, **kwargs):
    kwargs.setdefault("optimize", True)
    if "->" not in spec:
        raise ValueError("Dual einsum needs an explicit output subscript")
    ins, out = spec.split("->")
    ins = ins.split(",")
    z = _free_letter(spec)
    vals = [primal(o) for o in operands]
    val = np.einsum(spec, *vals, **kwargs)
    terms = []
    for i, op in enumerate(operands):
        if not isinstance(op, Dual):
            continue
        sub = list(ins)
        sub[i] = z + sub[i]
        ops = list(vals)
        ops[i] = op.tan
        terms.append(np.einsum(",".join(sub) + "->" + z + out, *ops, **kwargs))
    return _combine(val, *terms)


def _stack(arrays, axis=0):
    arrays = list(arrays)
    k = _nseeds(*arrays)
    vals = [np.asarray(primal(a), dtype=float) for a in arrays]
    val = np.stack(vals, axis=axis)
    tans = [_full_tan(a, v.shape, k) for a, v in zip(arrays, vals)]
    return Dual(val, np.stack(tans, axis=_axis_shift(axis)))


def _concatenate(arrays, axis=0):
    arrays = list(arrays)
    k = _nseeds(*arrays)
    vals = [np.asarray(primal(a), dtype=float) for a in arrays]
    val = np.concatenate(vals, axis=axis)
    tans = [_full_tan(a, v.shape, k) for a, v in zip(arrays, vals)]
    return Dual(val, np.concatenate(tans, axis=_axis_shift(axis)))


def _where(cond, a, b):
    cond = np.asarray(primal(cond), dtype=bool)
    av, bv = primal(a), primal(b)
    val = np.where(cond, av, bv)
    k = _nseeds(a, b)
    shape = val.shape
    return Dual(val, np.where(cond, _full_tan(a, shape, k), _full_tan(b, shape, k)))


def _transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return Dual(np.transpose(a.val, axes), np.transpose(a.tan, (0,) + tuple(x + 1 for x in axes)))


def _swapaxes(a, i, j):
    return Dual(np.swapaxes(a.val, i, j), np.swapaxes(a.tan, _axis_shift(i), _axis_shift(j)))


def _reshape(a, shape, **kwargs):
    if isinstance(shape, int):
        shape = (shape,)
    val = np.reshape(a.val, shape)
    return Dual(val, np.reshape(a.tan, (a.nseeds,) + val.shape))


def _diagonal(a, offset=0, axis1=0, axis2=1):
    return Dual(
        np.diagonal(a.val, offset, axis1, axis2),
        np.diagonal(a.tan, offset, _axis_shift(axis1), _axis_shift(axis2)),
    )


def _expand_dims(a, axis):
    return Dual(np.expand_dims(a.val, axis), np.expand_dims(a.tan, _axis_shift(axis)))


def _broadcast_to(a, shape):
    return Dual(np.broadcast_to(a.val, shape), np.broadcast_to(_lift(a.tan, len(shape)), (a.nseeds,) + tuple(shape)))


def _zeros_like(a, *args, **kwargs):
    return np.zeros_like(a.val, *args, **kwargs)


def _ones_like(a, *args, **kwargs):
    return np.ones_like(a.val, *args, **kwargs)


def _clip(a, lo, hi):
    lo_mask = a.val < lo
    hi_mask = a.val > hi
    val = np.clip(a.val, lo, hi)
    tan = np.where(lo_mask | hi_mask, 0.0, a.tan)
    return Dual(val, tan)


_FUNCTIONS = {
    np.sum: _sum,
    np.mean: _mean,
    np.einsum: _einsum,
    np.stack: _stack,
    np.concatenate: _concatenate,
    np.where: _where,
    np.transpose: _transpose,
    np.swapaxes: _swapaxes,
    np.reshape: _reshape,
    np.diagonal: _diagonal,
    np.expand_dims: _expand_dims,
    np.broadcast_to: _broadcast_to,
    np.zeros_like: _zeros_like,
    np.ones_like: _ones_like,
    np.clip: _clip,
    np.shape: lambda a: a.val.shape,
    np.ndim: lambda a: a.val.ndim,
}


def spd_solve(A, b):
    """Solve ``A x = b`` for symmetric positive-definite ``A`` by Cholesky.

    Either argument may be a :class:`Dual`; tangents follow
    ``dx = A^{-1} (db - dA x)``. Raises ``numpy.linalg.LinAlgError`` when the
    factorization fails.
    """
    Av, bv = primal(A), primal(b)
    factor = scipy.linalg.cho_factor(Av, lower=True, check_finite=False)
    x = scipy.linalg.cho_solve(factor, bv, check_finite=False)
    if not (isinstance(A, Dual) or isinstance(b, Dual)):
        return x
    k = _nseeds(A, b)
    rhs = _full_tan(b, bv.shape, k).copy()
    if isinstance(A, Dual):
        rhs -= np.einsum("kij,j->ki", A.tan, x)
    tx = scipy.linalg.cho_solve(factor, rhs.T, check_finite=False).T
    return Dual(x, tx)
