"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records one forward computation as a flat list of nodes in
topological order.  Every operation evaluates eagerly and registers a
vector-Jacobian product for the backward sweep, so ``backward`` is a single
reverse pass that touches each node exactly once.  Gradients are accumulated
into named parameters registered on the tape.

Conventions:

* one tape per training iteration; graphs are rebuilt every step,
* subgradient 0 at kinks (relu/abs), ties in min/max broken toward the
  first operand,
* broadcasting follows numpy for the shapes this library actually uses
  (scalars, vectors, matrices, small batched arrays); incompatible shapes
  are rejected with both shapes named,
* backward is deterministic: nodes are visited in reverse creation order
  and accumulation order is fixed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import signal


class TapeError(ValueError):
    """Raised for malformed tape operations (shape mismatch, bad domain)."""


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise TapeError(f"incompatible shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Value:
    """Handle to one node of a tape: an id plus cached forward data."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.id = nid

    @property
    def data(self) -> np.ndarray:
        return self.tape._data[self.id]

    @property
    def shape(self) -> tuple:
        return self.tape._data[self.id].shape

    @property
    def ndim(self) -> int:
        return self.tape._data[self.id].ndim

    def item(self) -> float:
        return float(self.tape._data[self.id])

    def __repr__(self):
        return f"Value(id={self.id}, shape={self.shape})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __pow__(self, p):
        return self.tape.power(self, p)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)

    # -- method sugar for common unary ops -----------------------------

    def sum(self, axis=None):
        return self.tape.sum(self, axis=axis)

    def mean(self, axis=None):
        return self.tape.mean(self, axis=axis)

    def exp(self):
        return self.tape.exp(self)

    def log(self):
        return self.tape.log(self)

    def sqrt(self):
        return self.tape.sqrt(self)

    def abs(self):
        return self.tape.abs(self)

    def relu(self):
        return self.tape.relu(self)

    def sigmoid(self):
        return self.tape.sigmoid(self)

    def norm(self, axis=None, keepdims=False):
        return self.tape.norm(self, axis=axis, keepdims=keepdims)

    def normalize(self, axis=-1):
        return self.tape.normalize(self, axis=axis)

    def transpose(self):
        return self.tape.transpose(self)

    @property
    def T(self):
        return self.tape.transpose(self)

    def reshape(self, shape):
        return self.tape.reshape(self, shape)

    def detach(self):
        return self.tape.constant(self.data)


class Tape:
    """Ordered record of one differentiable computation.

    Nodes are appended in topological order (inputs always precede
    consumers).  Parameters are named leaves; after :meth:`backward` the
    accumulator ``grads[name]`` holds d(root)/d(param).
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._data: list[np.ndarray] = []
        self._parents: list[tuple] = []
        self._vjps: list[tuple] = []
        self._ops: list[str] = []
        self._params: dict[str, int] = {}
        self._sweep = 0
        self.grads: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self._data)

    # -- node construction ---------------------------------------------

    def _push(self, op: str, data: np.ndarray,
              parents: Sequence[int] = (),
              vjps: Sequence[Callable] = ()) -> Value:
        self._data.append(data)
        self._parents.append(tuple(parents))
        self._vjps.append(tuple(vjps))
        self._ops.append(op)
        return Value(self, len(self._data) - 1)

    def constant(self, x) -> Value:
        return self._push("const", np.asarray(x, dtype=self.dtype))

    def parameter(self, name: str, x) -> Value:
        if name in self._params:
            raise TapeError(f"parameter {name!r} already registered")
        v = self._push("param", np.asarray(x, dtype=self.dtype))
        self._params[name] = v.id
        self.grads[name] = np.zeros_like(v.data)
        return v

    def _coerce(self, x) -> Value:
        if isinstance(x, Value):
            if x.tape is not self:
                raise TapeError("value belongs to a different tape")
            return x
        return self.constant(x)

    def custom(self, op: str, data, parents: Sequence[Value],
               vjp: Callable[[np.ndarray], Sequence[np.ndarray]]) -> Value:
        """Register an externally computed op with a joint VJP.

        `vjp(upstream)` must return one gradient array (or None) per parent,
        each matching that parent's shape.
        """
        parents = [self._coerce(p) for p in parents]
        pids = [p.id for p in parents]
        out = np.asarray(data, dtype=self.dtype)
        cache: dict = {}

        # The backward sweep calls every vjp of a node consecutively with the
        # same upstream gradient within one sweep, so the joint result is
        # computed once per sweep and split across the per-parent slots.
        def split(i):
            def f(g):
                sweep = self._sweep
                if cache.get("sweep") != sweep:
                    cache["sweep"] = sweep
                    cache["grads"] = vjp(g)
                gi = cache["grads"][i]
                return None if gi is None else np.asarray(gi, dtype=self.dtype)
            return f

        return self._push(op, out, pids, [split(i) for i in range(len(pids))])

    # -- elementwise binary ops ------------------------------------------

    def add(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        _broadcast_shape(a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._push("add", a.data + b.data, (a.id, b.id),
                          (lambda g: _unbroadcast(g, sa),
                           lambda g: _unbroadcast(g, sb)))

    def sub(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        _broadcast_shape(a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._push("sub", a.data - b.data, (a.id, b.id),
                          (lambda g: _unbroadcast(g, sa),
                           lambda g: _unbroadcast(-g, sb)))

    def mul(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        _broadcast_shape(a.shape, b.shape)
        ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
        return self._push("mul", ad * bd, (a.id, b.id),
                          (lambda g: _unbroadcast(g * bd, sa),
                           lambda g: _unbroadcast(g * ad, sb)))

    def div(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        _broadcast_shape(a.shape, b.shape)
        ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
        return self._push("div", ad / bd, (a.id, b.id),
                          (lambda g: _unbroadcast(g / bd, sa),
                           lambda g: _unbroadcast(-g * ad / (bd * bd), sb)))

    def minimum(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        _broadcast_shape(a.shape, b.shape)
        take_a = a.data <= b.data  # tie goes to the first operand
        sa, sb = a.shape, b.shape
        return self._push("min", np.minimum(a.data, b.data), (a.id, b.id),
                          (lambda g: _unbroadcast(g * take_a, sa),
                           lambda g: _unbroadcast(g * ~take_a, sb)))

    def maximum(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        _broadcast_shape(a.shape, b.shape)
        take_a = a.data >= b.data  # tie goes to the first operand
        sa, sb = a.shape, b.shape
        return self._push("max", np.maximum(a.data, b.data), (a.id, b.id),
                          (lambda g: _unbroadcast(g * take_a, sa),
                           lambda g: _unbroadcast(g * ~take_a, sb)))

    def clamp_min(self, a, floor: float) -> Value:
        return self.maximum(a, self.constant(floor))

    # -- elementwise unary ops --------------------------------------------

    def neg(self, a) -> Value:
        a = self._coerce(a)
        return self._push("neg", -a.data, (a.id,), (lambda g: -g,))

    def exp(self, a) -> Value:
        a = self._coerce(a)
        out = np.exp(a.data)
        return self._push("exp", out, (a.id,), (lambda g: g * out,))

    def log(self, a) -> Value:
        a = self._coerce(a)
        if np.any(a.data <= 0):
            raise TapeError("log of non-positive operand")
        ad = a.data
        return self._push("log", np.log(ad), (a.id,), (lambda g: g / ad,))

    def sqrt(self, a) -> Value:
        a = self._coerce(a)
        if np.any(a.data < 0):
            raise TapeError("sqrt of negative operand")
        out = np.sqrt(a.data)
        return self._push("sqrt", out, (a.id,), (lambda g: g * 0.5 / out,))

    def power(self, a, p: float) -> Value:
        a = self._coerce(a)
        p = float(p)
        ad = a.data
        out = ad ** p
        return self._push("pow", out, (a.id,),
                          (lambda g: g * p * ad ** (p - 1.0),))

    def abs(self, a) -> Value:
        a = self._coerce(a)
        s = np.sign(a.data)  # sign(0) = 0: subgradient at the kink
        return self._push("abs", np.abs(a.data), (a.id,), (lambda g: g * s,))

    def relu(self, a) -> Value:
        a = self._coerce(a)
        mask = a.data > 0
        return self._push("relu", a.data * mask, (a.id,),
                          (lambda g: g * mask,))

    def sigmoid(self, a) -> Value:
        a = self._coerce(a)
        ad = a.data
        out = np.empty_like(ad)
        pos = ad >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        out[~pos] = e / (1.0 + e)
        return self._push("sigmoid", out, (a.id,),
                          (lambda g: g * out * (1.0 - out),))

    # -- reductions ------------------------------------------------------

    def sum(self, a, axis=None) -> Value:
        a = self._coerce(a)
        shape = a.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, shape).astype(self.dtype, copy=True)
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return self._push("sum", np.sum(a.data, axis=axis), (a.id,), (vjp,))

    def mean(self, a, axis=None) -> Value:
        a = self._coerce(a)
        shape = a.shape
        n = a.data.size if axis is None else shape[axis]

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g / n, shape).astype(self.dtype, copy=True)
            return np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()

        return self._push("mean", np.mean(a.data, axis=axis), (a.id,), (vjp,))

    def dot(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        if a.shape != b.shape or a.ndim != 1:
            raise TapeError(f"dot expects equal 1-d shapes, got {a.shape} and {b.shape}")
        ad, bd = a.data, b.data
        return self._push("dot", np.dot(ad, bd), (a.id, b.id),
                          (lambda g: g * bd, lambda g: g * ad))

    def norm(self, a, axis=None, keepdims=False) -> Value:
        a = self._coerce(a)
        ad = a.data
        out = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=keepdims))

        def vjp(g):
            if axis is None:
                return g * ad / out
            gg = g if keepdims else np.expand_dims(g, axis)
            oo = out if keepdims else np.expand_dims(out, axis)
            return gg * ad / oo

        return self._push("norm", out, (a.id,), (vjp,))

    def normalize(self, a, axis=-1) -> Value:
        n = self.norm(a, axis=axis, keepdims=True)
        return self.div(a, n)

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a, b) -> Value:
        a, b = self._coerce(a), self._coerce(b)
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            if ad.shape[1] != bd.shape[0]:
                raise TapeError(f"matmul mismatch {ad.shape} @ {bd.shape}")
            return self._push("matmul", ad @ bd, (a.id, b.id),
                              (lambda g: g @ bd.T, lambda g: ad.T @ g))
        if ad.ndim == 2 and bd.ndim == 1:
            if ad.shape[1] != bd.shape[0]:
                raise TapeError(f"matvec mismatch {ad.shape} @ {bd.shape}")
            return self._push("matvec", ad @ bd, (a.id, b.id),
                              (lambda g: np.outer(g, bd), lambda g: ad.T @ g))
        if ad.ndim == 1 and bd.ndim == 2:
            if ad.shape[0] != bd.shape[0]:
                raise TapeError(f"vecmat mismatch {ad.shape} @ {bd.shape}")
            return self._push("vecmat", ad @ bd, (a.id, b.id),
                              (lambda g: bd @ g, lambda g: np.outer(ad, g)))
        raise TapeError(f"matmul expects 1-d/2-d operands, got {ad.shape} @ {bd.shape}")

    def transpose(self, a) -> Value:
        a = self._coerce(a)
        if a.ndim != 2:
            raise TapeError(f"transpose expects a matrix, got shape {a.shape}")
        return self._push("T", a.data.T.copy(), (a.id,), (lambda g: g.T,))

    def reshape(self, a, shape) -> Value:
        a = self._coerce(a)
        old = a.shape
        return self._push("reshape", a.data.reshape(shape).copy(), (a.id,),
                          (lambda g: g.reshape(old),))

    def stack(self, values, axis=0) -> Value:
        values = [self._coerce(v) for v in values]
        out = np.stack([v.data for v in values], axis=axis)

        def make(i):
            return lambda g: np.take(g, i, axis=axis)

        return self._push("stack", out, [v.id for v in values],
                          [make(i) for i in range(len(values))])

    def take(self, a, indices, axis=0) -> Value:
        """Gather along `axis` with constant indices; VJP scatter-adds."""
        a = self._coerce(a)
        idx = np.asarray(indices)
        shape = a.shape
        out = np.take(a.data, idx, axis=axis)

        def vjp(g):
            buf = np.zeros(shape, dtype=self.dtype)
            if axis == 0:
                np.add.at(buf, idx, g)
            else:
                gm = np.moveaxis(g, axis, 0)
                bm = np.moveaxis(buf, axis, 0)
                np.add.at(bm, idx, gm)
            return buf

        return self._push("take", out, (a.id,), (vjp,))

    def getitem(self, a, key) -> Value:
        a = self._coerce(a)
        shape = a.shape
        out = a.data[key]
        if np.isscalar(out):
            out = np.asarray(out, dtype=self.dtype)

        def vjp(g):
            buf = np.zeros(shape, dtype=self.dtype)
            np.add.at(buf, key, g)
            return buf

        return self._push("getitem", np.array(out, copy=True), (a.id,), (vjp,))

    def conv2d_valid(self, a, kernel) -> Value:
        """2-d cross-correlation with a constant kernel, 'valid' extent."""
        a = self._coerce(a)
        k = np.asarray(kernel, dtype=self.dtype)
        if a.ndim != 2 or k.ndim != 2:
            raise TapeError(f"conv2d_valid expects 2-d arrays, got {a.shape} and {k.shape}")
        out = signal.correlate2d(a.data, k, mode="valid")
        return self._push("conv2d", out, (a.id,),
                          (lambda g: signal.convolve2d(g, k, mode="full"),))

    # -- backward ---------------------------------------------------------

    def reset_grads(self):
        for name in self.grads:
            self.grads[name] = np.zeros_like(self.grads[name])

    def backward(self, root: Value) -> dict:
        """Reverse sweep from a scalar root; returns {param: gradient}."""
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if root.data.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        self._sweep += 1
        adjoint: list = [None] * len(self._data)
        adjoint[root.id] = np.ones_like(self._data[root.id])
        for nid in range(root.id, -1, -1):
            g = adjoint[nid]
            if g is None:
                continue
            for pid, vjp in zip(self._parents[nid], self._vjps[nid]):
                pg = vjp(g)
                if pg is None:
                    continue
                # out-of-place accumulation: vjps may return shared arrays
                adjoint[pid] = pg if adjoint[pid] is None else adjoint[pid] + pg
        out = {}
        for name, nid in self._params.items():
            g = adjoint[nid]
            if g is None:
                g = np.zeros_like(self._data[nid])
            self.grads[name] = np.array(g, dtype=self.dtype, copy=True)
            out[name] = self.grads[name]
        return out


def grad_check(build: Callable, params: dict, step: float = 1e-6) -> float:
    """Compare tape gradients of a scalar expression with central differences.

    `build(tape, values)` must construct a scalar Value from the dict of
    parameter Values.  Returns the maximum relative error over all parameter
    coordinates, with denominator max(|analytic|, |numeric|, 1e-8); any NaN
    on either side reports infinity.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    vals = {k: tape.parameter(k, v) for k, v in params.items()}
    root = build(tape, vals)
    grads = tape.backward(root)

    def eval_at(p):
        t = Tape()
        vs = {k: t.parameter(k, v) for k, v in p.items()}
        return float(build(t, vs).data)

    worst = 0.0
    for name, base in params.items():
        analytic = grads[name]
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_at(params)
            flat[i] = orig - step
            lo = eval_at(params)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = np.abs(analytic - numeric) / denom
        if np.any(np.isnan(analytic)) or np.any(np.isnan(numeric)):
            return float("inf")
        worst = max(worst, float(err.max()))
    return worst
