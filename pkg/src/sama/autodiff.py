"""Array-level reverse-mode differentiation on an explicit tape.

Every differentiable op computes its numpy value eagerly and, when a tape is
active and at least one input needs a gradient, appends a node holding the
inputs and a vector-Jacobian product closure.  ``backward`` walks the tape in
reverse once.  Without an active tape the ops are thin numpy wrappers, so the
same kernels serve inference, benchmarking and training.

Subgradient conventions: ``norm`` returns a zero gradient where the norm is
exactly zero; ``softmax`` stabilisation by the row max is treated as a
constant shift (it cancels analytically).
"""
from __future__ import annotations

import string
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_state = threading.local()


class Tensor:
    __slots__ = ("value", "requires_grad", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """Trainable leaf: a named value plus a gradient slot of the same shape."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name: str = ""):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def backward(self, output: Tensor, cotangent=None) -> dict[int, np.ndarray]:
        return backward(self, output, cotangent)


def current_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


# macs counter for einsum-type ops; None when not counting
def _count_macs(n: int) -> None:
    counter = getattr(_state, "macs", None)
    if counter is not None:
        counter[0] += n


class count_macs:
    """Context manager accumulating multiply-accumulates of contraction ops."""

    def __enter__(self):
        self._prev = getattr(_state, "macs", None)
        _state.macs = [0]
        return self

    def __exit__(self, *exc):
        self.total = _state.macs[0]
        _state.macs = self._prev
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _make(op: str, value, inputs: Sequence, vjp: Callable) -> Tensor:
    tape = current_tape()
    if tape is None or not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return Tensor(value)
    out = Tensor(value, requires_grad=True)
    tape.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, output: Tensor, cotangent=None) -> dict[int, np.ndarray]:
    """Propagate ``cotangent`` from ``output`` back through ``tape``.

    Param leaves accumulate into ``.grad``; the returned dict maps ``id`` of
    every reached tensor to its gradient.
    """
    if cotangent is None:
        cotangent = np.ones_like(output.value)
    cotangent = np.asarray(cotangent, dtype=DTYPE)
    if cotangent.shape != output.value.shape:
        raise ValueError(
            f"cotangent shape {cotangent.shape} does not match output {output.value.shape}"
        )
    grads: dict[int, np.ndarray] = {id(output): cotangent}
    params: dict[int, Param] = {}
    if isinstance(output, Param):
        params[id(output)] = output
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if isinstance(t, Param):
                params[key] = t
    for key, p in params.items():
        if key in grads:
            p.grad = p.grad + grads[key]
    return grads


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make("add", av + bv, (a, b),
                 lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make("sub", av - bv, (a, b),
                 lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make("mul", av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _make("div", out, (a, b),
                 lambda g: (unbroadcast(g / bv, av.shape),
                            unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    return _make("neg", -_val(a), (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    av = _val(a)
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_val(a))
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    av = _val(a)
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(a) -> Tensor:
    out = sigmoid_np(_val(a))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    av = _val(a)
    return _make("softplus", softplus_np(av), (a,), lambda g: (g * sigmoid_np(av),))


def silu(a) -> Tensor:
    av = _val(a)
    s = sigmoid_np(av)
    return _make("silu", av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([av.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; zero subgradient at the origin."""
    av = _val(a)
    out = np.sqrt((av * av).sum(axis=axis))

    def vjp(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, av / safe, 0.0) * np.expand_dims(g, axis),)

    return _make("norm", out, (a,), vjp)


def cumsum(a, axis: int = -1) -> Tensor:
    av = _val(a)
    return _make("cumsum", np.cumsum(av, axis=axis), (a,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def softmax(a, axis: int = -1) -> Tensor:
    av = _val(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _make("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    if axes is None:
        axes = tuple(reversed(range(av.ndim)))
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(_val(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    av = _val(a)
    return _make("broadcast_to", np.broadcast_to(av, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, av.shape),))


def getitem(a, idx) -> Tensor:
    av = _val(a)

    basic = all(i is Ellipsis or i is None or isinstance(i, (int, slice))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        out = np.zeros_like(av)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", av[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make("concat", np.concatenate(vals, axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _make("stack", out, tuple(tensors), vjp)


def shift_right(a, axis: int = -2) -> Tensor:
    """Shift along ``axis`` by one with a zero at the start (x_{t-1}, x_{-1}=0)."""
    av = _val(a)
    axis = axis % av.ndim
    n = av.shape[axis]
    pad = np.zeros_like(np.take(av, [0], axis=axis))
    out = np.concatenate([pad, np.take(av, range(n - 1), axis=axis)], axis=axis)

    def vjp(g):
        gz = np.zeros_like(np.take(g, [0], axis=axis))
        return (np.concatenate([np.take(g, range(1, n), axis=axis), gz], axis=axis),)

    return _make("shift_right", out, (a,), vjp)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select with a constant boolean mask."""
    av, bv = _val(a), _val(b)
    cond = np.asarray(cond, dtype=bool)
    return _make("where", np.where(cond, av, bv), (a, b),
                 lambda g: (unbroadcast(np.where(cond, g, 0.0), av.shape),
                            unbroadcast(np.where(cond, 0.0, g), bv.shape)))


# ---------------------------------------------------------------- contractions


def _parse(spec: str, ndims: Sequence[int]) -> tuple[list[str], str]:
    """Expand '...' in an einsum spec to explicit letters."""
    lhs, rhs = spec.replace(" ", "").split("->")
    terms = lhs.split(",")
    used = set(c for c in spec if c.isalpha())
    free = [c for c in string.ascii_letters if c not in used]
    nell = 0
    for t, nd in zip(terms, ndims):
        if "..." in t:
            nell = max(nell, nd - (len(t) - 3))
    ell = "".join(free[:nell])
    out_terms = []
    for t, nd in zip(terms, ndims):
        if "..." in t:
            k = nd - (len(t) - 3)
            t = t.replace("...", ell[nell - k:])
        out_terms.append(t)
    rhs = rhs.replace("...", ell)
    return out_terms, rhs


def einsum(spec: str, *operands) -> Tensor:
    """``np.einsum`` with a VJP; every index must appear in some other operand or the output."""
    vals = [_val(o) for o in operands]
    terms, rhs = _parse(spec, [v.ndim for v in vals])
    full = ",".join(terms) + "->" + rhs
    sizes = {}
    for t, v in zip(terms, vals):
        for c, s in zip(t, v.shape):
            sizes[c] = max(sizes.get(c, 1), s)
    work = int(np.prod(list(sizes.values()))) if sizes else 1
    _count_macs(work)
    # path search only pays off on big contractions
    opt = len(vals) > 2 or work > 200_000
    out = np.einsum(full, *vals, optimize=opt)

    def vjp(g):
        res = []
        for i, (t, v) in enumerate(zip(terms, vals)):
            if not (isinstance(operands[i], Tensor) and operands[i].requires_grad):
                res.append(None)
                continue
            others = [terms[j] for j in range(len(vals)) if j != i] + [rhs]
            avail = set("".join(others))
            keep = "".join(c for c in t if c in avail)
            # broadcasting dims of size 1 are handled via unbroadcast below
            ops = [vals[j] for j in range(len(vals)) if j != i] + [g]
            gi = np.einsum(",".join(others) + "->" + keep, *ops, optimize=opt or len(ops) > 2)
            if keep != t:
                shape = [sizes[c] if c in keep else 1 for c in t]
                perm = [keep.index(c) for c in t if c in keep]
                gi = np.transpose(gi, perm).reshape(shape)
                gi = np.broadcast_to(gi, [sizes[c] for c in t])
            res.append(unbroadcast(np.asarray(gi), v.shape).copy())
        return tuple(res)

    return _make("einsum", out, tuple(operands), vjp)


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av @ bv
    _count_macs(int(np.prod(out.shape)) * av.shape[-1])

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _make("matmul", out, (a, b), vjp)


def linear(x, w, bias=None) -> Tensor:
    """x @ w (+ bias) over the last axis, with ``w`` of shape [in, out]."""
    xv, wv = _val(x), _val(w)
    x2 = xv.reshape(-1, xv.shape[-1])
    out = (x2 @ wv).reshape(xv.shape[:-1] + (wv.shape[-1],))
    _count_macs(x2.shape[0] * wv.size)
    if bias is not None:
        out = out + _val(bias)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = x2.T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("linear", out, inputs, vjp)


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_probes: int

    @property
    def pass_(self) -> bool:  # mirror of the report field name
        return self.passed


def rel_err(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    f: Callable[..., Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    step: float = 1e-5,
    tol: float = 1e-5,
    params: Sequence[Param] = (),
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``f`` takes one Tensor per entry of ``point`` and returns a Tensor.  A
    non-scalar output is reduced with a fixed random cotangent.  ``params``
    are extra Params captured by ``f`` that are probed too.  ``max_probes``
    caps the number of coordinates probed per array (sampled with ``rng``).
    """
    if isinstance(point, np.ndarray):
        point = [point]
    rng = rng if rng is not None else np.random.default_rng(0)
    leaves = [Param(np.array(p, dtype=DTYPE, copy=True), name=f"arg{i}") for i, p in enumerate(point)]
    leaves += list(params)

    def run():
        return f(*leaves[: len(point)])

    for p in leaves:
        p.zero_grad()
    with Tape() as tape:
        out = run()
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite function value at probe point")
    cot = rng.standard_normal(out.shape) / np.sqrt(max(out.value.size, 1))
    if out.value.ndim == 0:
        cot = np.asarray(1.0)
    tape.backward(out, cot)

    def scalar():
        v = run().value
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite function value at probe point")
        return float((v * cot).sum())

    worst, n = 0.0, 0
    for p in leaves:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        analytic = p.grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar()
            flat[i] = orig - step
            fm = scalar()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, float(rel_err(analytic[i], num)))
            n += 1
    for p in leaves[len(point):]:
        p.zero_grad()
    return GradCheckReport(max_rel_err=worst, passed=worst < tol, n_probes=n)
