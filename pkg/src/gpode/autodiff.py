"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Tape` is an append-only Wengert list. Every primitive computes its value
eagerly with numpy and, when any operand lives on a tape, appends one node
holding parent ids and a local vector-Jacobian closure. `Tape.backward`
sweeps the list once in reverse and returns gradients for all leaves.

Tensors are immutable by convention: values must never be mutated after
creation, which lets backward closures capture them without copies.

Contractions in trajectory-batched code must go through `contract` (an
unoptimized einsum): its accumulation order per output element is
independent of the batch extent, so integrating segments jointly is
bitwise-identical to integrating them one by one. `matmul` (BLAS) does not
hold that guarantee and is reserved for fixed-shape linear algebra.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "wrap",
    "record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "matmul",
    "contract",
    "reduce_sum",
    "log",
    "exp",
    "cos",
    "sin",
    "sqrt",
    "softplus",
    "broadcast_to",
    "transpose",
    "reshape",
    "cholesky",
    "solve_triangular",
    "diag_part",
    "tril_with_softplus_diag",
    "slice_rows",
    "concat_rows",
    "custom",
]


class Tensor:
    """A float64 array plus an optional handle onto the tape it was recorded on."""

    __slots__ = ("value", "tape", "nid")

    def __init__(self, value, tape=None, nid=-1):
        self.value = value
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def __repr__(self):
        tag = f", node={self.nid}" if self.tape is not None else ""
        return f"Tensor(shape={self.value.shape}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow(self, p)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Append-only record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self._leaves = {}

    def leaf(self, value):
        """Register a trainable input; gradients are reported for leaves only."""
        arr = np.asarray(value, dtype=np.float64)
        nid = len(self.nodes)
        self.nodes.append(_Node((), None))
        self._leaves[nid] = arr.shape
        return Tensor(arr, self, nid)

    def backward(self, loss):
        """Gradient of a scalar `loss` with respect to every leaf.

        Returns a dict mapping leaf node id to a gradient array of the
        leaf's shape; leaves the loss does not depend on map to zeros.
        """
        if loss.tape is not self:
            raise ContractError("loss does not lie on this tape")
        if loss.value.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.value.shape}"
            )
        nodes = self.nodes
        adjoints = [None] * (loss.nid + 1)
        adjoints[loss.nid] = np.ones(())
        for nid in range(loss.nid, -1, -1):
            a = adjoints[nid]
            if a is None:
                continue
            node = nodes[nid]
            if node.vjp is None:
                continue
            for pid, g in zip(node.parents, node.vjp(a)):
                prev = adjoints[pid]
                adjoints[pid] = g if prev is None else prev + g
        out = {}
        for nid, shape in self._leaves.items():
            a = adjoints[nid] if nid <= loss.nid else None
            if a is None:
                a = np.zeros(shape)
            elif a.shape != shape:
                a = np.broadcast_to(a, shape).copy()
            out[nid] = a
        return out


def wrap(x):
    """Coerce a value into a constant (off-tape) Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _resolve_tape(tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def custom(value, partials):
    """Create a tensor from a fused primitive.

    `partials` is a sequence of (tensor, fn) pairs where fn maps the output
    adjoint to that operand's adjoint. Operands that are constants are
    dropped; if all are constants no node is recorded.
    """
    tape = None
    parents = []
    fns = []
    for t, fn in partials:
        tp = t.tape
        if tp is None:
            continue
        if tape is None:
            tape = tp
        elif tape is not tp:
            raise ContractError("operands recorded on different tapes")
        parents.append(t.nid)
        fns.append(fn)
    if tape is None:
        return Tensor(value)
    nid = len(tape.nodes)
    tape.nodes.append(_Node(tuple(parents), lambda g: [fn(g) for fn in fns]))
    return Tensor(value, tape, nid)


def _unbroadcast(grad, shape):
    """Sum a gradient over axes introduced or stretched by broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _elementwise_value(fn, a, b):
    try:
        return fn(a.value, b.value)
    except ValueError as e:
        raise DimensionError(
            f"elementwise operands have incompatible shapes "
            f"{a.value.shape} and {b.value.shape}"
        ) from e


def add(a, b):
    a, b = wrap(a), wrap(b)
    out = _elementwise_value(np.add, a, b)
    return custom(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ],
    )


def sub(a, b):
    a, b = wrap(a), wrap(b)
    out = _elementwise_value(np.subtract, a, b)
    return custom(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ],
    )


def mul(a, b):
    a, b = wrap(a), wrap(b)
    out = _elementwise_value(np.multiply, a, b)
    return custom(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ],
    )


def div(a, b):
    a, b = wrap(a), wrap(b)
    out = _elementwise_value(np.divide, a, b)
    return custom(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.value, b.value.shape)),
        ],
    )


def neg(a):
    a = wrap(a)
    return custom(-a.value, [(a, lambda g: -g)])


def pow(a, p):
    a = wrap(a)
    p = float(p)
    out = a.value**p
    return custom(out, [(a, lambda g: g * p * a.value ** (p - 1.0))])


def matmul(a, b):
    """2-D matrix product via BLAS. Not batch-order stable; cold path only."""
    a, b = wrap(a), wrap(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul requires (n,k) @ (k,m) operands, got {av.shape} and {bv.shape}"
        )
    return custom(
        av @ bv,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
    )


def contract(spec, a, b):
    """Two-operand einsum with a deterministic per-element accumulation order.

    Every index of each operand must appear in the output or in the other
    operand, so the adjoint of either side is itself a single einsum.
    """
    a, b = wrap(a), wrap(b)
    ins, out_idx = spec.split("->")
    a_idx, b_idx = ins.split(",")
    if not (set(a_idx) <= set(out_idx) | set(b_idx)) or not (
        set(b_idx) <= set(out_idx) | set(a_idx)
    ):
        raise ContractError(f"contract spec {spec!r} is not a pure contraction")
    if len(a_idx) != a.value.ndim or len(b_idx) != b.value.ndim:
        raise DimensionError(
            f"contract {spec!r} got operands of rank {a.value.ndim}, {b.value.ndim}"
        )
    try:
        out = np.einsum(spec, a.value, b.value, optimize=False)
    except ValueError as e:
        raise DimensionError(f"contract {spec!r} shape mismatch: {e}") from e
    da_spec = f"{out_idx},{b_idx}->{a_idx}"
    db_spec = f"{out_idx},{a_idx}->{b_idx}"
    return custom(
        out,
        [
            (a, lambda g: np.einsum(da_spec, g, b.value, optimize=False)),
            (b, lambda g: np.einsum(db_spec, g, a.value, optimize=False)),
        ],
    )


def reduce_sum(x, axis=None):
    x = wrap(x)
    xv = x.value
    out = xv.sum(axis=axis)

    if axis is None:
        vjp = lambda g: np.broadcast_to(g, xv.shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)

        def vjp(g):
            ge = np.expand_dims(g, axes)
            return np.broadcast_to(ge, xv.shape)

    return custom(out, [(x, vjp)])


def log(x):
    x = wrap(x)
    return custom(np.log(x.value), [(x, lambda g: g / x.value)])


def exp(x):
    x = wrap(x)
    out = np.exp(x.value)
    return custom(out, [(x, lambda g: g * out)])


def cos(x):
    x = wrap(x)
    return custom(np.cos(x.value), [(x, lambda g: -g * np.sin(x.value))])


def sin(x):
    x = wrap(x)
    return custom(np.sin(x.value), [(x, lambda g: g * np.cos(x.value))])


def sqrt(x):
    x = wrap(x)
    out = np.sqrt(x.value)
    return custom(out, [(x, lambda g: g / (2.0 * out))])


def softplus(x):
    """log(1 + exp(x)), evaluated stably for large |x|."""
    x = wrap(x)
    xv = x.value
    out = np.logaddexp(0.0, xv)
    return custom(out, [(x, lambda g: g * _sigmoid(xv))])


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def broadcast_to(x, shape):
    x = wrap(x)
    try:
        out = np.broadcast_to(x.value, shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.value.shape} to {shape}") from e
    return custom(out, [(x, lambda g: _unbroadcast(g, x.value.shape))])


def transpose(x):
    x = wrap(x)
    if x.value.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return custom(x.value.T.copy(), [(x, lambda g: g.T)])


def reshape(x, shape):
    x = wrap(x)
    orig = x.value.shape
    try:
        out = x.value.reshape(shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot reshape {orig} to {shape}") from e
    return custom(out, [(x, lambda g: g.reshape(orig))])


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    The input is symmetrized before factorization, so the reported gradient
    is the symmetric one. Raises NumericalError identifying the offending
    leading minor when the input is not positive definite.
    """
    a = wrap(a)
    av = a.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got {av.shape}")
    try:
        L = scipy.linalg.cholesky(0.5 * (av + av.T), lower=True)
    except scipy.linalg.LinAlgError as e:
        raise NumericalError(f"cholesky failed: {e}") from e

    def vjp(g):
        # phi = tril(L^T gbar) with halved diagonal; abar = L^{-T} phi L^{-1}.
        phi = np.tril(L.T @ np.tril(g))
        phi[np.diag_indices_from(phi)] *= 0.5
        y = scipy.linalg.solve_triangular(L, phi, lower=True, trans="T")
        abar = scipy.linalg.solve_triangular(L, y.T, lower=True, trans="T").T
        return 0.5 * (abar + abar.T)

    return custom(L, [(a, vjp)])


def solve_triangular(L, b, lower=True, trans=False):
    """Solve L x = b (or L^T x = b when trans) for a triangular L."""
    L, b = wrap(L), wrap(b)
    Lv, bv = L.value, b.value
    if Lv.ndim != 2 or Lv.shape[0] != Lv.shape[1]:
        raise DimensionError(f"solve_triangular expects a square matrix, got {Lv.shape}")
    b2 = bv.reshape(len(bv), -1) if bv.ndim == 1 else bv
    if b2.shape[0] != Lv.shape[0]:
        raise DimensionError(
            f"solve_triangular shapes {Lv.shape} and {bv.shape} do not align"
        )
    x2 = scipy.linalg.solve_triangular(Lv, b2, lower=lower, trans="T" if trans else "N")
    x = x2.reshape(bv.shape)

    def vjp_b(g):
        g2 = g.reshape(len(g), -1) if g.ndim == 1 else g
        gb = scipy.linalg.solve_triangular(
            Lv, g2, lower=lower, trans="N" if trans else "T"
        )
        return gb.reshape(g.shape)

    def vjp_L(g):
        g2 = g.reshape(len(g), -1) if g.ndim == 1 else g
        gb = scipy.linalg.solve_triangular(
            Lv, g2, lower=lower, trans="N" if trans else "T"
        )
        full = -(x2 @ gb.T) if trans else -(gb @ x2.T)
        return np.tril(full) if lower else np.triu(full)

    return custom(x, [(L, vjp_L), (b, vjp_b)])


def diag_part(x):
    """Main diagonal of a matrix, or of each matrix in a stack (..., M, M)."""
    x = wrap(x)
    xv = x.value
    if xv.ndim < 2 or xv.shape[-1] != xv.shape[-2]:
        raise DimensionError(f"diag_part expects (..., m, m), got {xv.shape}")
    out = np.diagonal(xv, axis1=-2, axis2=-1).copy()

    def vjp(g):
        full = np.zeros_like(xv)
        idx = np.arange(xv.shape[-1])
        full[..., idx, idx] = g
        return full

    return custom(out, [(x, vjp)])


def tril_with_softplus_diag(raw):
    """Build a valid Cholesky factor from an unconstrained square matrix.

    The strict lower triangle passes through; the diagonal is mapped by
    softplus so it stays strictly positive. Accepts a stack (..., M, M).
    """
    raw = wrap(raw)
    rv = raw.value
    if rv.ndim < 2 or rv.shape[-1] != rv.shape[-2]:
        raise DimensionError(f"expected (..., m, m), got {rv.shape}")
    idx = np.arange(rv.shape[-1])
    out = np.tril(rv, -1)
    out[..., idx, idx] = np.logaddexp(0.0, rv[..., idx, idx])

    def vjp(g):
        grad = np.tril(g, -1)
        grad[..., idx, idx] = g[..., idx, idx] * _sigmoid(rv[..., idx, idx])
        return grad

    return custom(out, [(raw, vjp)])


def slice_rows(x, start, stop):
    """Contiguous row slice x[start:stop] of a matrix."""
    x = wrap(x)
    if x.value.ndim != 2:
        raise DimensionError("slice_rows expects a matrix")
    if not (0 <= start < stop <= x.value.shape[0]):
        raise DimensionError(
            f"slice [{start}:{stop}] out of range for {x.value.shape[0]} rows"
        )
    out = x.value[start:stop].copy()

    def vjp(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return full

    return custom(out, [(x, vjp)])


def concat_rows(tensors):
    """Stack tensors along axis 0 (each a matrix or a row)."""
    tensors = [wrap(t) for t in tensors]
    vals = [t.value if t.value.ndim == 2 else t.value.reshape(1, -1) for t in tensors]
    out = np.concatenate(vals, axis=0)
    partials = []
    start = 0
    for t, v in zip(tensors, vals):
        stop = start + v.shape[0]

        def vjp(g, a=start, b=stop, shape=t.value.shape):
            return g[a:b].reshape(shape)

        partials.append((t, vjp))
        start = stop
    return custom(out, partials)


_RECORD_DISPATCH = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": pow,
    "matmul": matmul,
    "contract": contract,
    "reduce-sum": reduce_sum,
    "log": log,
    "exp": exp,
    "cos": cos,
    "sin": sin,
    "sqrt": sqrt,
    "softplus": softplus,
    "broadcast": broadcast_to,
    "transpose": transpose,
    "cholesky": cholesky,
    "triangular-solve": solve_triangular,
    "diag": diag_part,
}


def record(kind, *inputs, **kwargs):
    """Generic entry point: record one primitive of the named kind."""
    try:
        fn = _RECORD_DISPATCH[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
