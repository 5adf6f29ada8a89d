"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` owns an ordered list of recorded operations.  Tensors become
differentiable by being *watched* on a tape; every primitive applied to a
watched tensor is appended to that tape.  ``grad(..., create_graph=True)``
records the backward pass onto the same tape, so gradients can themselves be
differentiated (gradient through a gradient step).

There is no global graph: a tape is created per episode and dropped with it.

    >>> tape = Tape()
    >>> x = tape.watch(3.0)
    >>> grad(x * x, [x])[0].item()
    6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "record",
    "grad",
    "finite_diff_grad",
    "as_tensor",
    "concat",
    "gather_rows",
    "softmax_cross_entropy",
    "PRIMITIVES",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf reaches a graph boundary."""


class Tensor:
    """Dense float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape")
    __array_priority__ = 1000  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = "" if self.tape is None else ", tracked"
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; every method funnels through record()
    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("sub", [self, other])

    def __rsub__(self, other):
        return record("sub", [other, self])

    def __mul__(self, other):
        return record("mul", [self, other])

    def __rmul__(self, other):
        return record("mul", [other, self])

    def __truediv__(self, other):
        return record("div", [self, other])

    def __rtruediv__(self, other):
        return record("div", [other, self])

    def __neg__(self):
        return record("neg", [self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __rmatmul__(self, other):
        return record("matmul", [other, self])

    def __getitem__(self, index):
        return record("slice", [self], index=index)

    @property
    def T(self) -> "Tensor":
        return record("transpose", [self])

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=shape)

    def permute(self, *axes) -> "Tensor":
        return record("permute", [self], axes=axes)

    def exp(self):
        return record("exp", [self])

    def log(self):
        return record("log", [self])

    def tanh(self):
        return record("tanh", [self])

    def relu(self):
        return record("relu", [self])

    def rms_norm(self, eps=1e-6):
        return record("rms_norm", [self], eps=eps)

    def softmax(self, axis=-1):
        return record("softmax", [self], axis=axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    ``retain_for_higher_order`` sets the default of ``create_graph`` for
    :func:`grad` calls on this tape.
    """

    def __init__(self, retain_for_higher_order: bool = False):
        self.retain_for_higher_order = retain_for_higher_order
        self.nodes: list[_Node] = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def watch(self, x) -> Tensor:
        """Return a leaf tensor on this tape holding a copy of ``x``."""
        data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("watched tensor contains non-finite values")
        return Tensor(data, tape=self)


def _common_tape(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    return tape


# ---------------------------------------------------------------------------
# primitives
#
# Each primitive is ``fn(*inputs, **params) -> (value, vjp)`` where
# ``vjp(g, out, needs)`` returns one Tensor (or None) per input.  VJPs are
# written with Tensor operations only, so under create_graph they are
# themselves recorded and differentiable.
# ---------------------------------------------------------------------------


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return record("sum_to", [g], shape=tuple(shape))


def _check_broadcast(a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


def _p_add(a, b):
    _check_broadcast(a, b)

    def vjp(g, out, needs):
        return (_sum_to(g, a.shape) if needs[0] else None,
                _sum_to(g, b.shape) if needs[1] else None)
    return a.data + b.data, vjp


def _p_sub(a, b):
    _check_broadcast(a, b)

    def vjp(g, out, needs):
        return (_sum_to(g, a.shape) if needs[0] else None,
                _sum_to(-g, b.shape) if needs[1] else None)
    return a.data - b.data, vjp


def _p_mul(a, b):
    _check_broadcast(a, b)

    def vjp(g, out, needs):
        return (_sum_to(g * b, a.shape) if needs[0] else None,
                _sum_to(g * a, b.shape) if needs[1] else None)
    return a.data * b.data, vjp


def _p_div(a, b):
    _check_broadcast(a, b)

    def vjp(g, out, needs):
        ga = _sum_to(g / b, a.shape) if needs[0] else None
        gb = _sum_to(-(g * out) / b, b.shape) if needs[1] else None
        return ga, gb
    return a.data / b.data, vjp


def _p_neg(a):
    return -a.data, lambda g, out, needs: (-g,)


def _p_matmul(a, b):
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    if a.ndim == 1 or b.ndim == 1:
        # promote to 2-d so the vjp below stays uniform
        a2 = a if a.ndim > 1 else a.reshape(1, a.shape[0])
        b2 = b if b.ndim > 1 else b.reshape(b.shape[0], 1)
        if a2.shape[-1] != b2.shape[-2]:
            raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
        value = np.matmul(a.data, b.data)

        def vjp1(g, out, needs):
            g2 = g.reshape(np.matmul(a2.data, b2.data).shape)
            ga = _sum_to(g2 @ b2.T, a2.shape).reshape(a.shape) if needs[0] else None
            gb = _sum_to(a2.T @ g2, b2.shape).reshape(b.shape) if needs[1] else None
            return ga, gb
        return value, vjp1
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., n) @ (n, k): one flat BLAS call instead of a batched loop
        n, k = b.shape
        value = (a.data.reshape(-1, n) @ b.data).reshape(a.shape[:-1] + (k,))

        def vjp_flat(g, out, needs):
            ga = g @ b.T if needs[0] else None
            gb = a.reshape(-1, n).T @ g.reshape(-1, k) if needs[1] else None
            return ga, gb
        return value, vjp_flat

    def vjp(g, out, needs):
        ga = _sum_to(g @ b.T, a.shape) if needs[0] else None
        gb = _sum_to(a.T @ g, b.shape) if needs[1] else None
        return ga, gb
    return np.matmul(a.data, b.data), vjp


def _p_transpose(a):
    if a.ndim < 2:
        raise ValueError("transpose needs at least 2 dims")
    return np.swapaxes(a.data, -1, -2), lambda g, out, needs: (g.T,)


def _p_permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"bad permutation {axes} for {a.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    return np.transpose(a.data, axes), lambda g, out, needs: (record("permute", [g], axes=inverse),)


def _p_reshape(a, shape):
    value = a.data.reshape(shape)
    return value, lambda g, out, needs: (g.reshape(a.shape),)


def _p_sum(a, axis=None, keepdims=False):
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, out, needs):
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = [1 if i in axes else n for i, n in enumerate(a.shape)]
            g = g.reshape(tuple(kept))
        elif not keepdims:
            g = g.reshape((1,) * a.ndim)
        return (record("broadcast_to", [g], shape=a.shape),)
    return value, vjp


def _p_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    s, svjp = _p_sum(a, axis=axis, keepdims=keepdims)
    return s / count, lambda g, out, needs: svjp(g * (1.0 / count), out, needs)


def _p_sum_to(a, shape):
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot sum {a.shape} to {shape}")
    value = a.data.sum(axis=tuple(range(lead))) if lead else a.data
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    if value.shape != shape:
        raise ValueError(f"cannot sum {a.shape} to {shape}")
    return value, lambda g, out, needs: (record("broadcast_to", [g], shape=a.shape),)


def _p_broadcast_to(a, shape):
    value = np.broadcast_to(a.data, shape).copy()
    return value, lambda g, out, needs: (_sum_to(g, a.shape),)


def _p_exp(a):
    return np.exp(a.data), lambda g, out, needs: (g * out,)


def _p_log(a):
    return np.log(a.data), lambda g, out, needs: (g / a,)


def _p_tanh(a):
    return np.tanh(a.data), lambda g, out, needs: (g * (1.0 - out * out),)


def _p_relu(a):
    mask = (a.data > 0).astype(np.float64)
    # relu'' vanishes almost everywhere, so the mask is a constant
    return a.data * mask, lambda g, out, needs: (g * mask,)


def _p_rms_norm(a, eps=1e-6):
    """``a / sqrt(mean(a**2, -1) + eps)`` over the last axis."""
    scale = 1.0 / np.sqrt((a.data * a.data).mean(axis=-1, keepdims=True) + eps)

    def vjp(g, out, needs):
        if a.tape is not None and a.tape.recording:
            # create_graph: rebuild the scale from ``a`` so it is differentiable
            s = (((a * a).mean(axis=-1, keepdims=True) + eps).log() * -0.5).exp()
        else:
            s = Tensor(scale)
        return ((g - out * (g * out).mean(axis=-1, keepdims=True)) * s,)
    return a.data * scale, vjp


def _p_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, needs):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)
    return value, vjp


def _p_softmax_cross_entropy(logits, labels, weights):
    """Weighted mean NLL: sum_i w_i * (-log softmax(logits_i)[label_i]) / sum_i w_i."""
    labels = np.asarray(labels.data, dtype=np.int64)
    w = np.asarray(weights.data, dtype=np.float64)
    if logits.ndim < 1 or labels.shape != logits.shape[:-1] or w.shape != labels.shape:
        raise ValueError(
            f"shape mismatch in softmax_cross_entropy: logits {logits.shape}, "
            f"labels {labels.shape}, weights {w.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("softmax_cross_entropy: no positions carry weight")
    V = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= V):
        raise ValueError("label id out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    value = np.asarray(((lse - picked) * w).sum() / total)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    scale = (w / total)[..., None]

    def vjp(g, out, needs):
        probs = logits.softmax(axis=-1)
        return ((probs - onehot) * (g * scale), None, None)
    return value, vjp


def _p_slice(a, index):
    value = a.data[index]
    return value, lambda g, out, needs: (record("scatter", [g], index=index, shape=a.shape),)


def _p_scatter(a, index, shape):
    """Place ``a`` at ``index`` inside zeros of ``shape`` (adjoint of slice)."""
    value = np.zeros(shape)
    value[index] = a.data
    return value, lambda g, out, needs: (g[index],)


def _p_concat(*tensors, axis=0):
    if not tensors:
        raise ValueError("concat of nothing")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != ax):
            raise ValueError("shape mismatch in concat")
    value = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, out, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(g[tuple(idx)])
        return tuple(grads)
    return value, vjp


def _p_gather_rows(table, ids):
    """Row lookup ``table[ids]`` (embedding); ``ids`` is a constant."""
    idx = np.asarray(ids.data, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError("gather_rows needs a 2-d table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError("row id out of range")
    value = table.data[idx]

    def vjp(g, out, needs):
        return (record("scatter_rows", [g, ids], n_rows=table.shape[0]), None)
    return value, vjp


def _p_scatter_rows(g, ids, n_rows):
    """Adjoint of gather_rows: accumulate rows of ``g`` into an n_rows table."""
    idx = np.asarray(ids.data, dtype=np.int64)
    width = g.shape[-1]
    value = np.zeros((n_rows, width))
    np.add.at(value, idx.reshape(-1), g.data.reshape(-1, width))
    return value, lambda gg, out, needs: (record("gather_rows", [gg, ids]), None)


PRIMITIVES: dict[str, Callable] = {
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "div": _p_div,
    "neg": _p_neg,
    "matmul": _p_matmul,
    "transpose": _p_transpose,
    "permute": _p_permute,
    "reshape": _p_reshape,
    "sum": _p_sum,
    "mean": _p_mean,
    "sum_to": _p_sum_to,
    "broadcast_to": _p_broadcast_to,
    "exp": _p_exp,
    "log": _p_log,
    "tanh": _p_tanh,
    "relu": _p_relu,
    "rms_norm": _p_rms_norm,
    "softmax": _p_softmax,
    "softmax_cross_entropy": _p_softmax_cross_entropy,
    "slice": _p_slice,
    "scatter": _p_scatter,
    "concat": _p_concat,
    "gather_rows": _p_gather_rows,
    "scatter_rows": _p_scatter_rows,
}


def record(op_kind: str, inputs: Sequence, **params) -> Tensor:
    """Apply primitive ``op_kind`` and append it to the inputs' tape, if any."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind: {op_kind!r}") from None
    inputs = [as_tensor(x) for x in inputs]
    tape = _common_tape(inputs)
    value, vjp = fn(*inputs, **params)
    if tape is None or not tape.recording:
        return Tensor(value)
    out = Tensor(value, tape=tape)
    tape.nodes.append(_Node(out, inputs, vjp))
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool | None = None) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward pass is recorded, so the returned
    gradients are tracked tensors that can be differentiated again.  Tensors
    in ``wrt`` the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss is not on a tape")
    for t in wrt:
        if t.tape is not tape:
            raise ValueError("a wrt tensor is detached from the loss tape")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss: {loss.data}")
    if create_graph is None:
        create_graph = tape.retain_for_higher_order

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
    nodes = tape.nodes[:]  # the backward pass may append to the tape
    was_recording = tape.recording
    tape.recording = create_graph
    try:
        for node in reversed(nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            needs = [t.tape is tape for t in node.inputs]
            if not any(needs):
                continue
            for inp, need, gi in zip(node.inputs, needs, node.vjp(g, node.out, needs)):
                if not need or gi is None:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    finally:
        tape.recording = was_recording

    result = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif g is not None and not create_graph and g.tape is not None:
            g = g.detach()
        if not np.isfinite(g.data).all():
            raise NonFiniteError("non-finite gradient")
        result.append(g)
    return result


def finite_diff_grad(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of scalar ``f`` at ``point``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)

    def evaluate(arr):
        v = f(Tensor(arr.reshape(x.shape)))
        v = float(v.data if isinstance(v, Tensor) else v)
        if not np.isfinite(v):
            raise NonFiniteError("non-finite function value in finite differences")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = evaluate(flat)
        flat[i] = orig - epsilon
        fm = evaluate(flat)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * epsilon)
    return Tensor(out)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return record("concat", list(tensors), axis=axis)


def gather_rows(table, ids) -> Tensor:
    return record("gather_rows", [table, np.asarray(ids)])


def softmax_cross_entropy(logits, labels, weights) -> Tensor:
    return record("softmax_cross_entropy", [logits, np.asarray(labels), np.asarray(weights)])
