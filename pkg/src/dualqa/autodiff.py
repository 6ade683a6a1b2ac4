"""Reverse-mode automatic differentiation over dense float64 tensors.

A small tape-based engine: primitives compute eagerly on numpy arrays
and, while a :class:`ComputationRecord` is active, append nodes to it.
``backward()`` walks the tape once in reverse and accumulates gradients
additively into every tensor it reaches.  Desk-scale on purpose: float64
everywhere, no fusion, no sparse storage, no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "GradientCheckError",
    "forward_primitive",
    "backward",
    "grad_check",
    "no_recording",
    "zeros",
    "add",
    "elementwise_mul",
    "matmul",
    "concat",
    "row_lookup",
    "sigmoid",
    "tanh",
    "softmax_lastdim",
    "log",
    "square",
    "reduce_sum",
    "scalar_scale",
    "one_minus",
]

PRIMITIVE_KINDS = (
    "add",
    "elementwise_mul",
    "matmul",
    "concat",
    "row_lookup",
    "sigmoid",
    "tanh",
    "softmax_lastdim",
    "log",
    "square",
    "sum",
    "scalar_scale",
)


class GradientCheckError(ValueError):
    """Raised when analytic gradients disagree with central differences."""

    def __init__(self, message, max_relative_error):
        super().__init__(message)
        self.max_relative_error = max_relative_error


class Tensor:
    """Dense float64 array plus a same-shape, zero-initialized gradient.

    ``node_id`` is assigned when the tensor participates in the active
    ComputationRecord and is None for tensors never recorded.  Size-1
    tensors (shape ``()`` or ``(1,)``) play the role of scalars.
    """

    __slots__ = ("values", "_grad", "node_id", "_record")

    def __init__(self, values):
        v = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("tensor values must be finite")
        self.values = v
        self._grad = None
        self.node_id = None
        self._record = None

    @property
    def grad(self) -> np.ndarray:
        # Allocated on first access so pure inference never pays for it.
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


def _wrap(arr) -> Tensor:
    """Adopt a freshly computed array without re-validating or copying."""
    values = np.asarray(arr, dtype=np.float64)
    if values.ndim > 0 and not values.flags["C_CONTIGUOUS"]:
        values = np.ascontiguousarray(values)
    t = Tensor.__new__(Tensor)
    t.values = values
    t._grad = None
    t.node_id = None
    t._record = None
    return t


def zeros(shape) -> Tensor:
    return _wrap(np.zeros(shape))


class _Node:
    __slots__ = ("kind", "inputs", "input_ids", "output", "output_id", "ctx")

    def __init__(self, kind, inputs, input_ids, output, output_id, ctx):
        self.kind = kind
        self.inputs = inputs
        self.input_ids = input_ids
        self.output = output
        self.output_id = output_id
        self.ctx = ctx


_STACK: list["ComputationRecord | None"] = []


def _active() -> "ComputationRecord | None":
    return _STACK[-1] if _STACK else None


class no_recording:
    """Context manager that suspends recording (e.g. for inference)."""

    def __enter__(self):
        _STACK.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False


class ComputationRecord:
    """Topologically ordered tape of primitive applications.

    One record per training step; single-threaded by contract.  Leaf
    tensors (parameters, constants) are registered lazily on first use.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tensors: list[Tensor] = []
        self._next_id = 0
        self._backward_done = False

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.pop()
        if popped is not self:
            raise RuntimeError("mismatched ComputationRecord nesting")
        return False

    def _register(self, t: Tensor) -> int:
        if t._record is self and t.node_id is not None:
            return t.node_id
        t._record = self
        t.node_id = self._next_id
        self._next_id += 1
        self._tensors.append(t)
        return t.node_id

    def add_node(self, kind, inputs, output, ctx):
        input_ids = [self._register(t) for t in inputs]
        output_id = self._register(output)
        self.nodes.append(_Node(kind, list(inputs), input_ids, output, output_id, ctx))

    def zero_grads(self):
        for t in self._tensors:
            t.zero_grad()

    def reset_backward(self):
        self._backward_done = False

    def clear(self):
        self.nodes.clear()
        self._tensors.clear()
        self._next_id = 0
        self._backward_done = False

    def replay(self) -> list[np.ndarray]:
        """Re-execute every node from current leaf values.

        Returns one array per node, in tape order; with unchanged inputs
        the results are bit-identical to the recorded outputs.
        """
        computed: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            vals = [
                computed.get(t.node_id, t.values) if t.node_id is not None else t.values
                for t in node.inputs
            ]
            arr = _forward_values(node.kind, vals, node.ctx)
            computed[node.output_id] = arr
            out.append(arr)
        return out


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{kind}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_values(kind, vals, ctx):
    if kind == "add":
        a, b = vals
        _check_broadcast("add", a, b)
        return a + b
    if kind == "elementwise_mul":
        a, b = vals
        _check_broadcast("elementwise_mul", a, b)
        return a * b
    if kind == "matmul":
        a, b = vals
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ValueError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b
    if kind == "concat":
        axis = ctx["axis"]
        if not vals:
            raise ValueError("concat: needs at least one input")
        if axis == "rows":
            if any(v.ndim != 1 for v in vals) or len({v.shape[0] for v in vals}) != 1:
                raise ValueError(
                    "concat: row stacking needs equal-length vectors, got "
                    f"{[v.shape for v in vals]}"
                )
            return np.stack(vals, axis=0)
        try:
            return np.concatenate(vals, axis=axis)
        except ValueError as e:
            raise ValueError(f"concat: {e}") from None
    if kind == "row_lookup":
        (table,) = vals
        idx = ctx["indices"]
        n = table.shape[0]
        for i in idx:
            if not 0 <= i < n:
                raise IndexError(
                    f"row_lookup: index {i} out of range for table with {n} rows"
                )
        out = table[idx[0]] if ctx["single"] else table[idx]
        return np.array(out, dtype=np.float64)
    if kind == "sigmoid":
        return _stable_sigmoid(np.asarray(vals[0], dtype=np.float64))
    if kind == "tanh":
        return np.tanh(vals[0])
    if kind == "softmax_lastdim":
        x = vals[0]
        if x.ndim < 1:
            raise ValueError("softmax_lastdim: needs at least one dimension")
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if kind == "log":
        x = vals[0]
        if np.any(x <= 0.0):
            raise ValueError("log: inputs must be strictly positive")
        return np.log(x)
    if kind == "square":
        return vals[0] * vals[0]
    if kind == "sum":
        return np.asarray(vals[0].sum())
    if kind == "scalar_scale":
        return vals[0] * ctx["factor"]
    raise ValueError(f"unknown primitive kind: {kind!r}")


def _apply(kind, inputs, ctx=None) -> Tensor:
    ctx = ctx or {}
    out = _wrap(_forward_values(kind, [t.values for t in inputs], ctx))
    rec = _active()
    if rec is not None:
        rec.add_node(kind, inputs, out, ctx)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply("add", [a, b])


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return _apply("elementwise_mul", [a, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _apply("matmul", [a, b])


def concat(parts, axis=0) -> Tensor:
    """Concatenate along ``axis``; ``axis="rows"`` stacks equal-length
    vectors into a matrix (one row per input)."""
    return _apply("concat", list(parts), {"axis": axis})


def row_lookup(table: Tensor, indices) -> Tensor:
    """Select rows of ``table``.  An int index returns a single row; a
    sequence returns one row per entry."""
    single = isinstance(indices, (int, np.integer))
    idx = [int(indices)] if single else [int(i) for i in indices]
    return _apply("row_lookup", [table], {"indices": idx, "single": single})


def sigmoid(x: Tensor) -> Tensor:
    return _apply("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return _apply("tanh", [x])


def softmax_lastdim(x: Tensor) -> Tensor:
    return _apply("softmax_lastdim", [x])


def log(x: Tensor) -> Tensor:
    return _apply("log", [x])


def square(x: Tensor) -> Tensor:
    return _apply("square", [x])


def reduce_sum(x: Tensor) -> Tensor:
    return _apply("sum", [x])


def scalar_scale(x: Tensor, factor: float) -> Tensor:
    return _apply("scalar_scale", [x], {"factor": float(factor)})


def one_minus(x: Tensor) -> Tensor:
    return add(_wrap(np.ones_like(x.values)), scalar_scale(x, -1.0))


def forward_primitive(kind: str, inputs, **kwargs) -> Tensor:
    """Uniform dispatch over the primitive set; ``kwargs`` carries the
    non-tensor arguments (concat axis, lookup indices, scale factor)."""
    inputs = list(inputs)
    if kind == "concat":
        return concat(inputs, axis=kwargs.get("axis", 0))
    if kind == "row_lookup":
        return row_lookup(inputs[0], kwargs["indices"])
    if kind == "scalar_scale":
        return scalar_scale(inputs[0], kwargs["factor"])
    binary = {"add": add, "elementwise_mul": elementwise_mul, "matmul": matmul}
    unary = {
        "sigmoid": sigmoid,
        "tanh": tanh,
        "softmax_lastdim": softmax_lastdim,
        "log": log,
        "square": square,
        "sum": reduce_sum,
    }
    if kind in binary:
        if len(inputs) != 2:
            raise ValueError(f"{kind}: expected 2 inputs, got {len(inputs)}")
        return binary[kind](*inputs)
    if kind in unary:
        if len(inputs) != 1:
            raise ValueError(f"{kind}: expected 1 input, got {len(inputs)}")
        return unary[kind](inputs[0])
    raise ValueError(f"unknown primitive kind: {kind!r}")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _backward_node(node: _Node):
    g = node.output._grad
    if g is None or not g.any():
        return
    kind, ins, ctx = node.kind, node.inputs, node.ctx
    y = node.output.values
    if kind == "add":
        a, b = ins
        a.grad += _unbroadcast(g, a.values.shape)
        b.grad += _unbroadcast(g, b.values.shape)
    elif kind == "elementwise_mul":
        a, b = ins
        a.grad += _unbroadcast(g * b.values, a.values.shape)
        b.grad += _unbroadcast(g * a.values, b.values.shape)
    elif kind == "matmul":
        a, b = ins
        av, bv = a.values, b.values
        if av.ndim == 2 and bv.ndim == 2:
            a.grad += g @ bv.T
            b.grad += av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            a.grad += bv @ g
            b.grad += np.outer(av, g)
        elif av.ndim == 2 and bv.ndim == 1:
            a.grad += np.outer(g, bv)
            b.grad += av.T @ g
        else:
            a.grad += g * bv
            b.grad += g * av
    elif kind == "concat":
        axis = ctx["axis"]
        if axis == "rows":
            for i, t in enumerate(ins):
                t.grad += g[i]
        else:
            offset = 0
            for t in ins:
                n = t.values.shape[axis]
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                t.grad += g[tuple(sl)]
                offset += n
    elif kind == "row_lookup":
        (table,) = ins
        idx = ctx["indices"]
        if ctx["single"]:
            np.add.at(table.grad, idx[0], g)
        else:
            np.add.at(table.grad, idx, g)
    elif kind == "sigmoid":
        ins[0].grad += g * y * (1.0 - y)
    elif kind == "tanh":
        ins[0].grad += g * (1.0 - y * y)
    elif kind == "softmax_lastdim":
        ins[0].grad += y * (g - (g * y).sum(axis=-1, keepdims=True))
    elif kind == "log":
        ins[0].grad += g / ins[0].values
    elif kind == "square":
        ins[0].grad += 2.0 * ins[0].values * g
    elif kind == "sum":
        ins[0].grad += g
    elif kind == "scalar_scale":
        ins[0].grad += ctx["factor"] * g
    else:  # pragma: no cover - forward would have rejected the kind
        raise ValueError(f"unknown primitive kind: {kind!r}")


def backward(loss: Tensor):
    """Accumulate d(loss)/d(tensor) into every tensor the record reaches.

    Gradients add onto whatever is already in ``grad``; callers zero
    between steps.  A second call on the same record without a reset is
    an error to prevent silent double accumulation.
    """
    rec = loss._record
    if rec is None or not isinstance(rec, ComputationRecord):
        raise ValueError("backward: loss was not produced under an active ComputationRecord")
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if rec._backward_done:
        raise RuntimeError(
            "backward: already called on this record; reset_backward() or start a new record"
        )
    rec._backward_done = True
    loss.grad[...] += 1.0
    for node in reversed(rec.nodes):
        _backward_node(node)


def grad_check(build_loss, params, epsilon=1e-5, tolerance=1e-4, analytic_scale=1.0):
    """Compare backward() gradients against central finite differences.

    ``build_loss(params)`` must deterministically rebuild the scalar loss
    from the given parameter tensors.  Returns the max relative error
    over every entry of every parameter,
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``, and
    raises :class:`GradientCheckError` when it exceeds ``tolerance``.
    ``analytic_scale`` deliberately corrupts the analytic side so
    negative controls can prove the check is able to fail.
    """
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    for p in params:
        p.zero_grad()
    with ComputationRecord():
        loss = build_loss(params)
    base = loss.item()
    backward(loss)
    analytic = [p.grad.copy() * analytic_scale for p in params]
    for p in params:
        p.zero_grad()
    with no_recording():
        again = build_loss(params).item()
        if again != base:
            raise ValueError("grad_check: build_loss is not deterministic")
        max_err = 0.0
        for p, ana in zip(params, analytic):
            flat = p.values.reshape(-1)
            aflat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = build_loss(params).item()
                flat[i] = orig - epsilon
                lo = build_loss(params).item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * epsilon)
                a = aflat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > max_err:
                    max_err = err
    if max_err > tolerance:
        raise GradientCheckError(
            f"gradient check failed: max relative error {max_err:.3e} > {tolerance:.1e}",
            max_err,
        )
    return max_err
