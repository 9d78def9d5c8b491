"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records, on the tape of its recorded operands, one node per
result holding the parent node ids and one adjoint rule per parent.  Adjoint
rules are themselves written with tensor primitives, so running a reverse
sweep with ``create_graph=True`` records the sweep onto the same tape and the
result can be differentiated again.  This is what lets the training loss
(which contains vector-Jacobian products) be differentiated w.r.t. the
network parameters.
"""

from contextlib import contextmanager, nullcontext

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tape", "Tensor", "tensor", "affine", "softplus", "sigmoid", "concat_last",
    "take_last", "square", "exp", "log", "sin", "cos", "tanh", "matmul",
    "backward", "grad", "vjp", "value_and_vjp", "vjp_rows",
]


class Tape:
    """Append-only record of primitive operations.

    ``nodes[i]`` is ``(parents, rules)``; leaves have empty ``parents``.  Node
    ids are assigned in creation order, so every node's operands precede it.
    """

    def __init__(self):
        self.nodes = []
        self._paused = 0

    def __len__(self):
        return len(self.nodes)

    def watch(self, value):
        """Record ``value`` as a new leaf and return it as a tensor."""
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=np.float64)
        self.nodes.append(((), ()))
        return Tensor(data, self, len(self.nodes) - 1)

    def is_leaf(self, node):
        return not self.nodes[node][0]

    @property
    def recording(self):
        return self._paused == 0

    @contextmanager
    def paused(self):
        self._paused += 1
        try:
            yield self
        finally:
            self._paused -= 1

    def _append(self, parents, rules):
        self.nodes.append((parents, rules))
        return len(self.nodes) - 1


class Tensor:
    """A float64 array, optionally linked to a node of a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    def __repr__(self):
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor({self.data!r}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def recorded(self):
        return self.tape is not None

    @property
    def T(self):
        return transpose(self)

    def arrays(self):
        return [self.data]

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def tensor(value):
    """Copy ``value`` into a fresh unrecorded tensor."""
    return Tensor(np.array(value, dtype=np.float64))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, pairs):
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced a non-finite value")
    tape = None
    parents = []
    rules = []
    for x, rule in pairs:
        if x.tape is None:
            continue
        if tape is None:
            tape = x.tape
        elif x.tape is not tape:
            raise ContractError("operands are recorded on different tapes")
        parents.append(x.node)
        rules.append(rule)
    if tape is None or not tape.recording:
        return Tensor(data)
    return Tensor(data, tape, tape._append(tuple(parents), tuple(rules)))


# shape plumbing -------------------------------------------------------------

def sum_to(x, shape):
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _result(data, [(x, lambda g: broadcast_to(g, src))])


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.broadcast_to(x.data, shape).copy()
    return _result(data, [(x, lambda g: sum_to(g, src))])


def reshape(x, shape):
    src = x.shape
    return _result(x.data.reshape(shape), [(x, lambda g: reshape(g, src))])


def transpose(x):
    return _result(x.data.T, [(x, lambda g: transpose(g))])


def tsum(x, axis=None):
    x = _lift(x)
    src = x.shape
    kept = np.sum(x.data, axis=axis, keepdims=True).shape

    def rule(g):
        return broadcast_to(reshape(g, kept), src)

    return _result(np.sum(x.data, axis=axis), [(x, rule)])


# arithmetic ------------------------------------------------------------------

def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, [(a, lambda g: sum_to(g, sa)),
                                     (b, lambda g: sum_to(g, sb))])


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, [(a, lambda g: sum_to(g, sa)),
                                     (b, lambda g: sum_to(neg(g), sb))])


def neg(a):
    return _result(-a.data, [(a, lambda g: neg(g))])


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data * b.data, [(a, lambda g: sum_to(mul(g, b), sa)),
                                     (b, lambda g: sum_to(mul(g, a), sb))])


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _result(data, [
        (a, lambda g: sum_to(div(g, b), sa)),
        (b, lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), sb)),
    ])


def square(x):
    return _result(x.data * x.data, [(x, lambda g: mul(g, mul(x, 2.0)))])


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, [(a, lambda g: matmul(g, transpose(b))),
                                     (b, lambda g: matmul(transpose(a), g))])


def affine(input, weight, bias):
    """``input @ weight + bias`` for ``[batch, in] x [in, out] + [out]``."""
    x, w, b = _lift(input), _lift(weight), _lift(bias)
    if (x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0]
            or b.shape[0] != w.shape[1]):
        raise DimensionError(
            f"affine shapes input {x.shape}, weight {w.shape}, bias {b.shape}")
    data = x.data @ w.data + b.data
    return _result(data, [(x, lambda g: matmul(g, transpose(w))),
                          (w, lambda g: matmul(transpose(x), g)),
                          (b, lambda g: tsum(g, 0))])


# elementwise nonlinearities -------------------------------------------------

def _logistic(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x):
    data = _logistic(x.data)

    def rule(g):
        return mul(g, mul(out, sub(1.0, out)))

    out = _result(data, [(x, rule)])
    return out


def softplus(x):
    """``log(1 + exp(x))``, evaluated as ``x + log1p(exp(-x))`` for ``x > 0``."""
    x = _lift(x)
    a = x.data
    data = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return _result(data, [(x, lambda g: mul(g, sigmoid(x)))])


def exp(x):
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _result(data, [(x, lambda g: mul(g, exp(x)))])


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result(data, [(x, lambda g: div(g, x))])


def sin(x):
    return _result(np.sin(x.data), [(x, lambda g: mul(g, cos(x)))])


def cos(x):
    return _result(np.cos(x.data), [(x, lambda g: neg(mul(g, sin(x))))])


def tanh(x):
    def rule(g):
        y = tanh(x)
        return mul(g, sub(1.0, mul(y, y)))

    return _result(np.tanh(x.data), [(x, rule)])


# column plumbing ------------------------------------------------------------

def concat_last(a, b):
    """Columns of ``a`` followed by columns of ``b``."""
    a, b = _lift(a), _lift(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"leading dims differ: {a.shape} vs {b.shape}")
    da, db = a.shape[-1], b.shape[-1]
    data = np.concatenate([a.data, b.data], axis=-1)
    return _result(data, [(a, lambda g: take_last(g, 0, da)),
                          (b, lambda g: take_last(g, da, da + db))])


def take_last(x, start, stop):
    """Columns ``start:stop`` of the last axis."""
    width = x.shape[-1]
    lead = x.shape[:-1]

    def rule(g):
        left = Tensor(np.zeros(lead + (start,)))
        right = Tensor(np.zeros(lead + (width - stop,)))
        return concat_last(concat_last(left, g), right)

    return _result(x.data[..., start:stop].copy(), [(x, rule)])


# reverse sweeps --------------------------------------------------------------

def _reverse(tape, output, seed, create_graph, targets=None):
    if targets is None:
        lowest, keep = 0, None
    else:
        lowest, keep = min(targets), set(targets)
    grads = {output.node: seed}
    found = {}
    with (nullcontext() if create_graph else tape.paused()):
        for i in range(output.node, lowest - 1, -1):
            if not grads:
                break
            g = grads.pop(i, None)
            if g is None:
                continue
            parents, rules = tape.nodes[i]
            if keep is None:
                if not parents:
                    found[i] = g
            elif i in keep:
                found[i] = g
            for p, rule in zip(parents, rules):
                if p < lowest:
                    continue
                gp = rule(g)
                prev = grads.get(p)
                grads[p] = gp if prev is None else add(prev, gp)
    return found


def backward(tape, output, create_graph=False):
    """Gradient of a scalar ``output`` w.r.t. every leaf of ``tape`` it reaches.

    Returns a dict from leaf node id to gradient tensor.  Leaves that do not
    influence ``output`` are absent.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is not tape:
        raise ContractError("output is not recorded on this tape")
    seed = Tensor(np.ones_like(output.data))
    return _reverse(tape, output, seed, create_graph)


def grad(output, inputs, seed=None, create_graph=False):
    """Gradients of ``output`` (contracted with ``seed``) w.r.t. ``inputs``.

    ``inputs`` may be leaves or intermediate nodes.  Inputs ``output`` does not
    depend on get zeros.
    """
    if seed is None:
        if output.data.size != 1:
            raise ContractError("non-scalar output needs an explicit seed")
        seed = Tensor(np.ones_like(output.data))
    seed = _lift(seed)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
    zeros = [Tensor(np.zeros_like(x.data)) for x in inputs]
    tape = output.tape
    live = [x for x in inputs if x.tape is tape and tape is not None]
    if tape is None or not live:
        return zeros
    found = _reverse(tape, output, seed, create_graph, [x.node for x in live])
    out = []
    for x, z in zip(inputs, zeros):
        g = found.get(x.node) if x.tape is tape else None
        out.append(z if g is None else g)
    return out


def _as_watched(point):
    if point.tape is not None:
        return point
    return Tape().watch(point)


def value_and_vjp(fn, point, covector, create_graph=False):
    """Evaluate ``fn(point)`` and the product ``covector^T d fn / d point``.

    One forward and one reverse sweep.  If ``point`` is not recorded it is
    watched on a fresh tape, otherwise the sweep is recorded on ``point``'s
    tape when ``create_graph`` is set.
    """
    point = _as_watched(point)
    value = fn(point)
    covector = _lift(covector)
    if covector.shape != value.shape:
        raise DimensionError(
            f"covector shape {covector.shape} != output shape {value.shape}")
    (g,) = grad(value, [point], seed=covector, create_graph=create_graph)
    return value, g


def vjp(fn, point, covector, create_graph=False):
    return value_and_vjp(fn, point, covector, create_graph)[1]


def vjp_rows(value, point, create_graph=False):
    """Jacobian rows ``e_i^T d value / d point`` for every output column ``i``.

    ``value`` must already be computed from the recorded ``point``.  Returns a
    list of ``[batch, d_in]`` tensors, one per output column.
    """
    rows = []
    width = value.shape[-1]
    for i in range(width):
        basis = np.zeros(value.shape)
        basis[..., i] = 1.0
        (g,) = grad(value, [point], seed=Tensor(basis), create_graph=create_graph)
        rows.append(g)
    return rows
