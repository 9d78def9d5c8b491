"""Learned vector fields ``f(z, t; theta)``.

A :class:`VectorField` is a stack of dense MLP blocks, one per unit time
interval, with time fed as an extra input column.  The final layer of every
block starts at exactly zero, so a freshly built field is the zero field and
the flow it generates is the identity map.
"""

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DomainError

BLOCK_TIME = 1.0
_TIME_SLACK = 1e-9


@dataclass
class MlpBlock:
    """Dense layers ``(d+1) -> hidden -> ... -> d`` with softplus in between."""

    weights: list
    biases: list

    @property
    def depth(self):
        return len(self.weights)

    def __call__(self, z, t):
        batch = z.shape[0]
        h = ad.concat_last(z, Tensor(np.full((batch, 1), float(t))))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, w, b)
            if i < last:
                h = ad.softplus(h)
        return h

    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class VectorField:
    """Piecewise-constant-in-time stack of :class:`MlpBlock`.

    Block ``k`` governs ``[k, k+1)``; the last block also owns ``t = T``.
    ``tape`` is set on copies returned by :meth:`watch`, whose parameter
    tensors are leaves of that tape.
    """

    d: int
    hidden: int
    depth: int
    blocks: list
    seed: int = 0
    tape: object = dc_field(default=None, repr=False, compare=False)

    @property
    def T(self):
        return BLOCK_TIME * len(self.blocks)

    def segments(self):
        """``(t_start, t_end, block_index)`` for each block, in time order."""
        return [(k * BLOCK_TIME, (k + 1) * BLOCK_TIME, k) for k in range(len(self.blocks))]

    def block_index(self, t):
        if t < -_TIME_SLACK or t > self.T + _TIME_SLACK:
            raise DomainError(f"t={t} outside [0, {self.T}]")
        return min(max(int(math.floor(t / BLOCK_TIME)), 0), len(self.blocks) - 1)

    def __call__(self, z, t, block=None):
        if block is None:
            block = self.block_index(t)
        else:
            lo = block * BLOCK_TIME
            if t < lo - _TIME_SLACK or t > lo + BLOCK_TIME + _TIME_SLACK:
                raise DomainError(f"t={t} outside block {block}")
        return self.blocks[block](z, t)

    # parameters -------------------------------------------------------------

    def tensors(self):
        out = []
        for blk in self.blocks:
            out += blk.tensors()
        return out

    def parameter_count(self):
        return sum(t.data.size for t in self.tensors())

    def parameters(self):
        """Flat copy of all parameters: per block, per layer, weight then bias."""
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def load_parameters(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.parameter_count():
            raise ConfigurationError(
                f"expected {self.parameter_count()} parameters, got {values.size}")
        i = 0
        for blk in self.blocks:
            for k in range(blk.depth):
                for name in ("weights", "biases"):
                    arr = getattr(blk, name)
                    shape = arr[k].shape
                    n = int(np.prod(shape))
                    arr[k] = Tensor(values[i:i + n].reshape(shape).copy())
                    i += n

    def watch(self, tape):
        """A copy of this field whose parameters are leaves on ``tape``.

        Returns ``(bound_field, leaves)`` with ``leaves`` in :meth:`parameters`
        order.
        """
        blocks = []
        leaves = []
        for blk in self.blocks:
            ws, bs = [], []
            for w, b in zip(blk.weights, blk.biases):
                ws.append(tape.watch(w))
                bs.append(tape.watch(b))
                leaves += [ws[-1], bs[-1]]
            blocks.append(MlpBlock(ws, bs))
        bound = VectorField(self.d, self.hidden, self.depth, blocks, self.seed, tape)
        return bound, leaves

    def copy(self):
        out = build_field(self.d, self.hidden, self.depth, len(self.blocks), self.seed)
        out.load_parameters(self.parameters())
        return out


def build_field(d, hidden=64, depth=4, blocks=1, seed=0):
    """Identity-initialized field: Gaussian ``N(0, 1/fan_in)`` layers, zero last layer."""
    if d < 1 or hidden < 1 or depth < 2 or blocks < 1:
        raise ConfigurationError(
            f"invalid field sizes d={d} hidden={hidden} depth={depth} blocks={blocks}")
    rng = np.random.default_rng(seed)
    widths = [d + 1] + [hidden] * (depth - 1) + [d]
    out = []
    for _ in range(blocks):
        ws, bs = [], []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if k == depth - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            ws.append(Tensor(w))
            bs.append(Tensor(np.zeros(fan_out)))
        out.append(MlpBlock(ws, bs))
    return VectorField(d, hidden, depth, out, seed)


def eval_f(field, z, t, block=None):
    """Evaluate ``field`` at ``(z, t)``; ``z`` is ``[batch, d]``."""
    return field(z, t, block)


class LinearField:
    """``f(z, t) = z A^T`` on ``[0, T]``: the linear dynamics used as an oracle.

    Its only parameter is the matrix ``A``, so it plugs into every solver,
    objective and gradient routine a :class:`VectorField` does.
    """

    def __init__(self, A, T=1.0, tape=None, _tensor=None):
        self.A = _tensor if _tensor is not None else Tensor(np.array(A, dtype=np.float64))
        self.d = self.A.shape[0]
        self._T = float(T)
        self.tape = tape

    @property
    def T(self):
        return self._T

    def segments(self):
        return [(0.0, self._T, 0)]

    def __call__(self, z, t, block=None):
        if t < -_TIME_SLACK or t > self._T + _TIME_SLACK:
            raise DomainError(f"t={t} outside [0, {self._T}]")
        return ad.matmul(z, ad.transpose(self.A))

    def tensors(self):
        return [self.A]

    def parameters(self):
        return self.A.data.ravel().copy()

    def parameter_count(self):
        return self.A.data.size

    def load_parameters(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.A.data.size:
            raise ConfigurationError("parameter length mismatch")
        self.A = Tensor(values.reshape(self.A.shape).copy())

    def watch(self, tape):
        leaf = tape.watch(self.A)
        return LinearField(None, self._T, tape, _tensor=leaf), [leaf]

    def copy(self):
        return LinearField(self.A.data.copy(), self._T)


# checkpoints ------------------------------------------------------------------

def field_to_dict(field):
    return {
        "meta": {"d": field.d, "hidden": field.hidden, "depth": field.depth,
                 "blocks": len(field.blocks), "seed": field.seed},
        "params": field.parameters().tolist(),
    }


def field_from_dict(doc):
    try:
        meta = doc["meta"]
        field = build_field(int(meta["d"]), int(meta["hidden"]), int(meta["depth"]),
                            int(meta["blocks"]), int(meta.get("seed", 0)))
        field.load_parameters(np.asarray(doc["params"], dtype=np.float64))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed checkpoint: {exc}") from exc
    return field


def save_field(field, path, extra=None):
    doc = field_to_dict(field)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_field(path):
    with open(path) as fh:
        doc = json.load(fh)
    return field_from_dict(doc)
