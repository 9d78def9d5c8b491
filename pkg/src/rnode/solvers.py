"""Fixed-grid RK4 and adaptive Dormand-Prince integration.

States are anything closed under ``+`` and scalar ``*`` that exposes
``arrays()`` (the underlying float arrays, used for step control and finite
checks): a :class:`~rnode.autodiff.Tensor`, an :class:`AugmentedState`, or a
caller-defined container.  Right-hand sides are callables ``rhs(state, t)``.
A right-hand side may define ``begin_step()``; the fixed-grid solver calls it
once at the start of every step.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import (BudgetError, ConfigurationError, InstabilityError,
                     NonFiniteError, StiffnessError)

__all__ = [
    "AugmentedState", "SolverConfig", "SolveResult", "rk4_step", "solve_fixed",
    "solve_adaptive", "solve_reverse", "solve", "write_trace_csv",
]


@dataclass
class AugmentedState:
    """Position, log-determinant, kinetic energy and Frobenius accumulators."""

    z: Tensor
    l: Tensor
    E: Tensor
    n: Tensor

    @classmethod
    def start(cls, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        zero = np.zeros(x.shape[0])
        return cls(x, Tensor(zero), Tensor(zero.copy()), Tensor(zero.copy()))

    def __add__(self, other):
        return AugmentedState(self.z + other.z, self.l + other.l,
                              self.E + other.E, self.n + other.n)

    def __mul__(self, c):
        return AugmentedState(self.z * c, self.l * c, self.E * c, self.n * c)

    __rmul__ = __mul__

    def arrays(self):
        return [self.z.data, self.l.data, self.E.data, self.n.data]

    def detach(self):
        return AugmentedState(self.z.detach(), self.l.detach(),
                              self.E.detach(), self.n.detach())


@dataclass
class SolverConfig:
    method: str = "rk4_fixed"
    step_size: float = 0.25
    rtol: float = 1e-5
    atol: float = 1e-5
    initial_step: float = 1e-2
    max_steps: int = 10_000
    norm: str = "row"

    def __post_init__(self):
        if self.method not in ("rk4_fixed", "dopri5"):
            raise ConfigurationError(f"unknown solver method {self.method!r}")
        if self.norm not in ("row", "rms"):
            raise ConfigurationError(f"unknown error norm {self.norm!r}")
        if min(self.step_size, self.rtol, self.atol, self.initial_step) <= 0:
            raise ConfigurationError("step size and tolerances must be positive")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")


@dataclass
class SolveResult:
    final: object
    nfe: int
    trace: Optional[list] = None
    accepted: int = 0
    rejected: int = 0
    errors: list = field(default_factory=list, repr=False)


def _arrays(state):
    return state.arrays()


class _Counter:
    def __init__(self, rhs):
        self.rhs = rhs
        self.calls = 0

    def __call__(self, state, t):
        self.calls += 1
        return self.rhs(state, t)


def _snapshot(state):
    return state.detach() if hasattr(state, "detach") else state


def rk4_step(rhs, state, t, h):
    """One classical RK4 step; exactly four ``rhs`` evaluations."""
    try:
        k1 = rhs(state, t)
        k2 = rhs(state + (h / 2) * k1, t + h / 2)
        k3 = rhs(state + (h / 2) * k2, t + h / 2)
        k4 = rhs(state + h * k3, t + h)
        return state + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    except NonFiniteError as exc:
        raise InstabilityError(f"non-finite RK4 stage at t={t}, h={h}", t=t, h=h) from exc


def solve_fixed(rhs, state0, t0, t1, h, trace=False):
    """RK4 over the uniform grid ``t0, t0 +- h, ..., t1`` (either direction)."""
    if h <= 0:
        raise ConfigurationError("step size must be positive")
    span = t1 - t0
    steps = int(round(abs(span) / h))
    if abs(steps * h - abs(span)) > 1e-9 * max(1.0, abs(span)):
        raise ConfigurationError(f"step {h} does not divide [{t0}, {t1}]")
    sign = 1.0 if span >= 0 else -1.0
    counted = _Counter(rhs)
    begin = getattr(rhs, "begin_step", None)
    state = state0
    snaps = [(t0, _snapshot(state))] if trace else None
    for k in range(steps):
        t = t0 + sign * k * h
        if begin is not None:
            begin()
        state = rk4_step(counted, state, t, sign * h)
        if trace:
            snaps.append((t0 + sign * (k + 1) * h if k + 1 < steps else t1, _snapshot(state)))
    return SolveResult(state, counted.calls, snaps, accepted=steps)


# Dormand-Prince 5(4), FSAL.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


def _combine(state, h, coeffs, ks):
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = c * k
        acc = term if acc is None else acc + term
    return state if acc is None else state + h * acc


def _batch_rows(arrays):
    """Common leading (batch) dimension of the state arrays, or ``None``."""
    sizes = {a.shape[0] if a.ndim else None for a in arrays}
    return sizes.pop() if len(sizes) == 1 else None


def _error_norm(err_arrays, y_arrays, ynew_arrays, rtol, atol, norm="row"):
    """Scaled error ``|e_i| / (atol + rtol * max(|y_i|, |y_new_i|))``.

    ``"rms"`` takes the root mean square over every component.  ``"row"``
    takes the RMS within each batch row and then the maximum over rows, so
    the tolerance holds for every trajectory separately instead of on average
    over the batch; states without a common leading dimension fall back to
    ``"rms"``.
    """
    rows = _batch_rows(err_arrays) if norm == "row" else None
    if rows is None:
        total = 0.0
        count = 0
        for e, y, yn in zip(err_arrays, y_arrays, ynew_arrays):
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(yn))
            total += float(np.sum((e / scale) ** 2))
            count += e.size
        return float(np.sqrt(total / max(count, 1)))
    total = np.zeros(rows)
    count = 0
    for e, y, yn in zip(err_arrays, y_arrays, ynew_arrays):
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(yn))
        sq = ((e / scale) ** 2).reshape(rows, -1)
        total += sq.sum(axis=1)
        count += sq.shape[1]
    return float(np.sqrt(np.max(total) / max(count, 1)))


def solve_adaptive(rhs, state0, t0, t1, config=None, trace=False):
    """Dormand-Prince 5(4) with FSAL; integrates from ``t0`` to ``t1``.

    A step is accepted when the scaled error norm (see ``config.norm`` and
    :func:`_error_norm`) is at most one.
    """
    config = config or SolverConfig(method="dopri5")
    if min(config.rtol, config.atol, config.initial_step) <= 0:
        raise ConfigurationError("tolerances and initial step must be positive")
    span = t1 - t0
    direction = 1.0 if span >= 0 else -1.0
    counted = _Counter(rhs)
    t = t0
    y = state0
    snaps = [(t0, _snapshot(y))] if trace else None
    accepted = rejected = 0
    errors = []
    if span == 0:
        return SolveResult(y, 0, snaps)
    h = min(config.initial_step, abs(span))
    min_h = 1e-12 * abs(span)
    try:
        k1 = counted(y, t)
    except NonFiniteError as exc:
        raise InstabilityError(f"non-finite derivative at t={t}", t=t, h=h) from exc
    while direction * (t1 - t) > 0:
        if accepted + rejected >= config.max_steps:
            raise BudgetError(f"exceeded {config.max_steps} steps at t={t}")
        last = h >= abs(t1 - t) * (1 - 1e-12)
        if last:
            h = abs(t1 - t)
        hs = direction * h
        try:
            ks = [k1]
            for i in range(1, 7):
                yi = _combine(y, hs, _A[i], ks)
                ks.append(counted(yi, t + _C[i] * hs))
            y_new = yi  # stage 7 input is the 5th-order solution
        except NonFiniteError:
            err = np.inf
            y_new = None
        else:
            e_arrays = [hs * sum(c * a for c, a in zip(_E, comps) if c != 0.0)
                        for comps in zip(*(_arrays(k) for k in ks))]
            err = _error_norm(e_arrays, _arrays(y), _arrays(y_new), config.rtol, config.atol,
                              config.norm)
        if err <= 1.0:
            t = t1 if last else t + hs
            y = y_new
            k1 = ks[6]
            accepted += 1
            errors.append(err)
            if trace:
                snaps.append((t, _snapshot(y)))
        else:
            rejected += 1
        if err == 0.0:
            factor = MAX_FACTOR
        elif not np.isfinite(err):
            factor = MIN_FACTOR
        else:
            factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err ** -0.2))
        h = h * factor
        if direction * (t1 - t) > 0 and h < min_h:
            raise StiffnessError(f"step size underflow at t={t}", t=t, h=h)
    return SolveResult(y, counted.calls, snaps, accepted, rejected, errors)


def solve(rhs, state0, t0, t1, config, trace=False):
    if config.method == "rk4_fixed":
        return solve_fixed(rhs, state0, t0, t1, config.step_size, trace)
    return solve_adaptive(rhs, state0, t0, t1, config, trace)


def solve_reverse(rhs, stateT, t1, t0, config, trace=False):
    """Integrate backward in time from ``t1`` down to ``t0 < t1``."""
    if not t1 > t0:
        raise ConfigurationError("reverse solve needs t1 > t0")
    return solve(rhs, stateT, t1, t0, config, trace)


def write_trace_csv(path, trace):
    """Rows ``t, batch_index, z_0..z_{d-1}, l, E, n`` for every snapshot."""
    first = trace[0][1]
    d = (first.z if isinstance(first, AugmentedState) else first).shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "batch_index"] + [f"z_{i}" for i in range(d)] + ["l", "E", "n"])
        for t, s in trace:
            if isinstance(s, AugmentedState):
                z, l, E, n = (a for a in s.arrays())
            else:
                z = s.data
                l = E = n = np.zeros(z.shape[0])
            for b in range(z.shape[0]):
                w.writerow([repr(float(t)), b] + [repr(float(v)) for v in z[b]]
                           + [repr(float(l[b])), repr(float(E[b])), repr(float(n[b]))])
