"""Continuous normalizing flow with kinetic and Jacobian regularization.

The flow integrates the augmented system

    dz/dt = f(z, t)
    dl/dt = div f(z, t)
    dE/dt = |f(z, t)|^2
    dn/dt = |grad f(z, t)|_F^2

from ``(x, 0, 0, 0)`` at ``t = 0`` to ``T``.  The divergence and the Frobenius
norm are either estimated from a single vector-Jacobian product
``eps^T grad f`` with Gaussian ``eps`` (the same product serves both), or
computed exactly by assembling the Jacobian row by row (small ``d`` only).

Fields are evaluated in one of two modes, chosen by whether the field's
parameters are recorded on a tape (see ``VectorField.watch``):

* training: every operation, including the inner vector-Jacobian products,
  is recorded on that tape so the loss can be differentiated w.r.t. the
  parameters;
* inference: each right-hand-side call builds a throwaway tape for ``z``
  alone and returns detached values.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigurationError, DomainError, InstabilityError, NonFiniteError
from .solvers import AugmentedState, SolverConfig, solve, solve_reverse

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class RegWeights:
    lambda_K: float = 0.01
    lambda_J: float = 0.01

    def __post_init__(self):
        if self.lambda_K < 0 or self.lambda_J < 0:
            raise ConfigurationError("regularization weights must be non-negative")


@dataclass
class FlowOutput:
    zT: Tensor
    logp: Tensor
    kinetic: Tensor
    frob: Tensor
    nfe: int
    logdet: Optional[Tensor] = None
    trace: Optional[list] = None


def _prepare(field, z):
    """Return ``(z_recorded, create_graph)`` for the field's evaluation mode."""
    tape = getattr(field, "tape", None)
    if tape is None:
        return Tape().watch(z), False
    if z.tape is not tape:
        z = tape.watch(z)
    return z, True


def _detached(x):
    return Tensor(x.data) if isinstance(x, Tensor) else x


def _field_and_vjp(field, z, t, eps, block=None):
    z, create = _prepare(field, z)
    f = field(z, t, block)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != f.shape:
        raise ConfigurationError(f"noise shape {eps.shape} != field output {f.shape}")
    (v,) = ad.grad(f, [z], seed=eps, create_graph=create)
    return f, v, eps, create


def divergence_estimate(field, z, t, eps, block=None):
    """Hutchinson estimate ``eps^T grad f eps`` per row, plus ``eps^T grad f``."""
    _, v, eps, create = _field_and_vjp(field, z, t, eps, block)
    div = ad.tsum(v * eps, 1)
    if not create:
        return _detached(div), _detached(v)
    return div, v


def _jacobian_rows(field, z, t, block=None):
    z, create = _prepare(field, z)
    f = field(z, t, block)
    return f, ad.vjp_rows(f, z, create_graph=create), create


def divergence_exact(field, z, t, block=None):
    """Trace of the Jacobian, assembled from ``d`` basis vector-Jacobian products."""
    _, rows, create = _jacobian_rows(field, z, t, block)
    div = _diag_sum(rows)
    return div if create else _detached(div)


def _diag_sum(rows):
    div = None
    for i, row in enumerate(rows):
        term = ad.reshape(ad.take_last(row, i, i + 1), (row.shape[0],))
        div = term if div is None else div + term
    return div


def frobenius_sq_estimate(vjp_cache):
    """``|eps^T grad f|^2`` per row; no further differentiation."""
    return ad.tsum(ad.square(vjp_cache), 1)


def frobenius_sq_exact(field, z, t, block=None):
    _, rows, create = _jacobian_rows(field, z, t, block)
    out = None
    for row in rows:
        term = ad.tsum(ad.square(row), 1)
        out = term if out is None else out + term
    return out if create else _detached(out)


def kinetic_density(f_value):
    """Squared speed ``|f|^2`` per row."""
    return ad.tsum(ad.square(f_value), 1)


def log_normal(z):
    """Standard multivariate normal log-density per row."""
    d = z.shape[1]
    return -0.5 * d * LOG_2PI - 0.5 * ad.tsum(ad.square(z), 1)


def bits_per_dim(logp, d):
    logp = logp.data if isinstance(logp, Tensor) else np.asarray(logp, dtype=np.float64)
    return -logp / (d * math.log(2.0))


class AugmentedDynamics:
    """Right-hand side of the augmented system for one block of the field.

    One field evaluation and one vector-Jacobian product per call serve all
    four derivatives (``divergence="exact"`` instead uses ``d`` products).
    With ``eps_per_step`` a fresh noise draw is taken from ``rng`` at the
    start of each solver step, otherwise ``eps`` is held fixed for the solve.
    """

    def __init__(self, field, eps=None, divergence="hutchinson", kinetic=True,
                 frobenius=True, block=None, rng=None, eps_per_step=False):
        if divergence not in ("hutchinson", "exact"):
            raise ConfigurationError(f"unknown divergence mode {divergence!r}")
        if divergence == "hutchinson" and eps is None and not eps_per_step:
            raise ConfigurationError("Hutchinson divergence needs a noise draw")
        if eps_per_step and rng is None:
            raise ConfigurationError("per-step noise needs an rng")
        self.field = field
        self.eps = None if eps is None else (eps if isinstance(eps, Tensor) else Tensor(eps))
        self.divergence = divergence
        self.kinetic = kinetic
        self.frobenius = frobenius
        self.block = block
        self.rng = rng
        self.eps_per_step = eps_per_step

    def begin_step(self):
        if self.eps_per_step:
            shape = self.eps.shape if self.eps is not None else None
            if shape is None:
                raise ConfigurationError("per-step noise needs an initial shape")
            self.eps = Tensor(self.rng.standard_normal(shape))

    def __call__(self, state, t):
        batch = state.z.shape[0]
        if self.divergence == "exact":
            f, rows, create = _jacobian_rows(self.field, state.z, t, self.block)
            div = _diag_sum(rows)
            frob = None
            if self.frobenius:
                for row in rows:
                    term = ad.tsum(ad.square(row), 1)
                    frob = term if frob is None else frob + term
        else:
            f, v, eps, create = _field_and_vjp(self.field, state.z, t, self.eps, self.block)
            div = ad.tsum(v * eps, 1)
            frob = frobenius_sq_estimate(v) if self.frobenius else None
        kin = kinetic_density(f) if self.kinetic else None
        zero = Tensor(np.zeros(batch))
        out = AugmentedState(f, div, zero if kin is None else kin,
                             zero if frob is None else frob)
        return out if create else out.detach()


def _segments(field):
    return field.segments()


def integrate(field, x, solver=None, divergence="hutchinson", eps=None, rng=None,
              kinetic=True, frobenius=True, trace=False, eps_per_step=False):
    """Solve the augmented system block by block; returns ``(state, nfe, trace)``."""
    solver = solver or SolverConfig()
    if eps_per_step and solver.method != "rk4_fixed":
        raise ConfigurationError("per-step noise is only defined on the fixed grid")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if divergence == "hutchinson" and eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(x.shape)
    state = AugmentedState.start(x)
    nfe = 0
    snaps = [] if trace else None
    for t0, t1, block in _segments(field):
        rhs = AugmentedDynamics(field, eps, divergence, kinetic, frobenius, block,
                                rng, eps_per_step)
        res = solve(rhs, state, t0, t1, solver, trace)
        state = res.final
        nfe += res.nfe
        if trace:
            snaps.extend(res.trace if not snaps else res.trace[1:])
    return state, nfe, snaps


def forward_logdensity(field, x, solver=None, divergence="hutchinson", eps=None,
                       rng=None, kinetic=True, frobenius=True, trace=False,
                       eps_per_step=False):
    """``log p(x) = log q(z(T)) + l(T)`` with ``q`` the standard normal."""
    state, nfe, snaps = integrate(field, x, solver, divergence, eps, rng, kinetic,
                                  frobenius, trace, eps_per_step)
    try:
        logp = log_normal(state.z) + state.l
    except NonFiniteError as exc:
        raise InstabilityError("non-finite log-density") from exc
    return FlowOutput(state.z, logp, state.E, state.n, nfe, state.l, snaps)


def rnode_objective(field, batch, weights, solver=None, eps=None, divergence="hutchinson",
                    rng=None, eps_per_step=False):
    """Regularized negative log-likelihood, averaged over samples and dimensions.

    Returns ``(loss, components)`` where ``components`` holds the normalized
    ``nll``, ``kinetic`` and ``frob`` terms (so that
    ``loss = nll + lambda_K * kinetic + lambda_J * frob``) and the raw
    :class:`FlowOutput` under ``"flow"``.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    m, d = batch.shape
    if m < 1:
        raise ConfigurationError("empty batch")
    out = forward_logdensity(field, batch, solver, divergence, eps, rng,
                             trace=False, eps_per_step=eps_per_step)
    scale = 1.0 / (m * d)
    nll = ad.tsum(-log_normal(out.zT) - out.logdet) * scale
    kinetic = ad.tsum(out.kinetic) * scale
    frob = ad.tsum(out.frob) * scale
    loss = nll
    if weights.lambda_K:
        loss = loss + weights.lambda_K * kinetic
    if weights.lambda_J:
        loss = loss + weights.lambda_J * frob
    return loss, {"nll": nll, "kinetic": kinetic, "frob": frob, "flow": out}


def _plain_rhs(field, block):
    def rhs(z, t):
        return _detached(field(z, t, block))
    return rhs


def flow_forward(field, x, solver=None, trace=False):
    """Push ``x`` through the flow (positions only)."""
    solver = solver or SolverConfig()
    z = x if isinstance(x, Tensor) else Tensor(x)
    nfe = 0
    snaps = [] if trace else None
    for t0, t1, block in _segments(field):
        res = solve(_plain_rhs(field, block), z, t0, t1, solver, trace)
        z, nfe = res.final, nfe + res.nfe
        if trace:
            snaps.extend(res.trace if not snaps else res.trace[1:])
    return z, nfe, snaps


def flow_reverse(field, z, solver=None, trace=False):
    """Pull ``z`` back from time ``T`` to time ``0``."""
    solver = solver or SolverConfig()
    x = z if isinstance(z, Tensor) else Tensor(z)
    nfe = 0
    snaps = [] if trace else None
    for t0, t1, block in reversed(_segments(field)):
        res = solve_reverse(_plain_rhs(field, block), x, t1, t0, solver, trace)
        x, nfe = res.final, nfe + res.nfe
        if trace:
            snaps.extend(res.trace if not snaps else res.trace[1:])
    return x, nfe, snaps


def sample(field, count, temperature=1.0, solver=None, seed=0):
    """Draw ``z ~ N(0, temperature^2 I)`` and integrate it back to data space."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    rng = np.random.default_rng(seed)
    z = temperature * rng.standard_normal((count, field.d))
    x, _, _ = flow_reverse(field, Tensor(z), solver)
    return x


def force_diagnostic(field, z, t, dt_fd=1e-4, block=None):
    """Norm of the total derivative ``grad f . f + df/dt`` per row.

    ``grad f . f`` is assembled from the ``d`` Jacobian rows; ``df/dt`` is a
    central difference with step ``dt_fd`` that must stay inside one block.
    """
    segs = _segments(field)
    if block is None:
        block = next((k for lo, hi, k in segs if lo <= t < hi), segs[-1][2])
    lo, hi, _ = segs[block]
    if t - dt_fd < lo or t + dt_fd > hi:
        raise DomainError(f"t={t} +- {dt_fd} straddles the edge of block {block}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    f, rows, _ = _jacobian_rows(field, z, t, block)
    jac = np.stack([r.data for r in rows], axis=1)
    transport = np.einsum("bij,bj->bi", jac, f.data)
    fp = field(z, t + dt_fd, block).data
    fm = field(z, t - dt_fd, block).data
    dfdt = (fp - fm) / (2.0 * dt_fd)
    return np.linalg.norm(transport + dfdt, axis=1)


def trajectory_positions(trace):
    """Stack the positions of a trace into ``[snapshots, batch, d]``."""
    out = []
    for _, s in trace:
        if isinstance(s, AugmentedState):
            out.append(s.z.data)
        elif isinstance(s, Tensor):
            out.append(s.data)
        else:
            out.append(np.asarray(s, dtype=np.float64))
    return np.stack(out)


def straightness_metric(trace):
    """Arc length over endpoint displacement per row; ``inf`` for fixed points."""
    if len(trace) < 2:
        raise ConfigurationError("straightness needs at least two snapshots")
    Z = trajectory_positions(trace)
    arc = np.linalg.norm(np.diff(Z, axis=0), axis=2).sum(axis=0)
    disp = np.linalg.norm(Z[-1] - Z[0], axis=1)
    out = np.full(disp.shape, np.inf)
    ok = disp >= 1e-12
    out[ok] = arc[ok] / disp[ok]
    return out
