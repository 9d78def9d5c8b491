"""Per-example trajectory diagnostics for trained flows.

Each example is solved on its own with the adaptive solver so that its NFE
reflects only its own trajectory.  Kinetic energy and the squared Jacobian
Frobenius norm are integrated exactly (dense Jacobian), so this is meant for
low-dimensional problems.  Straightness and the force term are read off a
separate fine fixed-grid trajectory.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .cnf import flow_forward, force_diagnostic, forward_logdensity, straightness_metric
from .errors import ConfigurationError
from .solvers import SolverConfig

DIAGNOSTIC_COLUMNS = ["index", "nfe", "frob", "kinetic", "straightness", "force", "logp"]


@dataclass
class Diagnostics:
    """Column arrays, one entry per example.

    ``frob`` and ``kinetic`` are the time integrals of ``|grad f|_F^2`` and
    ``|f|^2`` along the trajectory; ``force`` is the time-averaged norm of
    ``df/dt`` along it.
    """

    nfe: np.ndarray
    frob: np.ndarray
    kinetic: np.ndarray
    straightness: np.ndarray
    force: np.ndarray
    logp: np.ndarray
    traces: list

    def __len__(self):
        return self.nfe.size

    def summary(self):
        finite = self.straightness[np.isfinite(self.straightness)]
        return {
            "nfe": float(np.mean(self.nfe)),
            "frob": float(np.mean(self.frob)),
            "kinetic": float(np.mean(self.kinetic)),
            "straightness": float(np.mean(finite)) if finite.size else float("inf"),
            "force": float(np.mean(self.force)),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DIAGNOSTIC_COLUMNS)
            for i in range(len(self)):
                w.writerow([i, int(self.nfe[i])] + [repr(float(getattr(self, c)[i]))
                                                    for c in DIAGNOSTIC_COLUMNS[2:]])


def fine_trajectory(field, x, step=0.05):
    """Fixed-grid RK4 trajectory of ``x``; returns the ``(t, Tensor)`` trace."""
    _, _, trace = flow_forward(field, Tensor(np.asarray(x, dtype=np.float64)),
                               SolverConfig(step_size=step), trace=True)
    return trace


def mean_force(field, trace):
    """Average of ``force_diagnostic`` at the midpoints of consecutive snapshots.

    Midpoint positions are the average of the two neighbouring snapshots,
    which keeps the finite-difference stencil inside one block.
    """
    acc = None
    count = 0
    for (ta, za), (tb, zb) in zip(trace[:-1], trace[1:]):
        tm = 0.5 * (ta + tb)
        zm = 0.5 * (za.data + zb.data)
        dt = min(1e-4, 0.25 * abs(tb - ta))
        val = force_diagnostic(field, zm, tm, dt_fd=dt)
        acc = val if acc is None else acc + val
        count += 1
    return acc / count


def diagnose(field, data, solver=None, fine_step=0.05):
    """Compute per-example diagnostics for every row of ``data``."""
    data = np.asarray(data, dtype=np.float64)
    solver = solver or SolverConfig(method="dopri5")
    n = data.shape[0]
    nfe = np.zeros(n, dtype=np.int64)
    frob = np.zeros(n)
    kinetic = np.zeros(n)
    logp = np.zeros(n)
    for i in range(n):
        out = forward_logdensity(field, data[i:i + 1], solver, divergence="exact")
        nfe[i] = out.nfe
        frob[i] = out.frob.item()
        kinetic[i] = out.kinetic.item()
        logp[i] = out.logp.item()
    trace = fine_trajectory(field, data, fine_step)
    return Diagnostics(nfe, frob, kinetic, straightness_metric(trace),
                       mean_force(field, trace), logp, trace)


def density_grid(field, limit=6.0, points=60, solver=None):
    """Log-density on a regular grid over ``[-limit, limit]^d`` (``d`` is 1 or 2).

    Returns ``(axes, logp)`` where ``axes`` is a list of 1D coordinate arrays
    and ``logp`` has shape ``(points,)`` or ``(points, points)`` indexed as
    ``[i_y, i_x]``.
    """
    from .training import evaluate

    if field.d not in (1, 2):
        raise ConfigurationError("density grids are only defined for d = 1 or 2")
    axis = np.linspace(-limit, limit, points)
    if field.d == 1:
        logp, _ = evaluate(field, axis[:, None], solver)
        return [axis], logp
    X, Y = np.meshgrid(axis, axis)
    logp, _ = evaluate(field, np.stack([X.ravel(), Y.ravel()], axis=1), solver)
    return [axis, axis], logp.reshape(points, points)


def write_density_csv(path, axes, logp):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if len(axes) == 1:
            w.writerow(["x", "logp"])
            for x, v in zip(axes[0], logp):
                w.writerow([repr(float(x)), repr(float(v))])
        else:
            w.writerow(["x", "y", "logp"])
            for iy, y in enumerate(axes[1]):
                for ix, x in enumerate(axes[0]):
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(logp[iy, ix]))])


def write_points_csv(path, points):
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(points.shape[1])])
        for row in points:
            w.writerow([repr(float(v)) for v in row])
