"""Minibatch maximum-likelihood training of regularized flows.

Gradients default to differentiating straight through the fixed-grid RK4
steps (discretize-then-optimize), which is the exact gradient of the loss the
step actually computed.  :func:`adjoint_gradients` integrates the continuous
adjoint equations backward instead and serves as a cross-check.
"""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cnf import (RegWeights, bits_per_dim, forward_logdensity, integrate,
                  rnode_objective)
from .dynamics import field_to_dict
from .errors import (BudgetError, ConfigurationError, ContractError,
                     InstabilityError, NonFiniteError, TrainingError)
from .solvers import SolverConfig, solve_fixed

log = logging.getLogger(__name__)

_UNSTABLE = (InstabilityError, NonFiniteError, BudgetError)


@dataclass
class TrainConfig:
    lambda_K: float = 0.01
    lambda_J: float = 0.01
    batch_size: int = 200
    epochs: int = 100
    learning_rate: float = 1e-3
    solver: SolverConfig = dc_field(default_factory=SolverConfig)
    eval_solver: SolverConfig = dc_field(
        default_factory=lambda: SolverConfig(method="dopri5"))
    seed: int = 0
    eps_per_step: bool = False
    clip_norm: Optional[float] = None
    max_failures: int = 3

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if isinstance(self.eval_solver, dict):
            self.eval_solver = SolverConfig(**self.eval_solver)
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        RegWeights(self.lambda_K, self.lambda_J)

    @property
    def weights(self):
        return RegWeights(self.lambda_K, self.lambda_J)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update; returns ``(new_params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def _flatten(grads):
    return np.concatenate([g.data.ravel() for g in grads])


def loss_and_gradients(field, batch, config, eps=None, rng=None):
    """Loss, its normalized components, and the gradient w.r.t. ``field.parameters()``.

    The fixed-grid solve is recorded on a tape and differentiated directly.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.shape[0] < 1:
        raise ConfigurationError("empty batch")
    if eps is None and not config.eps_per_step:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        eps = rng.standard_normal(batch.shape)
    tape = Tape()
    bound, leaves = field.watch(tape)
    loss, comps = rnode_objective(bound, batch, config.weights, config.solver, eps,
                                  rng=rng, eps_per_step=config.eps_per_step)
    grads = ad.grad(loss, leaves)
    parts = {k: float(comps[k].data) for k in ("nll", "kinetic", "frob")}
    parts["nfe"] = comps["flow"].nfe
    parts["mean_kinetic"] = float(np.mean(comps["flow"].kinetic.data))
    parts["mean_frob"] = float(np.mean(comps["flow"].frob.data))
    return float(loss.data), parts, _flatten(grads)


# continuous adjoint -------------------------------------------------------------

class _AdjointState:
    """``(z, a_z, a_theta)`` as plain arrays, closed under ``+`` and scalar ``*``."""

    __slots__ = ("z", "a", "theta")

    def __init__(self, z, a, theta):
        self.z, self.a, self.theta = z, a, theta

    def __add__(self, other):
        return _AdjointState(self.z + other.z, self.a + other.a, self.theta + other.theta)

    def __mul__(self, c):
        return _AdjointState(self.z * c, self.a * c, self.theta * c)

    __rmul__ = __mul__

    def arrays(self):
        return [self.z, self.a, self.theta]


class _AdjointDynamics:
    def __init__(self, field, eps, block, coef_l, coef_E, coef_n, divergence):
        self.field = field
        self.eps = eps
        self.block = block
        self.coef_l = coef_l
        self.coef_E = coef_E
        self.coef_n = coef_n
        self.divergence = divergence

    def __call__(self, state, t):
        tape = Tape()
        bound, leaves = self.field.watch(tape)
        z = tape.watch(state.z)
        f = bound(z, t, self.block)
        if self.divergence == "exact":
            rows = ad.vjp_rows(f, z, create_graph=True)
            div = None
            frob = None
            for i, row in enumerate(rows):
                term = ad.reshape(ad.take_last(row, i, i + 1), (row.shape[0],))
                div = term if div is None else div + term
                sq = ad.tsum(ad.square(row), 1)
                frob = sq if frob is None else frob + sq
        else:
            eps = Tensor(self.eps)
            (v,) = ad.grad(f, [z], seed=eps, create_graph=True)
            div = ad.tsum(v * eps, 1)
            frob = ad.tsum(ad.square(v), 1)
        # Hamiltonian a.f + a_l div + a_E |f|^2 + a_n frob
        h = ad.tsum(f * Tensor(state.a))
        if self.coef_l:
            h = h + self.coef_l * ad.tsum(div)
        if self.coef_E:
            h = h + self.coef_E * ad.tsum(ad.square(f))
        if self.coef_n:
            h = h + self.coef_n * ad.tsum(frob)
        grads = ad.grad(h, [z] + leaves)
        return _AdjointState(f.data, -grads[0].data, -_flatten(grads[1:]))


def adjoint_sweep(field, batch, config, eps=None, divergence="hutchinson"):
    """Gradient via the continuous adjoint on the fixed grid.

    Returns ``(grad_theta, grad_x)`` where ``grad_x`` is the adjoint state at
    ``t = 0`` (the gradient of the loss w.r.t. the batch).
    """
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    m, d = x.shape
    if m < 1:
        raise ConfigurationError("empty batch")
    if config.solver.method != "rk4_fixed":
        raise ConfigurationError("adjoint gradients are integrated on the fixed grid")
    if divergence == "hutchinson" and eps is None:
        eps = np.random.default_rng(config.seed).standard_normal(x.shape)
    eps = None if eps is None else np.asarray(getattr(eps, "data", eps), dtype=np.float64)
    state, _, _ = integrate(field, x, config.solver, divergence, eps)
    scale = 1.0 / (m * d)
    zT = state.z.data
    a = zT * scale  # d/dz of -log q(z) = z / 2 |z|^2
    theta = np.zeros(field.parameter_count())
    joint = _AdjointState(zT.copy(), a, theta)
    for t0, t1, block in reversed(field.segments()):
        rhs = _AdjointDynamics(field, eps, block, -scale, config.lambda_K * scale,
                               config.lambda_J * scale, divergence)
        joint = solve_fixed(rhs, joint, t1, t0, config.solver.step_size).final
    return joint.theta, joint.a


def adjoint_gradients(field, batch, config, eps=None, divergence="hutchinson"):
    return adjoint_sweep(field, batch, config, eps, divergence)[0]


# training loop -------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_bpd: float
    val_bpd: float
    kinetic: float
    frob: float
    nfe: float
    seconds: float


# CSV columns; wall-clock ``seconds`` is logged but kept out of the files so
# that reruns reproduce them byte for byte.
METRIC_COLUMNS = ["epoch", "loss", "train_bpd", "val_bpd", "kinetic", "frob", "nfe"]


@dataclass
class RunMetrics:
    """Per-epoch history; ``failure`` is set when training aborted early."""

    epochs: list = dc_field(default_factory=list)
    failure: Optional[str] = None

    def column(self, name):
        return np.array([getattr(e, name) for e in self.epochs], dtype=np.float64)

    def __len__(self):
        return len(self.epochs)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(float(getattr(e, c))) for c in METRIC_COLUMNS[1:]])


def evaluate(field, data, solver=None, divergence=None, rng=None, draws=16, chunk=2000):
    """Log-density of ``data`` under ``field`` with the adaptive solver.

    Exact divergence for ``d <= 8``; otherwise the mean of ``draws`` Hutchinson
    estimates.  Returns ``(logp, mean_nfe)``.
    """
    data = np.asarray(data, dtype=np.float64)
    d = data.shape[1]
    solver = solver or SolverConfig(method="dopri5")
    if divergence is None:
        divergence = "exact" if d <= 8 else "hutchinson"
    rng = rng if rng is not None else np.random.default_rng(0)
    logps = []
    nfes = []
    for start in range(0, data.shape[0], chunk):
        x = data[start:start + chunk]
        if divergence == "exact":
            out = forward_logdensity(field, x, solver, "exact", kinetic=False, frobenius=False)
            logps.append(out.logp.data)
            nfes.append(out.nfe)
        else:
            acc = np.zeros(x.shape[0])
            for _ in range(draws):
                out = forward_logdensity(field, x, solver, "hutchinson",
                                         eps=rng.standard_normal(x.shape),
                                         kinetic=False, frobenius=False)
                acc += out.logp.data
                nfes.append(out.nfe)
            logps.append(acc / draws)
    return np.concatenate(logps), float(np.mean(nfes))


def save_checkpoint(path, field, adam=None, extra=None):
    doc = field_to_dict(field)
    if adam is not None:
        doc["optimizer"] = {"m": adam.m.tolist(), "v": adam.v.tolist(), "step": adam.step,
                            "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _epoch_zero(field, train, val, config):
    """Metrics of the untrained field, recorded as epoch 0."""
    t_start = time.perf_counter()
    losses, nlls, kins, frobs = [], [], [], []
    for b, start in enumerate(range(0, train.shape[0], config.batch_size)):
        x = train[start:start + config.batch_size]
        rng = np.random.default_rng([config.seed, 0, b])
        eps = rng.standard_normal(x.shape)
        loss, comps = rnode_objective(field, x, config.weights, config.solver, eps,
                                      rng=rng, eps_per_step=config.eps_per_step)
        losses.append(float(loss.data))
        nlls.append(float(comps["nll"].data))
        kins.append(float(np.mean(comps["flow"].kinetic.data)))
        frobs.append(float(np.mean(comps["flow"].frob.data)))
    logp, nfe = evaluate(field, val, config.eval_solver)
    d = train.shape[1]
    return EpochMetrics(0, float(np.mean(losses)), float(np.mean(nlls)) / math.log(2),
                        float(np.mean(bits_per_dim(logp, d))), float(np.mean(kins)),
                        float(np.mean(frobs)), nfe, time.perf_counter() - t_start)


def train(field, train_data, val_data, config, checkpoint_path=None, metrics_path=None,
          callback=None, record_initial=True):
    """Train a copy of ``field``; returns ``(trained_field, RunMetrics)``.

    Each step draws one Gaussian noise matrix, solves the augmented system on
    the fixed grid, and applies one Adam update.  Unstable steps are skipped;
    ``config.max_failures`` consecutive failures abort training, restoring the
    parameters from the end of the last completed epoch and raising
    :class:`TrainingError` carrying that field and the history so far.
    """
    train_data = np.asarray(train_data, dtype=np.float64)
    val_data = np.asarray(val_data, dtype=np.float64)
    if train_data.shape[0] < 1 or val_data.shape[0] < 1:
        raise ConfigurationError("datasets must be non-empty")
    field = field.copy()
    adam = AdamState.zeros(field.parameter_count())
    history = RunMetrics()
    d = train_data.shape[1]
    n = train_data.shape[0]
    if record_initial:
        history.epochs.append(_epoch_zero(field, train_data, val_data, config))
        if callback:
            callback(history.epochs[-1])
    last_good = field.parameters()
    last_frob = 0.0
    for epoch in range(1, config.epochs + 1):
        t_start = time.perf_counter()
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses, nlls, kins, frobs = [], [], [], []
        failures = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            x = train_data[perm[start:start + config.batch_size]]
            rng = np.random.default_rng([config.seed, epoch, b])
            try:
                loss, parts, g = loss_and_gradients(field, x, config, rng=rng)
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite gradient")
            except _UNSTABLE as exc:
                failures += 1
                log.warning("unstable step epoch=%d batch=%d frob=%.4g: %s",
                            epoch, b, last_frob, exc)
                if failures >= config.max_failures:
                    field.load_parameters(last_good)
                    history.failure = f"epoch {epoch} batch {b}: {exc}"
                    raise TrainingError(
                        f"training unstable at epoch {epoch}, batch {b} "
                        f"(last mean Frobenius reading {last_frob:.4g}): {exc}",
                        epoch=epoch, batch_index=b, frobenius=last_frob,
                        field=field, history=history) from exc
                continue
            failures = 0
            if config.clip_norm is not None:
                norm = float(np.linalg.norm(g))
                if norm > config.clip_norm:
                    g = g * (config.clip_norm / norm)
            params, adam = adam_step(field.parameters(), g, adam, config.learning_rate)
            field.load_parameters(params)
            losses.append(loss)
            nlls.append(parts["nll"])
            kins.append(parts["mean_kinetic"])
            frobs.append(parts["mean_frob"])
            last_frob = parts["mean_frob"]
        try:
            logp, nfe = evaluate(field, val_data, config.eval_solver)
        except _UNSTABLE as exc:
            field.load_parameters(last_good)
            history.failure = f"epoch {epoch} validation: {exc}"
            raise TrainingError(f"validation solve failed at epoch {epoch}: {exc}",
                                epoch=epoch, frobenius=last_frob, field=field,
                                history=history) from exc
        rec = EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(nlls)) / math.log(2),
                           float(np.mean(bits_per_dim(logp, d))), float(np.mean(kins)),
                           float(np.mean(frobs)), nfe, time.perf_counter() - t_start)
        history.epochs.append(rec)
        last_good = field.parameters()
        log.info("epoch %d loss %.4f val_bpd %.4f frob %.4g kinetic %.4g nfe %.1f (%.1fs)",
                 epoch, rec.loss, rec.val_bpd, rec.frob, rec.kinetic, rec.nfe, rec.seconds)
        if callback:
            callback(rec)
        if metrics_path:
            history.write_csv(metrics_path)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, field, adam, {"epoch": epoch})
    return field, history


# ablation ------------------------------------------------------------------------

VARIANTS = {
    "none": (0.0, 0.0),
    "K-only": (1.0, 0.0),
    "J-only": (0.0, 1.0),
    "both": (1.0, 1.0),
}


@dataclass
class AblationResult:
    """``runs[(variant, seed)] -> RunMetrics`` and the matching trained fields."""

    runs: dict
    fields: dict
    strength: float

    def table(self):
        """Aligned per-epoch rows ``(variant, seed, EpochMetrics)``."""
        rows = []
        for (variant, seed), hist in sorted(self.runs.items()):
            for e in hist.epochs:
                rows.append((variant, seed, e))
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed"] + METRIC_COLUMNS + ["truncated"])
            for (variant, seed), hist in sorted(self.runs.items()):
                for e in hist.epochs:
                    w.writerow([variant, seed, e.epoch]
                               + [repr(float(getattr(e, c))) for c in METRIC_COLUMNS[1:]]
                               + [int(hist.failure is not None)])


def ablation_run(field, train_data, val_data, config, seeds=(0,), variants=tuple(VARIANTS),
                 strength=None, callback=None):
    """Train every regularizer variant from the same initial field and data.

    ``strength`` is the coefficient switched on by each variant (defaults to
    the larger of the config's two coefficients).  A run that goes unstable
    keeps its truncated history instead of failing the harness.
    """
    if not seeds:
        raise ConfigurationError("ablation needs at least one seed")
    if strength is None:
        strength = max(config.lambda_K, config.lambda_J)
    runs, fields = {}, {}
    for seed in seeds:
        for variant in variants:
            kmul, jmul = VARIANTS[variant]
            cfg = TrainConfig(**{**_shallow(config), "lambda_K": kmul * strength,
                                 "lambda_J": jmul * strength, "seed": seed})
            cb = (lambda rec, v=variant, s=seed: callback(v, s, rec)) if callback else None
            try:
                trained, hist = train(field, train_data, val_data, cfg, callback=cb)
            except TrainingError as exc:
                trained, hist = exc.field, exc.history
                log.warning("variant %s seed %d truncated: %s", variant, seed, exc)
            runs[(variant, seed)] = hist
            fields[(variant, seed)] = trained
    return AblationResult(runs, fields, strength)


def _shallow(config):
    return {k: getattr(config, k) for k in config.__dataclass_fields__}


def nfe_frobenius_correlation(histories):
    """Spearman rank correlation between mean Frobenius reading and evaluation NFE.

    ``nan`` when either column is constant (the correlation is undefined).
    """
    from scipy.stats import spearmanr

    frob = np.concatenate([h.column("frob") for h in histories])
    nfe = np.concatenate([h.column("nfe") for h in histories])
    if np.ptp(frob) == 0 or np.ptp(nfe) == 0:
        return float("nan")
    return float(spearmanr(frob, nfe).statistic)
