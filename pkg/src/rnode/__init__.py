"""Continuous normalizing flows regularized by kinetic energy and Jacobian norm.

Everything runs on a small tape-based reverse-mode autodiff over numpy
float64 arrays (:mod:`rnode.autodiff`).
"""

from .cnf import (FlowOutput, RegWeights, divergence_estimate, divergence_exact,
                  flow_forward, flow_reverse, force_diagnostic, forward_logdensity,
                  frobenius_sq_estimate, frobenius_sq_exact, rnode_objective, sample,
                  straightness_metric)
from .datasets import generate_dataset, inverse_logit, logit_preprocess
from .dynamics import LinearField, VectorField, build_field, load_field, save_field
from .solvers import SolverConfig, solve_adaptive, solve_fixed
from .training import TrainConfig, ablation_run, adjoint_gradients, evaluate, loss_and_gradients, train

__version__ = "0.1.0"
