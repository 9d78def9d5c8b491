"""Command-line entry point: ``rnode {train,eval,sample,diagnose,ablate}``.

CSV and JSON outputs depend only on the experiment spec and its seeds, so a
rerun reproduces them byte for byte.  Wall-clock timings and timestamps go to
``run.log`` in the output directory instead.  Unless ``--no-plots`` is given
(or ``exports.plots`` is false in the experiment spec), PNG figures are written next to
the CSV files.
"""

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .cnf import bits_per_dim, sample
from .config import apply_overrides, load_spec
from .datasets import GENERATORS, generate_dataset
from .diagnostics import (density_grid, diagnose, fine_trajectory, write_density_csv,
                          write_points_csv)
from .dynamics import build_field, load_field
from .errors import ConfigurationError, TrainingError
from .solvers import SolverConfig, write_trace_csv
from .training import (ablation_run, evaluate, nfe_frobenius_correlation,
                       save_checkpoint, train)

log = logging.getLogger("rnode")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_UNSTABLE = 4

TRAJECTORY_POINTS = 50
SAMPLE_COUNT = 1000
SUMMARY_COLUMNS = ["variant", "seed", "truncated", "val_bpd", "eval_nfe", "diag_nfe",
                   "diag_frob", "diag_kinetic", "straightness", "force"]


def _setup_logging(out_dir=None, verbose=False):
    handlers = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        handlers.append(logging.FileHandler(Path(out_dir) / "run.log", mode="w"))
    logging.basicConfig(level=logging.INFO if verbose or out_dir else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s",
                        handlers=handlers, force=True)


def _load_data(spec):
    ds = spec.dataset
    train_x = generate_dataset(ds.name, ds.n_train, ds.seed).samples
    val_x = generate_dataset(ds.name, ds.n_val, ds.val_seed).samples
    return train_x, val_x


def _resolve_spec(args):
    spec = load_spec(args.config)
    return apply_overrides(spec, seed=args.seed, lambda_k=args.lambda_k,
                           lambda_j=args.lambda_j, solver=args.solver,
                           step_size=args.step_size, rtol=args.rtol, atol=args.atol,
                           output_dir=args.out)


def _exports(field, val_x, out, spec, plots):
    from . import plotting

    ex = spec.exports
    if ex.density_grid and field.d in (1, 2):
        axes, logp = density_grid(field)
        write_density_csv(out / "density_grid.csv", axes, logp)
        if plots:
            plotting.plot_density(axes, logp, out / "density.png", data=val_x)
    if ex.samples:
        xs = sample(field, SAMPLE_COUNT, 1.0, SolverConfig(method="dopri5"),
                    seed=spec.train.seed).data
        write_points_csv(out / "samples.csv", xs)
        if plots:
            plotting.plot_samples(xs, out / "samples.png", data=val_x)
    if ex.trajectories:
        trace = fine_trajectory(field, val_x[:TRAJECTORY_POINTS])
        write_trace_csv(out / "trajectories.csv", trace)
        if plots:
            plotting.plot_trajectories(trace, out / "trajectories.png")


def cmd_train(args):
    spec = _resolve_spec(args)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out, args.verbose)
    (out / "spec.json").write_text(spec.to_json())
    train_x, val_x = _load_data(spec)
    m = spec.model
    field = build_field(train_x.shape[1], m.hidden, m.depth, m.blocks, seed=m.seed)
    try:
        trained, history = train(field, train_x, val_x, spec.train,
                                 checkpoint_path=out / "checkpoint.json",
                                 metrics_path=out / "metrics.csv")
    except TrainingError as exc:
        log.error("%s", exc)
        exc.history.write_csv(out / "metrics.csv")
        save_checkpoint(out / "checkpoint.json", exc.field,
                        extra={"epoch": exc.epoch - 1, "failure": str(exc)})
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    history.write_csv(out / "metrics.csv")
    save_checkpoint(out / "checkpoint.json", trained, extra={"epoch": spec.train.epochs})
    plots = spec.exports.plots and not args.no_plots
    _exports(trained, val_x, out, spec, plots)
    if plots:
        from .plotting import plot_metrics

        plot_metrics(history, out / "metrics.png")
    last = history.epochs[-1]
    print(f"epoch {last.epoch}: val bits/dim {last.val_bpd:.4f}  nfe {last.nfe:.1f}")
    return EXIT_OK


def _held_out(name, n, seed):
    return generate_dataset(name, n, seed).samples


def cmd_eval(args):
    _setup_logging(verbose=args.verbose)
    field = load_field(args.checkpoint)
    data = _held_out(args.dataset, args.count, args.data_seed)
    if data.shape[1] != field.d:
        raise ConfigurationError(
            f"dataset {args.dataset!r} has d={data.shape[1]} but the checkpoint has d={field.d}")
    solver = SolverConfig(method="dopri5", rtol=args.rtol, atol=args.atol)
    logp, nfe = evaluate(field, data, solver)
    bpd = bits_per_dim(logp, field.d)
    stderr = float(np.std(bpd, ddof=1) / math.sqrt(bpd.size)) if bpd.size > 1 else 0.0
    print(f"bits/dim {float(np.mean(bpd)):.6f} +- {stderr:.6f} (n={bpd.size}, nfe={nfe:.1f})")
    return EXIT_OK


def cmd_sample(args):
    _setup_logging(verbose=args.verbose)
    field = load_field(args.checkpoint)
    xs = sample(field, args.count, args.temperature, SolverConfig(method="dopri5"),
                seed=args.seed).data
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_points_csv(out, xs)
    if not args.no_plots:
        from .plotting import plot_samples

        plot_samples(xs, out.with_suffix(".png"))
    print(f"wrote {xs.shape[0]} samples to {out}")
    return EXIT_OK


def cmd_diagnose(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out, args.verbose)
    field = load_field(args.checkpoint)
    data = _held_out(args.dataset, args.count, args.data_seed)
    if data.shape[1] != field.d:
        raise ConfigurationError(
            f"dataset {args.dataset!r} has d={data.shape[1]} but the checkpoint has d={field.d}")
    diag = diagnose(field, data)
    diag.write_csv(out / "diagnostics.csv")
    write_trace_csv(out / "trajectories.csv", diag.traces)
    summary = diag.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.no_plots:
        from . import plotting

        plotting.plot_nfe_vs_frob({"examples": (diag.frob, diag.nfe)}, out / "nfe_vs_frob.png")
        plotting.plot_trajectories(diag.traces, out / "trajectories.png")
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return EXIT_OK


def cmd_ablate(args):
    spec = _resolve_spec(args)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out, args.verbose)
    (out / "spec.json").write_text(spec.to_json())
    train_x, val_x = _load_data(spec)
    m = spec.model
    field = build_field(train_x.shape[1], m.hidden, m.depth, m.blocks, seed=m.seed)
    result = ablation_run(field, train_x, val_x, spec.train, seeds=spec.ablation.seeds,
                          strength=spec.ablation.strength)
    result.write_csv(out / "ablation.csv")
    probe = val_x[:args.diagnose_count]
    rows, groups = [], {}
    for (variant, seed), trained in sorted(result.fields.items()):
        save_checkpoint(out / f"checkpoint_{variant}_seed{seed}.json", trained)
        hist = result.runs[(variant, seed)]
        diag = diagnose(trained, probe)
        s = diag.summary()
        last = hist.epochs[-1]
        rows.append([variant, seed, int(hist.failure is not None), last.val_bpd, last.nfe,
                     s["nfe"], s["frob"], s["kinetic"], s["straightness"], s["force"]])
        groups[f"{variant}/{seed}"] = (diag.frob, diag.nfe)
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow(r[:3] + [repr(float(v)) for v in r[3:]])
    rho = nfe_frobenius_correlation(list(result.runs.values()))
    (out / "correlation.json").write_text(
        json.dumps({"spearman_frob_nfe": rho}, indent=2) + "\n")
    if spec.exports.plots and not args.no_plots:
        from . import plotting

        plotting.plot_ablation(result, out / "ablation.png")
        plotting.plot_nfe_vs_frob(groups, out / "nfe_vs_frob.png")
    for r in rows:
        print(f"{r[0]:>7} seed {r[1]}: val bits/dim {r[3]:.4f}  eval nfe {r[4]:.1f}  "
              f"frob {r[6]:.4f}  straightness {r[8]:.5f}")
    print(f"spearman(frob, nfe) = {rho:.3f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="rnode", description="Regularized continuous normalizing flows")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", required=True, help="experiment spec (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda-k", type=float)
        sp.add_argument("--lambda-j", type=float)
        sp.add_argument("--solver", choices=["rk4", "dopri5"])
        sp.add_argument("--step-size", type=float)
        sp.add_argument("--rtol", type=float)
        sp.add_argument("--atol", type=float)
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    sp = sub.add_parser("train", help="train one model")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="train the four regularizer variants")
    run_flags(sp)
    sp.add_argument("--diagnose-count", type=int, default=200,
                    help="validation points used for per-variant diagnostics")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="bits/dim of a checkpoint on held-out data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True, choices=sorted(GENERATORS))
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--data-seed", type=int, default=1)
    sp.add_argument("--rtol", type=float, default=1e-5)
    sp.add_argument("--atol", type=float, default=1e-5)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="samples.csv")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("diagnose", help="per-example NFE, Frobenius, kinetic, straightness, force")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True, choices=sorted(GENERATORS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--data-seed", type=int, default=1)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"error: {exc.strerror or exc}: {name}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
