"""Command-line interface: generate, adapt, eval, benchmark.

Every JSON artifact embeds the fully-resolved configuration (defaults
included) and the tool version, so runs are reproducible from their
outputs alone. Exit codes: 0 success, 2 usage/config/data error,
3 solver or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    SupportSet,
    UnlabeledSet,
    load_dataset,
    load_prototypes,
    save_dataset,
    save_prototypes,
)
from .errors import (
    ConfigError,
    DataError,
    DegeneratePlanError,
    FormatError,
    GenerationError,
    SamplingError,
    SolverError,
)
from .experiment import (
    DEFAULT_MARGINAL,
    DEFAULT_NOISE,
    DEFAULT_SEPARATION,
    DEFAULT_SYNTHETIC_TAU,
    DEFAULT_TEXT_NOISE,
    SOLVER_NAMES,
    SamplingSpec,
    SyntheticSpec,
    evaluate_prototypes,
    fit_solver,
    rows_to_csv,
    rows_to_json,
    run_benchmark,
    silhouette_score,
    split_indices,
    synthetic_dataset,
)
from .objectives import LambdaPolicy
from .solvers import MARGINAL_SOURCES, SolverConfig
from .zeroshot import DEFAULT_TAU

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

_CONFIG_ERRORS = (ConfigError, FormatError, DataError, SamplingError,
                  GenerationError)
_SOLVER_ERRORS = (SolverError, DegeneratePlanError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semishot",
        description="Few-shot prototype adaptation with text anchors and "
                    "transport-based pseudo-labels.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--classes", type=int, default=5)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--pool", type=int, default=1500)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--separation", type=float, default=DEFAULT_SEPARATION,
                     help="minimum pairwise center angle in radians")
    gen.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    gen.add_argument("--text-noise", type=float, default=DEFAULT_TEXT_NOISE)
    gen.add_argument("--marginal", type=str, default=None,
                     help="comma-separated class probabilities "
                          "(default: built-in imbalanced profile for 5 "
                          "classes, uniform otherwise)")
    gen.add_argument("--tau", type=float, default=DEFAULT_SYNTHETIC_TAU,
                     help="temperature stored in the manifest")
    gen.add_argument("--out", type=Path, required=True, help="output directory")

    def _fit_flags(p):
        p.add_argument("--tau", type=float, default=None,
                       help=f"temperature (default: manifest value, else {DEFAULT_TAU})")
        p.add_argument("--t-bcm", type=int, default=3,
                       help="block-coordinate rounds")
        p.add_argument("--t-ot", type=int, default=10,
                       help="transport scaling rounds per pseudo-label step")
        p.add_argument("--ratio-r", type=float, default=0.25,
                       help="marginal floor ratio for unseen classes")
        p.add_argument("--lambda-mode", choices=("adaptive", "fixed"),
                       default="adaptive")
        p.add_argument("--lambda-text", type=float, default=None,
                       help="fixed text-penalty weight (lambda-mode fixed)")
        p.add_argument("--lambda-unlabeled", type=float, default=None,
                       help="fixed unlabeled weight (lambda-mode fixed)")
        p.add_argument("--marginal-source", choices=MARGINAL_SOURCES,
                       default="support_estimate")
        p.add_argument("--shots", type=int, default=1)
        p.add_argument("--unlabeled-mult", type=int, default=24)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--stratified", action="store_true",
                       help="force exactly --shots per class (contrast mode)")

    adapt = sub.add_parser("adapt", help="fit prototypes on a sampled split")
    adapt.add_argument("--data", type=Path, required=True, help="dataset manifest")
    adapt.add_argument("--solver", choices=SOLVER_NAMES, required=True)
    _fit_flags(adapt)
    adapt.add_argument("--out", type=Path, required=True, help="output directory")

    ev = sub.add_parser("eval", help="score saved prototypes on a dataset pool")
    ev.add_argument("--data", type=Path, required=True, help="dataset manifest")
    ev.add_argument("--prototypes", type=Path, required=True,
                    help="prototype manifest written by adapt")
    ev.add_argument("--tau", type=float, default=None)
    ev.add_argument("--silhouette", action="store_true",
                    help="also compute the pool silhouette (O(n^2))")
    ev.add_argument("--out", type=Path, default=None,
                    help="report path (default: stdout)")

    bench = sub.add_parser("benchmark", help="run a (solver, shots, seed) grid")
    bench.add_argument("--data", type=Path, default=None,
                       help="dataset manifest (default: built-in synthetic)")
    bench.add_argument("--eval-data", type=Path, default=None,
                       help="manifest of a fixed held-out eval split; default "
                            "re-splits the pool remainder per seed")
    bench.add_argument("--gen-seed", type=int, default=0,
                       help="seed for the built-in synthetic dataset")
    bench.add_argument("--name", type=str, default=None,
                       help="dataset label in result rows")
    bench.add_argument("--solvers", type=str,
                       default=",".join(SOLVER_NAMES),
                       help="comma-separated solver names")
    bench.add_argument("--shots-grid", type=str, default="1,2,4,8,16",
                       help="comma-separated shot counts")
    bench.add_argument("--seeds", type=int, default=50)
    _fit_flags(bench)
    bench.add_argument("--threads", type=int, default=None,
                       help="parallel benchmark cells (default: machine)")
    bench.add_argument("--no-timing", action="store_true",
                       help="write runtime_ms as 0 for byte-stable output")
    bench.add_argument("--out-csv", type=Path, required=True)
    bench.add_argument("--out-json", type=Path, default=None)
    return parser


def _write_json(path: Path | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _parse_marginal(args) -> tuple[float, ...]:
    if args.marginal is not None:
        try:
            return tuple(float(tok) for tok in args.marginal.split(","))
        except ValueError:
            raise ConfigError(f"could not parse --marginal {args.marginal!r}")
    if args.classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {args.classes}")
    if args.classes == len(DEFAULT_MARGINAL):
        return DEFAULT_MARGINAL
    return tuple([1.0 / args.classes] * args.classes)


def cmd_generate(args) -> int:
    marginal = _parse_marginal(args)
    spec = SyntheticSpec(
        class_count=args.classes,
        dim=args.dim,
        separation=args.separation,
        noise=args.noise,
        marginal=marginal,
        text_noise=args.text_noise,
        pool_size=args.pool,
        seed=args.seed,
    )
    dataset = synthetic_dataset(spec, tau=args.tau)
    out: Path = args.out
    save_dataset(dataset, out / "manifest.json")
    config = {
        "command": "generate",
        "classes": args.classes,
        "dim": args.dim,
        "pool": args.pool,
        "seed": args.seed,
        "separation": args.separation,
        "noise": args.noise,
        "text_noise": args.text_noise,
        "marginal": list(marginal),
        "tau": args.tau,
        "out": str(out),
    }
    _write_json(out / "generate_report.json",
                {"version": __version__, "config": config})
    print(f"wrote dataset ({dataset.n} x {dataset.dim}, "
          f"{dataset.class_count} classes) to {out}")
    return EXIT_OK


def _resolve_tau(flag_tau: float | None, dataset: Dataset) -> float:
    if flag_tau is not None:
        return flag_tau
    if dataset.tau is not None:
        return dataset.tau
    return DEFAULT_TAU


def _solver_config(args, tau: float, class_count: int) -> SolverConfig:
    if args.lambda_mode == "fixed":
        if args.lambda_text is None or args.lambda_unlabeled is None:
            raise ConfigError(
                "--lambda-mode fixed needs --lambda-text and --lambda-unlabeled")
        lambdas = LambdaPolicy.fixed(
            np.full(class_count, args.lambda_text),
            np.full(class_count, args.lambda_unlabeled),
        )
    else:
        if args.lambda_text is not None or args.lambda_unlabeled is not None:
            raise ConfigError(
                "--lambda-text/--lambda-unlabeled require --lambda-mode fixed")
        lambdas = LambdaPolicy.adaptive()
    return SolverConfig(
        tau=tau,
        bcm_iters=args.t_bcm,
        ot_iters=args.t_ot,
        marginal_ratio=args.ratio_r,
        marginal_source=args.marginal_source,
        lambdas=lambdas,
    )


def _fit_config_echo(args, tau: float) -> dict:
    return {
        "tau": tau,
        "t_bcm": args.t_bcm,
        "t_ot": args.t_ot,
        "ratio_r": args.ratio_r,
        "lambda_mode": args.lambda_mode,
        "lambda_text": args.lambda_text,
        "lambda_unlabeled": args.lambda_unlabeled,
        "marginal_source": args.marginal_source,
        "shots": args.shots,
        "unlabeled_mult": args.unlabeled_mult,
        "seed": args.seed,
        "stratified": args.stratified,
    }


def _adapt_split(dataset: Dataset, args) -> tuple[SupportSet, UnlabeledSet,
                                                  np.ndarray | None]:
    """Sample the adapt command's support and unlabeled sets.

    The unlabeled set comes from the dataset's dedicated unlabeled rows
    when it has them; otherwise it is drawn from the pool remainder.
    --unlabeled-mult 0 always means an empty unlabeled set. Returns the
    true unlabeled marginal when hidden labels are available (needed
    for --marginal-source oracle).
    """
    pool = dataset.pool()
    use_dedicated = dataset.unlabeled_count > 0 and args.unlabeled_mult > 0
    mult = 0 if use_dedicated else args.unlabeled_mult
    spec = SamplingSpec(shots=args.shots, unlabeled_multiplier=mult,
                        seed=args.seed, stratified=args.stratified)
    sup_idx, unl_idx, _ = split_indices(pool.labels, pool.class_count, spec)
    support = SupportSet.from_indices(
        pool.embeddings[sup_idx], pool.labels[sup_idx], pool.class_count)
    if use_dedicated:
        return support, UnlabeledSet.from_embeddings(dataset.unlabeled), None
    if unl_idx.size:
        hidden = np.bincount(pool.labels[unl_idx], minlength=pool.class_count)
        unlabeled = UnlabeledSet.from_embeddings(pool.embeddings[unl_idx])
        return support, unlabeled, hidden / hidden.sum()
    return support, UnlabeledSet.empty(dataset.dim), None


def cmd_adapt(args) -> int:
    dataset = load_dataset(args.data)
    tau = _resolve_tau(args.tau, dataset)
    cfg = _solver_config(args, tau, dataset.class_count)
    support, unlabeled, oracle_marginal = _adapt_split(dataset, args)
    fit = fit_solver(args.solver, dataset, support, unlabeled, cfg,
                     oracle_marginal)
    config = {"command": "adapt", "data": str(args.data),
              "solver": args.solver, "out": str(args.out),
              **_fit_config_echo(args, tau)}
    out: Path = args.out
    save_prototypes(fit.prototypes, out / "prototypes.json",
                    extra={"version": __version__, "config": config})
    report = {
        "version": __version__,
        "config": config,
        "objective_trace": fit.objective_trace.tolist(),
        "runtime_ms": fit.runtime_ms,
        "support_size": support.n,
        "unlabeled_size": unlabeled.count,
    }
    if fit.marginal is not None:
        report["marginal"] = fit.marginal.tolist()
    if fit.ot_residuals is not None:
        report["ot_residuals"] = fit.ot_residuals.tolist()
    _write_json(out / "fit_report.json", report)
    print(f"adapted {args.solver} prototypes "
          f"({support.class_count} x {support.dim}) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    prototypes = load_prototypes(args.prototypes)
    if prototypes.shape != (dataset.class_count, dataset.dim):
        raise DataError(
            f"prototypes {prototypes.shape} do not fit dataset "
            f"({dataset.class_count} classes, dim {dataset.dim})")
    tau = _resolve_tau(args.tau, dataset)
    report = evaluate_prototypes(prototypes, dataset.pool(), tau)
    config = {"command": "eval", "data": str(args.data),
              "prototypes": str(args.prototypes), "tau": tau,
              "silhouette": args.silhouette}
    payload = {
        "version": __version__,
        "config": config,
        "aca": report.aca,
        "acc": report.acc,
        "per_class_recall": [None if np.isnan(r) else float(r)
                             for r in report.per_class_recall],
    }
    if args.silhouette:
        payload["silhouette"] = silhouette_score(dataset.embeddings, dataset.labels)
    _write_json(args.out, payload)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.data is not None:
        dataset = load_dataset(args.data)
        name = args.name or Path(args.data).parent.name or "dataset"
    else:
        dataset = synthetic_dataset(SyntheticSpec(seed=args.gen_seed))
        name = args.name or "synthetic"
    tau = _resolve_tau(args.tau, dataset)
    cfg = _solver_config(args, tau, dataset.class_count)
    solvers = tuple(tok for tok in args.solvers.split(",") if tok)
    unknown = [s for s in solvers if s not in SOLVER_NAMES]
    if unknown:
        raise ConfigError(f"unknown solvers {unknown}; choose from {SOLVER_NAMES}")
    try:
        shot_grid = tuple(int(tok) for tok in args.shots_grid.split(",") if tok)
    except ValueError:
        raise ConfigError(f"could not parse --shots-grid {args.shots_grid!r}")
    if not shot_grid or not solvers:
        raise ConfigError("benchmark needs at least one solver and one shot count")
    eval_set = None
    if args.eval_data is not None:
        eval_ds = load_dataset(args.eval_data)
        if eval_ds.dim != dataset.dim or eval_ds.class_count != dataset.class_count:
            raise DataError(
                f"eval dataset ({eval_ds.class_count} classes, dim {eval_ds.dim}) "
                f"does not fit ({dataset.class_count} classes, dim {dataset.dim})")
        eval_set = eval_ds.pool()

    rows = run_benchmark(
        dataset, solvers=solvers, shot_grid=shot_grid, seeds=args.seeds,
        cfg=cfg, unlabeled_multiplier=args.unlabeled_mult,
        threads=args.threads, include_timing=not args.no_timing,
        dataset_name=name, eval_set=eval_set)

    csv_text = rows_to_csv(rows)
    args.out_csv.parent.mkdir(parents=True, exist_ok=True)
    args.out_csv.write_text(csv_text)
    config = {"command": "benchmark", "data": str(args.data) if args.data else None,
              "eval_data": str(args.eval_data) if args.eval_data else None,
              "gen_seed": args.gen_seed, "name": name,
              "solvers": list(solvers), "shots_grid": list(shot_grid),
              "seeds": args.seeds, "threads": args.threads,
              "no_timing": args.no_timing, "out_csv": str(args.out_csv),
              **_fit_config_echo(args, tau)}
    config.pop("shots", None)
    config.pop("seed", None)
    if args.out_json is not None:
        _write_json(args.out_json, rows_to_json(rows, {"version": __version__,
                                                       **config}))
    failed = sum(1 for r in rows if r.error)
    print(f"benchmark wrote {len(rows)} rows to {args.out_csv} "
          f"({failed} failed cells)")
    if failed == len(rows):
        print("all benchmark cells failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def run() -> None:
    raise SystemExit(main())
