"""Command line front end.

Subcommands:

* ``generate``    draw one dataset from a model spec into CSV
* ``estimate``    fit the ridge path (and two-stage least squares) on a CSV
* ``asymptotics`` simulate the limit law of a design into CSV + JSON summary
* ``simulate``    run a Monte Carlo grid into per-cell artifacts
* ``tables``      turn run artifacts into accuracy/distribution tables

All outputs are deterministic functions of the inputs and seeds: no
timestamps, shortest round-trip float formatting, ordered reduction across
parallel workers.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ridgeiv.estimation import RidgeConfig, ridge_path_estimate
from ridgeiv.asymptotics import build_law, _simulate_arrays
from ridgeiv.harness import (
    emit_scatter,
    emit_tables,
    filter_cells,
    load_mc_spec,
    read_draws,
    read_summaries,
    run_cells,
    write_run,
)
from ridgeiv.model import (
    generate_dataset,
    load_dataset_csv,
    load_model_spec,
    save_dataset_csv,
)

__all__ = ["main"]


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _parse_prior(text: str) -> np.ndarray:
    try:
        return np.asarray([float(tok) for tok in text.split(",")], dtype=float)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"prior must be comma-separated floats, got {text!r}"
        ) from None


def _cmd_generate(args) -> int:
    spec = load_model_spec(args.spec)
    data = generate_dataset(spec, args.seed)
    save_dataset_csv(data, args.out)
    _progress(f"wrote {data.n} rows (k={data.k}, m={data.m}) to {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    data = load_dataset_csv(args.data, tau=args.tau)
    config = RidgeConfig(prior=args.prior, tau=args.tau)
    fit = ridge_path_estimate(data, config)
    payload = {
        "n": data.n,
        "split_at": data.split_at,
        "tau": args.tau,
        "prior": config.prior.tolist(),
        "seed": args.seed,
        **fit.to_dict(),
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    _progress(
        f"alpha_hat={fit.alpha_hat:g} ({fit.regularization_class}); wrote {args.out}"
    )
    return 0


def _cmd_asymptotics(args) -> int:
    spec = load_model_spec(args.spec)
    law = build_law(spec, v_mode=args.v_mode, v_reps=args.v_reps, seed=args.seed)
    # tag-separated stream: covariance estimation never shares draws with sampling
    zmat, lam, boundary = _simulate_arrays(law, args.draws, args.seed)
    lay = law.layout
    beta_cols = list(range(lay.beta_slice.start, lay.beta_slice.stop))
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["draw"]
            + [f"z_beta{j}" for j in range(1, lay.k + 1)]
            + ["z_alpha"]
            + [f"lambda_beta{j}" for j in range(1, lay.k + 1)]
            + ["lambda_alpha", "at_boundary"]
        )
        for i in range(zmat.shape[0]):
            writer.writerow(
                [str(i)]
                + [repr(float(zmat[i, j])) for j in beta_cols]
                + [repr(float(zmat[i, lay.alpha_offset]))]
                + [repr(float(lam[i, j])) for j in beta_cols]
                + [repr(float(lam[i, lay.alpha_offset])), str(bool(boundary[i]))]
            )
    summary = {
        "draws": int(args.draws),
        "seed": args.seed,
        "v_mode": args.v_mode,
        "v_reps": args.v_reps,
        "mass_at_zero": float(boundary.mean()),
        "delta_tilde": law.delta_tilde,
        "degenerate_prior": law.degenerate_prior,
    }
    summary_path = out.with_name(out.stem + "_summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _progress(
        f"mass_at_zero={summary['mass_at_zero']:.4f} over {args.draws} draws; "
        f"wrote {out} and {summary_path}"
    )
    return 0


def _cmd_simulate(args) -> int:
    spec = load_mc_spec(args.spec)
    overrides = {}
    if args.reps is not None:
        overrides["reps"] = args.reps
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    cells = filter_cells(spec.cells(), args.cells)
    if not cells:
        print(f"no cells match filter {args.cells!r}", file=sys.stderr)
        return 2
    results = run_cells(cells, workers=args.workers, progress=_progress)
    write_run(args.out, spec, results, manifest_extra={"cell_filter": args.cells})
    failed = [summary.cell_id for _, summary, _ in results if summary.failed]
    if failed:
        print(
            f"{len(failed)} cell(s) exceeded the 0.1% failure budget: "
            + ", ".join(failed),
            file=sys.stderr,
        )
        return 1
    _progress(f"wrote {len(results)} cells to {args.out}")
    return 0


def _cmd_tables(args) -> int:
    summaries = read_summaries(args.in_dir)
    paths = emit_tables(summaries, args.out)
    for summary in summaries:
        draws = read_draws(args.in_dir, summary.cell_id)
        paths.extend(emit_scatter(summary, draws, args.out))
    _progress(f"wrote {len(paths)} table files to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ridgeiv",
        description="Ridge-path instrumental-variables estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="draw one dataset from a model spec")
    p.add_argument("--spec", required=True, help="model spec JSON/TOML")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset CSV")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("estimate", help="fit the ridge path on a dataset CSV")
    p.add_argument("data", help="dataset CSV (header y,x1..,z1..)")
    p.add_argument("--tau", type=float, default=0.7, help="training fraction")
    p.add_argument("--prior", type=_parse_prior, required=True, help="comma-separated target")
    p.add_argument("--seed", type=int, default=0, help="recorded in the fit JSON")
    p.add_argument("--out", required=True, help="output fit JSON")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("asymptotics", help="simulate the limit law of a design")
    p.add_argument("--spec", required=True, help="model spec JSON/TOML")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output draw-level CSV")
    p.add_argument(
        "--v-mode",
        choices=("monte-carlo", "analytic-gaussian"),
        default="monte-carlo",
        help="how the moment covariance is computed",
    )
    p.add_argument("--v-reps", type=int, default=10_000_000)
    p.set_defaults(func=_cmd_asymptotics)

    p = sub.add_parser("simulate", help="run a Monte Carlo grid")
    p.add_argument("--spec", required=True, help="grid spec JSON")
    p.add_argument("--reps", type=int, default=None, help="override replication count")
    p.add_argument("--seed", type=int, default=None, help="override base seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cells", default=None, help="cell id filter (substring or glob)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("tables", help="derive tables from run artifacts")
    p.add_argument("--in", dest="in_dir", required=True, help="simulate output directory")
    p.add_argument("--out", required=True, help="table output directory")
    p.set_defaults(func=_cmd_tables)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
