"""Monte Carlo harness: benchmark cells, per-replication draws, CSV tables.

A run is a grid of cells (prior x design strength x sample size). Every
replication seed is content-addressed — derived from (base seed, prior index,
design strength, sample size, replication index) — so results are identical
bit for bit regardless of worker count, scheduling, or cell filtering, and a
truncated run is an exact prefix of a longer one.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ridgeiv import __version__
from ridgeiv.estimation import RidgeConfig, ridge_path_estimate
from ridgeiv.linalg import SingularDesignError
from ridgeiv.model import ModelSpec, benchmark_spec, generate_dataset

__all__ = [
    "CellDraws",
    "DEFAULT_PRIORS",
    "MCCell",
    "MCSpec",
    "MCSummary",
    "emit_scatter",
    "emit_tables",
    "read_draws",
    "read_summaries",
    "replicate_cell",
    "run_cells",
    "singular_value_summary",
    "summarize_cell",
    "run_cell",
    "write_run",
]

_ROOT2 = float(np.sqrt(2.0))

# Shrinkage targets at one, two, and three baseline standard errors from the
# benchmark truth (0, 0), equal in both coordinates.
DEFAULT_PRIORS: tuple[tuple[float, float], ...] = (
    (1.0 / _ROOT2, 1.0 / _ROOT2),
    (_ROOT2, _ROOT2),
    (3.0 / _ROOT2, 3.0 / _ROOT2),
)


@dataclass(frozen=True, eq=False)
class MCSpec:
    """Grid definition for a Monte Carlo run.

    Cells with n >= ``large_n`` run min(reps, reps_large) replications; all
    others run ``reps``.
    """

    deltas: tuple[float, ...] = (0.1, 0.25, 0.5, 1.0)
    ns: tuple[int, ...] = (25, 50, 250, 500)
    priors: tuple[tuple[float, ...], ...] = DEFAULT_PRIORS
    reps: int = 10_000
    tau: float = 0.7
    base_seed: int = 0
    reps_large: int = 1_000
    large_n: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "ns", tuple(int(n) for n in self.ns))
        object.__setattr__(
            self, "priors", tuple(tuple(float(v) for v in p) for p in self.priors)
        )
        if self.reps < 1 or self.reps_large < 1:
            raise ValueError("replication counts must be positive")

    def cell_reps(self, n: int) -> int:
        return min(self.reps, self.reps_large) if n >= self.large_n else self.reps

    def cells(self) -> tuple["MCCell", ...]:
        out = []
        for pi, prior in enumerate(self.priors, start=1):
            for delta in self.deltas:
                for n in self.ns:
                    out.append(
                        MCCell(
                            cell_id=f"prior{pi}_delta{delta:g}_n{n}",
                            prior_index=pi,
                            delta=delta,
                            n=n,
                            reps=self.cell_reps(n),
                            base_seed=self.base_seed,
                            model=benchmark_spec(delta, n, prior, tau=self.tau),
                        )
                    )
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "deltas": list(self.deltas),
            "ns": list(self.ns),
            "priors": [list(p) for p in self.priors],
            "reps": self.reps,
            "tau": self.tau,
            "base_seed": self.base_seed,
            "reps_large": self.reps_large,
            "large_n": self.large_n,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MCSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown MCSpec keys: {sorted(unknown)}")
        return cls(**data)


def load_mc_spec(path) -> MCSpec:
    with open(path) as fh:
        return MCSpec.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class MCCell:
    """One (prior, design strength, sample size) grid point."""

    cell_id: str
    prior_index: int
    delta: float
    n: int
    reps: int
    base_seed: int
    model: ModelSpec

    def rep_seed(self, rep: int, base_seed: int | None = None) -> np.random.SeedSequence:
        """Content-addressed seed for one replication."""
        entropy = self.base_seed if base_seed is None else base_seed
        return np.random.SeedSequence(
            entropy=int(entropy),
            spawn_key=(
                int(self.prior_index),
                int(round(self.delta * 1000)),
                int(self.n),
                int(rep),
            ),
        )


@dataclass(frozen=True, eq=False)
class CellDraws:
    """Per-replication results for one cell; failed rows hold NaN."""

    beta_tsls: np.ndarray
    beta_ridge: np.ndarray
    alpha_hat: np.ndarray
    sv_min: np.ndarray
    ok: np.ndarray
    errors: tuple[str, ...]
    alpha_infinity: float


@dataclass(frozen=True, eq=False)
class MCSummary:
    """Aggregates for one cell.

    Standard deviations use the population divisor (the replication count),
    so mse == bias**2 + sd**2 holds coordinate by coordinate up to float
    rounding. Proportions classify the selected penalty weight: exactly
    zero, interior, or at the infinite-regularization sentinel. Aggregates
    cover successful replications; failures are counted in ``n_failed`` and
    trip ``failed`` beyond a 0.1% share.
    """

    cell_id: str
    prior_index: int
    delta: float
    n: int
    reps: int
    tau: float
    prior: tuple[float, ...]
    n_failed: int
    bias_tsls: tuple[float, ...]
    sd_tsls: tuple[float, ...]
    mse_tsls: tuple[float, ...]
    mse_combined_tsls: float
    bias_ridge: tuple[float, ...]
    sd_ridge: tuple[float, ...]
    mse_ridge: tuple[float, ...]
    mse_combined_ridge: float
    p_zero: float
    p_some: float
    p_infinite: float
    sv_mean: float
    sv_sd: float
    sv_q25: float
    sv_median: float
    sv_q75: float

    @property
    def failed(self) -> bool:
        return self.n_failed > 0.001 * self.reps

    @property
    def k(self) -> int:
        return len(self.prior)

    def to_row(self) -> dict[str, str]:
        row: dict[str, str] = {
            "cell_id": self.cell_id,
            "prior_index": str(self.prior_index),
            "delta": repr(float(self.delta)),
            "n": str(self.n),
            "reps": str(self.reps),
            "tau": repr(float(self.tau)),
            "n_failed": str(self.n_failed),
            "failed": str(self.failed),
        }
        for name, values in (
            ("prior", self.prior),
            ("tsls_bias", self.bias_tsls),
            ("tsls_sd", self.sd_tsls),
            ("tsls_mse", self.mse_tsls),
            ("ridge_bias", self.bias_ridge),
            ("ridge_sd", self.sd_ridge),
            ("ridge_mse", self.mse_ridge),
        ):
            for j, v in enumerate(values, start=1):
                row[f"{name}_{j}"] = repr(float(v))
        for name, v in (
            ("tsls_mse_combined", self.mse_combined_tsls),
            ("ridge_mse_combined", self.mse_combined_ridge),
            ("p_zero", self.p_zero),
            ("p_some", self.p_some),
            ("p_infinite", self.p_infinite),
            ("sv_mean", self.sv_mean),
            ("sv_sd", self.sv_sd),
            ("sv_q25", self.sv_q25),
            ("sv_median", self.sv_median),
            ("sv_q75", self.sv_q75),
        ):
            row[name] = repr(float(v))
        return row

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "MCSummary":
        k = sum(1 for key in row if key.startswith("prior_") and key != "prior_index")

        def vec(name: str) -> tuple[float, ...]:
            return tuple(float(row[f"{name}_{j}"]) for j in range(1, k + 1))

        return cls(
            cell_id=row["cell_id"],
            prior_index=int(row["prior_index"]),
            delta=float(row["delta"]),
            n=int(row["n"]),
            reps=int(row["reps"]),
            tau=float(row["tau"]),
            prior=vec("prior"),
            n_failed=int(row["n_failed"]),
            bias_tsls=vec("tsls_bias"),
            sd_tsls=vec("tsls_sd"),
            mse_tsls=vec("tsls_mse"),
            mse_combined_tsls=float(row["tsls_mse_combined"]),
            bias_ridge=vec("ridge_bias"),
            sd_ridge=vec("ridge_sd"),
            mse_ridge=vec("ridge_mse"),
            mse_combined_ridge=float(row["ridge_mse_combined"]),
            p_zero=float(row["p_zero"]),
            p_some=float(row["p_some"]),
            p_infinite=float(row["p_infinite"]),
            sv_mean=float(row["sv_mean"]),
            sv_sd=float(row["sv_sd"]),
            sv_q25=float(row["sv_q25"]),
            sv_median=float(row["sv_median"]),
            sv_q75=float(row["sv_q75"]),
        )


# ---------------------------------------------------------------------------
# running cells
# ---------------------------------------------------------------------------


def replicate_cell(cell: MCCell, reps: int | None = None, base_seed: int | None = None) -> CellDraws:
    """Run every replication of one cell and keep the per-replication numbers.

    Each replication generates a fresh dataset, records the smallest singular
    value of the regressor-instrument cross moment x'z/n, and fits both
    estimators. Singular-design failures are recorded (message per failed
    replication) and leave NaN rows; nothing is silently dropped.
    """
    reps = cell.reps if reps is None else int(reps)
    k = cell.model.k
    config = RidgeConfig(prior=cell.model.prior, tau=cell.model.tau)
    beta_tsls = np.full((reps, k), np.nan)
    beta_ridge = np.full((reps, k), np.nan)
    alpha_hat = np.full(reps, np.nan)
    sv_min = np.full(reps, np.nan)
    ok = np.zeros(reps, dtype=bool)
    errors: list[str] = []
    for rep in range(reps):
        data = generate_dataset(cell.model, cell.rep_seed(rep, base_seed))
        sv_min[rep] = np.linalg.svd(data.x.T @ data.z / data.n, compute_uv=False)[-1]
        try:
            fit = ridge_path_estimate(data, config, keep_trace=False)
        except SingularDesignError as exc:
            errors.append(f"rep {rep}: {exc}")
            continue
        beta_tsls[rep] = fit.beta_2sls_full
        beta_ridge[rep] = fit.beta_hat
        alpha_hat[rep] = fit.alpha_hat
        ok[rep] = True
    return CellDraws(
        beta_tsls=beta_tsls,
        beta_ridge=beta_ridge,
        alpha_hat=alpha_hat,
        sv_min=sv_min,
        ok=ok,
        errors=tuple(errors),
        alpha_infinity=config.alpha_infinity,
    )


def summarize_cell(cell: MCCell, draws: CellDraws) -> MCSummary:
    """Collapse per-replication draws into the cell's summary row."""
    ok = draws.ok
    reps = ok.shape[0]
    n_failed = int(reps - ok.sum())
    beta0 = cell.model.beta0
    k = cell.model.k

    def stats(beta: np.ndarray) -> tuple[tuple, tuple, tuple, float]:
        if not ok.any():
            nan = (float("nan"),) * k
            return nan, nan, nan, float("nan")
        b = beta[ok]
        bias = b.mean(axis=0) - beta0
        sd = b.std(axis=0)  # population divisor: mse == bias^2 + sd^2 exactly
        mse = ((b - beta0) ** 2).mean(axis=0)
        return tuple(bias), tuple(sd), tuple(mse), float(mse.sum())

    bias_t, sd_t, mse_t, comb_t = stats(draws.beta_tsls)
    bias_r, sd_r, mse_r, comb_r = stats(draws.beta_ridge)

    if ok.any():
        a = draws.alpha_hat[ok]
        p_zero = float((a == 0.0).mean())
        p_some = float(((a > 0.0) & (a < draws.alpha_infinity)).mean())
        # Store the cap share as the float complement: three independent
        # count/total divisions need not sum to 1.0 in doubles (1/6 + 4/6 +
        # 1/6 rounds to 0.9999999999999999), while 1 - (p_zero + p_some) is
        # off by at most one ulp from the count ratio and makes
        # p_zero + p_some + p_infinite == 1.0 hold exactly.
        p_infinite = 1.0 - (p_zero + p_some)
    else:
        p_zero = p_infinite = p_some = float("nan")

    sv = draws.sv_min
    q25, med, q75 = np.quantile(sv, (0.25, 0.5, 0.75))
    return MCSummary(
        cell_id=cell.cell_id,
        prior_index=cell.prior_index,
        delta=cell.delta,
        n=cell.n,
        reps=reps,
        tau=cell.model.tau,
        prior=tuple(float(v) for v in cell.model.prior),
        n_failed=n_failed,
        bias_tsls=bias_t,
        sd_tsls=sd_t,
        mse_tsls=mse_t,
        mse_combined_tsls=comb_t,
        bias_ridge=bias_r,
        sd_ridge=sd_r,
        mse_ridge=mse_r,
        mse_combined_ridge=comb_r,
        p_zero=p_zero,
        p_some=p_some,
        p_infinite=p_infinite,
        sv_mean=float(sv.mean()),
        sv_sd=float(sv.std()),
        sv_q25=float(q25),
        sv_median=float(med),
        sv_q75=float(q75),
    )


def run_cell(cell: MCCell, reps: int | None = None, base_seed: int | None = None) -> MCSummary:
    """Replicate one cell and summarize it."""
    return summarize_cell(cell, replicate_cell(cell, reps=reps, base_seed=base_seed))


def singular_value_summary(cell: MCCell, reps: int | None = None, base_seed: int | None = None) -> dict[str, float]:
    """Distribution of the smallest singular value of x'z/n across replications.

    Uses the same content-addressed seeds as :func:`replicate_cell`, so the
    numbers agree exactly with the cell summary without fitting anything.
    """
    reps = cell.reps if reps is None else int(reps)
    sv = np.empty(reps)
    for rep in range(reps):
        data = generate_dataset(cell.model, cell.rep_seed(rep, base_seed))
        sv[rep] = np.linalg.svd(data.x.T @ data.z / data.n, compute_uv=False)[-1]
    q25, med, q75 = np.quantile(sv, (0.25, 0.5, 0.75))
    return {
        "mean": float(sv.mean()),
        "sd": float(sv.std()),
        "q25": float(q25),
        "median": float(med),
        "q75": float(q75),
    }


def _cell_job(cell: MCCell) -> tuple[MCSummary, CellDraws]:
    draws = replicate_cell(cell)
    return summarize_cell(cell, draws), draws


def filter_cells(cells, pattern: str | None):
    """Keep cells whose id matches any comma-separated token (glob or substring)."""
    if not pattern:
        return list(cells)
    import fnmatch

    tokens = [tok.strip() for tok in pattern.split(",") if tok.strip()]
    out = []
    for cell in cells:
        for tok in tokens:
            if any(ch in tok for ch in "*?["):
                if fnmatch.fnmatch(cell.cell_id, tok):
                    out.append(cell)
                    break
            elif tok in cell.cell_id:
                out.append(cell)
                break
    return out


def run_cells(cells, *, workers: int = 1, progress=None):
    """Run cells (optionally in parallel) and reduce in submission order.

    Returns [(cell, summary, draws), ...] in the order given. Because seeds
    are content-addressed and the reduction is ordered, outputs are byte
    identical for any worker count.
    """
    cells = list(cells)
    results = []
    if workers <= 1:
        for i, cell in enumerate(cells):
            start = time.perf_counter()
            summary, draws = _cell_job(cell)
            if progress is not None:
                progress(
                    f"[{i + 1}/{len(cells)}] {cell.cell_id}: reps={summary.reps} "
                    f"failed={summary.n_failed} ({time.perf_counter() - start:.1f}s)"
                )
            results.append((cell, summary, draws))
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_cell_job, cell) for cell in cells]
        for i, (cell, future) in enumerate(zip(cells, futures)):
            summary, draws = future.result()
            if progress is not None:
                progress(
                    f"[{i + 1}/{len(cells)}] {cell.cell_id}: reps={summary.reps} "
                    f"failed={summary.n_failed}"
                )
            results.append((cell, summary, draws))
    return results


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def write_run(out_dir, spec: MCSpec, results, manifest_extra: dict | None = None) -> list[Path]:
    """Write a run's artifacts: cells_summary.csv, per-cell draws, manifest.

    Everything is formatted with shortest round-trip floats and contains no
    timestamps, so reruns with the same inputs are byte identical.
    """
    out = Path(out_dir)
    (out / "reps").mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []

    summary_path = out / "cells_summary.csv"
    rows = [summary.to_row() for _, summary, _ in results]
    if rows:
        fields = list(rows[0].keys())
        for row in rows:
            if list(row.keys()) != fields:
                raise ValueError("cells in one run must share a summary schema")
        with open(summary_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        paths.append(summary_path)

    for cell, _, draws in results:
        k = cell.model.k
        rep_path = out / "reps" / f"{cell.cell_id}.csv"
        header = (
            ["rep"]
            + [f"tsls_beta{j}" for j in range(1, k + 1)]
            + [f"ridge_beta{j}" for j in range(1, k + 1)]
            + ["alpha_hat", "sv_min", "ok", "error"]
        )
        failures = dict()
        for msg in draws.errors:
            rep_str, _, detail = msg.partition(": ")
            failures[int(rep_str.split()[1])] = detail
        with open(rep_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for rep in range(draws.ok.shape[0]):
                writer.writerow(
                    [str(rep)]
                    + [_fmt(v) for v in draws.beta_tsls[rep]]
                    + [_fmt(v) for v in draws.beta_ridge[rep]]
                    + [_fmt(draws.alpha_hat[rep]), _fmt(draws.sv_min[rep])]
                    + [str(bool(draws.ok[rep])), failures.get(rep, "")]
                )
        paths.append(rep_path)

    manifest = {
        "version": __version__,
        "spec": spec.to_dict(),
        "cells": [cell.cell_id for cell, _, _ in results],
        "failed_cells": [s.cell_id for _, s, _ in results if s.failed],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(manifest_path)
    return paths


def read_summaries(in_dir) -> list[MCSummary]:
    path = Path(in_dir) / "cells_summary.csv"
    with open(path, newline="") as fh:
        return [MCSummary.from_row(row) for row in csv.DictReader(fh)]


def read_draws(in_dir, cell_id: str, alpha_infinity: float = 1e7) -> CellDraws:
    path = Path(in_dir) / "reps" / f"{cell_id}.csv"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        k = sum(1 for f in fields if f.startswith("tsls_beta"))
        rows = list(reader)
    reps = len(rows)
    beta_tsls = np.full((reps, k), np.nan)
    beta_ridge = np.full((reps, k), np.nan)
    alpha_hat = np.full(reps, np.nan)
    sv_min = np.full(reps, np.nan)
    ok = np.zeros(reps, dtype=bool)
    errors = []
    for i, row in enumerate(rows):
        beta_tsls[i] = [float(row[f"tsls_beta{j}"]) for j in range(1, k + 1)]
        beta_ridge[i] = [float(row[f"ridge_beta{j}"]) for j in range(1, k + 1)]
        alpha_hat[i] = float(row["alpha_hat"])
        sv_min[i] = float(row["sv_min"])
        ok[i] = row["ok"] == "True"
        if row["error"]:
            errors.append(f"rep {row['rep']}: {row['error']}")
    return CellDraws(
        beta_tsls=beta_tsls,
        beta_ridge=beta_ridge,
        alpha_hat=alpha_hat,
        sv_min=sv_min,
        ok=ok,
        errors=tuple(errors),
        alpha_infinity=alpha_infinity,
    )


def emit_tables(summaries, out_dir) -> list[Path]:
    """Accuracy, penalty-weight distribution, and singular-value tables.

    One accuracy file per prior (two estimator rows per (delta, n) cell),
    one penalty-weight classification file across all cells, and one
    singular-value file taken from the first prior's cells (the statistic
    does not involve the prior).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = sorted(summaries, key=lambda s: (s.prior_index, s.delta, s.n))
    if not summaries:
        raise ValueError("no summaries to tabulate")
    k = summaries[0].k
    paths: list[Path] = []

    by_prior: dict[int, list[MCSummary]] = {}
    for s in summaries:
        by_prior.setdefault(s.prior_index, []).append(s)

    for pi, group in sorted(by_prior.items()):
        path = out / f"accuracy_prior{pi}.csv"
        header = (
            ["delta", "n", "estimator"]
            + [f"bias{j}" for j in range(1, k + 1)]
            + [f"sd{j}" for j in range(1, k + 1)]
            + [f"mse{j}" for j in range(1, k + 1)]
            + ["mse_combined"]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for s in group:
                for name, bias, sd, mse, comb in (
                    ("tsls", s.bias_tsls, s.sd_tsls, s.mse_tsls, s.mse_combined_tsls),
                    ("ridge", s.bias_ridge, s.sd_ridge, s.mse_ridge, s.mse_combined_ridge),
                ):
                    writer.writerow(
                        [_fmt(s.delta), str(s.n), name]
                        + [_fmt(v) for v in bias]
                        + [_fmt(v) for v in sd]
                        + [_fmt(v) for v in mse]
                        + [_fmt(comb)]
                    )
        paths.append(path)

    path = out / "alpha_distribution.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prior_index", "delta", "n", "p_zero", "p_some", "p_infinite"])
        for s in summaries:
            writer.writerow(
                [str(s.prior_index), _fmt(s.delta), str(s.n)]
                + [_fmt(v) for v in (s.p_zero, s.p_some, s.p_infinite)]
            )
    paths.append(path)

    first_prior = min(by_prior)
    path = out / "singular_values.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta", "n", "mean", "sd", "q25", "median", "q75"])
        for s in by_prior[first_prior]:
            writer.writerow(
                [_fmt(s.delta), str(s.n)]
                + [_fmt(v) for v in (s.sv_mean, s.sv_sd, s.sv_q25, s.sv_median, s.sv_q75)]
            )
    paths.append(path)
    return paths


def emit_scatter(summary: MCSummary, draws: CellDraws, out_dir) -> list[Path]:
    """Per-cell draw-level files: estimate scatter and selected-penalty values.

    The scatter file holds one row per successful replication and estimator
    (all two-stage rows first, then all ridge rows) with the prior repeated
    as reference columns; the companion file lists the selected penalty
    weights, ready for histogramming.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = summary.k
    ok_idx = np.flatnonzero(draws.ok)

    scatter_path = out / f"scatter_{summary.cell_id}.csv"
    header = (
        ["estimator"]
        + [f"beta{j}" for j in range(1, k + 1)]
        + [f"prior{j}" for j in range(1, k + 1)]
    )
    prior_cols = [_fmt(v) for v in summary.prior]
    with open(scatter_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, beta in (("tsls", draws.beta_tsls), ("ridge", draws.beta_ridge)):
            for i in ok_idx:
                writer.writerow([name] + [_fmt(v) for v in beta[i]] + prior_cols)

    alpha_path = out / f"alpha_hat_{summary.cell_id}.csv"
    with open(alpha_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha_hat"])
        for i in ok_idx:
            writer.writerow([_fmt(draws.alpha_hat[i])])
    return [scatter_path, alpha_path]
