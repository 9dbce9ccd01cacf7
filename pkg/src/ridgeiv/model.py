"""Data-generating model, dataset container, and file formats.

The model is the linear instrumental-variables design

    y_i = x_i' beta0 + eps_i,        x_i = gamma0' z_i + u_i,

with z_i ~ N(0, rz) and (eps_i, u_i') ~ N(0, err_cov) independent of z.
Observations are ordered so the first ``floor(tau * n)`` rows form the
training subsample used to fit the ridge path and the remainder form the
held-out evaluation subsample.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "ModelSpec",
    "benchmark_spec",
    "generate_dataset",
    "load_dataset_csv",
    "load_model_spec",
    "save_dataset_csv",
    "save_model_spec",
    "split",
    "train_rows",
]


def train_rows(tau: float, n: int) -> int:
    """Number of training rows: the greatest integer <= tau * n.

    Computed with a 1e-9 nudge because the binary product can land just
    below the exact value (0.7 * 10 == 6.999...996, whose naive floor would
    drop a training row).
    """
    return int(math.floor(tau * n + 1e-9))


def _as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (rows, cols):
        raise ValueError(f"{name} must have shape ({rows}, {cols}), got {arr.shape}")
    return arr


def _as_vector(value, length: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (length,):
        raise ValueError(f"{name} must have shape ({length},), got {arr.shape}")
    return arr


def _check_symmetric(a: np.ndarray, name: str) -> None:
    if np.max(np.abs(a - a.T)) > 1e-12 * (1.0 + np.max(np.abs(a))):
        raise ValueError(f"{name} must be symmetric")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complete description of one simulated design.

    Parameters
    ----------
    n : int
        Sample size.
    k : int
        Number of endogenous regressors.
    m : int
        Number of instruments (m >= k).
    beta0 : array, shape (k,)
        Structural coefficient vector.
    gamma0 : array, shape (m, k)
        First-stage coefficient matrix; must have full column rank.
    prior : array, shape (k,)
        Shrinkage target for the ridge path.
    tau : float
        Training fraction, strictly between 0 and 1.
    err_cov : array, shape (1 + k, 1 + k)
        Joint covariance of (eps_i, u_i'); symmetric positive semidefinite.
        (The all-zero matrix gives an exactly noise-free design.)
    rz : array, shape (m, m)
        Instrument covariance; symmetric positive definite.
    """

    n: int
    k: int
    m: int
    beta0: np.ndarray
    gamma0: np.ndarray
    prior: np.ndarray
    tau: float
    err_cov: np.ndarray
    rz: np.ndarray

    def __post_init__(self):
        n, k, m = int(self.n), int(self.k), int(self.m)
        if k < 1 or m < k:
            raise ValueError(f"need 1 <= k <= m, got k={k}, m={m}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "beta0", _as_vector(self.beta0, k, "beta0"))
        object.__setattr__(self, "prior", _as_vector(self.prior, k, "prior"))
        object.__setattr__(self, "gamma0", _as_matrix(self.gamma0, m, k, "gamma0"))
        object.__setattr__(self, "err_cov", _as_matrix(self.err_cov, 1 + k, 1 + k, "err_cov"))
        object.__setattr__(self, "rz", _as_matrix(self.rz, m, m, "rz"))
        object.__setattr__(self, "tau", float(self.tau))

        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie strictly in (0, 1), got {self.tau}")
        if np.linalg.matrix_rank(self.gamma0) < k:
            raise ValueError("gamma0 must have full column rank")
        _check_symmetric(self.err_cov, "err_cov")
        _check_symmetric(self.rz, "rz")
        eig = np.linalg.eigvalsh(self.err_cov)
        if eig.min() < -1e-12 * (1.0 + abs(eig.max())):
            raise ValueError("err_cov must be positive semidefinite")
        try:
            np.linalg.cholesky(self.rz)
        except np.linalg.LinAlgError:
            raise ValueError("rz must be positive definite") from None
        s = self.split_at
        if not 1 <= s <= n - 1:
            raise ValueError(
                f"training subsample must be a proper split: floor(tau*n)={s} with n={n}"
            )

    @property
    def split_at(self) -> int:
        """Index of the first held-out row, floor(tau * n)."""
        return train_rows(self.tau, self.n)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "m": self.m,
            "beta0": self.beta0.tolist(),
            "gamma0": self.gamma0.tolist(),
            "prior": self.prior.tolist(),
            "tau": self.tau,
            "err_cov": self.err_cov.tolist(),
            "rz": self.rz.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            n=data["n"],
            k=data["k"],
            m=data["m"],
            beta0=data["beta0"],
            gamma0=data["gamma0"],
            prior=data["prior"],
            tau=data["tau"],
            err_cov=data["err_cov"],
            rz=data["rz"],
        )


def benchmark_spec(delta: float, n: int, prior, tau: float = 0.7) -> ModelSpec:
    """Three-instrument, two-regressor benchmark design.

    The first regressor loads on instruments 1 and 3 with unit strength; the
    second loads on instrument 2 with strength ``delta``, so delta controls
    how close the design is to underidentification (the smallest singular
    value of E[x_i z_i'] equals delta for delta <= 1). Errors are unit
    variance with endogeneity 0.7 in both equations.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    gamma0 = np.array([[1.0, 0.0], [0.0, float(delta)], [1.0, 0.0]])
    err_cov = np.array(
        [
            [1.0, 0.7, 0.7],
            [0.7, 1.0, 0.0],
            [0.7, 0.0, 1.0],
        ]
    )
    return ModelSpec(
        n=n,
        k=2,
        m=3,
        beta0=np.zeros(2),
        gamma0=gamma0,
        prior=prior,
        tau=tau,
        err_cov=err_cov,
        rz=np.eye(3),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """One realized sample, ordered training rows first.

    ``split_at`` is the number of leading rows that belong to the training
    subsample. Subsample views produced by :func:`split` carry their own
    ``split_at`` (all rows for the training view, zero for the held-out view).
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    split_at: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if y.ndim != 1 or x.ndim != 2 or z.ndim != 2:
            raise ValueError("y must be 1-d; x and z must be 2-d")
        n = y.shape[0]
        if x.shape[0] != n or z.shape[0] != n:
            raise ValueError(
                f"row mismatch: y has {n}, x has {x.shape[0]}, z has {z.shape[0]}"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "split_at", int(self.split_at))
        if not 0 <= self.split_at <= n:
            raise ValueError(f"split_at={self.split_at} outside 0..{n}")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.z.shape[1]


def split(data: Dataset) -> tuple[Dataset, Dataset]:
    """Training and held-out views of ``data`` (no copies are made)."""
    s = data.split_at
    if not 1 <= s <= data.n - 1:
        raise ValueError(f"cannot split: split_at={s} leaves an empty subsample")
    train = Dataset(data.y[:s], data.x[:s], data.z[:s], split_at=s)
    test = Dataset(data.y[s:], data.x[s:], data.z[s:], split_at=0)
    return train, test


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix L with L L' = cov, tolerating semidefinite covariances."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(cov)
        return u * np.sqrt(np.clip(w, 0.0, None))


def generate_dataset(spec: ModelSpec, seed) -> Dataset:
    """Draw one sample from ``spec``.

    ``seed`` is an integer or a numpy SeedSequence. Draws come from a
    counter-based (Philox) stream keyed by the seed, so each observation is a
    pure function of (seed, row index): the same seed always reproduces the
    same rows, bit for bit, regardless of platform threading.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(int(seed))
    rng = np.random.Generator(np.random.Philox(ss))
    lz = np.linalg.cholesky(spec.rz)
    le = _psd_factor(spec.err_cov)
    z = rng.standard_normal((spec.n, spec.m)) @ lz.T
    errors = rng.standard_normal((spec.n, 1 + spec.k)) @ le.T
    u = errors[:, 1:]
    eps = errors[:, 0]
    x = z @ spec.gamma0 + u
    y = x @ spec.beta0 + eps
    return Dataset(y=y, x=x, z=z, split_at=spec.split_at)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_dataset_csv(data: Dataset, path) -> None:
    """Write ``data`` as CSV with header ``y,x1..xk,z1..zm``.

    Values are written with shortest round-trip formatting, so reading the
    file back reproduces every float bit for bit.
    """
    header = (
        ["y"]
        + [f"x{j}" for j in range(1, data.k + 1)]
        + [f"z{j}" for j in range(1, data.m + 1)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [data.y[i], *data.x[i], *data.z[i]]
            writer.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path, tau: float | None = None, split_at: int | None = None) -> Dataset:
    """Read a ``y,x1..xk,z1..zm`` CSV back into a :class:`Dataset`.

    Exactly one of ``tau`` (training fraction, converted with the same floor
    rule used at generation time) or ``split_at`` (explicit row count) must
    be given to recover the train/test boundary.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if not header or header[0] != "y":
        raise ValueError(f"unrecognized dataset header: {header!r}")
    k = sum(1 for name in header if name.startswith("x"))
    m = sum(1 for name in header if name.startswith("z"))
    expected = ["y"] + [f"x{j}" for j in range(1, k + 1)] + [f"z{j}" for j in range(1, m + 1)]
    if header != expected:
        raise ValueError(f"unrecognized dataset header: {header!r}")
    arr = np.asarray(rows, dtype=float)
    if arr.shape[1] != 1 + k + m:
        raise ValueError("dataset rows do not match header width")
    n = arr.shape[0]
    if (tau is None) == (split_at is None):
        raise ValueError("provide exactly one of tau or split_at")
    s = train_rows(tau, n) if split_at is None else int(split_at)
    return Dataset(y=arr[:, 0], x=arr[:, 1 : 1 + k], z=arr[:, 1 + k :], split_at=s)


def save_model_spec(spec: ModelSpec, path) -> None:
    """Write ``spec`` to JSON."""
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")


def load_model_spec(path) -> ModelSpec:
    """Read a model spec from JSON or TOML.

    Accepts either the full field mapping or the benchmark shorthand
    ``{"delta": ..., "n": ..., "prior": [...], "tau": ...}``.
    """
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # stdlib from 3.11; tomli has the same API
            import tomli as tomllib

        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path) as fh:
            data = json.load(fh)
    if "delta" in data and "gamma0" not in data:
        return benchmark_spec(
            delta=data["delta"],
            n=data["n"],
            prior=data["prior"],
            tau=data.get("tau", 0.7),
        )
    return ModelSpec.from_dict(data)
