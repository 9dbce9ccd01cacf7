"""Stacked just-identified moment system for the ridge-path estimator.

The parameter vector theta stacks, in order: the training-subsample
instrument second moment (half-vectorized), the training instrument-regressor
cross moment (vectorized), the coefficient vector, the penalty weight, and
the held-out analogues of the two moment blocks:

    theta = [vech(R_tr), vec(S_tr), beta, alpha, vech(R_te), vec(S_te)].

Each observation contributes six moment blocks; the first and last pairs
match the subsample second moments, the beta block is the training-objective
gradient, and the alpha row is the held-out criterion's derivative in alpha
(up to scale). Averaging over the sample and setting the vector to zero
recovers every estimator in the package at once.

vech uses column-major lower-triangle order ((0,0),(1,0),...,(m-1,m-1)) and
vec is column-major, so vec(z x') lines up with x kron z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve

from ridgeiv.linalg import spd_cholesky
from ridgeiv.model import Dataset, ModelSpec

__all__ = [
    "ThetaBlocks",
    "ThetaLayout",
    "ThetaVector",
    "moment_conditions",
    "numerical_jacobian",
    "pack_theta",
    "population_theta",
    "sample_theta",
    "unpack_theta",
]


def _vech_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.concatenate([np.arange(b, m) for b in range(m)])
    cols = np.concatenate([np.full(m - b, b) for b in range(m)])
    return rows, cols


@dataclass(frozen=True, eq=False)
class ThetaLayout:
    """Index bookkeeping for the stacked parameter vector.

    ``alpha_index`` is the 1-based position of the penalty weight
    (m(m+1)/2 + k m + k + 1); ``alpha_offset`` is its 0-based companion used
    for array indexing.
    """

    m: int
    k: int

    def __post_init__(self):
        if self.k < 1 or self.m < self.k:
            raise ValueError(f"need 1 <= k <= m, got k={self.k}, m={self.m}")
        rows, cols = _vech_indices(self.m)
        object.__setattr__(self, "_vech_rows", rows)
        object.__setattr__(self, "_vech_cols", cols)

    @property
    def p(self) -> int:
        """Length of one half-vectorized instrument block, m(m+1)/2."""
        return self.m * (self.m + 1) // 2

    @property
    def km(self) -> int:
        return self.k * self.m

    @property
    def total(self) -> int:
        return self.m * (self.m + 1) + 2 * self.km + self.k + 1

    @property
    def alpha_index(self) -> int:
        return self.p + self.km + self.k + 1

    @property
    def alpha_offset(self) -> int:
        return self.alpha_index - 1

    @property
    def r_train_slice(self) -> slice:
        return slice(0, self.p)

    @property
    def s_train_slice(self) -> slice:
        return slice(self.p, self.p + self.km)

    @property
    def beta_slice(self) -> slice:
        return slice(self.p + self.km, self.p + self.km + self.k)

    @property
    def r_test_slice(self) -> slice:
        start = self.alpha_offset + 1
        return slice(start, start + self.p)

    @property
    def s_test_slice(self) -> slice:
        start = self.alpha_offset + 1 + self.p
        return slice(start, start + self.km)

    # -- block <-> vector conversions ------------------------------------

    def vech(self, a: np.ndarray) -> np.ndarray:
        """Column-major lower triangle of a symmetric m x m matrix."""
        a = np.asarray(a, dtype=float)
        return a[self._vech_rows, self._vech_cols]

    def unvech(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((self.m, self.m))
        out[self._vech_rows, self._vech_cols] = v
        out[self._vech_cols, self._vech_rows] = v
        return out

    def vec(self, a: np.ndarray) -> np.ndarray:
        """Column-major flattening of an m x k matrix."""
        return np.asarray(a, dtype=float).ravel(order="F")

    def unvec(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float).reshape((self.m, self.k), order="F")


@dataclass(frozen=True, eq=False)
class ThetaVector:
    """A stacked parameter vector tied to its layout."""

    layout: ThetaLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).copy()
        if values.shape != (self.layout.total,):
            raise ValueError(
                f"theta must have length {self.layout.total}, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @property
    def alpha(self) -> float:
        return float(self.values[self.layout.alpha_offset])

    @property
    def beta(self) -> np.ndarray:
        return self.values[self.layout.beta_slice]


class ThetaBlocks(NamedTuple):
    r_train: np.ndarray
    s_train: np.ndarray
    beta: np.ndarray
    alpha: float
    r_test: np.ndarray
    s_test: np.ndarray


def _check_symmetric_block(a: np.ndarray, name: str) -> None:
    if np.max(np.abs(a - a.T)) > 1e-10 * (1.0 + np.max(np.abs(a))):
        raise ValueError(f"{name} must be symmetric to pack losslessly")


def pack_theta(
    r_train,
    s_train,
    beta,
    alpha: float,
    r_test,
    s_test,
    layout: ThetaLayout | None = None,
) -> ThetaVector:
    """Stack the six blocks into one vector (layout inferred when omitted)."""
    r_train = np.asarray(r_train, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if layout is None:
        layout = ThetaLayout(m=r_train.shape[0], k=beta.shape[0])
    s_train = np.asarray(s_train, dtype=float)
    r_test = np.asarray(r_test, dtype=float)
    s_test = np.asarray(s_test, dtype=float)
    m, k = layout.m, layout.k
    for mat, name, shape in (
        (r_train, "r_train", (m, m)),
        (s_train, "s_train", (m, k)),
        (r_test, "r_test", (m, m)),
        (s_test, "s_test", (m, k)),
    ):
        if mat.shape != shape:
            raise ValueError(f"{name} must have shape {shape}, got {mat.shape}")
    if beta.shape != (k,):
        raise ValueError(f"beta must have shape ({k},), got {beta.shape}")
    _check_symmetric_block(r_train, "r_train")
    _check_symmetric_block(r_test, "r_test")

    values = np.empty(layout.total)
    values[layout.r_train_slice] = layout.vech(r_train)
    values[layout.s_train_slice] = layout.vec(s_train)
    values[layout.beta_slice] = beta
    values[layout.alpha_offset] = float(alpha)
    values[layout.r_test_slice] = layout.vech(r_test)
    values[layout.s_test_slice] = layout.vec(s_test)
    return ThetaVector(layout=layout, values=values)


def unpack_theta(theta: ThetaVector) -> ThetaBlocks:
    """Recover the six blocks; the half-vectorized blocks come back symmetric."""
    lay = theta.layout
    v = theta.values
    return ThetaBlocks(
        r_train=lay.unvech(v[lay.r_train_slice]),
        s_train=lay.unvec(v[lay.s_train_slice]),
        beta=v[lay.beta_slice].copy(),
        alpha=float(v[lay.alpha_offset]),
        r_test=lay.unvech(v[lay.r_test_slice]),
        s_test=lay.unvec(v[lay.s_test_slice]),
    )


def population_theta(spec: ModelSpec) -> ThetaVector:
    """The vector the moment system centers on: population moments, alpha = 0."""
    s0 = spec.rz @ spec.gamma0
    return pack_theta(
        r_train=spec.rz,
        s_train=s0,
        beta=spec.beta0,
        alpha=0.0,
        r_test=spec.rz,
        s_test=s0,
        layout=ThetaLayout(m=spec.m, k=spec.k),
    )


def sample_theta(data: Dataset, beta, alpha: float) -> ThetaVector:
    """Stack subsample second moments around a given (beta, alpha)."""
    s = data.split_at
    n2 = data.n - s
    if s < 1 or n2 < 1:
        raise ValueError("dataset must have nonempty training and held-out rows")
    z1, z2 = data.z[:s], data.z[s:]
    x1, x2 = data.x[:s], data.x[s:]
    return pack_theta(
        r_train=z1.T @ z1 / s,
        s_train=z1.T @ x1 / s,
        beta=np.asarray(beta, dtype=float),
        alpha=alpha,
        r_test=z2.T @ z2 / n2,
        s_test=z2.T @ x2 / n2,
        layout=ThetaLayout(m=data.m, k=data.k),
    )


# ---------------------------------------------------------------------------
# moment evaluation
# ---------------------------------------------------------------------------


class _SuffStats:
    """Cross products that make repeated moment evaluations cheap."""

    def __init__(self, data: Dataset):
        s = data.split_at
        n2 = data.n - s
        if s < 1 or n2 < 1:
            raise ValueError("dataset must have nonempty training and held-out rows")
        self.n = data.n
        self.s = s
        self.n2 = n2
        z1, z2 = data.z[:s], data.z[s:]
        x1, x2 = data.x[:s], data.x[s:]
        y1, y2 = data.y[:s], data.y[s:]
        self.zz1 = z1.T @ z1
        self.zx1 = z1.T @ x1
        self.zy1 = z1.T @ y1
        self.zz2 = z2.T @ z2
        self.zx2 = z2.T @ x2
        self.zy2 = z2.T @ y2


def _evaluate(stats: _SuffStats, lay: ThetaLayout, values: np.ndarray, prior: np.ndarray) -> np.ndarray:
    theta = ThetaVector(layout=lay, values=values)
    blocks = unpack_theta(theta)
    n, s, n2 = stats.n, stats.s, stats.n2
    beta, alpha = blocks.beta, blocks.alpha

    out = np.empty(lay.total)
    out[lay.r_train_slice] = (s * lay.vech(blocks.r_train) - lay.vech(stats.zz1)) / n
    out[lay.s_train_slice] = (s * lay.vec(blocks.s_train) - lay.vec(stats.zx1)) / n

    zr1 = stats.zy1 - stats.zx1 @ beta
    l1 = spd_cholesky(blocks.r_train, "training instrument block R")
    out[lay.beta_slice] = (
        -(blocks.s_train.T @ cho_solve((l1, True), zr1)) + s * alpha * (beta - prior)
    ) / n

    gmat = blocks.s_train.T @ cho_solve((l1, True), blocks.s_train) + alpha * np.eye(lay.k)
    lg = spd_cholesky(gmat, "penalized signal block S'R^{-1}S + alpha I")
    w = cho_solve((lg, True), prior - beta)
    l2 = spd_cholesky(blocks.r_test, "held-out instrument block R")
    zr2 = stats.zy2 - stats.zx2 @ beta
    out[lay.alpha_offset] = float(zr2 @ cho_solve((l2, True), blocks.s_test @ w)) / n

    out[lay.r_test_slice] = (n2 * lay.vech(blocks.r_test) - lay.vech(stats.zz2)) / n
    out[lay.s_test_slice] = (n2 * lay.vec(blocks.s_test) - lay.vec(stats.zx2)) / n
    return out


def moment_conditions(data: Dataset, theta: ThetaVector, prior) -> np.ndarray:
    """Sample average H_n(theta) of the stacked moment contributions.

    The six blocks, in layout order: training instrument second-moment match,
    training cross-moment match, the training-objective gradient in beta, the
    (scaled) held-out criterion derivative in alpha, and the held-out
    second-moment matches. At the subsample averages the matching blocks
    vanish identically; at a fit with a stationary interior penalty weight
    the two gradient rows vanish as well.
    """
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (theta.layout.k,):
        raise ValueError(f"prior must have shape ({theta.layout.k},), got {prior.shape}")
    if data.m != theta.layout.m or data.k != theta.layout.k:
        raise ValueError(
            f"layout (m={theta.layout.m}, k={theta.layout.k}) does not match "
            f"data (m={data.m}, k={data.k})"
        )
    return _evaluate(_SuffStats(data), theta.layout, theta.values, prior)


def numerical_jacobian(data: Dataset, theta: ThetaVector, prior, step: float) -> np.ndarray:
    """Central-difference Jacobian of H_n at ``theta``, one column per coordinate."""
    prior = np.asarray(prior, dtype=float)
    stats = _SuffStats(data)
    lay = theta.layout
    base = theta.values
    jac = np.empty((lay.total, lay.total))
    for j in range(lay.total):
        vp = base.copy()
        vm = base.copy()
        vp[j] += step
        vm[j] -= step
        jac[:, j] = (_evaluate(stats, lay, vp, prior) - _evaluate(stats, lay, vm, prior)) / (
            2.0 * step
        )
    return jac
