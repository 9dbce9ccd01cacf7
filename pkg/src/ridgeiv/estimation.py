"""Two-stage least squares and the ridge path toward a prior.

The ridge path solves, on the training subsample of ``n1`` rows,

    min_beta (1/(2 n1)) (Y - X beta)' P_Z (Y - X beta)
             + (alpha/2) (beta - prior)'(beta - prior),

whose closed form is ``(X'P_Z X / n1 + alpha I)^{-1} (X'P_Z Y / n1 + alpha prior)``.
The penalty weight alpha is chosen to minimize the projected residual
criterion Q(alpha) on the held-out rows, searched over a log-scale grid and
then a linear refinement around the winning bracket. alpha = 0 reproduces
training-sample two-stage least squares; as alpha grows the estimator slides
monotonically toward the prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import brentq

from ridgeiv.linalg import SingularDesignError, spd_cholesky, spd_inverse, whiten
from ridgeiv.model import Dataset, split

__all__ = [
    "RidgeConfig",
    "RidgeFit",
    "TSLSResult",
    "beta_foc_residual",
    "q_derivatives",
    "refine_alpha",
    "ridge_beta",
    "ridge_path_estimate",
    "select_alpha",
    "test_objective",
    "tsls",
]


class TSLSResult(NamedTuple):
    """Two-stage least squares estimate with its covariance estimate.

    ``cov`` estimates the *asymptotic* covariance sigma2 * (X'P_Z X / n)^{-1};
    divide by the sample size for finite-sample standard errors. ``sigma2``
    is the residual second moment eps'eps / n.
    """

    beta: np.ndarray
    cov: np.ndarray
    sigma2: float


def _projected_grams(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(X'P_Z X, X'P_Z Y) via the instrument Gram's Cholesky factor."""
    lz = spd_cholesky(data.z.T @ data.z, "instrument Gram z'z")
    w = whiten(lz, data.z.T @ data.x)
    wy = whiten(lz, data.z.T @ data.y)
    return w.T @ w, w.T @ wy


def tsls(data: Dataset) -> TSLSResult:
    """Two-stage least squares on all rows of ``data``."""
    xpzx, xpzy = _projected_grams(data)
    lb = spd_cholesky(xpzx, "projected regressor Gram x'Pz x")
    beta = cho_solve((lb, True), xpzy)
    eps = data.y - data.x @ beta
    sigma2 = float(eps @ eps) / data.n
    cov = sigma2 * data.n * spd_inverse(xpzx, "projected regressor Gram x'Pz x")
    return TSLSResult(beta=beta, cov=cov, sigma2=sigma2)


def ridge_beta(train: Dataset, alpha: float, prior) -> np.ndarray:
    """Closed-form ridge solution at one penalty weight, on the training rows.

    Evaluates ``(X'P_Z X / n1 + alpha I)^{-1} (X'P_Z Y / n1 + alpha prior)``
    directly; the path is never reconstructed from the unpenalized solution.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    prior = np.asarray(prior, dtype=float)
    xpzx, xpzy = _projected_grams(train)
    n1 = train.n
    a = xpzx / n1 + alpha * np.eye(train.k)
    la = spd_cholesky(a, "penalized Gram x'Pz x/n + alpha I")
    return cho_solve((la, True), xpzy / n1 + alpha * prior)


def beta_foc_residual(train: Dataset, beta, alpha: float, prior) -> np.ndarray:
    """Gradient of the training objective at ``beta``.

    Equals ``-(1/n1) X'P_Z (Y - X beta) + alpha (beta - prior)``; it vanishes
    at the ridge solution for the same alpha.
    """
    beta = np.asarray(beta, dtype=float)
    prior = np.asarray(prior, dtype=float)
    xpzx, xpzy = _projected_grams(train)
    return -(xpzy - xpzx @ beta) / train.n + alpha * (beta - prior)


def test_objective(test: Dataset, beta) -> float:
    """Held-out criterion Q = (Y - X beta)' P_Z (Y - X beta) / (2 n2)."""
    beta = np.asarray(beta, dtype=float)
    lz = spd_cholesky(test.z.T @ test.z, "held-out instrument Gram z'z")
    e = whiten(lz, test.z.T @ (test.y - test.x @ beta))
    return 0.5 * float(e @ e) / test.n


def q_derivatives(train: Dataset, test: Dataset, alpha: float, prior) -> tuple[float, float]:
    """First and second derivatives of the held-out criterion in alpha.

    Differentiates Q(alpha) through the closed-form path: with
    G = X'P_Z X / n1 on the training rows and betahat(alpha) the ridge
    solution,

        dbeta/dalpha  = (G + alpha I)^{-1} (prior - betahat)
        dQ/dalpha     = -(1/n2) (Y - X betahat)' P_Z X dbeta/dalpha
        d2Q/dalpha2   = (2/n2) (Y - X betahat)' P_Z X (G + alpha I)^{-2} (prior - betahat)
                        + (1/n2) (dbeta/dalpha)' X'P_Z X (dbeta/dalpha)

    with all test-side products taken on the held-out rows.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    prior = np.asarray(prior, dtype=float)
    xpzx, xpzy = _projected_grams(train)
    n1 = train.n
    a = xpzx / n1 + alpha * np.eye(train.k)
    la = spd_cholesky(a, "penalized Gram x'Pz x/n + alpha I")
    bhat = cho_solve((la, True), xpzy / n1 + alpha * prior)
    d1 = cho_solve((la, True), prior - bhat)
    d1b = cho_solve((la, True), d1)

    lt = spd_cholesky(test.z.T @ test.z, "held-out instrument Gram z'z")
    f = whiten(lt, test.z.T @ test.x)
    ey = whiten(lt, test.z.T @ test.y)
    rproj = ey - f @ bhat
    n2 = test.n
    fd1 = f @ d1
    dq = -float(rproj @ fd1) / n2
    d2q = 2.0 * float(rproj @ (f @ d1b)) / n2 + float(fd1 @ fd1) / n2
    return dq, d2q


# ---------------------------------------------------------------------------
# penalty-weight search
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RidgeConfig:
    """Search configuration for the penalty weight.

    The coarse stage evaluates {0} + a log-spaced grid of
    ``log_grid_points`` values between 10**log_grid_lo and 10**log_grid_hi
    + {alpha_infinity}; the fine stage places ``linear_grid_points`` equally
    spaced values across the coarse winner's neighboring bracket.
    ``alpha_infinity`` doubles as the sentinel for "effectively infinite
    regularization" in fit classification.
    """

    prior: np.ndarray
    tau: float = 0.7
    log_grid_lo: float = -5.0
    log_grid_hi: float = 6.0
    log_grid_points: int = 45
    linear_grid_points: int = 10_000
    alpha_infinity: float = 1e7

    def __post_init__(self):
        object.__setattr__(self, "prior", np.asarray(self.prior, dtype=float))
        if self.prior.ndim != 1:
            raise ValueError("prior must be a vector")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie strictly in (0, 1), got {self.tau}")
        if self.log_grid_points < 2 or self.linear_grid_points < 2:
            raise ValueError("both grids need at least two points")
        if self.alpha_infinity <= 10.0 ** self.log_grid_hi:
            raise ValueError("alpha_infinity must exceed the top of the log grid")


@dataclass(frozen=True, eq=False)
class RidgeFit:
    """Result of a full ridge-path fit.

    ``search_trace`` holds (alpha, criterion) pairs in evaluation order —
    coarse grid first, then the linear refinement. ``regularization_class``
    is "none" (alpha_hat == 0), "infinite" (alpha_hat == the sentinel), or
    "some" for interior values. ``beta_2sls_full`` / ``cov_2sls`` come from
    two-stage least squares on all rows.
    """

    beta_hat: np.ndarray
    alpha_hat: float
    beta_2sls_full: np.ndarray
    cov_2sls: np.ndarray
    search_trace: tuple[tuple[float, float], ...]
    regularization_class: str

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "alpha_hat": self.alpha_hat,
            "beta_2sls_full": self.beta_2sls_full.tolist(),
            "cov_2sls": self.cov_2sls.tolist(),
            "search_trace": [[a, q] for a, q in self.search_trace],
            "regularization_class": self.regularization_class,
        }


class _PathEvaluator:
    """Evaluates the held-out criterion over whole alpha grids at once.

    One spectral decomposition of the training Gram G = C diag(lam) C' turns
    every path solution into a per-eigendirection scalar ratio:

        betahat(alpha) = C (C'v + alpha C'prior) / (lam + alpha)

    so a grid of criterion values costs one matrix product per grid, not one
    factorization per point.
    """

    def __init__(self, train: Dataset, test: Dataset, prior: np.ndarray):
        n1 = train.n
        lz = spd_cholesky(train.z.T @ train.z, "instrument Gram z'z")
        w = whiten(lz, train.z.T @ train.x)
        wy = whiten(lz, train.z.T @ train.y)
        g = (w.T @ w) / n1
        v = (w.T @ wy) / n1
        lam, c = np.linalg.eigh(g)
        self.lam = np.clip(lam, 0.0, None)
        self.cv = c.T @ v
        self.cp = c.T @ prior
        lt = spd_cholesky(test.z.T @ test.z, "held-out instrument Gram z'z")
        self.fc = whiten(lt, test.z.T @ test.x) @ c
        self.ey = whiten(lt, test.z.T @ test.y)
        self.n2 = test.n

    def criterion(self, alphas: np.ndarray) -> np.ndarray:
        a = np.asarray(alphas, dtype=float)
        denom = self.lam[:, None] + a[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.cv[:, None] + a[None, :] * self.cp[:, None]) / denom
            resid = self.ey[:, None] - self.fc @ s
            q = 0.5 * np.einsum("ij,ij->j", resid, resid) / self.n2
        # a singular training Gram makes alpha = 0 score +inf instead of erroring
        return np.where(np.isfinite(q), q, np.inf)


def _stage1_grid(config: RidgeConfig) -> np.ndarray:
    log_grid = np.logspace(config.log_grid_lo, config.log_grid_hi, config.log_grid_points)
    return np.concatenate(([0.0], log_grid, [config.alpha_infinity]))


def _bracket(grid: np.ndarray, j: int) -> tuple[float, float]:
    lo = grid[j - 1] if j > 0 else grid[0]
    hi = grid[j + 1] if j + 1 < len(grid) else grid[-1]
    return float(lo), float(hi)


# Criterion values within this relative distance of the minimum count as
# ties; the smallest alpha among ties wins.
_Q_TIE_REL = 1e-12


def select_alpha(
    train: Dataset,
    test: Dataset,
    config: RidgeConfig,
    *,
    keep_trace: bool = True,
) -> tuple[float, tuple[tuple[float, float], ...]]:
    """Two-stage grid search for the penalty weight.

    Stage one scores {0} + the log grid + {alpha_infinity}; stage two scores
    ``linear_grid_points`` equally spaced values across the bracket formed by
    the stage-one winner's immediate neighbors (one-sided at either end).
    Returns the overall minimizer over both grids; near-exact ties (within
    1e-12 relative criterion) resolve to the smallest alpha.
    """
    ev = _PathEvaluator(train, test, config.prior)
    g1 = _stage1_grid(config)
    q1 = ev.criterion(g1)
    j = int(np.argmin(q1))
    lo, hi = _bracket(g1, j)
    g2 = np.linspace(lo, hi, config.linear_grid_points)
    q2 = ev.criterion(g2)

    alphas = np.concatenate((g1, g2))
    qs = np.concatenate((q1, q2))
    qmin = float(qs.min())
    if not np.isfinite(qmin):
        raise SingularDesignError("ridge path criterion", np.inf)
    ties = qs <= qmin + _Q_TIE_REL * abs(qmin)
    alpha_hat = float(alphas[ties].min())
    trace: tuple[tuple[float, float], ...] = ()
    if keep_trace:
        trace = tuple((float(a), float(q)) for a, q in zip(alphas, qs))
    return alpha_hat, trace


def refine_alpha(
    train: Dataset,
    test: Dataset,
    alpha: float,
    prior,
    *,
    factor: float = 4.0,
    max_expand: int = 40,
) -> float:
    """Sharpen an interior grid minimizer to a stationary point of Q.

    Finds the root of dQ/dalpha in a geometric bracket around ``alpha`` —
    the grid search localizes the minimum only to one linear-grid step, so
    the derivative there is O(step) rather than zero. Endpoint values
    (alpha <= 0, or no sign change found) are returned unchanged.
    """
    alpha = float(alpha)
    if alpha <= 0.0:
        return alpha
    prior = np.asarray(prior, dtype=float)

    def dq(a: float) -> float:
        return q_derivatives(train, test, a, prior)[0]

    lo, hi = alpha / factor, alpha * factor
    flo, fhi = dq(lo), dq(hi)
    for _ in range(max_expand):
        if flo * fhi <= 0:
            break
        if flo > 0:  # still past the minimum: move the bracket left
            lo /= factor
            flo = dq(lo)
        else:  # still before the minimum: move the bracket right
            hi *= factor
            fhi = dq(hi)
    if flo * fhi > 0:
        return alpha
    return float(brentq(dq, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))


def ridge_path_estimate(data: Dataset, config: RidgeConfig, *, keep_trace: bool = True) -> RidgeFit:
    """Full fit: split, search the penalty weight, evaluate the path there.

    The dataset's own ``split_at`` boundary defines the training rows. The
    returned ``beta_hat`` is the closed-form path solution at the selected
    alpha (so alpha_hat == 0 reproduces training-sample two-stage least
    squares exactly), alongside full-sample two-stage least squares for
    comparison.
    """
    train, test = split(data)
    alpha_hat, trace = select_alpha(train, test, config, keep_trace=keep_trace)
    beta_hat = ridge_beta(train, alpha_hat, config.prior)
    full = tsls(data)
    if alpha_hat == 0.0:
        klass = "none"
    elif alpha_hat >= config.alpha_infinity:
        klass = "infinite"
    else:
        klass = "some"
    return RidgeFit(
        beta_hat=beta_hat,
        alpha_hat=alpha_hat,
        beta_2sls_full=full.beta,
        cov_2sls=full.cov,
        search_trace=trace,
        regularization_class=klass,
    )
