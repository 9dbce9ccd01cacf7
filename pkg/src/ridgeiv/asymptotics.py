"""Limit distribution of the stacked moment system and its cone projection.

The moment average H_n, centered at the population vector theta0, obeys a
central limit theorem: sqrt(n) H_n(theta0) -> N(0, v), while the Jacobian of
H_n converges to a block matrix m0. Because the penalty weight cannot go
negative, the estimator's limit is not the Gaussian Z = (-m0)^{-1} N(0, v)
itself but its projection onto the cone {lambda : lambda_alpha >= 0} in the
metric m0'm0:

    lambda_hat = argmin_{lambda_alpha >= 0} (Z - lambda)' m0'm0 (Z - lambda).

The projection has an exact two-case form: draws with a nonnegative alpha
coordinate are untouched; the rest land on the boundary face, where the
remaining coordinates shift by a fixed linear correction. Half the draws hit
the boundary in the limit, which is what makes the estimator's law
half-Gaussian, half-projected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, lu_factor, lu_solve

from ridgeiv.linalg import spd_cholesky, spd_inverse, spd_solve
from ridgeiv.model import ModelSpec
from ridgeiv.moments import ThetaLayout

__all__ = [
    "AsymptoticLaw",
    "ConeSample",
    "build_law",
    "project_onto_cone",
    "simulate_theorem1",
]

# delta_tilde at or below this is treated as a degenerate (truth-centered) prior
_DEGENERATE_TOL = 1e-8

# Monte Carlo covariance estimation draws observations in blocks of this size.
_CHUNK = 100_000


@dataclass(frozen=True, eq=False)
class AsymptoticLaw:
    """Everything needed to simulate the limit law of one design.

    ``m0`` is the limiting Jacobian of the moment average; ``v`` the limiting
    covariance of sqrt(n) times the moment average; ``s0`` the population
    instrument-regressor cross moment rz @ gamma0; ``delta_tilde`` the
    prior-distance quadratic (beta0 - prior)' (gamma0' rz gamma0)^{-1}
    (beta0 - prior). ``d`` is the central Jacobian block coupling beta and
    alpha, with ``d_inv`` its closed-form inverse (None when the prior is
    degenerate, i.e. delta_tilde ~ 0, which makes m0 singular and the law
    unsimulable). ``tau`` is the training fraction baked into the row
    weights.
    """

    layout: ThetaLayout
    m0: np.ndarray
    v: np.ndarray
    s0: np.ndarray
    delta_tilde: float
    degenerate_prior: bool
    d: np.ndarray
    d_inv: np.ndarray | None
    tau: float


@dataclass(frozen=True, eq=False)
class ConeSample:
    """One draw from the limit law: the Gaussian and its cone projection."""

    z: np.ndarray
    lambda_hat: np.ndarray
    at_boundary: bool


def _central_block(stilde: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = stilde.shape[0]
    d = np.empty((k + 1, k + 1))
    d[:k, :k] = stilde
    d[:k, k] = b
    d[k, :k] = b
    d[k, k] = 0.0
    return d


def _central_block_inverse(stilde: np.ndarray, b: np.ndarray, delta_tilde: float) -> np.ndarray:
    """Closed-form inverse of [[stilde, b], [b', 0]] for delta_tilde > 0."""
    k = stilde.shape[0]
    si = spd_inverse(stilde, "first-stage signal matrix gamma' rz gamma")
    sib = si @ b
    out = np.empty((k + 1, k + 1))
    out[:k, :k] = si - np.outer(sib, sib) / delta_tilde
    out[:k, k] = sib / delta_tilde
    out[k, :k] = sib / delta_tilde
    out[k, k] = -1.0 / delta_tilde
    return out


def _row_weights(lay: ThetaLayout, tau: float) -> np.ndarray:
    w = np.empty(lay.total)
    w[: lay.alpha_offset] = tau
    w[lay.alpha_offset :] = 1.0 - tau
    return w


def _analytic_m0(spec: ModelSpec, lay: ThetaLayout, stilde: np.ndarray, b: np.ndarray) -> np.ndarray:
    m0 = np.eye(lay.total)
    d = _central_block(stilde, b)
    lo = lay.beta_slice.start
    hi = lay.alpha_offset + 1
    m0[lo:hi, lo:hi] = d
    return _row_weights(lay, spec.tau)[:, None] * m0


def _analytic_v(spec: ModelSpec, lay: ThetaLayout) -> np.ndarray:
    """Closed-form moment covariance for Gaussian instruments.

    Fourth moments of z reduce to products of rz entries, so every block has
    a finite expansion in rz, gamma0, and the error covariance.
    """
    rz = spec.rz
    gamma = spec.gamma0
    s0 = rz @ gamma
    stilde = gamma.T @ s0
    sigma2_eps = spec.err_cov[0, 0]
    sigma_ue = spec.err_cov[1:, 0]
    sigma_u = spec.err_cov[1:, 1:]
    b = spec.beta0 - spec.prior
    delta_tilde = float(b @ spd_solve(stilde, b, "first-stage signal matrix gamma' rz gamma"))

    vr, vc = lay._vech_rows, lay._vech_cols
    # column-major vec index t <-> matrix entry (t % m, t // m)
    t = np.arange(lay.km)
    va, vb = t % lay.m, t // lay.m

    # instrument second-moment block: cov(z_a z_b, z_c z_d)
    chi = (
        rz[np.ix_(vr, vr)] * rz[np.ix_(vc, vc)]
        + rz[np.ix_(vr, vc)] * rz[np.ix_(vc, vr)]
    )
    # cross block with the instrument-regressor moments: rows (a,b), cols (c,j)
    xi = rz[np.ix_(vr, va)] * s0[vc][:, vb] + s0[vr][:, vb] * rz[np.ix_(vc, va)]
    # instrument-regressor moment block: rows (a,j), cols (c,l)
    a_row, j_row = va[:, None], vb[:, None]
    c_col, l_col = va[None, :], vb[None, :]
    zeta = rz[a_row, c_col] * (stilde + sigma_u)[j_row, l_col] + s0[a_row, l_col] * s0[c_col, j_row]

    psi = np.kron(sigma_ue.reshape(-1, 1), s0)
    xi_big = sigma2_eps * stilde
    upsilon = sigma2_eps * delta_tilde
    w4 = s0 @ spd_solve(stilde, spec.prior - spec.beta0, "first-stage signal matrix gamma' rz gamma")
    pi_row = -np.kron(sigma_ue[None, :], w4[None, :])

    tau = spec.tau
    v = np.zeros((lay.total, lay.total))
    i1, i2, i3 = lay.r_train_slice, lay.s_train_slice, lay.beta_slice
    ia = lay.alpha_offset
    i5, i6 = lay.r_test_slice, lay.s_test_slice

    v[i1, i1] = tau * chi
    v[i1, i2] = tau * xi
    v[i2, i1] = tau * xi.T
    v[i2, i2] = tau * zeta
    v[i2, i3] = tau * psi
    v[i3, i2] = tau * psi.T
    v[i3, i3] = tau * xi_big

    v[ia, ia] = (1.0 - tau) * upsilon
    v[ia, i6] = (1.0 - tau) * pi_row[0]
    v[i6, ia] = (1.0 - tau) * pi_row[0]
    v[i5, i5] = (1.0 - tau) * chi
    v[i5, i6] = (1.0 - tau) * xi
    v[i6, i5] = (1.0 - tau) * xi.T
    v[i6, i6] = (1.0 - tau) * zeta
    return (v + v.T) / 2.0


def _monte_carlo_v(spec: ModelSpec, lay: ThetaLayout, reps: int, seed: int) -> np.ndarray:
    """Average of h_i h_i' over ``reps`` observations at the population vector.

    Observations are assigned to the training group deterministically: the
    first floor(tau * reps) of the stream, matching the in-sample indicator.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(1,))))
    rz = spec.rz
    gamma = spec.gamma0
    s0 = rz @ gamma
    stilde = gamma.T @ s0
    b_prior = spec.prior - spec.beta0
    c4 = gamma @ spd_solve(stilde, b_prior, "first-stage signal matrix gamma' rz gamma")
    lz = np.linalg.cholesky(rz)
    try:
        le = np.linalg.cholesky(spec.err_cov)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(spec.err_cov)
        le = u * np.sqrt(np.clip(w, 0.0, None))

    vr, vc = lay._vech_rows, lay._vech_cols
    t = np.arange(lay.km)
    va, vb = t % lay.m, t // lay.m
    vech_rz = lay.vech(rz)
    vec_s0 = lay.vec(s0)

    acc = np.zeros((lay.total, lay.total))
    left_train = int(np.floor(spec.tau * reps + 1e-9))
    done = 0
    while done < reps:
        c = min(_CHUNK, reps - done)
        z = rng.standard_normal((c, lay.m)) @ lz.T
        errors = rng.standard_normal((c, 1 + lay.k)) @ le.T
        eps = errors[:, 0]
        x = z @ gamma + errors[:, 1:]

        ntr = min(max(left_train, 0), c)
        h = np.zeros((c, lay.total))
        match_r = vech_rz[None, :] - z[:, vr] * z[:, vc]
        match_s = vec_s0[None, :] - z[:, va] * x[:, vb]
        h[:ntr, lay.r_train_slice] = match_r[:ntr]
        h[:ntr, lay.s_train_slice] = match_s[:ntr]
        h[:ntr, lay.beta_slice] = -(z[:ntr] @ gamma) * eps[:ntr, None]
        h[ntr:, lay.alpha_offset] = eps[ntr:] * (z[ntr:] @ c4)
        h[ntr:, lay.r_test_slice] = match_r[ntr:]
        h[ntr:, lay.s_test_slice] = match_s[ntr:]
        acc += h.T @ h
        left_train -= ntr
        done += c
    v = acc / reps
    return (v + v.T) / 2.0


def build_law(
    spec: ModelSpec,
    v_mode: str = "monte-carlo",
    v_reps: int = 10_000_000,
    seed: int = 0,
) -> AsymptoticLaw:
    """Assemble the limit law for ``spec``.

    ``v_mode`` selects how the moment covariance is computed:
    "analytic-gaussian" uses the closed-form fourth-moment expansion (exact
    for Gaussian instruments); "monte-carlo" averages h_i h_i' over
    ``v_reps`` simulated observations. The Jacobian limit m0 is always
    analytic: row weights tau / (1 - tau) times identity blocks, with the
    central (beta, alpha) block [[gamma' rz gamma, beta0 - prior],
    [(beta0 - prior)', 0]].
    """
    lay = ThetaLayout(m=spec.m, k=spec.k)
    s0 = spec.rz @ spec.gamma0
    stilde = spec.gamma0.T @ s0
    b = spec.beta0 - spec.prior
    delta_tilde = float(b @ spd_solve(stilde, b, "first-stage signal matrix gamma' rz gamma"))
    degenerate = delta_tilde <= _DEGENERATE_TOL
    d = _central_block(stilde, b)
    d_inv = None if degenerate else _central_block_inverse(stilde, b, delta_tilde)
    m0 = _analytic_m0(spec, lay, stilde, b)

    if v_mode == "analytic-gaussian":
        v = _analytic_v(spec, lay)
    elif v_mode == "monte-carlo":
        v = _monte_carlo_v(spec, lay, int(v_reps), seed)
    else:
        raise ValueError(f"unknown v_mode {v_mode!r}")

    eig = np.linalg.eigvalsh(v)
    if eig.min() < -1e-10 * max(1.0, abs(eig.max())):
        raise ValueError(f"moment covariance is not positive semidefinite (min eig {eig.min():.3e})")
    if not degenerate and np.linalg.cond(m0) > 1e12:
        raise ValueError("Jacobian limit m0 is numerically singular")

    return AsymptoticLaw(
        layout=lay,
        m0=m0,
        v=v,
        s0=s0,
        delta_tilde=delta_tilde,
        degenerate_prior=degenerate,
        d=d,
        d_inv=d_inv,
        tau=spec.tau,
    )


# ---------------------------------------------------------------------------
# cone projection and simulation
# ---------------------------------------------------------------------------


def project_onto_cone(z, a, alpha_index: int) -> np.ndarray:
    """Exact projection of ``z`` onto {lambda : lambda[alpha_index] >= 0}.

    The metric is the positive definite matrix ``a``; ``alpha_index`` is the
    0-based position of the sign-constrained coordinate. Two cases only:
    a feasible ``z`` projects to itself; otherwise the constraint binds and
    the free coordinates absorb a linear correction,

        lambda_free = z_free + A_ff^{-1} A_fa * z_alpha,   lambda_alpha = 0.
    """
    z = np.asarray(z, dtype=float)
    a = np.asarray(a, dtype=float)
    i = int(alpha_index)
    if z[i] >= 0:
        return z.copy()
    free = np.arange(z.shape[0]) != i
    w = spd_solve(a[np.ix_(free, free)], a[free, i], "projection metric free block")
    out = np.empty_like(z)
    out[free] = z[free] + w * z[i]
    out[i] = 0.0
    return out


def _project_batch(zmat: np.ndarray, a: np.ndarray, alpha_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized two-case projection; the linear correction is one fixed solve."""
    i = int(alpha_index)
    free = np.arange(zmat.shape[1]) != i
    w = spd_solve(a[np.ix_(free, free)], a[free, i], "projection metric free block")
    lam = zmat.copy()
    # <= so that a draw landing exactly on the boundary is flagged: the flag's
    # meaning is "lambda_alpha ended up pinned at zero", which includes z_alpha == 0.
    boundary = zmat[:, i] <= 0
    lam[np.ix_(boundary, free)] += np.outer(zmat[boundary, i], w)
    lam[boundary, i] = 0.0
    return lam, boundary


def _simulate_arrays(law: AsymptoticLaw, draws: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if law.degenerate_prior:
        raise ValueError(
            "law has a degenerate prior (delta_tilde ~ 0): the Jacobian limit is "
            "singular and the limit law cannot be simulated"
        )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    w, u = np.linalg.eigh(law.v)
    if w.min() < -1e-10:
        raise ValueError(f"moment covariance has negative eigenvalue {w.min():.3e}")
    root = u * np.sqrt(np.clip(w, 0.0, None))
    g = rng.standard_normal((int(draws), law.layout.total)) @ root.T
    lu = lu_factor(-law.m0)
    zmat = lu_solve(lu, g.T).T
    metric = law.m0.T @ law.m0
    lam, boundary = _project_batch(zmat, metric, law.layout.alpha_offset)
    return zmat, lam, boundary


def simulate_theorem1(law: AsymptoticLaw, draws: int, seed: int) -> tuple[list[ConeSample], float]:
    """Draw from the limit law: G ~ N(0, v), Z = (-m0)^{-1} G, then project.

    Returns the list of draws (Gaussian coordinates, projected coordinates,
    boundary flag) and the fraction of draws whose penalty coordinate was
    pinned at zero — 1/2 in the limit, since the alpha coordinate of Z is a
    centered Gaussian. Deterministic for a fixed seed.
    """
    zmat, lam, boundary = _simulate_arrays(law, draws, seed)
    samples = [
        ConeSample(z=zmat[i], lambda_hat=lam[i], at_boundary=bool(boundary[i]))
        for i in range(zmat.shape[0])
    ]
    return samples, float(boundary.mean())
