"""Convergence-rate experiments for EDMD on a synthetic system with a known spectrum.

The system lives on the periodic interval ``[0, 1)`` with the uniform
measure. Its Koopman operator is diagonal in the orthonormal Fourier basis
``psi_1 = 1, psi_{2k} = sqrt(2) cos(2 pi k s), psi_{2k+1} = sqrt(2) sin(2 pi k s)``
with eigenvalues ``lambda_i = C / i**alpha``. Snapshot pairs are
``(phi(s), (K phi)(s))`` for a feature map ``phi``; this is exactly what EDMD
sees for a deterministic system, without needing an explicit flow map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import ortho_group

from .errors import BadDims, DegenerateFit, SingularGram
from .koopman import edmd_fit

QUAD_NODES = 2 ** 14
CHUNK = 8192


@dataclass(frozen=True)
class SyntheticSpectrumSystem:
    N: int = 256
    C: float = 0.9
    alpha: float = 1.0
    basis_seed: int = 0

    def __post_init__(self):
        if self.N < 2 or not 0 < self.C or self.alpha <= 0:
            raise BadDims("need N >= 2, C > 0, alpha > 0")

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.C / np.arange(1, self.N + 1) ** self.alpha

    def basis(self, s) -> np.ndarray:
        """Eigenfunctions at points ``s``; shape ``(len(s), N)``."""
        s = np.asarray(s, dtype=float).reshape(-1)
        out = np.empty((s.size, self.N))
        out[:, 0] = 1.0
        i = np.arange(1, self.N)
        k = (i + 1) // 2
        ang = 2.0 * np.pi * np.outer(s, k)
        cos_cols = i % 2 == 1
        out[:, 1:][:, cos_cols] = np.sqrt(2.0) * np.cos(ang[:, cos_cols])
        out[:, 1:][:, ~cos_cols] = np.sqrt(2.0) * np.sin(ang[:, ~cos_cols])
        return out

    def rotation(self) -> np.ndarray:
        """Seeded orthogonal ``N x N`` mixing matrix for the feature basis."""
        return ortho_group.rvs(self.N, random_state=np.random.default_rng(self.basis_seed))

    def feature_maps(self, n: int):
        """``(W, WL)`` with ``phi = W^T psi`` and ``K phi = WL^T psi``.

        Features are the first ``n`` columns of the rotated basis, which are
        orthonormal but do not span an invariant subspace.
        """
        if not 1 <= n <= self.N:
            raise BadDims(f"need 1 <= n <= N={self.N}")
        W = self.rotation()[:, :n]
        return W, self.eigenvalues[:, None] * W

    def true_Kn(self, n: int) -> np.ndarray:
        """Analytic L2 projection ``K_n`` of the operator onto the feature span."""
        W, WL = self.feature_maps(n)
        return WL.T @ W


def quadrature_nodes(M: int = QUAD_NODES):
    """Periodic trapezoid rule: exact for trigonometric polynomials of degree < M."""
    return np.arange(M) / M, np.full(M, 1.0 / M)


def quadrature_Kn(system: SyntheticSpectrumSystem, n: int, M: int = QUAD_NODES):
    """``K_n`` from quadrature moments, plus the Gram matrix (identity up to rounding)."""
    W, WL = system.feature_maps(n)
    s, wts = quadrature_nodes(M)
    G = np.zeros((n, n))
    Cm = np.zeros((n, n))
    for a in range(0, M, CHUNK):
        psi = system.basis(s[a:a + CHUNK])
        Z = psi @ W
        Zp = psi @ WL
        w = wts[a:a + CHUNK, None]
        G += Z.T @ (w * Z)
        Cm += Zp.T @ (w * Z)
    return np.linalg.solve(G, Cm.T).T, G


def spectral_norm(M, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Largest singular value by power iteration on ``M^T M``."""
    M = np.asarray(M, dtype=float)
    if not np.any(M):
        return 0.0
    MtM = M.T @ M
    v = np.ones(MtM.shape[0]) / np.sqrt(MtM.shape[0])
    # a fixed, generic start avoids accidental orthogonality to the top vector
    v = v + 1e-3 * np.sin(np.arange(1, v.size + 1))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = MtM @ v
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def fit_loglog_slope(xs, ys):
    """OLS fit of ``ln y = slope * ln x + intercept``; returns ``(slope, intercept, r2)``."""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    if x.shape != y.shape or x.size < 2:
        raise DegenerateFit("need matching arrays with at least 2 points")
    if np.ptp(x) == 0:
        raise DegenerateFit("all x values are equal")
    X = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


@dataclass
class AssumptionDiagnostics:
    B_hat: float
    gamma_hat: float
    bound: float | None
    delta: float
    m: int
    n: int


def assumption_diagnostics(Z, delta: float = 0.05, m: int | None = None) -> AssumptionDiagnostics:
    """Empirical latent bound, Gram eigenvalue floor and the sampling-error bound.

    ``bound = 2 B^2 sqrt(2 ln(2n/delta)) (B^2/gamma + 1) / (gamma sqrt(m))``;
    it is ``None`` when the Gram matrix is singular.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise BadDims("Z must be a non-empty (m, n) matrix")
    m = Z.shape[0] if m is None else m
    n = Z.shape[1]
    B = float(np.max(np.linalg.norm(Z, axis=1)))
    G = Z.T @ Z / Z.shape[0]
    gamma = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
    bound = None
    if gamma > 0:
        bound = (2.0 * B ** 2 * np.sqrt(2.0 * np.log(2.0 * n / delta))
                 * (B ** 2 / gamma + 1.0) / (gamma * np.sqrt(m)))
    return AssumptionDiagnostics(B, gamma, bound, delta, m, n)


@dataclass
class TheoryReport:
    axis_name: str
    axis: list
    errors: list
    trial_errors: list
    slope: float
    intercept: float
    r2: float
    band: list
    config: dict
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _sample_snapshots(system, W, WL, m, rng):
    s = rng.uniform(0.0, 1.0, size=m)
    Z = np.empty((m, W.shape[1]))
    Zp = np.empty_like(Z)
    for a in range(0, m, CHUNK):
        psi = system.basis(s[a:a + CHUNK])
        Z[a:a + CHUNK] = psi @ W
        Zp[a:a + CHUNK] = psi @ WL
    return Z, Zp


def sampling_error_experiment(system: SyntheticSpectrumSystem, n: int = 32,
                              m_grid=(1_000, 3_000, 10_000, 30_000, 100_000),
                              trials: int = 10, seed: int = 0, delta: float = 0.05,
                              quad_nodes: int = QUAD_NODES) -> TheoryReport:
    """``||K_{n,m} - K_n||_2`` against ``m`` with a quadrature-exact ``K_n``."""
    m_grid = [int(m) for m in m_grid]
    if any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise BadDims("m_grid must be strictly increasing")
    if m_grid[0] < n or n > system.N or trials < 1:
        raise BadDims("need every m >= n, n <= N and trials >= 1")
    W, WL = system.feature_maps(n)
    Kn, Gq = quadrature_Kn(system, n, quad_nodes)
    # second moment of z+ under the measure; enables exact 1-step prediction error
    D = WL.T @ WL
    trial_err = np.zeros((len(m_grid), trials))
    pred_err = np.zeros_like(trial_err)
    bounds = np.zeros_like(trial_err)
    gammas = np.zeros_like(trial_err)
    Bs = np.zeros_like(trial_err)
    for gi, m in enumerate(m_grid):
        for t in range(trials):
            rng = np.random.default_rng([seed, gi, t])
            Z, Zp = _sample_snapshots(system, W, WL, m, rng)
            try:
                res = edmd_fit(Z, Zp, ridge=0.0)
            except SingularGram as exc:
                raise SingularGram(f"singular Gram at m={m}: {exc}", min_eig=exc.min_eig,
                                   m=m) from exc
            trial_err[gi, t] = spectral_norm(res.K - Kn)
            K = res.K
            pred_err[gi, t] = np.sqrt(max(np.trace(D) - 2 * np.trace(K @ Kn.T)
                                          + np.trace(K @ Gq @ K.T), 0.0))
            diag = assumption_diagnostics(Z, delta)
            bounds[gi, t] = np.inf if diag.bound is None else diag.bound
            gammas[gi, t] = diag.gamma_hat
            Bs[gi, t] = diag.B_hat
    means = trial_err.mean(axis=1)
    slope, intercept, r2 = fit_loglog_slope(m_grid, means)
    band = 1.96 * trial_err.std(axis=1, ddof=1) / np.sqrt(trials) if trials > 1 \
        else np.zeros(len(m_grid))
    extra = {
        "one_step_prediction_error": pred_err.mean(axis=1).tolist(),
        "bound_mean": bounds.mean(axis=1).tolist(),
        "bound_violation_rate": float(np.mean(trial_err > bounds)),
        "gamma_hat_mean": gammas.mean(axis=1).tolist(),
        "B_hat_mean": Bs.mean(axis=1).tolist(),
        "quadrature_gram_deviation": float(np.max(np.abs(Gq - np.eye(n)))),
    }
    config = {"n": n, "N": system.N, "C": system.C, "alpha": system.alpha,
              "basis_seed": system.basis_seed, "trials": trials, "seed": seed,
              "delta": delta, "quad_nodes": quad_nodes}
    return TheoryReport("m", m_grid, means.tolist(), trial_err.tolist(), slope, intercept, r2,
                        band.tolist(), config, extra)


def projection_error_experiment(system: SyntheticSpectrumSystem,
                                n_grid=(4, 8, 16, 32, 64, 128),
                                quad_nodes: int = QUAD_NODES) -> TheoryReport:
    """``||K_n P_n psi - K psi||_{L2}`` against ``n`` using the leading eigenfunctions.

    The observable has equal weight ``c_i = 1/sqrt(N)`` on every eigenfunction
    and everything is evaluated by quadrature.
    """
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1 or n_grid[-1] > system.N:
        raise BadDims("n_grid must be strictly increasing within [1, N]")
    lam = system.eigenvalues
    c = np.full(system.N, 1.0 / np.sqrt(system.N))
    s, wts = quadrature_nodes(quad_nodes)
    nmax = n_grid[-1]
    G = np.zeros((nmax, nmax))
    Cm = np.zeros((nmax, nmax))
    Kpsi_sq = 0.0
    cross = np.zeros(nmax)
    proj = np.zeros(nmax)
    for a in range(0, quad_nodes, CHUNK):
        psi = system.basis(s[a:a + CHUNK])
        w = wts[a:a + CHUNK]
        Z = psi[:, :nmax]
        Zp = Z * lam[:nmax]
        obs = psi @ c
        Kobs = psi @ (lam * c)
        G += Z.T @ (w[:, None] * Z)
        Cm += Zp.T @ (w[:, None] * Z)
        Kpsi_sq += float(np.sum(w * Kobs ** 2))
        cross += (w * Kobs) @ Z
        proj += (w * obs) @ Z
    errors = []
    for n in n_grid:
        Gn = G[:n, :n]
        Kn = np.linalg.solve(Gn, Cm[:n, :n].T).T
        a_coef = np.linalg.solve(Gn, proj[:n])
        b = Kn.T @ a_coef
        # || b^T phi - K psi ||^2 expanded with quadrature moments
        err_sq = b @ Gn @ b - 2.0 * b @ cross[:n] + Kpsi_sq
        errors.append(float(np.sqrt(max(err_sq, 0.0))))
    tails = [float(np.sqrt(np.sum((c[n:] * lam[n:]) ** 2))) for n in n_grid]
    slope, intercept, r2 = fit_loglog_slope(n_grid, errors)
    config = {"N": system.N, "C": system.C, "alpha": system.alpha, "quad_nodes": quad_nodes}
    extra = {"analytic_tail": tails,
             "tail_bound": [float(np.sqrt(np.sum((system.C / np.arange(n + 1, system.N + 1)
                                                   ** system.alpha) ** 2))) for n in n_grid]}
    return TheoryReport("n", n_grid, errors, [[e] for e in errors], slope, intercept, r2,
                        [0.0] * len(n_grid), config, extra)
