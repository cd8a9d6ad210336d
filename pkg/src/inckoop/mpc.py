"""Condensed linear MPC on a Koopman model, a box-QP ADMM solver and its oracle.

The QP is written in the half form ``min 0.5 u'Pu + q'u`` subject to
``lower <= u <= upper``. States entering the cost are in the model's
normalized frame; controls are in plant units throughout (the model is
trained on raw controls), so the box bounds are the plant's actuator limits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BadDims, DimTooLarge, NonFinitePrediction, NonFiniteState, NotPD, ShapeMismatch
from .koopman import KoopmanModel
from .plants import PlantSpec, PlantState, Trajectory, clamp_control, contact_mode, plant_step

SOLVED = "Solved"
MAX_ITERS = "MaxIters"
ORACLE_MAX_DIM = 8


@dataclass(frozen=True)
class MpcConfig:
    H: int
    u_min: np.ndarray
    u_max: np.ndarray
    Q: np.ndarray | float = 1.0
    R: np.ndarray | float = 1e-2
    F: np.ndarray | float = 1.0
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iters: int = 10_000
    rho: float = 1.0
    auto_rho: bool = False

    def __post_init__(self):
        for name in ("u_min", "u_max"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))

    def weights(self, n_in: int, m: int):
        """Diagonals of ``Q``, ``F`` (length ``n'``) and ``R`` (length ``m'``)."""
        def diag(v, size, name):
            d = np.broadcast_to(np.asarray(v, dtype=float), (size,)).copy()
            if np.any(d < 0) or not np.all(np.isfinite(d)):
                raise BadDims(f"{name} must be finite and non-negative")
            return d
        return diag(self.Q, n_in, "Q"), diag(self.F, n_in, "F"), diag(self.R, m, "R")

    def validate(self, n_in: int | None = None, m: int | None = None):
        if self.H < 1:
            raise BadDims(f"horizon must be >= 1, got {self.H}")
        if self.u_min.shape != self.u_max.shape or np.any(self.u_min >= self.u_max):
            raise BadDims("need u_min < u_max elementwise")
        if m is not None and self.u_min.shape != (m,):
            raise BadDims(f"control bounds have {self.u_min.shape[0]} entries, model has {m}")
        if self.rho <= 0 or self.max_iters < 1 or self.eps_abs < 0 or self.eps_rel < 0:
            raise BadDims("invalid solver settings")
        if n_in is not None:
            self.weights(n_in, self.u_min.shape[0])
        return self

    def with_(self, **kw) -> "MpcConfig":
        return replace(self, **kw)


def mpc_config_for(spec: PlantSpec, H: int = 16, **kw) -> MpcConfig:
    return MpcConfig(H=H, u_min=spec.u_min, u_max=spec.u_max, **kw)


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.P @ u + self.q @ u)


@dataclass
class QpSolution:
    u_star: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    status: str


# ---------------------------------------------------------------------------
# condensing


def condensed_matrices(A, B, n_in: int, H: int):
    """Retrieved-state prediction maps.

    Returns ``Phi`` of shape ``(H*n', n)`` and ``Gam`` of shape
    ``(H*n', H*m')`` so that the stacked states ``x_1..x_H`` equal
    ``Phi z + Gam U``.
    """
    n, m = B.shape
    powers = [np.eye(n)]
    for _ in range(H):
        powers.append(A @ powers[-1])
    Phi = np.vstack([powers[k][:n_in] for k in range(1, H + 1)])
    # A^j B restricted to retrieved rows, for j = 0..H-1
    AB = [(powers[j] @ B)[:n_in] for j in range(H)]
    Gam = np.zeros((H * n_in, H * m))
    for k in range(H):
        for j in range(k + 1):
            Gam[k * n_in:(k + 1) * n_in, j * m:(j + 1) * m] = AB[k - j]
    return Phi, Gam


def _stage_weights(cfg: MpcConfig, n_in: int, m: int):
    q, f, r = cfg.weights(n_in, m)
    W = np.concatenate([q] * (cfg.H - 1) + [f])
    return W, np.tile(r, cfg.H)


def build_condensed_qp(model: KoopmanModel, z_t, x_ref, cfg: MpcConfig) -> QpProblem:
    """Condensed QP for latent state ``z_t`` and a normalized reference window.

    ``x_ref`` has ``H+1`` rows; row 0 (the current state) does not enter the
    cost because it does not depend on the controls.
    """
    return MpcController(model, cfg).qp(z_t, x_ref)


# ---------------------------------------------------------------------------
# ADMM


def admm_batch(P, Qlin, lower, upper, cfg: MpcConfig, factor=None):
    """ADMM on several box QPs sharing ``P``; ``Qlin`` holds one ``q`` per column.

    Columns are frozen as soon as their residuals meet the tolerance so each
    column follows exactly the iteration it would follow on its own.
    Returns ``(U, iterations, r_prim, r_dual, converged)``.
    """
    Qlin = np.asarray(Qlin, dtype=float)
    d, k = Qlin.shape
    lo = np.asarray(lower, dtype=float).reshape(d, 1)
    hi = np.asarray(upper, dtype=float).reshape(d, 1)
    rho = cfg.rho
    if factor is None:
        factor = factor_kkt(P, rho)
    v = np.clip(np.zeros((d, k)), lo, hi)
    w = np.zeros((d, k))
    out = v.copy()
    iters = np.zeros(k, dtype=int)
    rp = np.full(k, np.inf)
    rd = np.full(k, np.inf)
    done = np.zeros(k, dtype=bool)
    active = np.arange(k)
    qa = Qlin
    for it in range(1, cfg.max_iters + 1):
        u = cho_solve(factor, rho * (v - w) - qa)
        v_old = v
        v = np.clip(u + w, lo, hi)
        w = w + u - v
        r_prim = np.max(np.abs(u - v), axis=0)
        r_dual = rho * np.max(np.abs(v - v_old), axis=0)
        scale_p = np.maximum(np.max(np.abs(u), axis=0), np.max(np.abs(v), axis=0))
        scale_d = np.maximum(np.max(np.abs(P @ u), axis=0),
                             np.maximum(np.max(np.abs(qa), axis=0), rho * np.max(np.abs(w), axis=0)))
        ok = (r_prim <= cfg.eps_abs + cfg.eps_rel * scale_p) & \
             (r_dual <= cfg.eps_abs + cfg.eps_rel * scale_d)
        finished = ok | (it == cfg.max_iters)
        if np.any(finished):
            cols = active[finished]
            out[:, cols] = v[:, finished]
            iters[cols] = it
            rp[cols] = r_prim[finished]
            rd[cols] = r_dual[finished]
            done[cols] = ok[finished]
            keep = ~finished
            active, v, w, qa = active[keep], v[:, keep], w[:, keep], qa[:, keep]
            if active.size == 0:
                break
    return out, iters, rp, rd, done


def effective_rho(P, cfg: MpcConfig) -> float:
    """``cfg.rho``, or ``sqrt(lambda_min * lambda_max)`` of ``P`` when ``auto_rho`` is set.

    The geometric-mean choice balances primal and dual progress and keeps
    the iteration count roughly independent of the Hessian's scale.
    """
    if not cfg.auto_rho:
        return cfg.rho
    ev = np.linalg.eigvalsh(P)
    if ev[0] <= 0:
        raise NotPD("QP Hessian is not positive definite")
    return float(np.sqrt(ev[0] * ev[-1]))


def factor_kkt(P, rho: float):
    P = np.asarray(P, dtype=float)
    try:
        return cho_factor(P + rho * np.eye(P.shape[0]), lower=True)
    except LinAlgError as exc:
        raise NotPD("QP Hessian plus rho*I is not positive definite") from exc


def _check_pd(P):
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NotPD("QP Hessian is not positive definite") from exc


def solve_box_qp(qp: QpProblem, cfg: MpcConfig, factor=None, check_pd: bool = True) -> QpSolution:
    """ADMM for ``min 0.5 u'Pu + q'u`` over a box. ``u_star`` is always inside the box."""
    if check_pd:
        _check_pd(qp.P)
    if cfg.auto_rho:
        cfg = cfg.with_(rho=effective_rho(qp.P, cfg), auto_rho=False)
        factor = None
    U, it, rp, rd, ok = admm_batch(qp.P, qp.q[:, None], qp.lower, qp.upper, cfg, factor)
    u = U[:, 0]
    return QpSolution(u, qp.objective(u), int(it[0]), float(rp[0]), float(rd[0]),
                      SOLVED if ok[0] else MAX_ITERS)


def kkt_certificate(qp: QpProblem, u, tol: float = 1e-6) -> bool:
    """First-order optimality check for a box QP."""
    u = np.asarray(u, dtype=float)
    if np.any(u < qp.lower) or np.any(u > qp.upper):
        return False
    g = qp.P @ u + qp.q
    at_lo = u <= qp.lower
    at_hi = u >= qp.upper
    free = ~(at_lo | at_hi)
    return bool(np.all(np.abs(g[free]) < tol) and np.all(g[at_lo] >= -tol)
                and np.all(g[at_hi] <= tol))


def qp_oracle_active_set(qp: QpProblem, tol: float = 1e-10) -> np.ndarray:
    """Exact minimiser by enumerating all ``3**d`` active-set assignments."""
    d = qp.dim
    if d > ORACLE_MAX_DIM:
        raise DimTooLarge(f"active-set oracle supports dim <= {ORACLE_MAX_DIM}, got {d}")
    P, q, lo, hi = qp.P, qp.q, qp.lower, qp.upper
    scale = 1.0 + np.max(np.abs(q)) + np.max(np.abs(P))
    best, best_obj = None, np.inf
    for assign in itertools.product((0, 1, 2), repeat=d):
        assign = np.array(assign)
        free = assign == 0
        u = np.where(assign == 1, lo, hi).astype(float)
        if np.any(free):
            fixed = ~free
            rhs = -(q[free] + P[np.ix_(free, fixed)] @ u[fixed])
            try:
                u[free] = np.linalg.solve(P[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
            if np.any(u[free] < lo[free] - tol * scale) or np.any(u[free] > hi[free] + tol * scale):
                continue
        g = P @ u + q
        if np.any(g[assign == 1] < -tol * scale) or np.any(g[assign == 2] > tol * scale):
            continue
        obj = qp.objective(u)
        if obj < best_obj:
            best, best_obj = np.clip(u, lo, hi), obj
    if best is None:
        raise NotPD("no KKT point found; is P positive definite?")
    return best


# ---------------------------------------------------------------------------
# controller


class MpcController:
    """Caches the condensed Hessian and its factorisation for one model.

    ``P_qp`` depends only on ``(A, B, cfg)``, so it is assembled and factored
    once and reused for every control step and every reference.
    """

    def __init__(self, model: KoopmanModel, cfg: MpcConfig):
        n_in, m = model.state_dim, model.control_dim
        cfg.validate(n_in, m)
        self.model, self.cfg = model, cfg
        H = cfg.H
        self.Phi, self.Gam = condensed_matrices(model.A, model.B, n_in, H)
        W, r = _stage_weights(cfg, n_in, m)
        self.W = W
        GW = self.Gam.T * W
        P = 2.0 * (GW @ self.Gam + np.diag(r))
        self.P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(self.P)):
            raise NonFinitePrediction("condensed Hessian is not finite (unstable A?)")
        _check_pd(self.P)
        self.lin_z = 2.0 * GW @ self.Phi
        self.lin_ref = 2.0 * GW
        self.lower = np.tile(cfg.u_min, H)
        self.upper = np.tile(cfg.u_max, H)
        self.rho = effective_rho(self.P, cfg)
        self.solver_cfg = cfg.with_(rho=self.rho, auto_rho=False)
        self.factor = factor_kkt(self.P, self.rho)

    def linear_terms(self, Z, refs) -> np.ndarray:
        """``q`` for each column: ``Z (N, n)``, ``refs (N, H+1, n')`` normalized."""
        refs = np.asarray(refs, dtype=float)
        R = refs[:, 1:].reshape(refs.shape[0], -1)
        return self.lin_z @ np.asarray(Z).T - self.lin_ref @ R.T

    def qp(self, z_t, x_ref) -> QpProblem:
        x_ref = np.asarray(x_ref, dtype=float)
        if x_ref.shape != (self.cfg.H + 1, self.model.state_dim):
            raise BadDims(f"reference window must be {(self.cfg.H + 1, self.model.state_dim)}")
        z_t = np.asarray(z_t, dtype=float).reshape(1, -1)
        q = self.linear_terms(z_t, x_ref[None])[:, 0]
        return QpProblem(self.P.copy(), q, self.lower.copy(), self.upper.copy())

    def solve_batch(self, X_norm, refs_norm):
        Z = self.model.lift(X_norm)
        Qlin = self.linear_terms(Z, refs_norm)
        U, *_ = admm_batch(self.P, Qlin, self.lower, self.upper, self.solver_cfg, self.factor)
        return U

    def first_controls(self, X_plant, windows_plant) -> np.ndarray:
        """First control of each plan, plant units. Inputs are in plant units."""
        norm = self.model.normalizer
        U = self.solve_batch(norm.apply(X_plant), norm.apply(windows_plant))
        m = self.model.control_dim
        return np.clip(U[:m].T, self.cfg.u_min, self.cfg.u_max)

    def control(self, x_plant, window_plant) -> np.ndarray:
        return self.first_controls(np.asarray(x_plant, float)[None],
                                   np.asarray(window_plant, float)[None])[0]


def mpc_step(model: KoopmanModel, x_t, x_ref_window, cfg: MpcConfig) -> np.ndarray:
    """Receding-horizon control for plant-unit ``x_t`` and reference window."""
    window = np.asarray(x_ref_window, dtype=float)
    if window.shape != (cfg.H + 1, model.state_dim):
        raise BadDims(f"reference window must be {(cfg.H + 1, model.state_dim)}, got {window.shape}")
    return MpcController(model, cfg).control(x_t, window)


# ---------------------------------------------------------------------------
# closed-loop tracking


@dataclass
class TrackResult:
    trajectory: Trajectory
    failure_step: int | None
    survival: int
    reference: np.ndarray = field(repr=False)


def reference_window(reference: np.ndarray, t: int, H: int) -> np.ndarray:
    idx = np.minimum(np.arange(t, t + H + 1), reference.shape[0] - 1)
    return reference[idx]


def joint_error(spec: PlantSpec, x, ref_row) -> float:
    sl = spec.slice_of("joint_position")
    return float(np.mean(np.abs(np.asarray(x)[..., sl] - np.asarray(ref_row)[..., sl]), axis=-1))


def track_many(spec: PlantSpec, model: KoopmanModel, references, cfg: MpcConfig,
               eps_fail: float, T_max: int = 200, controller: MpcController | None = None):
    """Track several plant-unit references in lockstep, sharing one factorisation."""
    refs = [np.asarray(r, dtype=float) for r in references]
    if T_max < 1:
        raise BadDims("T_max must be >= 1")
    for r in refs:
        if r.ndim != 2 or r.shape[1] != spec.state_dim or r.shape[0] < 2:
            raise ShapeMismatch(f"reference must be (L, {spec.state_dim}) with L >= 2")
    ctrl = controller if controller is not None else MpcController(model, cfg)
    K = len(refs)
    states = [[r[0].copy()] for r in refs]
    modes = [[contact_mode(spec, r[0])] for r in refs]
    controls = [[] for _ in refs]
    cur = [PlantState(r[0].copy(), 0.0, modes[i][0]) for i, r in enumerate(refs)]
    failure = [None] * K
    alive = list(range(K))
    for t in range(T_max):
        if not alive:
            break
        X = np.stack([cur[i].x for i in alive])
        W = np.stack([reference_window(refs[i], t, cfg.H) for i in alive])
        try:
            U = ctrl.first_controls(X, W)
        except NonFinitePrediction:
            U = None
        still = []
        for j, i in enumerate(alive):
            if U is None or not np.all(np.isfinite(U[j])):
                failure[i] = t + 1
                continue
            u = clamp_control(spec, U[j])
            try:
                nxt = plant_step(spec, cur[i], u)
            except NonFiniteState:
                failure[i] = t + 1
                continue
            cur[i] = nxt
            states[i].append(nxt.x.copy())
            modes[i].append(nxt.mode)
            controls[i].append(u)
            ref_row = refs[i][min(t + 1, refs[i].shape[0] - 1)]
            if joint_error(spec, nxt.x, ref_row) > eps_fail:
                failure[i] = t + 1
                continue
            still.append(i)
        alive = still
    results = []
    for i in range(K):
        ctl = np.array(controls[i]).reshape(-1, spec.control_dim)
        traj = Trajectory(np.array(states[i]), ctl, spec.dt, failure[i] is not None, spec.id,
                          modes[i])
        surv = failure[i] if failure[i] is not None else T_max
        results.append(TrackResult(traj, failure[i], surv, refs[i]))
    return results


def track_reference(spec: PlantSpec, model: KoopmanModel, reference, cfg: MpcConfig,
                    eps_fail: float, T_max: int = 200):
    """Closed-loop tracking of one plant-unit reference.

    Returns ``(trajectory, metrics, failure_step)``; ``failure_step`` is
    ``None`` when the episode survives ``T_max`` steps.
    """
    from .metrics import tracking_metrics

    res = track_many(spec, model, [reference], cfg, eps_fail, T_max)[0]
    return res.trajectory, tracking_metrics(res.trajectory, res.reference, spec, eps_fail, T_max), \
        res.failure_step
