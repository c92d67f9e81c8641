"""Derivative-based NLP solver (SQP) and the dense QP solver underneath it.

The QP solver is a dual active-set method: starting from the equality-only
optimum it adds violated inequalities one at a time, taking primal and dual
steps until primal feasibility, which requires no phase-1 and detects
infeasible constraint sets. Linear algebra goes through one LU factorization
of the equality KKT matrix plus small Schur complements for the active set.

The SQP solver exposes a post-iteration callback that may mutate the problem
parameter vector in place; this is the hook used to refresh separating-plane
parameters between iterations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = [
    "QpInfeasibleError",
    "QpResult",
    "solve_dense_qp",
    "EvalResult",
    "SolverConfig",
    "SolveStats",
    "NlpSolution",
    "solve",
]


class QpInfeasibleError(Exception):
    """The QP constraint set has no feasible point."""


@dataclass
class QpResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    active: list
    iterations: int


def _empty(n_cols):
    return np.zeros((0, n_cols)), np.zeros(0)


def solve_dense_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None,
                   max_iter=None) -> QpResult:
    """Minimize 1/2 x'Hx + g'x subject to A_eq x = b_eq and A_in x >= b_in.

    H must be positive definite on the null space of A_eq (the SQP Hessian
    approximation always is). Raises QpInfeasibleError when the constraints
    admit no solution.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    H = np.asarray(H, dtype=float)
    if A_eq is None or len(A_eq) == 0:
        A_eq, b_eq = _empty(n)
    if A_in is None or len(A_in) == 0:
        A_in, b_in = _empty(n)
    A_eq = np.asarray(A_eq, dtype=float).reshape(-1, n)
    A_in = np.asarray(A_in, dtype=float).reshape(-1, n)
    b_eq = np.asarray(b_eq, dtype=float).reshape(-1)
    b_in = np.asarray(b_in, dtype=float).reshape(-1)
    meq, m_in = A_eq.shape[0], A_in.shape[0]
    if max_iter is None:
        max_iter = 20 * (n + m_in) + 100

    K0 = np.zeros((n + meq, n + meq))
    K0[:n, :n] = H
    K0[:n, n:] = A_eq.T
    K0[n:, :n] = A_eq
    lu = sla.lu_factor(K0, check_finite=False)

    rhs0 = np.concatenate([-g, b_eq])
    base = sla.lu_solve(lu, rhs0, check_finite=False)
    if not np.all(np.isfinite(base)):
        raise np.linalg.LinAlgError("singular equality KKT system")
    x = base[:n].copy()

    scale = max(1.0, float(np.abs(b_in).max()) if m_in else 1.0)
    feas_tol = 1e-9 * scale
    dir_tol = 1e-12

    cols = {}

    def col(i):
        c = cols.get(i)
        if c is None:
            rhs = np.zeros(n + meq)
            rhs[:n] = A_in[i]
            c = sla.lu_solve(lu, rhs, check_finite=False)
            cols[i] = c
        return c

    W: list = []          # active inequality indices
    u = np.zeros(0)       # their multipliers
    CW = np.zeros((n + meq, 0))
    S = np.zeros((0, 0))  # A_in[W] @ CW[:n]

    def schur_solve(rhs):
        if S.shape[0] == 0:
            return np.zeros(0)
        try:
            return sla.cho_solve(sla.cho_factor(S, check_finite=False), rhs,
                                 check_finite=False)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(S, rhs, rcond=None)[0]

    iters = 0
    while True:
        s_all = A_in @ x - b_in
        if W:
            s_all[W] = 0.0
        p = int(np.argmin(s_all)) if m_in else 0
        if m_in == 0 or s_all[p] >= -feas_tol:
            break
        u_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                raise RuntimeError("dense QP active-set iteration stalled")
            q = col(p)
            if W:
                v = A_in[W] @ q[:n]
                msol = schur_solve(v)
                y = q - CW @ msol
                du = -msol  # rate of change of active multipliers
            else:
                v = np.zeros(0)
                y = q
                du = np.zeros(0)
            z = y[:n]
            azp = float(A_in[p] @ z)

            neg = du < -dir_tol
            if np.any(neg):
                ratios = -u[neg] / du[neg]
                t1 = float(ratios.min())
                j_local = int(np.nonzero(neg)[0][np.argmin(ratios)])
            else:
                t1 = np.inf
                j_local = -1

            if azp <= dir_tol:
                if not np.isfinite(t1):
                    raise QpInfeasibleError(
                        "inequality constraints are inconsistent"
                    )
                u = u + t1 * du
                u_p += t1
            else:
                sp = float(A_in[p] @ x - b_in[p])
                t2 = -sp / azp
                t = min(t1, t2)
                x = x + t * z
                if W:
                    u = u + t * du
                u_p += t
                if t2 <= t1:
                    W.append(p)
                    u = np.append(u, u_p)
                    CW = np.hstack([CW, q[:, None]])
                    d_new = float(A_in[p] @ q[:n])
                    S = np.block([[S, v[:, None]], [v[None, :], d_new]]) if len(v) \
                        else np.array([[d_new]])
                    break
            # drop the blocking constraint and keep working on p
            del W[j_local]
            u = np.delete(u, j_local)
            CW = np.delete(CW, j_local, axis=1)
            S = np.delete(np.delete(S, j_local, axis=0), j_local, axis=1)

    # polish: exact KKT solve on the final active set; multipliers are
    # reported in the convention  Hx + g = A_eq' lam_eq + A_in' lam_in
    lam_in = np.zeros(m_in)
    if W:
        v2 = schur_solve(A_in[W] @ base[:n] - b_in[W])
        sol = base - CW @ v2
        x = sol[:n]
        lam_eq = -sol[n:]
        lam_in[W] = np.maximum(-v2, 0.0)
    else:
        x = base[:n]
        lam_eq = -base[n:]

    # near-dependent active rows can leave garbage multipliers; verify
    stat = H @ x + g
    if meq:
        stat -= A_eq.T @ lam_eq
    if m_in:
        stat -= A_in.T @ lam_in
    scale_stat = max(1.0, float(np.abs(g).max()))
    lam_mag = max(
        float(np.abs(lam_eq).max()) if meq else 0.0,
        float(np.abs(lam_in).max()) if m_in else 0.0,
    )
    if (
        not np.all(np.isfinite(x))
        or float(np.abs(stat).max()) > 1e-6 * max(scale_stat, lam_mag)
        or lam_mag > 1e10
    ):
        raise RuntimeError("ill-conditioned active set in dense QP")
    return QpResult(x=x, lam_eq=lam_eq, lam_in=lam_in, active=sorted(W),
                    iterations=iters)


# ---------------------------------------------------------------------------
# SQP


@dataclass
class EvalResult:
    """Objective, constraints and exact first derivatives at one point."""

    f: float
    grad: np.ndarray
    c_eq: np.ndarray
    J_eq: np.ndarray
    c_in: np.ndarray
    J_in: np.ndarray


@dataclass
class SolverConfig:
    max_iter: int = 100
    tol: float = 1e-6
    ls_contraction: float = 0.5
    ls_min_step: float = 1e-10
    armijo: float = 1e-4
    penalty_floor: float = 1.0
    penalty_scale: float = 1.5
    penalty_margin: float = 1e-2
    max_penalty_escalations: int = 2
    bfgs_damping: float = 0.2
    # cap on the step's max-norm; keeps iterates moving gradually so that
    # between-iteration parameter refreshes see smoothly deforming trajectories
    step_cap: float = np.inf
    # "auto" uses the problem's convexified exact Lagrangian Hessian when it
    # provides one, else damped BFGS; "exact" / "damped-bfgs" force a strategy
    hessian: str = "auto"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.hessian not in ("auto", "exact", "damped-bfgs"):
            raise ValueError("unknown hessian strategy")


@dataclass
class SolveStats:
    iterations: int = 0
    status: str = "max-iter"
    wall_total: float = 0.0
    wall_per_iter: list = field(default_factory=list)
    callback_time: float = 0.0
    obj_trace: list = field(default_factory=list)
    viol_trace: list = field(default_factory=list)


@dataclass
class NlpSolution:
    z: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    stats: SolveStats

    @property
    def converged(self) -> bool:
        return self.stats.status == "converged"


def _l1_violation(ev):
    v = float(np.abs(ev.c_eq).sum()) if len(ev.c_eq) else 0.0
    if len(ev.c_in):
        v += float(np.maximum(-ev.c_in, 0.0).sum())
    return v


def _l1_linearized_violation(ev, d):
    """l1 violation of the constraint linearization at the full step."""
    v = float(np.abs(ev.c_eq + ev.J_eq @ d).sum()) if len(ev.c_eq) else 0.0
    if len(ev.c_in):
        v += float(np.maximum(-(ev.c_in + ev.J_in @ d), 0.0).sum())
    return v


def _inf_violation(ev):
    v = float(np.abs(ev.c_eq).max()) if len(ev.c_eq) else 0.0
    if len(ev.c_in):
        v = max(v, float(np.maximum(-ev.c_in, 0.0).max()))
    return v


def _kkt_residual(ev, lam_eq, lam_in):
    stat = ev.grad.copy()
    if len(ev.c_eq):
        stat -= ev.J_eq.T @ lam_eq
    if len(ev.c_in):
        stat -= ev.J_in.T @ lam_in
    res = float(np.abs(stat).max()) if len(stat) else 0.0
    res = max(res, _inf_violation(ev))
    if len(ev.c_in):
        res = max(res, float(np.abs(lam_in * ev.c_in).max()))
    return res


def _ls_multiplier_residual(ev, tol):
    """KKT residual with least-squares multiplier estimates.

    The QP multipliers can miss a valid certificate when the Hessian
    approximation is poor along directions the problem is flat in (e.g.
    plane variables whose constraints are all inactive), so re-estimate the
    multipliers directly from the stationarity system on the active set.
    """
    feas = _inf_violation(ev)
    if feas > tol:
        return np.inf
    act = (
        np.nonzero(ev.c_in <= 1e3 * tol)[0] if len(ev.c_in) else np.zeros(0, int)
    )
    blocks = []
    if len(ev.c_eq):
        blocks.append(ev.J_eq)
    if len(act):
        blocks.append(ev.J_in[act])
    if not blocks:
        return max(feas, float(np.abs(ev.grad).max()))
    A = np.vstack(blocks)
    lam, *_ = np.linalg.lstsq(A.T, ev.grad, rcond=None)
    meq = len(ev.c_eq)
    lam_in_act = np.maximum(lam[meq:], 0.0)  # dual feasibility
    stat = ev.grad - (
        ev.J_eq.T @ lam[:meq] if meq else 0.0
    )
    if len(act):
        stat = stat - ev.J_in[act].T @ lam_in_act
    res = float(np.abs(stat).max())
    if len(act):
        res = max(res, float(np.abs(lam_in_act * ev.c_in[act]).max()))
    return max(res, feas)


def _solve_subproblem(H, ev, mu, elastic_rows=None):
    """QP step; on infeasible linearizations fall back to an l1-relaxed QP.

    The relaxation adds one slack per eligible inequality row (by default all
    of them), penalized linearly by the merit weight mu, which makes the
    subproblem always feasible and keeps the step a descent direction of the
    l1 merit function.
    """
    try:
        qp = solve_dense_qp(H, ev.grad, ev.J_eq, -ev.c_eq, ev.J_in, -ev.c_in)
        return qp.x, qp.lam_eq, qp.lam_in, False
    except (QpInfeasibleError, RuntimeError):
        # infeasible or ill-conditioned: retry in relaxed (elastic) form,
        # whose slack curvature also regularizes the active-set geometry
        pass
    n = len(ev.grad)
    m_in = len(ev.c_in)
    if elastic_rows is None:
        elastic_rows = np.arange(m_in)
    elastic_rows = np.asarray(elastic_rows, dtype=int)
    me = len(elastic_rows)
    H_ext = np.zeros((n + me, n + me))
    H_ext[:n, :n] = H
    # tiny curvature keeps the KKT systems definite; the slack cost is the
    # linear mu term, so this barely perturbs the l1 step
    H_ext[n:, n:] = 1e-8 * max(1.0, mu) * np.eye(me)
    g_ext = np.concatenate([ev.grad, np.full(me, mu)])
    A_eq = np.hstack([ev.J_eq, np.zeros((len(ev.c_eq), me))]) if len(ev.c_eq) else None
    A_in = np.zeros((m_in + me, n + me))
    A_in[:m_in, :n] = ev.J_in
    A_in[elastic_rows, n + np.arange(me)] = 1.0
    A_in[m_in:, n:] = np.eye(me)
    b_in = np.concatenate([-ev.c_in, np.zeros(me)])
    qp = solve_dense_qp(H_ext, g_ext, A_eq, -ev.c_eq if len(ev.c_eq) else None,
                        A_in, b_in)
    return qp.x[:n], qp.lam_eq, qp.lam_in[:m_in], True


def _bfgs_update(H, s, y, damping):
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 1e-16 or float(s @ s) <= 1e-30:
        return H
    sy = float(s @ y)
    if sy < damping * sHs:
        theta = (1.0 - damping) * sHs / (sHs - sy)
        y = theta * y + (1.0 - theta) * Hs
        sy = float(s @ y)
    H = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy
    return 0.5 * (H + H.T)


def _lagrangian_grad(ev, lam_eq, lam_in):
    gL = ev.grad.copy()
    if len(ev.c_eq):
        gL -= ev.J_eq.T @ lam_eq
    if len(ev.c_in):
        gL -= ev.J_in.T @ lam_in
    return gL


def _newton_kkt_polish(nlp, z, p, lam_eq, lam_in, act, cfg, max_steps=8):
    """Newton iteration on the active-set KKT system with the raw Hessian.

    The convexification shift that keeps the QP subproblems well posed also
    biases the steps, so once the active set has settled the remaining
    distance to the KKT point is closed here with full Newton steps (which
    only need a nonsingular KKT matrix). Variables the optimum does not
    determine (per the problem's polish_mask) stay frozen. Returns
    (z, lam_eq, lam_in) on a verified KKT point, else None.
    """
    act = np.asarray(act, dtype=int)
    n = len(z)
    if hasattr(nlp, "polish_mask"):
        var_idx, eq_idx = nlp.polish_mask(act)
    else:
        var_idx, eq_idx = np.arange(n), np.arange(len(lam_eq))
    z = z.copy()
    lam_a = lam_in[act].copy()
    lam_e = lam_eq.copy()
    if len(eq_idx) < len(lam_e):
        dropped = np.ones(len(lam_e), dtype=bool)
        dropped[eq_idx] = False
        lam_e[dropped] = 0.0  # frozen-variable rows carry zero multipliers
    meq_r = len(eq_idx)
    nr = len(var_idx)
    for _ in range(max_steps):
        ev = nlp.evaluate(z, p)
        A = np.vstack(
            [ev.J_eq[np.ix_(eq_idx, var_idx)].reshape(-1, nr),
             ev.J_in[np.ix_(act, var_idx)].reshape(-1, nr)]
        )
        c = np.concatenate([ev.c_eq[eq_idx], ev.c_in[act]])
        lam_all = np.concatenate([lam_e[eq_idx], lam_a])
        r_stat = ev.grad[var_idx] - A.T @ lam_all
        res = max(
            float(np.abs(r_stat).max()),
            float(np.abs(c).max()) if len(c) else 0.0,
        )
        if res <= 0.1 * cfg.tol:
            break
        H = nlp.lagrangian_hessian(z, p, lam_e, _scatter(lam_in, act, lam_a),
                                   convexify=False)
        Hr = H[np.ix_(var_idx, var_idx)]
        k = len(c)
        KKT = np.block([[Hr, A.T], [A, np.zeros((k, k))]])
        try:
            sol = np.linalg.solve(KKT, np.concatenate([-r_stat, -c]))
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)) or np.abs(sol[:nr]).max() > 1.0:
            return None
        z[var_idx] += sol[:nr]
        # the KKT block carries +A', so the multiplier update is negated
        lam_e[eq_idx] -= sol[nr : nr + meq_r]
        lam_a = lam_a - sol[nr + meq_r :]
    else:
        return None
    # verify the full problem's KKT conditions at the polished point
    ev = nlp.evaluate(z, p)
    if len(act) and lam_a.min() < -1e-9:
        return None
    lam_in_full = _scatter(lam_in, act, np.maximum(lam_a, 0.0))
    if _kkt_residual(ev, lam_e, lam_in_full) > cfg.tol:
        return None
    return z, lam_e, lam_in_full


def _scatter(template, idx, values):
    out = np.zeros_like(template)
    if len(idx):
        out[idx] = values
    return out


def solve(nlp, z0, p0=None, callback=None, cfg: SolverConfig | None = None) -> NlpSolution:
    """SQP with damped BFGS, l1 merit line search and a parameter callback.

    ``callback(z, p)`` runs once after every accepted iterate and may mutate
    the parameter vector ``p`` in place; convergence is judged under the
    parameters in effect at test time. Never raises on solver breakdown: the
    best iterate is returned with an explanatory status.
    """
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()
    z = np.array(z0, dtype=float)
    p = None if p0 is None else np.array(p0, dtype=float)
    n = z.shape[0]

    ev = nlp.evaluate(z, p)
    use_exact = cfg.hessian != "damped-bfgs" and getattr(
        nlp, "has_exact_hessian", False
    )
    if cfg.hessian == "exact" and not use_exact:
        raise ValueError("problem provides no exact Hessian")
    H = np.eye(n)
    lam_eq = np.zeros(len(ev.c_eq))
    lam_in = np.zeros(len(ev.c_in))
    stats = SolveStats()
    stats.obj_trace.append(ev.f)
    stats.viol_trace.append(_inf_violation(ev))

    elastic_rows = getattr(nlp, "elastic_rows", None)
    mu = cfg.penalty_floor
    for _ in range(cfg.max_iter):
        t_iter = time.perf_counter()
        if use_exact:
            H = nlp.lagrangian_hessian(z, p, lam_eq, lam_in)
        try:
            d, lam_eq, lam_in, elastic = _solve_subproblem(H, ev, mu, elastic_rows)
        except (QpInfeasibleError, RuntimeError, np.linalg.LinAlgError):
            stats.status = "qp-failure"
            break

        if _kkt_residual(ev, lam_eq, lam_in) <= cfg.tol or (
            _ls_multiplier_residual(ev, cfg.tol) <= cfg.tol
        ):
            stats.status = "converged"
            break

        if np.isfinite(cfg.step_cap):
            dmax = float(np.abs(d).max())
            if dmax > cfg.step_cap:
                d = d * (cfg.step_cap / dmax)

        mult_inf = 0.0
        if len(lam_eq):
            mult_inf = max(mult_inf, float(np.abs(lam_eq).max()))
        if len(lam_in):
            mult_inf = max(mult_inf, float(np.abs(lam_in).max()))
        mu = max(mu if elastic else cfg.penalty_floor,
                 cfg.penalty_scale * mult_inf + cfg.penalty_margin)
        mu = min(mu, 1e8)

        accepted = False
        for _esc in range(cfg.max_penalty_escalations + 1):
            viol0 = _l1_violation(ev)
            phi0 = ev.f + mu * viol0
            # merit slope from the model: the linearized violation after the
            # full step is nonzero when the subproblem ran in elastic mode
            pred_red = viol0 - _l1_linearized_violation(ev, d)
            dphi = float(ev.grad @ d) - mu * pred_red
            step = 1.0
            while step >= cfg.ls_min_step:
                ev_trial = nlp.evaluate(z + step * d, p)
                phi_t = ev_trial.f + mu * _l1_violation(ev_trial)
                if phi_t <= phi0 + cfg.armijo * step * min(dphi, 0.0):
                    accepted = True
                    break
                step *= cfg.ls_contraction
            if accepted:
                break
            mu *= 10.0
            if elastic:
                # the relaxed step depends on the penalty: recompute it
                try:
                    d, lam_eq, lam_in, elastic = _solve_subproblem(
                        H, ev, mu, elastic_rows
                    )
                except (QpInfeasibleError, RuntimeError, np.linalg.LinAlgError):
                    break
        if not accepted:
            stats.status = "line-search-failure"
            break

        s = step * d
        z = z + s
        if not use_exact:
            gL_old = _lagrangian_grad(ev, lam_eq, lam_in)
            gL_new = _lagrangian_grad(ev_trial, lam_eq, lam_in)
            H = _bfgs_update(H, s, gL_new - gL_old, cfg.bfgs_damping)

        stats.iterations += 1
        if callback is not None:
            t_cb = time.perf_counter()
            callback(z, p)
            stats.callback_time += time.perf_counter() - t_cb
            ev = nlp.evaluate(z, p)
        else:
            ev = ev_trial

        # near-feasible with exact second-order information: close the last
        # stretch with Newton on the active-set KKT system
        if (
            use_exact
            and not elastic
            and _inf_violation(ev) <= max(1e2 * cfg.tol, 1e-4)
        ):
            act = np.nonzero(lam_in > 0)[0] if len(lam_in) else np.zeros(0, int)
            polished = _newton_kkt_polish(nlp, z, p, lam_eq, lam_in, act, cfg)
            if polished is not None:
                z, lam_eq, lam_in = polished
                ev = nlp.evaluate(z, p)
                stats.obj_trace.append(ev.f)
                stats.viol_trace.append(_inf_violation(ev))
                stats.wall_per_iter.append(time.perf_counter() - t_iter)
                stats.status = "converged"
                break

        stats.obj_trace.append(ev.f)
        stats.viol_trace.append(_inf_violation(ev))
        stats.wall_per_iter.append(time.perf_counter() - t_iter)

    stats.wall_total = time.perf_counter() - t_start
    return NlpSolution(z=z, lam_eq=lam_eq, lam_in=lam_in, stats=stats)
