import itertools

import numpy as np
import pytest

from hyplan.nlp import (
    EvalResult,
    QpInfeasibleError,
    SolverConfig,
    solve,
    solve_dense_qp,
)


# --- oracle: exhaustive active-set enumeration for small QPs ------------------


def qp_oracle(H, g, A_eq, b_eq, A_in, b_in):
    """Solve a small QP by enumerating every active subset exactly."""
    n = len(g)
    meq = 0 if A_eq is None else len(A_eq)
    m_in = 0 if A_in is None else len(A_in)
    best = None
    for r in range(m_in + 1):
        for combo in itertools.combinations(range(m_in), r):
            rows = [A_eq] if meq else []
            rhs = [b_eq] if meq else []
            if combo:
                rows.append(A_in[list(combo)])
                rhs.append(b_in[list(combo)])
            A = np.vstack(rows) if rows else np.zeros((0, n))
            b = np.concatenate(rhs) if rhs else np.zeros(0)
            k = len(b)
            KKT = np.block([[H, A.T], [A, np.zeros((k, k))]])
            rhs = np.concatenate([-g, b])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol)) or np.abs(KKT @ sol - rhs).max() > 1e-8:
                continue  # singular active-set hypothesis
            # the block system yields negated multipliers; dual feasibility for
            # active ">=" rows therefore requires sol[n+meq:] <= 0
            x, lam = sol[:n], sol[n + meq:]
            if m_in and np.any(A_in @ x - b_in < -1e-9):
                continue
            if np.any(lam > 1e-9):
                continue
            val = 0.5 * x @ H @ x + g @ x
            if best is None or val < best[0] - 1e-12:
                best = (val, x)
    return best


def test_qp_projection_example():
    H = np.eye(3)
    g = np.zeros(3)
    A_in = np.array([[1.0, 0.0, 0.0]])
    b_in = np.array([1.0])
    res = solve_dense_qp(H, g, None, None, A_in, b_in)
    assert np.allclose(res.x, [1.0, 0.0, 0.0], atol=1e-10)
    assert res.lam_in[0] == pytest.approx(1.0, abs=1e-10)
    assert res.active == [0]


def test_qp_equality_only_matches_kkt_solve():
    rng = np.random.default_rng(3)
    n, m = 6, 2
    M = rng.standard_normal((n, n))
    H = M @ M.T + n * np.eye(n)
    g = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    res = solve_dense_qp(H, g, A, b)
    KKT = np.block([[H, A.T], [A, np.zeros((m, m))]])
    ref = np.linalg.solve(KKT, np.concatenate([-g, b]))
    assert np.allclose(res.x, ref[:n], atol=1e-9)
    # stationarity convention: H x + g = A' lam_eq
    assert np.allclose(res.lam_eq, -ref[n:], atol=1e-9)
    stat = H @ res.x + g - A.T @ res.lam_eq
    assert np.abs(stat).max() < 1e-9


def test_qp_infeasible_signal():
    H = np.eye(2)
    g = np.zeros(2)
    A_in = np.array([[1.0, 0.0], [-1.0, 0.0]])
    b_in = np.array([1.0, 0.0])  # x0 >= 1 and -x0 >= 0
    with pytest.raises(QpInfeasibleError):
        solve_dense_qp(H, g, None, None, A_in, b_in)


def test_qp_random_against_enumeration_oracle():
    rng = np.random.default_rng(7)
    for trial in range(60):
        n = rng.integers(2, 5)
        m_in = rng.integers(1, 5)
        meq = rng.integers(0, 2)
        M = rng.standard_normal((n, n))
        H = M @ M.T + n * np.eye(n)
        g = rng.standard_normal(n)
        A_in = rng.standard_normal((m_in, n))
        # anchor feasibility at a random point so the instance is solvable
        x_feas = rng.standard_normal(n)
        b_in = A_in @ x_feas - rng.uniform(0.0, 1.0, m_in)
        if meq:
            A_eq = rng.standard_normal((meq, n))
            b_eq = A_eq @ x_feas
        else:
            A_eq = b_eq = None
        res = solve_dense_qp(H, g, A_eq, b_eq, A_in, b_in)
        ref = qp_oracle(H, g, A_eq, b_eq, A_in, b_in)
        assert ref is not None
        val = 0.5 * res.x @ H @ res.x + g @ res.x
        assert val == pytest.approx(ref[0], abs=1e-7), trial
        assert np.allclose(res.x, ref[1], atol=1e-6), trial


def test_qp_kkt_residual_small():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n = 8
        M = rng.standard_normal((n, n))
        H = M @ M.T + np.eye(n)
        g = rng.standard_normal(n)
        A_in = rng.standard_normal((10, n))
        x_feas = rng.standard_normal(n)
        b_in = A_in @ x_feas - rng.uniform(0, 1, 10)
        A_eq = rng.standard_normal((2, n))
        b_eq = A_eq @ x_feas
        res = solve_dense_qp(H, g, A_eq, b_eq, A_in, b_in)
        stat = H @ res.x + g - A_eq.T @ res.lam_eq - A_in.T @ res.lam_in
        assert np.abs(stat).max() < 1e-8
        assert np.all(A_in @ res.x - b_in > -1e-8)
        assert np.abs(A_eq @ res.x - b_eq).max() < 1e-8
        assert np.all(res.lam_in > -1e-10)
        slack = A_in @ res.x - b_in
        assert np.abs(res.lam_in * slack).max() < 1e-7


# --- SQP ----------------------------------------------------------------------


class QuadraticNlp:
    """min 1/2 ||z - a||^2 subject to A z = b and C z >= d."""

    def __init__(self, a, A=None, b=None, C=None, d=None):
        self.a = np.asarray(a, float)
        n = len(self.a)
        self.A = np.zeros((0, n)) if A is None else np.asarray(A, float)
        self.b = np.zeros(0) if b is None else np.asarray(b, float)
        self.C = np.zeros((0, n)) if C is None else np.asarray(C, float)
        self.d = np.zeros(0) if d is None else np.asarray(d, float)

    def evaluate(self, z, p=None):
        return EvalResult(
            f=0.5 * float((z - self.a) @ (z - self.a)),
            grad=z - self.a,
            c_eq=self.A @ z - self.b,
            J_eq=self.A.copy(),
            c_in=self.C @ z - self.d,
            J_in=self.C.copy(),
        )


def test_sqp_equality_qp_in_few_iterations():
    # identity Hessian matches the BFGS initialization, so the first QP step
    # already lands on the analytic minimizer
    a = np.array([1.0, 2.0, 3.0])
    A = np.array([[1.0, 1.0, 1.0]])
    b = np.array([1.0])
    nlp_prob = QuadraticNlp(a, A, b)
    sol = solve(nlp_prob, np.zeros(3), cfg=SolverConfig(tol=1e-10))
    # analytic: projection of a onto the plane sum z = 1
    z_ref = a - (a.sum() - 1.0) / 3.0
    assert sol.converged
    assert sol.stats.iterations <= 3
    assert np.abs(sol.z - z_ref).max() < 1e-8


def test_sqp_with_inequalities():
    a = np.array([2.0, -1.0])
    C = np.array([[-1.0, 0.0], [0.0, 1.0]])
    d = np.array([-1.0, 0.0])  # z0 <= 1, z1 >= 0
    sol = solve(QuadraticNlp(a, C=C, d=d), np.zeros(2), cfg=SolverConfig(tol=1e-9))
    assert sol.converged
    assert np.allclose(sol.z, [1.0, 0.0], atol=1e-8)


def test_sqp_noop_callback_identical_trace():
    a = np.array([1.0, 2.0, 3.0, -1.0])
    A = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
    b = np.array([0.5, 0.25])
    C = np.vstack([np.eye(4)])
    d = -np.ones(4)
    prob = QuadraticNlp(a, A, b, C, d)
    sol_plain = solve(prob, np.zeros(4), cfg=SolverConfig())
    sol_cb = solve(prob, np.zeros(4), p0=np.zeros(1),
                   callback=lambda z, p: None, cfg=SolverConfig())
    assert sol_plain.stats.iterations == sol_cb.stats.iterations
    assert np.array_equal(sol_plain.z, sol_cb.z)
    assert sol_plain.stats.obj_trace == sol_cb.stats.obj_trace


def test_sqp_stats_trace_lengths():
    a = np.array([5.0, 5.0])
    prob = QuadraticNlp(a, C=np.eye(2), d=np.zeros(2))
    sol = solve(prob, np.array([1.0, 1.0]), cfg=SolverConfig())
    st = sol.stats
    assert len(st.obj_trace) == st.iterations + 1
    assert len(st.viol_trace) == st.iterations + 1
    assert st.wall_total > 0


def test_sqp_determinism():
    rng = np.random.default_rng(5)
    a = rng.standard_normal(6)
    A = rng.standard_normal((2, 6))
    b = rng.standard_normal(2)
    prob = QuadraticNlp(a, A, b, np.eye(6), -np.ones(6))
    s1 = solve(prob, np.zeros(6), cfg=SolverConfig())
    s2 = solve(prob, np.zeros(6), cfg=SolverConfig())
    assert np.array_equal(s1.z, s2.z)
    assert s1.stats.obj_trace == s2.stats.obj_trace


def test_sqp_nonlinear_constraint():
    # minimize (x-2)^2 + y^2 subject to x^2 + y^2 <= 1: optimum at (1, 0)
    class CircleNlp:
        def evaluate(self, z, p=None):
            x, y = z
            return EvalResult(
                f=(x - 2.0) ** 2 + y ** 2,
                grad=np.array([2 * (x - 2.0), 2 * y]),
                c_eq=np.zeros(0),
                J_eq=np.zeros((0, 2)),
                c_in=np.array([1.0 - x * x - y * y]),
                J_in=np.array([[-2 * x, -2 * y]]),
            )

    sol = solve(CircleNlp(), np.array([0.0, 0.5]), cfg=SolverConfig(tol=1e-8))
    assert sol.converged
    assert np.allclose(sol.z, [1.0, 0.0], atol=1e-6)
