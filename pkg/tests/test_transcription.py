import numpy as np
import pytest

from hyplan.geometry import Environment, rect_polytope
from hyplan.transcription import (
    ArmModel,
    ArmTipLayout,
    NlpProblem,
    arm_ocp,
    fk_arm,
    holonomic_ocp,
    ik_point,
    rk4_step,
    transcribe,
)


def env_with_rects(rects, seed=0):
    return Environment(
        obstacles=[rect_polytope(c, s) for c, s in rects],
        workspace=np.array([0.0, 0.0, 10.0, 10.0]),
        seed=seed,
    )


# --- finite-difference oracles -------------------------------------------------


def fd_jacobian(fun, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.zeros((len(f0), len(x)))
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2 * h)
    return J


# --- RK4 -----------------------------------------------------------------------


def test_rk4_zero_field():
    x = np.array([1.0, -2.0])
    out = rk4_step(lambda x, u: np.zeros(2), x, np.zeros(2), 0.3)
    assert np.array_equal(out, x)


def test_rk4_exact_on_constant_velocity():
    out = rk4_step(lambda x, u: u, np.array([1.0, 1.0]), np.array([1.0, 0.0]), 0.5)
    assert np.allclose(out, [1.5, 1.0], atol=1e-15)


def test_rk4_double_integrator_closed_form():
    # qddot = 1 from rest: q(t) = t^2/2, qd(t) = t; RK4 is exact on polynomials
    def f(x, u):
        return np.array([x[1], u[0]])

    out = rk4_step(f, np.zeros(2), np.array([1.0]), 0.1)
    assert out[0] == pytest.approx(0.005, abs=1e-16)
    assert out[1] == pytest.approx(0.1, abs=1e-16)


# --- arm kinematics --------------------------------------------------------------


def test_fk_straight_and_bent():
    arm = ArmModel(lengths=[1.0, 1.0, 1.0], radius=0.1)
    pts, _ = fk_arm(arm, np.zeros(3))
    assert np.allclose(pts, [[1, 0], [2, 0], [3, 0]])
    pts2, _ = fk_arm(arm, [np.pi / 2, 0.0, 0.0])
    assert np.allclose(pts2, [[0, 1], [0, 2], [0, 3]], atol=1e-12)


def test_fk_jacobian_matches_finite_differences():
    arm = ArmModel(lengths=[1.2, 0.7, 0.5], radius=0.1, base=np.array([2.0, 1.0]))
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, 3)
        pts, jac = fk_arm(arm, q)
        for i in range(3):
            J_fd = fd_jacobian(lambda qq, i=i: fk_arm(arm, qq)[0][i], q)
            rel = np.abs(jac[i] - J_fd).max() / max(1.0, np.abs(J_fd).max())
            assert rel <= 1e-6


def test_ik_point_reaches_goal():
    arm = ArmModel(lengths=[1.0, 1.0, 0.8], radius=0.1)
    goal = np.array([1.4, 1.1])
    q = ik_point(arm, goal, q0=np.array([0.3, 0.3, 0.3]))
    pts, _ = fk_arm(arm, q)
    assert np.linalg.norm(pts[-1] - goal) < 1e-8


# --- transcription structure ------------------------------------------------------


def test_constraint_counts_single_obstacle():
    env = env_with_rects([((5.0, 5.0), (1.0, 1.0))])
    spec = holonomic_ocp((1.0, 1.0), (9.0, 9.0), N=30)
    dec = transcribe(spec, "decoupled", env)
    coup = transcribe(spec, "coupled", env)
    N = 30
    # decoupled: one robot-side inequality per knot 1..N
    assert dec.n_robot_side == N
    assert dec.n_p == 3 * N
    # coupled: + 4 obstacle-side rows and 1 norm equality per triple, 3 vars each
    assert coup.n_obs_side == 4 * N
    assert coup.n_norm == N
    assert coup.n_z - dec.n_z == 3 * N
    diff = coup.n_constraints - dec.n_constraints
    assert diff == (4 + 1) * N  # m(V+1)N with m=1 rect obstacle


@pytest.mark.parametrize("m", range(1, 11))
def test_constraint_count_difference_scales_with_obstacles(m):
    rects = [((1.0 + 0.8 * i, 5.0), (0.5, 0.5)) for i in range(m)]
    env = env_with_rects(rects)
    spec = holonomic_ocp((0.5, 0.5), (9.5, 9.5), N=30)
    dec = transcribe(spec, "decoupled", env)
    coup = transcribe(spec, "coupled", env)
    assert coup.n_constraints - dec.n_constraints == m * (4 + 1) * 30


def test_empty_environment_has_no_collision_rows():
    env = Environment(workspace=np.array([0.0, 0.0, 10.0, 10.0]))
    spec = holonomic_ocp((1.0, 1.0), (9.0, 9.0), N=10)
    prob = transcribe(spec, "decoupled", env)
    assert prob.n_triples == 0
    assert prob.n_robot_side == 0
    ev = prob.evaluate(prob.initial_guess(), np.zeros(0))
    assert len(ev.c_eq) == prob.n_eq
    # straight-line guess integrates exactly: all defects vanish
    assert np.abs(ev.c_eq).max() < 1e-12


def test_decoupled_constraint_value_example():
    env = env_with_rects([((5.0, 5.0), (1.0, 1.0))])
    spec = holonomic_ocp((0.0, 0.0), (0.0, 0.0), N=2, radius=0.5)
    prob = transcribe(spec, "decoupled", env)
    # plane x = 2 as (w, b) = ((-1, 0), 2); robot at the origin
    p = np.tile([-1.0, 0.0, 2.0], prob.n_triples)
    z = prob.initial_guess()
    ev = prob.evaluate(z, p)
    vals = ev.c_in[prob.n_bounds : prob.n_bounds + prob.n_robot_side]
    assert np.allclose(vals, 2.0 - 0.5)


def test_parameter_change_keeps_structure():
    env = env_with_rects([((5.0, 5.0), (1.0, 1.0)), ((2.0, 7.0), (0.6, 0.8))])
    spec = holonomic_ocp((1.0, 1.0), (9.0, 9.0), N=10)
    prob = transcribe(spec, "decoupled", env)
    sig0 = prob.structure_signature()
    rng = np.random.default_rng(0)
    z = prob.initial_guess() + 0.01 * rng.standard_normal(prob.n_z)
    p1 = rng.standard_normal(prob.n_p)
    p2 = rng.standard_normal(prob.n_p)
    ev1 = prob.evaluate(z, p1)
    ev2 = prob.evaluate(z, p2)
    assert prob.structure_signature() == sig0
    assert not np.array_equal(ev1.c_in, ev2.c_in)
    assert ev1.J_in.shape == ev2.J_in.shape


def test_decoupled_collision_rows_are_affine():
    env = env_with_rects([((5.0, 5.0), (1.0, 1.0))])
    spec = holonomic_ocp((1.0, 1.0), (9.0, 9.0), N=8)
    prob = transcribe(spec, "decoupled", env)
    rng = np.random.default_rng(1)
    p = rng.standard_normal(prob.n_p)
    z = prob.initial_guess()
    for _ in range(5):
        d = rng.standard_normal(prob.n_z)
        h = 0.37
        c0 = prob.evaluate(z, p).c_in
        cp = prob.evaluate(z + h * d, p).c_in
        cm = prob.evaluate(z - h * d, p).c_in
        second_diff = cp - 2 * c0 + cm
        assert np.abs(second_diff).max() <= 1e-10


# --- derivative checks ------------------------------------------------------------


def random_problem(mode, arm_case=False, seed=0):
    env = env_with_rects([((5.0, 5.0), (1.2, 0.8)), ((3.0, 7.0), (0.7, 0.7))])
    if arm_case:
        arm = ArmModel(lengths=[1.6, 1.2, 0.9], radius=0.12, base=np.array([5.0, 1.0]))
        q0 = np.array([0.8, -0.3, 0.2])
        spec = arm_ocp(arm, q0, p_goal=(6.5, 3.5), q_goal_hint=q0 + 0.4, N=6, T=3.0)
    else:
        spec = holonomic_ocp((1.0, 1.0), (9.0, 9.0), N=6)
    return transcribe(spec, mode, env)


@pytest.mark.parametrize(
    "mode,arm_case",
    [("decoupled", False), ("coupled", False), ("decoupled", True), ("coupled", True)],
)
def test_evaluate_derivatives_match_finite_differences(mode, arm_case):
    prob = random_problem(mode, arm_case)
    rng = np.random.default_rng(12)
    p = rng.standard_normal(prob.n_p) if prob.n_p else None
    for trial in range(4):
        z = prob.initial_guess(
            planes=rng.standard_normal((prob.n_triples, 3))
            if mode == "coupled"
            else None
        )
        z = z + 0.1 * rng.standard_normal(prob.n_z)
        ev = prob.evaluate(z, p)
        g_fd = fd_jacobian(lambda zz: prob.evaluate(zz, p).f, z)[0]
        scale = max(1.0, np.abs(g_fd).max())
        assert np.abs(ev.grad - g_fd).max() / scale <= 1e-5
        Jeq_fd = fd_jacobian(lambda zz: prob.evaluate(zz, p).c_eq, z)
        scale = max(1.0, np.abs(Jeq_fd).max())
        assert np.abs(ev.J_eq - Jeq_fd).max() / scale <= 1e-5
        Jin_fd = fd_jacobian(lambda zz: prob.evaluate(zz, p).c_in, z)
        scale = max(1.0, np.abs(Jin_fd).max())
        assert np.abs(ev.J_in - Jin_fd).max() / scale <= 1e-5


def test_coupled_bilinear_jacobian_blocks():
    prob = random_problem("coupled")
    rng = np.random.default_rng(5)
    z = prob.initial_guess(planes=rng.standard_normal((prob.n_triples, 3)))
    ev = prob.evaluate(z, None)
    X = prob.states(z)
    W = prob.planes(z)
    # first robot-side row: knot 1, triple 0
    row = prob.n_bounds
    xs = prob.x_slice(1)
    ps = prob.plane_slice(0)
    assert np.allclose(ev.J_in[row, xs], W[0, :2])
    assert np.allclose(ev.J_in[row, ps.start : ps.start + 2], X[1])
    assert ev.J_in[row, ps.start + 2] == 1.0


def test_exactly_integrated_trajectory_has_zero_defects():
    env = Environment(workspace=np.array([0.0, 0.0, 10.0, 10.0]))
    arm = ArmModel(lengths=[1.0, 1.0], radius=0.1, base=np.array([5.0, 5.0]))
    q0 = np.array([0.2, 0.1])
    spec = arm_ocp(arm, q0, p_goal=(6.0, 6.0), q_goal_hint=q0, N=5, T=1.0)
    prob = transcribe(spec, "decoupled", env)
    rng = np.random.default_rng(2)
    U = rng.uniform(-1, 1, (5, 2))
    X = [spec.x_start]
    for k in range(5):
        X.append(rk4_step(spec.dynamics.f, X[-1], U[k], spec.dt))
    z = np.concatenate([np.ravel(X), U.ravel()])
    ev = prob.evaluate(z, np.zeros(prob.n_p))
    assert np.abs(ev.c_eq[: prob.n_defect]).max() <= 1e-12


def test_arm_layout_capsule_matches_fk():
    arm = ArmModel(lengths=[1.0, 0.8], radius=0.15, base=np.array([1.0, 1.0]))
    layout = ArmTipLayout(arm=arm)
    x = np.array([0.4, -0.2, 0.0, 0.0])
    caps = layout.primitives(x)
    assert len(caps) == 1
    pts, _ = fk_arm(arm, x[:2])
    assert np.allclose(caps[0].p0, pts[0])
    assert np.allclose(caps[0].p1, pts[1])
    vp = layout.vertex_positions(x)
    assert np.allclose(vp, pts)
