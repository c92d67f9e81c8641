"""Optimal control problem definitions and their multiple-shooting transcription.

Two point-to-point cases are provided: a holonomic disc robot (states =
position, controls = velocity) and a planar n-link arm driven by joint
accelerations whose last link is a collision capsule. Both are discretized
with RK4 multiple shooting into an NlpProblem carrying analytic first
derivatives throughout; no numerical differentiation happens in the solver
path.

Collision avoidance enters in one of two modes:
  decoupled -- one affine-in-position inequality per (knot, robot primitive,
               obstacle) triple, with the plane (w, w_b) as a parameter,
  coupled   -- the plane is a decision variable per triple, adding the
               robot-side inequality, one obstacle-side inequality per
               obstacle vertex, and the unit-norm equality.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Capsule, Disc, Environment, vertices
from .nlp import EvalResult

__all__ = [
    "rk4_step",
    "rk4_discrete",
    "SingleIntegrator",
    "DoubleIntegrator",
    "ArmModel",
    "fk_arm",
    "ik_point",
    "DiscLayout",
    "ArmTipLayout",
    "OcpSpec",
    "holonomic_ocp",
    "arm_ocp",
    "NlpProblem",
    "transcribe",
]


def rk4_step(f, x, u, dt: float) -> np.ndarray:
    """One classical 4-stage Runge-Kutta step of xdot = f(x, u)."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_discrete(model, x, u, dt: float):
    """RK4 step together with its exact Jacobians d(next)/dx and d(next)/du."""
    n_x = model.n_x
    I = np.eye(n_x)
    k1 = model.f(x, u)
    A1, B1 = model.fx(x, u), model.fu(x, u)
    x2 = x + 0.5 * dt * k1
    k2 = model.f(x2, u)
    A2r, B2r = model.fx(x2, u), model.fu(x2, u)
    A2 = A2r @ (I + 0.5 * dt * A1)
    B2 = A2r @ (0.5 * dt * B1) + B2r
    x3 = x + 0.5 * dt * k2
    k3 = model.f(x3, u)
    A3r, B3r = model.fx(x3, u), model.fu(x3, u)
    A3 = A3r @ (I + 0.5 * dt * A2)
    B3 = A3r @ (0.5 * dt * B2) + B3r
    x4 = x + dt * k3
    k4 = model.f(x4, u)
    A4r, B4r = model.fx(x4, u), model.fu(x4, u)
    A4 = A4r @ (I + dt * A3)
    B4 = A4r @ (dt * B3) + B4r
    x_next = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    A = I + (dt / 6.0) * (A1 + 2 * A2 + 2 * A3 + A4)
    B = (dt / 6.0) * (B1 + 2 * B2 + 2 * B3 + B4)
    return x_next, A, B


@dataclass
class SingleIntegrator:
    """Holonomic point robot: states = position, controls = velocity."""

    n_x: int = 2
    n_u: int = 2
    lti: bool = True

    def f(self, x, u):
        return np.asarray(u, dtype=float)

    def fx(self, x, u):
        return np.zeros((self.n_x, self.n_x))

    def fu(self, x, u):
        return np.eye(self.n_u)


@dataclass
class DoubleIntegrator:
    """Joint-space arm dynamics: states [q, qdot], controls qddot."""

    n_joints: int
    lti: bool = True

    @property
    def n_x(self):
        return 2 * self.n_joints

    @property
    def n_u(self):
        return self.n_joints

    def f(self, x, u):
        n = self.n_joints
        return np.concatenate([x[n:], u])

    def fx(self, x, u):
        n = self.n_joints
        A = np.zeros((2 * n, 2 * n))
        A[:n, n:] = np.eye(n)
        return A

    def fu(self, x, u):
        n = self.n_joints
        B = np.zeros((2 * n, n))
        B[n:, :] = np.eye(n)
        return B


# ---------------------------------------------------------------------------
# planar arm kinematics


@dataclass
class ArmModel:
    """Planar serial chain with one collision capsule per link."""

    lengths: np.ndarray
    radius: float
    base: np.ndarray = field(default_factory=lambda: np.zeros(2))
    q_min: float = -np.pi
    q_max: float = np.pi
    qd_max: float = 2.0
    u_max: float = 4.0

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=float)
        self.base = np.asarray(self.base, dtype=float)
        if np.any(self.lengths <= 0):
            raise ValueError("link lengths must be positive")
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.lengths)

    @property
    def reach(self) -> float:
        return float(self.lengths.sum())

    def capsules(self, q) -> list:
        pts = np.vstack([self.base, fk_arm(self, q)[0]])
        return [
            Capsule(pts[i], pts[i + 1], self.radius) for i in range(self.n_joints)
        ]


def fk_arm(model: ArmModel, q):
    """Link endpoint positions and their Jacobians for a planar chain.

    Returns (endpoints, jac) with endpoints[i] the tip of link i (shape
    (n, 2)) and jac[i] = d endpoints[i] / dq (shape (n, 2, n)).
    """
    q = np.asarray(q, dtype=float)
    n = model.n_joints
    theta = np.cumsum(q)
    c, s = np.cos(theta), np.sin(theta)
    seg = model.lengths[:, None] * np.stack([c, s], axis=1)  # (n, 2)
    pts = model.base + np.cumsum(seg, axis=0)
    # d seg_k / dq_j = L_k (-sin, cos) for j <= k
    dseg = model.lengths[:, None] * np.stack([-s, c], axis=1)  # (n, 2)
    jac = np.zeros((n, 2, n))
    for i in range(n):
        for j in range(n):
            if j <= i:
                jac[i, :, j] = dseg[j : i + 1].sum(axis=0)
    return pts, jac


def fk_arm_hessian(model: ArmModel, q):
    """Second derivatives of the link endpoints: (n, 2, n, n) array.

    d2 e_i / dq_j dq_l = - sum_{k = max(j,l)}^{i} L_k (cos t_k, sin t_k).
    """
    q = np.asarray(q, dtype=float)
    n = model.n_joints
    theta = np.cumsum(q)
    seg = model.lengths[:, None] * np.stack(
        [np.cos(theta), np.sin(theta)], axis=1
    )
    # suffix sums: tail[k] = sum_{m >= k} seg_m (within each endpoint range)
    H = np.zeros((n, 2, n, n))
    for i in range(n):
        for j in range(n):
            for l in range(n):
                lo = max(j, l)
                if lo <= i:
                    H[i, :, j, l] = -seg[lo : i + 1].sum(axis=0)
    return H


def ik_point(model: ArmModel, p_goal, q0, iters: int = 200, tol: float = 1e-10):
    """Damped Gauss-Newton inverse kinematics for the chain tip."""
    q = np.asarray(q0, dtype=float).copy()
    p_goal = np.asarray(p_goal, dtype=float)
    for _ in range(iters):
        pts, jac = fk_arm(model, q)
        err = pts[-1] - p_goal
        if np.linalg.norm(err) < tol:
            break
        J = jac[-1]
        dq = J.T @ np.linalg.solve(J @ J.T + 1e-8 * np.eye(2), err)
        q = q - dq
    q = np.clip(q, model.q_min, model.q_max)
    return q


# ---------------------------------------------------------------------------
# robot collision layouts (positions of classification vertices vs. state)


@dataclass
class DiscLayout:
    """Disc robot whose center is the state's leading position coordinates."""

    radius: float

    n_primitives = 1
    verts_per_primitive = 1

    def margins(self):
        return [self.radius]

    def primitives(self, x):
        return [Disc(np.asarray(x, float)[:2], self.radius)]

    def vertex_positions(self, x):
        return np.asarray(x, dtype=float)[:2].reshape(1, 2)

    def vertex_jacobians(self, x, n_x):
        J = np.zeros((1, 2, n_x))
        J[0, :, :2] = np.eye(2)
        return J

    def vertex_hessians(self, x, n_x):
        return np.zeros((1, 2, n_x, n_x))


@dataclass
class ArmTipLayout:
    """Collision model restricted to the final capsule of a planar arm."""

    arm: ArmModel

    n_primitives = 1
    verts_per_primitive = 2

    def margins(self):
        return [self.arm.radius]

    def primitives(self, x):
        q = np.asarray(x, dtype=float)[: self.arm.n_joints]
        pts = np.vstack([self.arm.base, fk_arm(self.arm, q)[0]])
        return [Capsule(pts[-2], pts[-1], self.arm.radius)]

    def vertex_positions(self, x):
        q = np.asarray(x, dtype=float)[: self.arm.n_joints]
        pts, _ = fk_arm(self.arm, q)
        n = self.arm.n_joints
        start = pts[-2] if n >= 2 else self.arm.base
        return np.stack([start, pts[-1]])

    def vertex_jacobians(self, x, n_x):
        q = np.asarray(x, dtype=float)[: self.arm.n_joints]
        _, jac = fk_arm(self.arm, q)
        n = self.arm.n_joints
        J = np.zeros((2, 2, n_x))
        if n >= 2:
            J[0, :, :n] = jac[-2]
        J[1, :, :n] = jac[-1]
        return J

    def vertex_hessians(self, x, n_x):
        q = np.asarray(x, dtype=float)[: self.arm.n_joints]
        hess = fk_arm_hessian(self.arm, q)
        n = self.arm.n_joints
        H = np.zeros((2, 2, n_x, n_x))
        if n >= 2:
            H[0, :, :n, :n] = hess[-2]
        H[1, :, :n, :n] = hess[-1]
        return H


# ---------------------------------------------------------------------------
# OCP specification


@dataclass
class OcpSpec:
    """Point-to-point continuous-time problem plus its discretization data."""

    dynamics: object
    layout: object
    N: int
    T: float
    x_start: np.ndarray
    x_goal: np.ndarray
    terminal: str = "state"  # "state" pins x_N, "tip" pins the arm end effector
    tip_goal: np.ndarray | None = None
    x_lb: np.ndarray | None = None
    x_ub: np.ndarray | None = None
    u_lb: np.ndarray | None = None
    u_ub: np.ndarray | None = None
    name: str = "ocp"

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two control intervals")
        if self.T <= 0:
            raise ValueError("total time must be positive")
        n_x, n_u = self.dynamics.n_x, self.dynamics.n_u
        self.x_start = np.asarray(self.x_start, dtype=float).reshape(n_x)
        self.x_goal = np.asarray(self.x_goal, dtype=float).reshape(n_x)
        if self.tip_goal is not None:
            self.tip_goal = np.asarray(self.tip_goal, dtype=float).reshape(2)
        def _bound(b, size, fill):
            if b is None:
                return np.full(size, fill)
            return np.broadcast_to(np.asarray(b, dtype=float), (size,)).copy()
        self.x_lb = _bound(self.x_lb, n_x, -np.inf)
        self.x_ub = _bound(self.x_ub, n_x, np.inf)
        self.u_lb = _bound(self.u_lb, n_u, -np.inf)
        self.u_ub = _bound(self.u_ub, n_u, np.inf)
        if np.any(self.x_lb > self.x_ub) or np.any(self.u_lb > self.u_ub):
            raise ValueError("inconsistent bounds")
        if self.terminal not in ("state", "tip"):
            raise ValueError("terminal must be 'state' or 'tip'")
        if self.terminal == "tip" and self.tip_goal is None:
            raise ValueError("tip terminal requires tip_goal")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def n_x(self) -> int:
        return self.dynamics.n_x

    @property
    def n_u(self) -> int:
        return self.dynamics.n_u


def holonomic_ocp(start, goal, N: int = 30, T: float = 15.0, v_max: float = 1.0,
                  radius: float = 0.5, workspace=(0.0, 0.0, 10.0, 10.0)) -> OcpSpec:
    """Holonomic disc robot, quadratic velocity effort, box speed limits."""
    ws = np.asarray(workspace, dtype=float)
    return OcpSpec(
        dynamics=SingleIntegrator(),
        layout=DiscLayout(radius=radius),
        N=N,
        T=T,
        x_start=np.asarray(start, dtype=float),
        x_goal=np.asarray(goal, dtype=float),
        x_lb=ws[:2],
        x_ub=ws[2:],
        u_lb=-v_max,
        u_ub=v_max,
        name="holonomic",
    )


def arm_ocp(arm: ArmModel, q_start, p_goal, q_goal_hint, N: int = 21,
            T: float = 5.0) -> OcpSpec:
    """Planar arm reaching a Cartesian point, quadratic acceleration effort."""
    n = arm.n_joints
    x_start = np.concatenate([np.asarray(q_start, float), np.zeros(n)])
    x_goal = np.concatenate([np.asarray(q_goal_hint, float), np.zeros(n)])
    return OcpSpec(
        dynamics=DoubleIntegrator(n_joints=n),
        layout=ArmTipLayout(arm=arm),
        N=N,
        T=T,
        x_start=x_start,
        x_goal=x_goal,
        terminal="tip",
        tip_goal=np.asarray(p_goal, dtype=float),
        x_lb=np.concatenate([np.full(n, arm.q_min), np.full(n, -arm.qd_max)]),
        x_ub=np.concatenate([np.full(n, arm.q_max), np.full(n, arm.qd_max)]),
        u_lb=-arm.u_max,
        u_ub=arm.u_max,
        name="arm",
    )


# ---------------------------------------------------------------------------
# transcription


class NlpProblem:
    """Multiple-shooting NLP with exact derivatives and swappable parameters.

    Decision vector layout: states x_0..x_N, then controls u_0..u_{N-1}, then
    (coupled mode only) one (w_x, w_y, w_b) block per collision triple.
    Collision triples run over knots 1..N, robot primitives and obstacles,
    knot-major. In decoupled mode the plane coefficients live in the
    parameter vector with the same triple ordering.
    """

    def __init__(self, spec: OcpSpec, mode: str, env: Environment):
        if mode not in ("decoupled", "coupled"):
            raise ValueError("mode must be 'decoupled' or 'coupled'")
        self.spec = spec
        self.mode = mode
        self.env = env
        N, n_x, n_u = spec.N, spec.n_x, spec.n_u
        self.N = N
        self.dt = spec.dt

        self.n_states = (N + 1) * n_x
        self.n_controls = N * n_u
        self.obstacle_vertices = [vertices(o) for o in env.obstacles]
        self.n_r = spec.layout.n_primitives
        if self.n_r != 1:
            raise NotImplementedError("only single-primitive robots supported")
        self.n_o = env.n_obstacles
        self.verts_per_prim = spec.layout.verts_per_primitive
        self.triples = [
            (k, j, l)
            for k in range(1, N + 1)
            for j in range(self.n_r)
            for l in range(self.n_o)
        ]
        self.n_triples = len(self.triples)
        margins = spec.layout.margins()
        self.margin = np.array(
            [margins[j] + env.obstacles[l].margin for (_, j, l) in self.triples]
        )

        self.n_z = self.n_states + self.n_controls
        if mode == "coupled":
            self.plane_offset = self.n_z
            self.n_z += 3 * self.n_triples
        self.n_p = 3 * self.n_triples if mode == "decoupled" else 0

        # discrete dynamics (constant for LTI models)
        self._lti = bool(getattr(spec.dynamics, "lti", False))
        if self._lti:
            _, self._Ad, self._Bd = rk4_discrete(
                spec.dynamics, np.zeros(n_x), np.zeros(n_u), self.dt
            )

        self._build_structure()

    # -- index helpers ------------------------------------------------------

    def x_slice(self, k):
        n_x = self.spec.n_x
        return slice(k * n_x, (k + 1) * n_x)

    def u_slice(self, k):
        n_u = self.spec.n_u
        base = self.n_states
        return slice(base + k * n_u, base + (k + 1) * n_u)

    def plane_slice(self, t):
        return slice(self.plane_offset + 3 * t, self.plane_offset + 3 * t + 3)

    def states(self, z):
        return np.asarray(z)[: self.n_states].reshape(self.N + 1, self.spec.n_x)

    def controls(self, z):
        return np.asarray(z)[self.n_states : self.n_states + self.n_controls].reshape(
            self.N, self.spec.n_u
        )

    def planes(self, z):
        if self.mode != "coupled":
            raise ValueError("plane variables exist only in coupled mode")
        return np.asarray(z)[self.plane_offset :].reshape(self.n_triples, 3)

    # -- construction of the constant structure ------------------------------

    def _build_structure(self):
        spec, N = self.spec, self.N
        n_x, n_u = spec.n_x, spec.n_u

        self.n_defect = N * n_x
        self.n_start = n_x
        self.n_term = n_x if spec.terminal == "state" else 2
        self.n_norm = self.n_triples if self.mode == "coupled" else 0
        self.n_eq = self.n_defect + self.n_start + self.n_term + self.n_norm

        # bound rows: one per finite bound entry, lower then upper,
        # states (all knots) then controls (all intervals)
        rows = []
        for k in range(N + 1):
            for i in range(n_x):
                if np.isfinite(spec.x_lb[i]):
                    rows.append((k * n_x + i, 1.0, -spec.x_lb[i]))
                if np.isfinite(spec.x_ub[i]):
                    rows.append((k * n_x + i, -1.0, spec.x_ub[i]))
        for k in range(N):
            for i in range(n_u):
                zi = self.n_states + k * n_u + i
                if np.isfinite(spec.u_lb[i]):
                    rows.append((zi, 1.0, -spec.u_lb[i]))
                if np.isfinite(spec.u_ub[i]):
                    rows.append((zi, -1.0, spec.u_ub[i]))
        self._bound_idx = np.array([r[0] for r in rows], dtype=int)
        self._bound_sign = np.array([r[1] for r in rows])
        self._bound_shift = np.array([r[2] for r in rows])
        self.n_bounds = len(rows)

        self.n_robot_side = self.n_triples * self.verts_per_prim
        if self.mode == "coupled":
            self._obs_rows_per_triple = np.array(
                [len(self.obstacle_vertices[l]) for (_, _, l) in self.triples],
                dtype=int,
            )
            self.n_obs_side = int(self._obs_rows_per_triple.sum())
        else:
            self.n_obs_side = 0
        self.n_in = self.n_bounds + self.n_robot_side + self.n_obs_side

        # constant part of the equality Jacobian
        J_eq = np.zeros((self.n_eq, self.n_z))
        if self._lti:
            for k in range(N):
                r = slice(k * n_x, (k + 1) * n_x)
                J_eq[r, self.x_slice(k + 1)] = np.eye(n_x)
                J_eq[r, self.x_slice(k)] = -self._Ad
                J_eq[r, self.u_slice(k)] = -self._Bd
        r0 = self.n_defect
        J_eq[r0 : r0 + n_x, self.x_slice(0)] = np.eye(n_x)
        if spec.terminal == "state":
            J_eq[r0 + n_x : r0 + 2 * n_x, self.x_slice(N)] = np.eye(n_x)
        self._J_eq_const = J_eq

        # constant part of the inequality Jacobian
        J_in = np.zeros((self.n_in, self.n_z))
        J_in[np.arange(self.n_bounds), self._bound_idx] = self._bound_sign
        self._obs_row_start = []
        if self.mode == "coupled":
            row = self.n_bounds + self.n_robot_side
            for t, (_, _, l) in enumerate(self.triples):
                self._obs_row_start.append(row)
                verts = self.obstacle_vertices[l]
                sl = self.plane_slice(t)
                for v in verts:
                    J_in[row, sl.start] = -v[0]
                    J_in[row, sl.start + 1] = -v[1]
                    J_in[row, sl.start + 2] = -1.0
                    row += 1
            self._obs_row_start.append(row)
        self._J_in_const = J_in

        # static gather indices for the robot-side collision rows
        g = self.verts_per_prim
        tri = np.arange(self.n_triples)
        self._rs_rows = self.n_bounds + np.repeat(tri * g, g) + np.tile(
            np.arange(g), self.n_triples
        )
        self._rs_knot = np.array([k for (k, _, _) in self.triples])
        self._rs_margin = np.repeat(self.margin, g)

        # rows the SQP may relax when a linearization is infeasible: only the
        # collision rows can be mutually inconsistent (bounds and shooting
        # constraints always admit a trajectory)
        self.elastic_rows = np.arange(
            self.n_bounds, self.n_bounds + self.n_robot_side
        )

        # objective Hessian diagonal (quadratic control effort)
        self._obj_scale = self.dt

    # -- initial guesses ------------------------------------------------------

    def initial_guess(self, planes=None) -> np.ndarray:
        """Straight line in state space; controls from the holonomic lerp."""
        spec, N = self.spec, self.N
        z = np.zeros(self.n_z)
        alphas = np.linspace(0.0, 1.0, N + 1)[:, None]
        X = (1 - alphas) * spec.x_start + alphas * spec.x_goal
        z[: self.n_states] = X.ravel()
        if isinstance(spec.dynamics, SingleIntegrator):
            u = (spec.x_goal - spec.x_start) / spec.T
            z[self.n_states : self.n_states + self.n_controls] = np.tile(u, N)
        if self.mode == "coupled":
            if planes is None:
                raise ValueError("coupled mode needs initial plane values")
            z[self.plane_offset :] = np.asarray(planes, dtype=float).ravel()
        return z

    # -- evaluation -----------------------------------------------------------

    def _robot_vertex_data(self, X):
        """Positions and Jacobians of collision vertices at knots 1..N."""
        spec = self.spec
        pos = np.empty((self.N, self.verts_per_prim * self.n_r, 2))
        jac = np.empty((self.N, self.verts_per_prim * self.n_r, 2, spec.n_x))
        for k in range(1, self.N + 1):
            pos[k - 1] = spec.layout.vertex_positions(X[k])
            jac[k - 1] = spec.layout.vertex_jacobians(X[k], spec.n_x)
        return pos, jac

    def evaluate(self, z, p=None) -> EvalResult:
        """Objective, constraints and exact Jacobians at (z, p)."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_z,):
            raise ValueError(f"decision vector must have length {self.n_z}")
        if self.mode == "decoupled":
            if p is None:
                p = np.zeros(0)
            if len(p) != self.n_p:
                raise ValueError(f"parameter vector must have length {self.n_p}")
            plane = np.asarray(p, dtype=float).reshape(self.n_triples, 3)
        spec, N = self.spec, self.N
        n_x = spec.n_x
        X = self.states(z)
        U = self.controls(z)

        f = self._obj_scale * float(np.sum(U * U))
        grad = np.zeros(self.n_z)
        grad[self.n_states : self.n_states + self.n_controls] = (
            2.0 * self._obj_scale * U.ravel()
        )

        c_eq = np.zeros(self.n_eq)
        J_eq = self._J_eq_const.copy()
        if self._lti:
            pred = X[:-1] @ self._Ad.T + U @ self._Bd.T
            c_eq[: self.n_defect] = (X[1:] - pred).ravel()
        else:
            for k in range(N):
                x_next, A, B = rk4_discrete(spec.dynamics, X[k], U[k], self.dt)
                r = slice(k * n_x, (k + 1) * n_x)
                c_eq[r] = X[k + 1] - x_next
                J_eq[r, self.x_slice(k + 1)] = np.eye(n_x)
                J_eq[r, self.x_slice(k)] = -A
                J_eq[r, self.u_slice(k)] = -B
        r0 = self.n_defect
        c_eq[r0 : r0 + n_x] = X[0] - spec.x_start
        rt = r0 + n_x
        if spec.terminal == "state":
            c_eq[rt : rt + n_x] = X[N] - spec.x_goal
        else:
            arm = spec.layout.arm
            q_N = X[N][: arm.n_joints]
            pts, jac = fk_arm(arm, q_N)
            c_eq[rt : rt + 2] = pts[-1] - spec.tip_goal
            xs = self.x_slice(N).start
            J_eq[rt : rt + 2, xs : xs + arm.n_joints] = jac[-1]

        c_in = np.zeros(self.n_in)
        J_in = self._J_in_const.copy()
        c_in[: self.n_bounds] = self._bound_sign * z[self._bound_idx] + self._bound_shift

        if self.n_triples:
            pos, jac = self._robot_vertex_data(X)
            g = self.verts_per_prim
            if self.mode == "coupled":
                W = self.planes(z)
            else:
                W = plane
            # rows are triple-major, vertex-minor; triples are knot-major so
            # triple t uses knot index (t // (n_r*n_o)) in the pos array
            per_knot = self.n_r * self.n_o
            t_idx = np.arange(self.n_triples)
            knot_row = t_idx // per_knot
            vqs = pos[knot_row]  # vertex positions per triple: (n_triples, g, 2)
            vals = (
                np.einsum("tj,tgj->tg", W[:, :2], vqs) + W[:, 2:3] - self.margin[:, None]
            )
            c_in[self.n_bounds : self.n_bounds + self.n_robot_side] = vals.ravel()
            # d/dx_k = w . dvertex/dx
            jq = jac[knot_row][:, :g, :, :]  # (n_triples, g, 2, n_x)
            dX = np.einsum("tj,tgjx->tgx", W[:, :2], jq)
            rows = self._rs_rows
            for i in range(n_x):
                J_in[rows, (self._rs_knot * n_x + i).repeat(g)] = dX[:, :, i].ravel()
            if self.mode == "coupled":
                # d/dw = vertex position, d/dwb = 1
                pw = self.plane_offset + 3 * np.repeat(t_idx, g)
                J_in[rows, pw] = vqs[:, :, 0].ravel()
                J_in[rows, pw + 1] = vqs[:, :, 1].ravel()
                J_in[rows, pw + 2] = 1.0
                # obstacle-side values (Jacobian rows are constant)
                row = self.n_bounds + self.n_robot_side
                for t, (_, _, l) in enumerate(self.triples):
                    verts = self.obstacle_vertices[l]
                    m = len(verts)
                    c_in[row : row + m] = -(verts @ W[t, :2] + W[t, 2])
                    row += m
                # unit-norm equalities
                rn = self.n_defect + self.n_start + self.n_term
                c_eq[rn : rn + self.n_triples] = np.sum(W[:, :2] ** 2, axis=1) - 1.0
                for t in range(self.n_triples):
                    sl = self.plane_slice(t)
                    J_eq[rn + t, sl.start : sl.start + 2] = 2.0 * W[t, :2]

        return EvalResult(f=f, grad=grad, c_eq=c_eq, J_eq=J_eq, c_in=c_in, J_in=J_in)

    # -- exact second-order information ----------------------------------------

    @property
    def has_exact_hessian(self) -> bool:
        # dynamics curvature is the one term not assembled analytically
        return self._lti

    def lagrangian_hessian(self, z, p, lam_eq, lam_in, floor: float = 1e-6,
                           convexify: bool = True):
        """Exact Hessian of the Lagrangian f - lam' c, convexified by default.

        Curvature sources: quadratic control effort, the arm tip terminal
        constraint, unit-norm plane equalities (coupled), and the collision
        rows (forward-kinematics curvature plus the bilinear plane/position
        coupling in coupled mode). With convexify=True, indefinite knot
        blocks are shifted by their most negative eigenvalue and a small
        global floor keeps the QP subproblem strictly convex along otherwise
        flat directions; convexify=False returns the raw Hessian for
        Newton-on-KKT polishing.
        """
        spec, N = self.spec, self.N
        n_x = spec.n_x
        z = np.asarray(z, dtype=float)
        H = np.zeros((self.n_z, self.n_z))
        cs = slice(self.n_states, self.n_states + self.n_controls)
        H[cs, cs] = 2.0 * self._obj_scale * np.eye(self.n_controls)
        X = self.states(z)

        if spec.terminal == "tip" and lam_eq is not None:
            arm = spec.layout.arm
            rt = self.n_defect + self.n_start
            lam_t = lam_eq[rt : rt + 2]
            if np.any(lam_t):
                hess_tip = fk_arm_hessian(arm, X[N][: arm.n_joints])[-1]
                xs = self.x_slice(N).start
                n = arm.n_joints
                H[xs : xs + n, xs : xs + n] -= np.einsum(
                    "d,djl->jl", lam_t, hess_tip
                )

        if self.n_triples and lam_in is not None:
            if self.mode == "coupled":
                W = self.planes(z)
            else:
                W = np.asarray(p, dtype=float).reshape(self.n_triples, 3)
            g = self.verts_per_prim
            per_knot = self.n_r * self.n_o
            row = self.n_bounds
            for t, (k, _, _) in enumerate(self.triples):
                xs = self.x_slice(k).start
                ps = self.plane_slice(t).start if self.mode == "coupled" else None
                for v in range(g):
                    lam = lam_in[row]
                    row += 1
                    if lam == 0.0 and self.mode == "decoupled":
                        continue
                    if lam != 0.0:
                        Hv = spec.layout.vertex_hessians(X[k], n_x)[v]
                        blk = np.einsum("d,djl->jl", W[t, :2], Hv)
                        if np.any(blk):
                            H[xs : xs + n_x, xs : xs + n_x] -= lam * blk
                        if self.mode == "coupled":
                            Jv = spec.layout.vertex_jacobians(X[k], n_x)[v]
                            H[ps : ps + 2, xs : xs + n_x] -= lam * Jv
                            H[xs : xs + n_x, ps : ps + 2] -= lam * Jv.T
            if self.mode == "coupled" and lam_eq is not None:
                rn = self.n_defect + self.n_start + self.n_term
                for t in range(self.n_triples):
                    lam = lam_eq[rn + t]
                    if lam != 0.0:
                        ps = self.plane_slice(t).start
                        H[ps, ps] -= 2.0 * lam
                        H[ps + 1, ps + 1] -= 2.0 * lam

        if not convexify:
            return H

        # block-wise convexification over (x_k, planes at k)
        per_knot = self.n_r * self.n_o
        for k in range(1, N + 1):
            idx = list(range(self.x_slice(k).start, self.x_slice(k).stop))
            if self.mode == "coupled":
                t0 = (k - 1) * per_knot
                for t in range(t0, t0 + per_knot):
                    sl = self.plane_slice(t)
                    idx.extend(range(sl.start, sl.stop))
            sub = H[np.ix_(idx, idx)]
            if np.any(sub):
                lam_min = float(np.linalg.eigvalsh(sub)[0])
                if lam_min < 0.0:
                    H[idx, idx] += -lam_min

        H[np.arange(self.n_z), np.arange(self.n_z)] += floor
        return H

    def polish_mask(self, active_in):
        """Determined subspace for Newton-KKT polishing.

        Plane variables of triples with no active collision row are genuinely
        undetermined at an optimum (their multipliers are zero and nothing
        pins their tangential rotation or offset), so they are frozen and
        their unit-norm rows dropped; everything else is kept.
        """
        base_eq = self.n_defect + self.n_start + self.n_term
        if self.mode != "coupled" or self.n_triples == 0:
            return np.arange(self.n_z), np.arange(self.n_eq)
        active_in = np.asarray(active_in, dtype=int)
        g = self.verts_per_prim
        live = np.zeros(self.n_triples, dtype=bool)
        for r in active_in:
            if r < self.n_bounds:
                continue
            if r < self.n_bounds + self.n_robot_side:
                live[(r - self.n_bounds) // g] = True
            else:
                t = int(np.searchsorted(self._obs_row_start, r, side="right")) - 1
                live[min(t, self.n_triples - 1)] = True
        var_idx = list(range(self.n_states + self.n_controls))
        eq_idx = list(range(base_eq))
        for t in range(self.n_triples):
            if live[t]:
                sl = self.plane_slice(t)
                var_idx.extend(range(sl.start, sl.stop))
                eq_idx.append(base_eq + t)
        return np.array(var_idx), np.array(eq_idx)

    # -- diagnostics ----------------------------------------------------------

    def structure_signature(self) -> str:
        """Hash of the constraint sparsity structure; parameter-independent."""
        h = hashlib.sha256()
        h.update(
            f"{self.mode},{self.n_z},{self.n_eq},{self.n_in},{self.n_p}".encode()
        )
        h.update((self._J_eq_const != 0).tobytes())
        h.update((self._J_in_const != 0).tobytes())
        h.update(self._rs_rows.tobytes())
        h.update(self._rs_knot.tobytes())
        return h.hexdigest()

    @property
    def n_constraints(self) -> int:
        return self.n_eq + self.n_in

    def robot_primitives_at_knots(self, z) -> list:
        """Posed robot primitives at every knot 0..N (for collision checks)."""
        X = self.states(z)
        return [self.spec.layout.primitives(x) for x in X]


def transcribe(spec: OcpSpec, mode: str, env: Environment) -> NlpProblem:
    """Multiple-shooting transcription of the OCP in the requested mode."""
    return NlpProblem(spec, mode, env)
