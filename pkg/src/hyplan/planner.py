"""Bi-level planning loop: hyperplane updates between solver iterations.

The decoupled path initializes one separating plane per (knot, robot
primitive, obstacle) triple from the straight-line guess, then refreshes the
planes after every accepted solver iterate through the solver callback. Two
filters throttle the refresh: a broad-phase distance gate skips far pairs
entirely, and a trust-region gate on the inter-normal angle suppresses plane
churn near convergence. The coupled baseline embeds the planes as decision
variables instead and solves the same transcription without any callback.

Update counters follow the solve events: a plane that was solved but then
rejected by the trust region still counts as an LS/QP solve, while the
carried counter tracks broad-phase skips, so the three counters always
partition the (N+1) * n_pairs triples of one update pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nlp as nlpmod
from .geometry import Environment, check_trajectory, pair_distance, vertices
from .nlp import SolverConfig
from .svm import (
    Hyperplane,
    NotSeparableError,
    inter_normal_angle,
    ls_plane,
    qp_plane,
    shift_offset,
)
from .transcription import NlpProblem, OcpSpec, transcribe

__all__ = [
    "FilterConfig",
    "UpdateCounters",
    "HyperplaneField",
    "init_hyperplanes",
    "update_hyperplanes",
    "compute_hyp",
    "plan_decoupled",
    "plan_coupled",
    "PlanResult",
]

SRC_LS, SRC_QP, SRC_CARRIED = 0, 1, 2
_SRC_NAMES = {SRC_LS: "ls", SRC_QP: "qp", SRC_CARRIED: "carried"}


@dataclass
class FilterConfig:
    """Broad-phase distances (collision / free path) and trust-region angle."""

    d_bp_collision: float = 0.15
    d_bp_free: float = 0.15
    theta_bar_deg: float = 5.0
    trust_region_mode: str = "prose"  # "prose": keep old plane on small change
    tau: float = 100.0

    def __post_init__(self):
        if self.d_bp_collision < 0 or self.d_bp_free < 0:
            raise ValueError("broad-phase distances must be nonnegative")
        if not (0.0 < self.theta_bar_deg <= 180.0):
            raise ValueError("trust-region angle must be in (0, 180] degrees")
        if self.trust_region_mode not in ("prose", "literal"):
            raise ValueError("trust_region_mode must be 'prose' or 'literal'")


@dataclass
class UpdateCounters:
    n_ls: int = 0
    n_qp: int = 0
    n_carried: int = 0
    ls_time: float = 0.0
    qp_time: float = 0.0

    def add(self, other: "UpdateCounters"):
        self.n_ls += other.n_ls
        self.n_qp += other.n_qp
        self.n_carried += other.n_carried
        self.ls_time += other.ls_time
        self.qp_time += other.qp_time


@dataclass
class HyperplaneField:
    """One normalized, offset-shifted plane per (knot, pair) triple."""

    normals: np.ndarray   # (N+1, n_pairs, 2)
    offsets: np.ndarray   # (N+1, n_pairs)
    sources: np.ndarray   # (N+1, n_pairs) int8, see _SRC_NAMES
    counters: UpdateCounters

    @property
    def n_knots(self):
        return self.normals.shape[0]

    @property
    def n_pairs(self):
        return self.normals.shape[1]

    def pack_parameters(self) -> np.ndarray:
        """Plane coefficients for knots 1..N in the NLP's triple order."""
        w = self.normals[1:]
        b = self.offsets[1:]
        return np.concatenate([w, b[..., None]], axis=2).ravel()


def _degenerate_plane(robot_verts, obs_verts) -> Hyperplane:
    """Deterministic direction when the classifier normal vanishes.

    Happens when the robot vertex sits at the symmetry center of the obstacle
    vertices (deep symmetric penetration); any separating direction is as
    good as any other, so pick the centroid difference or a fixed axis.
    """
    d = np.mean(np.asarray(robot_verts, float).reshape(-1, 2), axis=0) - np.mean(
        np.asarray(obs_verts, float).reshape(-1, 2), axis=0
    )
    n = float(np.linalg.norm(d))
    w = d / n if n > 1e-9 else np.array([1.0, 0.0])
    return Hyperplane(normal=w, offset=0.0, source="ls")


def _ls_plane_total(robot_verts, obs_verts, cfg, counters) -> Hyperplane:
    t0 = time.perf_counter()
    try:
        h, _ = ls_plane(robot_verts, obs_verts, cfg.tau)
    except ValueError:
        h = _degenerate_plane(robot_verts, obs_verts)
    counters.ls_time += time.perf_counter() - t0
    counters.n_ls += 1
    return h


def _solve_plane(robot_verts, obs_verts, use_ls, cfg, counters):
    """LS or QP plane for one pair; the QP path falls back to LS on contact."""
    if use_ls:
        return _ls_plane_total(robot_verts, obs_verts, cfg, counters)
    t0 = time.perf_counter()
    try:
        h = qp_plane(robot_verts, obs_verts)
        counters.qp_time += time.perf_counter() - t0
        counters.n_qp += 1
        return h
    except NotSeparableError:
        counters.qp_time += time.perf_counter() - t0
        return _ls_plane_total(robot_verts, obs_verts, cfg, counters)


def compute_hyp(robot_prim, obstacle_prim, prev_normal, prev_offset, use_ls,
                cfg: FilterConfig, counters: UpdateCounters):
    """Filtered plane computation for one triple (broad phase + trust region).

    Returns (normal, offset, source_code). Carried-over planes are returned
    bitwise identical to their predecessors.
    """
    d_bp = cfg.d_bp_collision if use_ls else cfg.d_bp_free
    if pair_distance(robot_prim, obstacle_prim) > d_bp:
        counters.n_carried += 1
        return prev_normal, prev_offset, SRC_CARRIED

    obs_verts = vertices(obstacle_prim)
    h = _solve_plane(vertices(robot_prim), obs_verts, use_ls, cfg, counters)
    angle = inter_normal_angle(prev_normal, h.normal)
    small = angle <= cfg.theta_bar_deg
    adopt = (not small) if cfg.trust_region_mode == "prose" else small
    if not adopt:
        return prev_normal, prev_offset, SRC_CARRIED
    shifted = shift_offset(h, obs_verts)
    return shifted.normal, shifted.offset, SRC_LS if h.source == "ls" else SRC_QP


def init_hyperplanes(robot_prims_at_knots, env: Environment,
                     cfg: FilterConfig) -> HyperplaneField:
    """Populate every triple from the initial trajectory, unfiltered.

    Routing follows the trajectory-level collision flag: the LS path is used
    for all triples whenever any knot collides, the QP path otherwise.
    """
    n_knots = len(robot_prims_at_knots)
    n_r = len(robot_prims_at_knots[0])
    n_o = env.n_obstacles
    n_pairs = n_r * n_o
    counters = UpdateCounters()
    normals = np.zeros((n_knots, n_pairs, 2))
    offsets = np.zeros((n_knots, n_pairs))
    sources = np.zeros((n_knots, n_pairs), dtype=np.int8)
    use_ls = check_trajectory(robot_prims_at_knots, env, 0.0).in_collision
    for k, prims in enumerate(robot_prims_at_knots):
        for j, rp in enumerate(prims):
            for l, ob in enumerate(env.obstacles):
                obs_verts = vertices(ob)
                h = _solve_plane(vertices(rp), obs_verts, use_ls, cfg, counters)
                shifted = shift_offset(h, obs_verts)
                pair = j * n_o + l
                normals[k, pair] = shifted.normal
                offsets[k, pair] = shifted.offset
                sources[k, pair] = SRC_LS if h.source == "ls" else SRC_QP
    return HyperplaneField(normals, offsets, sources, counters)


def update_hyperplanes(robot_prims_at_knots, env: Environment,
                       prev: HyperplaneField, cfg: FilterConfig) -> HyperplaneField:
    """One filtered refresh pass over all triples (the solver callback body)."""
    n_knots = len(robot_prims_at_knots)
    n_o = env.n_obstacles
    counters = UpdateCounters()
    normals = prev.normals.copy()
    offsets = prev.offsets.copy()
    sources = np.full_like(prev.sources, SRC_CARRIED)
    use_ls = check_trajectory(robot_prims_at_knots, env, 0.0).in_collision
    for k, prims in enumerate(robot_prims_at_knots):
        for j, rp in enumerate(prims):
            for l, ob in enumerate(env.obstacles):
                pair = j * n_o + l
                w, b, src = compute_hyp(
                    rp, ob, prev.normals[k, pair], prev.offsets[k, pair],
                    use_ls, cfg, counters,
                )
                normals[k, pair] = w
                offsets[k, pair] = b
                sources[k, pair] = src
    return HyperplaneField(normals, offsets, sources, counters)


# ---------------------------------------------------------------------------
# plan entry points


@dataclass
class PlanResult:
    method: str
    states: np.ndarray
    controls: np.ndarray
    objective: float
    stats: nlpmod.SolveStats
    converged: bool
    success_knots: bool
    success_dense: bool
    counters: UpdateCounters
    field: HyperplaneField | None
    problem: NlpProblem

    @property
    def wall_ms(self) -> float:
        return 1e3 * self.stats.wall_total

    def active_planes(self, tol: float = 1e-3) -> list:
        """Final planes with their robot-side residuals, for reports."""
        out = []
        if self.field is None:
            return out
        prob = self.problem
        spec = prob.spec
        for t, (k, j, l) in enumerate(prob.triples):
            pair = j * prob.n_o + l
            w = self.field.normals[k, pair]
            b = self.field.offsets[k, pair]
            verts = spec.layout.vertex_positions(self.states[k])
            resid = float((verts @ w + b).min() - prob.margin[t])
            out.append(
                {
                    "knot": int(k),
                    "pair": [int(j), int(l)],
                    "normal": [float(w[0]), float(w[1])],
                    "offset": float(b),
                    "residual": resid,
                    "active": bool(resid <= tol),
                    "source": _SRC_NAMES[int(self.field.sources[k, pair])],
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "status": self.stats.status,
            "objective": self.objective,
            "success_knots": self.success_knots,
            "success_dense": self.success_dense,
            "iterations": self.stats.iterations,
            "n_ls": self.counters.n_ls,
            "n_qp": self.counters.n_qp,
            "n_carried": self.counters.n_carried,
            "ls_time_us": 1e6 * self.counters.ls_time,
            "qp_time_us": 1e6 * self.counters.qp_time,
            "wall_ms": self.wall_ms,
            "callback_ms": 1e3 * self.stats.callback_time,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "planes": self.active_planes(),
        }


def dense_success(problem: NlpProblem, z, env: Environment,
                  samples_per_interval: int = 10) -> bool:
    """Collision-free along linear state interpolations between knots."""
    X = problem.states(z)
    layout = problem.spec.layout
    poses = []
    for k in range(problem.N):
        for t in np.linspace(0.0, 1.0, samples_per_interval + 2)[1:-1]:
            poses.append(layout.primitives((1 - t) * X[k] + t * X[k + 1]))
    poses.append(layout.primitives(X[-1]))
    if not env.n_obstacles:
        return True
    return not check_trajectory(poses, env, 0.0).in_collision


def _finalize(method, problem, sol, counters, field_obj, env) -> PlanResult:
    z = sol.z
    prims = problem.robot_primitives_at_knots(z)
    knots_ok = (
        not check_trajectory(prims, env, 0.0).in_collision
        if env.n_obstacles
        else True
    )
    dense_ok = dense_success(problem, z, env)
    params = (
        field_obj.pack_parameters()
        if problem.mode == "decoupled" and field_obj is not None
        else None
    )
    ev = problem.evaluate(z, params)
    # a plan counts only if the returned iterate is dynamically feasible
    feasible = sol.converged or (
        len(sol.stats.viol_trace) > 0 and sol.stats.viol_trace[-1] <= 1e-6
    )
    return PlanResult(
        method=method,
        states=problem.states(z),
        controls=problem.controls(z),
        objective=ev.f,
        stats=sol.stats,
        converged=sol.converged,
        success_knots=bool(knots_ok and feasible),
        success_dense=bool(dense_ok and feasible),
        counters=counters,
        field=field_obj,
        problem=problem,
    )


def plan_decoupled(spec: OcpSpec, env: Environment,
                   filter_cfg: FilterConfig | None = None,
                   solver_cfg: SolverConfig | None = None) -> PlanResult:
    """Bi-level solve: plane parameters refreshed after every iteration."""
    cfg = filter_cfg or FilterConfig()
    problem = transcribe(spec, "decoupled", env)
    z0 = problem.initial_guess()
    totals = UpdateCounters()
    t0 = time.perf_counter()
    field = init_hyperplanes(problem.robot_primitives_at_knots(z0), env, cfg)
    init_time = time.perf_counter() - t0
    totals.add(field.counters)
    state = {"field": field}

    def refresh(z, p):
        prims = problem.robot_primitives_at_knots(z)
        new_field = update_hyperplanes(prims, env, state["field"], cfg)
        totals.add(new_field.counters)
        state["field"] = new_field
        p[:] = new_field.pack_parameters()

    sol = nlpmod.solve(
        problem, z0, p0=field.pack_parameters(),
        callback=refresh if env.n_obstacles else None,
        cfg=solver_cfg,
    )
    sol.stats.wall_total += init_time
    return _finalize("decoupled", problem, sol, totals, state["field"], env)


def plan_coupled(spec: OcpSpec, env: Environment,
                 solver_cfg: SolverConfig | None = None,
                 filter_cfg: FilterConfig | None = None) -> PlanResult:
    """Baseline with plane variables inside the NLP; no inter-iteration updates.

    Plane variables start from the same initialization field as the decoupled
    path. Classifier counters are zero by construction for this method.
    """
    cfg = filter_cfg or FilterConfig()
    problem = transcribe(spec, "coupled", env)
    t0 = time.perf_counter()
    if env.n_obstacles:
        z_line = transcribe(spec, "decoupled", env).initial_guess()
        field = init_hyperplanes(problem.robot_primitives_at_knots(z_line), env, cfg)
        planes = field.pack_parameters()
    else:
        planes = np.zeros(0)
    init_time = time.perf_counter() - t0
    z0 = problem.initial_guess(planes=planes)
    sol = nlpmod.solve(problem, z0, cfg=solver_cfg)
    sol.stats.wall_total += init_time
    return _finalize("coupled", problem, sol, UpdateCounters(), None, env)
