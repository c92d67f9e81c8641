"""Separating hyperplanes between labeled vertex sets.

Two solve paths: a least-squares classifier that reduces to one dense linear
system (solvable even for touching or overlapping classes), and a hard-margin
max-margin classifier posed as a small QP on the dual. Planes are normalized
to unit normals with the robot class on the positive side, then shifted along
the normal onto the closest obstacle vertex so that the obstacle-side
constraint can be dropped from the downstream optimal control problem.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .nlp import solve_dense_qp

__all__ = [
    "NotSeparableError",
    "LabeledPointSet",
    "Hyperplane",
    "LsSvmSolution",
    "QpSvmSolution",
    "solve_ls_svm",
    "solve_qp_svm",
    "qp_svm_solution",
    "normalize",
    "orient_toward",
    "shift_offset",
    "inter_normal_angle",
    "ls_plane",
    "qp_plane",
]

ROBOT_LABEL = 1.0
OBSTACLE_LABEL = -1.0


class NotSeparableError(Exception):
    """The two classes admit no strictly separating hyperplane."""


@dataclass
class LabeledPointSet:
    """Classification data: 2D points with labels +1 (robot) / -1 (obstacle)."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels must have equal length")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be exactly +1 or -1")
        if not ((self.labels > 0).any() and (self.labels < 0).any()):
            raise ValueError("need at least one point per class")

    @classmethod
    def from_classes(cls, robot_points, obstacle_points) -> "LabeledPointSet":
        robot = np.asarray(robot_points, dtype=float).reshape(-1, 2)
        obs = np.asarray(obstacle_points, dtype=float).reshape(-1, 2)
        pts = np.vstack([robot, obs])
        labels = np.concatenate(
            [np.full(len(robot), ROBOT_LABEL), np.full(len(obs), OBSTACLE_LABEL)]
        )
        return cls(pts, labels)

    @property
    def n(self) -> int:
        return len(self.labels)

    def robot_points(self) -> np.ndarray:
        return self.points[self.labels > 0]

    def obstacle_points(self) -> np.ndarray:
        return self.points[self.labels < 0]


@dataclass
class Hyperplane:
    """Unit-normal plane  normal . y + offset = 0  with the robot side positive."""

    normal: np.ndarray
    offset: float
    source: str = "ls"  # "ls" | "qp" | "carried"

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float).reshape(2)
        self.offset = float(self.offset)

    def value(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.normal + self.offset


@dataclass
class LsSvmSolution:
    """Raw solution of the least-squares classifier's dual linear system."""

    w: np.ndarray       # sum_k label_k alpha_k y_k, before normalization
    w_b: float
    alpha: np.ndarray
    tau: float


@dataclass
class QpSvmSolution:
    w: np.ndarray       # raw max-margin normal (margin = 1/||w||)
    w_b: float
    alpha: np.ndarray
    support: list


def solve_ls_svm(data: LabeledPointSet, tau: float) -> LsSvmSolution:
    """Least-squares classifier via the Schur complement of its dual system.

    The (n+1) x (n+1) system has kernel block Z Z' + I/tau with Z the
    label-weighted data matrix; eliminating the offset row leaves one
    Cholesky factorization of that block. tau may be math.inf, but the block
    can then be singular for degenerate data.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    labels = data.labels
    Z = labels[:, None] * data.points
    K = Z @ Z.T
    if np.isfinite(tau):
        K = K + np.eye(data.n) / tau
    try:
        cho = sla.cho_factor(K, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "singular kernel block; use a finite regularization tau"
        ) from exc
    u1 = sla.cho_solve(cho, np.ones(data.n), check_finite=False)
    ug = sla.cho_solve(cho, labels, check_finite=False)
    denom = float(labels @ ug)
    if abs(denom) < 1e-300:
        raise np.linalg.LinAlgError(
            "singular Schur complement; use a finite regularization tau"
        )
    w_b = float(labels @ u1) / denom
    alpha = u1 - w_b * ug
    w = Z.T @ alpha
    return LsSvmSolution(w=w, w_b=w_b, alpha=alpha, tau=tau)


def _support_kkt(points, labels, support):
    """Exact stationarity system on a support-vector hypothesis.

    Unknowns (w, w_b, alpha_S); enforces w = sum alpha_k label_k y_k,
    sum alpha_k label_k = 0 and unit functional margin on the support set.
    """
    S = list(support)
    k = len(S)
    ys = points[S]
    ls = labels[S]
    A = np.zeros((3 + k, 3 + k))
    A[:2, :2] = np.eye(2)
    A[:2, 3:] = -(ls[:, None] * ys).T
    A[2, 3:] = -ls
    A[3:, :2] = ls[:, None] * ys
    A[3:, 2] = ls
    rhs = np.zeros(3 + k)
    rhs[3:] = 1.0
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    if not np.all(np.isfinite(sol)) or np.abs(A @ sol - rhs).max() > 1e-9:
        return None
    w = sol[:2]
    w_b = float(sol[2])
    alpha = sol[3:]
    return w, w_b, alpha


def _margins(points, labels, w, w_b):
    return labels * (points @ w + w_b)


def qp_svm_solution(data: LabeledPointSet, kkt_tol: float = 1e-9) -> QpSvmSolution:
    """Hard-margin classifier: min 1/2 w'w s.t. label_k (w.y_k + w_b) >= 1.

    Solved on the dual (box-free, one equality sum alpha_k label_k = 0) with
    the dense active-set QP solver, then polished by an exact stationarity
    solve on the identified support set. Raises NotSeparableError when no
    strictly separating plane exists.
    """
    pts, labels = data.points, data.labels
    n = data.n
    Z = labels[:, None] * pts
    Q = Z @ Z.T
    ridge = 1e-9 * max(1.0, float(np.trace(Q)) / n)
    support = None
    try:
        qp = solve_dense_qp(
            Q + ridge * np.eye(n),
            -np.ones(n),
            labels[None, :],
            np.zeros(1),
            np.eye(n),
            np.zeros(n),
        )
        support = [i for i in range(n) if i not in qp.active]
    except Exception:
        support = None

    if support:
        polished = _support_kkt(pts, labels, support)
        if polished is not None:
            w, w_b, alpha_s = polished
            if (
                np.all(alpha_s >= -kkt_tol)
                and np.all(_margins(pts, labels, w, w_b) >= 1.0 - kkt_tol)
            ):
                alpha = np.zeros(n)
                alpha[support] = np.maximum(alpha_s, 0.0)
                return QpSvmSolution(w=w, w_b=w_b, alpha=alpha, support=support)

    # exhaustive fallback: in the plane an optimal support set has <= 3 points
    best = None
    idx_pos = np.nonzero(labels > 0)[0]
    idx_neg = np.nonzero(labels < 0)[0]
    combos = itertools.chain(
        itertools.product(idx_pos, idx_neg),
        (c for c in itertools.combinations(range(n), 3)
         if len({labels[i] for i in c}) == 2),
    )
    for combo in combos:
        polished = _support_kkt(pts, labels, list(combo))
        if polished is None:
            continue
        w, w_b, alpha_s = polished
        if np.any(alpha_s < -kkt_tol):
            continue
        if np.any(_margins(pts, labels, w, w_b) < 1.0 - kkt_tol):
            continue
        val = float(w @ w)
        if best is None or val < best[0]:
            best = (val, w, w_b, list(combo), alpha_s)
    if best is None:
        raise NotSeparableError("point classes are not strictly separable")
    _, w, w_b, support, alpha_s = best
    alpha = np.zeros(n)
    alpha[support] = np.maximum(alpha_s, 0.0)
    return QpSvmSolution(w=w, w_b=w_b, alpha=alpha, support=support)


def solve_qp_svm(data: LabeledPointSet) -> Hyperplane:
    """Normalized max-margin plane; see qp_svm_solution for the raw output."""
    sol = qp_svm_solution(data)
    return normalize(sol.w, sol.w_b, source="qp")


def normalize(raw_w, raw_b, source: str = "ls") -> Hyperplane:
    """Scale a plane to a unit normal, preserving orientation."""
    w = np.asarray(raw_w, dtype=float).reshape(2)
    norm = float(np.linalg.norm(w))
    if norm <= 1e-12:
        raise ValueError("degenerate classifier: near-zero normal")
    return Hyperplane(normal=w / norm, offset=float(raw_b) / norm, source=source)


def orient_toward(h: Hyperplane, robot_points) -> Hyperplane:
    """Flip the plane if the mean robot point is not on the positive side."""
    pts = np.asarray(robot_points, dtype=float).reshape(-1, 2)
    if float(np.mean(h.value(pts))) < 0.0:
        return Hyperplane(normal=-h.normal, offset=-h.offset, source=h.source)
    return h


def shift_offset(h: Hyperplane, obstacle_vertices) -> Hyperplane:
    """Move the plane along its normal onto the closest obstacle vertex.

    With the robot side positive, the closest vertex maximizes normal . v;
    afterwards every obstacle vertex satisfies normal . v + offset <= 0.
    """
    verts = np.asarray(obstacle_vertices, dtype=float).reshape(-1, 2)
    if len(verts) == 0:
        raise ValueError("need at least one obstacle vertex")
    v_c = verts[int(np.argmax(verts @ h.normal))]
    return Hyperplane(normal=h.normal, offset=-float(h.normal @ v_c), source=h.source)


def inter_normal_angle(w_a, w_b) -> float:
    """Angle between two unit normals, in degrees within [0, 180]."""
    dot = float(np.clip(np.dot(w_a, w_b), -1.0, 1.0))
    return float(np.degrees(np.arccos(dot)))


def ls_plane(robot_points, obstacle_points, tau: float) -> tuple[Hyperplane, LsSvmSolution]:
    """Normalized, robot-positive plane from the least-squares path."""
    data = LabeledPointSet.from_classes(robot_points, obstacle_points)
    sol = solve_ls_svm(data, tau)
    h = orient_toward(normalize(sol.w, sol.w_b, source="ls"), data.robot_points())
    return h, sol


def qp_plane(robot_points, obstacle_points) -> Hyperplane:
    """Normalized, robot-positive plane from the max-margin path."""
    data = LabeledPointSet.from_classes(robot_points, obstacle_points)
    return orient_toward(solve_qp_svm(data), data.robot_points())
