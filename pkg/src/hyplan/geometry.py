"""Convex 2D primitives, exact pairwise distances and trajectory collision checks.

Primitives are discs, capsules and convex polytopes. Distances are signed:
negative values mean penetration and the magnitude is the penetration depth
(exact for disc/capsule against polytopes, which is all the planner needs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Disc",
    "Capsule",
    "Polytope",
    "Environment",
    "TrajectoryCheck",
    "convex_hull",
    "vertices",
    "pair_distance",
    "check_trajectory",
    "rect_polytope",
]

_EPS = 1e-12


def _as_point(p) -> np.ndarray:
    a = np.asarray(p, dtype=float)
    if a.shape != (2,):
        raise ValueError(f"expected a 2D point, got shape {a.shape}")
    return a


def convex_hull(points) -> np.ndarray:
    """Convex hull of a 2D point set in counter-clockwise order (monotone chain).

    Collinear and duplicate points are dropped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    uniq = sorted(set(map(tuple, pts)))
    if len(uniq) == 1:
        return np.array(uniq)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


@dataclass
class Disc:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = _as_point(self.center)
        self.radius = float(self.radius)
        if self.radius <= 0:
            raise ValueError("disc radius must be positive")

    @property
    def margin(self) -> float:
        return self.radius


@dataclass
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        self.p0 = _as_point(self.p0)
        self.p1 = _as_point(self.p1)
        self.radius = float(self.radius)
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")

    @property
    def margin(self) -> float:
        return self.radius


@dataclass
class Polytope:
    verts: np.ndarray

    def __post_init__(self):
        hull = convex_hull(np.asarray(self.verts, dtype=float))
        if len(hull) < 3:
            raise ValueError("polytope needs at least 3 non-collinear vertices")
        self.verts = hull

    @property
    def margin(self) -> float:
        return 0.0


Primitive = Disc | Capsule | Polytope


def rect_polytope(center, size) -> Polytope:
    """Axis-aligned rectangle given by center and full side lengths."""
    cx, cy = _as_point(center)
    w, h = float(size[0]), float(size[1])
    if w <= 0 or h <= 0:
        raise ValueError("rectangle sides must be positive")
    return Polytope(
        [
            (cx - w / 2, cy - h / 2),
            (cx + w / 2, cy - h / 2),
            (cx + w / 2, cy + h / 2),
            (cx - w / 2, cy + h / 2),
        ]
    )


def vertices(p: Primitive) -> np.ndarray:
    """Vertex set used as classification data points, shape (n, 2)."""
    if isinstance(p, Disc):
        return p.center.reshape(1, 2)
    if isinstance(p, Capsule):
        return np.stack([p.p0, p.p1])
    if isinstance(p, Polytope):
        return p.verts
    raise TypeError(f"not a primitive: {type(p).__name__}")


# ---------------------------------------------------------------------------
# distance helpers


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < _EPS:
        return float(np.linalg.norm(p - a))
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _segment_segment_distance(a0, a1, b0, b1) -> float:
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    if a < _EPS and e < _EPS:
        return float(np.linalg.norm(r))
    if a < _EPS:
        t = np.clip(f / e, 0.0, 1.0)
        s = 0.0
    else:
        c = d1 @ r
        if e < _EPS:
            t = 0.0
            s = np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > _EPS else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t = 1.0
                s = np.clip((b - c) / a, 0.0, 1.0)
    pa = a0 + s * d1
    pb = b0 + t * d2
    return float(np.linalg.norm(pa - pb))


def _poly_edges(verts):
    return zip(verts, np.roll(verts, -1, axis=0))


def _point_in_convex(p, verts) -> bool:
    nxt = np.roll(verts, -1, axis=0)
    edge = nxt - verts
    rel = p - verts
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    return bool(np.all(cross >= -_EPS))


def _signed_point_poly(p, verts) -> float:
    """Distance from point to convex polygon boundary, negative inside."""
    d = min(_point_segment_distance(p, a, b) for a, b in _poly_edges(verts))
    return -d if _point_in_convex(p, verts) else d


def _poly_halfplanes(verts):
    """Outward unit normals n_i and offsets o_i with interior n_i.x <= o_i."""
    nxt = np.roll(verts, -1, axis=0)
    edge = nxt - verts
    # CCW order: outward normal is the edge rotated clockwise
    n = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    o = np.einsum("ij,ij->i", n, verts)
    return n, o


def _signed_segment_poly(p0, p1, verts) -> float:
    """min over the segment of the signed point-to-polygon distance.

    Interior depth of a convex polygon is concave piecewise-linear along the
    segment, so its maximum lies at an endpoint or where two edge half-plane
    depths intersect; those candidates are enumerated exactly.
    """
    n, o = _poly_halfplanes(verts)
    c = o - n @ p0  # depth contribution at t=0
    d = -n @ (p1 - p0)
    cand = [0.0, 1.0]
    k = len(c)
    for i in range(k):
        for j in range(i + 1, k):
            dd = d[i] - d[j]
            if abs(dd) > _EPS:
                t = (c[j] - c[i]) / dd
                if 0.0 < t < 1.0:
                    cand.append(t)
    depth = max(np.min(c + np.multiply.outer(np.array(cand), d), axis=1))
    if depth > 0.0:
        return -float(depth)
    return min(
        _segment_segment_distance(p0, p1, a, b) for a, b in _poly_edges(verts)
    )


def _poly_poly_distance(a: Polytope, b: Polytope) -> float:
    if any(_point_in_convex(v, b.verts) for v in a.verts) or any(
        _point_in_convex(v, a.verts) for v in b.verts
    ):
        return 0.0
    d = min(
        _segment_segment_distance(e0, e1, f0, f1)
        for e0, e1 in _poly_edges(a.verts)
        for f0, f1 in _poly_edges(b.verts)
    )
    return d


def pair_distance(a: Primitive, b: Primitive) -> float:
    """Signed surface-to-surface distance between two primitives.

    Negative iff the primitives penetrate; the magnitude is the exact
    penetration depth except for polytope pairs, where overlap reports 0.
    """
    if isinstance(a, Polytope) and not isinstance(b, Polytope):
        return pair_distance(b, a)
    if isinstance(a, Disc):
        if isinstance(b, Disc):
            return float(np.linalg.norm(a.center - b.center)) - a.radius - b.radius
        if isinstance(b, Capsule):
            return (
                _point_segment_distance(a.center, b.p0, b.p1) - a.radius - b.radius
            )
        if isinstance(b, Polytope):
            return _signed_point_poly(a.center, b.verts) - a.radius
    if isinstance(a, Capsule):
        if isinstance(b, Disc):
            return pair_distance(b, a)
        if isinstance(b, Capsule):
            return (
                _segment_segment_distance(a.p0, a.p1, b.p0, b.p1)
                - a.radius
                - b.radius
            )
        if isinstance(b, Polytope):
            return _signed_segment_poly(a.p0, a.p1, b.verts) - a.radius
    if isinstance(a, Polytope) and isinstance(b, Polytope):
        return _poly_poly_distance(a, b)
    raise TypeError(
        f"unsupported primitive pair: {type(a).__name__}, {type(b).__name__}"
    )


# ---------------------------------------------------------------------------
# environments


@dataclass
class Environment:
    """Static obstacle layout inside an axis-aligned workspace box."""

    obstacles: list = field(default_factory=list)
    workspace: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 10.0, 10.0])
    )
    seed: int = 0
    obstacle_specs: list = field(default_factory=list)

    def __post_init__(self):
        self.workspace = np.asarray(self.workspace, dtype=float)
        if self.workspace.shape != (4,):
            raise ValueError("workspace must be [xmin, ymin, xmax, ymax]")
        xmin, ymin, xmax, ymax = self.workspace
        if xmin >= xmax or ymin >= ymax:
            raise ValueError("degenerate workspace box")
        for obs in self.obstacles:
            for v in vertices(obs):
                if not (
                    xmin - _EPS <= v[0] <= xmax + _EPS
                    and ymin - _EPS <= v[1] <= ymax + _EPS
                ):
                    raise ValueError("obstacle vertex outside workspace")

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    def to_dict(self) -> dict:
        if len(self.obstacle_specs) != len(self.obstacles):
            raise ValueError("environment lacks serializable obstacle specs")
        return {
            "seed": int(self.seed),
            "workspace": [float(v) for v in self.workspace],
            "obstacles": self.obstacle_specs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Environment":
        specs = data["obstacles"]
        obstacles = []
        for spec in specs:
            if spec.get("kind") != "rect":
                raise ValueError(f"unsupported obstacle kind: {spec.get('kind')!r}")
            obstacles.append(rect_polytope(spec["center"], spec["size"]))
        return cls(
            obstacles=obstacles,
            workspace=np.asarray(data["workspace"], dtype=float),
            seed=int(data["seed"]),
            obstacle_specs=[dict(s) for s in specs],
        )

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


@dataclass
class TrajectoryCheck:
    """Per-knot, per-pair collision flags for a posed trajectory."""

    mask: np.ndarray  # (knots, n_robot_prims, n_obstacles), True = closer than margin
    distances: np.ndarray

    @property
    def in_collision(self) -> bool:
        return bool(self.mask.any())

    def colliding_knots(self) -> np.ndarray:
        return np.nonzero(self.mask.any(axis=(1, 2)))[0]


def check_trajectory(robot_primitives_at_knots, env: Environment, margin: float = 0.0) -> TrajectoryCheck:
    """Check every (knot, robot primitive, obstacle) pair against a margin.

    A pair is flagged when its signed distance falls below ``margin``; the
    default margin 0 flags only actual penetration.
    """
    knots = len(robot_primitives_at_knots)
    n_r = len(robot_primitives_at_knots[0]) if knots else 0
    n_o = env.n_obstacles
    dist = np.full((knots, n_r, n_o), np.inf)
    for k, prims in enumerate(robot_primitives_at_knots):
        for j, rp in enumerate(prims):
            for l, ob in enumerate(env.obstacles):
                dist[k, j, l] = pair_distance(rp, ob)
    return TrajectoryCheck(mask=dist < margin, distances=dist)
