"""Planar convex polytopes, rigid transforms, exact distance and dual certificates.

Polytopes are stored in halfspace form ``{x : D x <= b}`` with unit-norm
rows.  The vertex list (counter-clockwise) is computed once at construction
together with the pair of facets meeting at every vertex; distances and
dual variables are then obtained in closed form from vertex/edge features.

Dual certificate convention.  For an ego body set ``C = {z : G z <= h}``
placed at pose ``(p, R)`` and an obstacle ``O = {o : D o <= b}``, a pair
``(lam, mu) >= 0`` with ``||D' lam||_2 <= 1`` and ``G' mu + R' D' lam = 0``
certifies

    dist(R C + p, O) >= lam' (D p - b) - mu' h.

The certificate for ``d_safe`` is therefore feasible when that lower bound
is at least ``d_safe``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import ConvexHull

class GeometryError(ValueError):
    """Invalid polytope, pose or dual dimensions."""


class NumericFailure(RuntimeError):
    """A closed-form solve disagreed with its own residual check."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


def normalize_angle(theta):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class ConvexPolytope:
    """Bounded planar polytope ``{x : D x <= b}`` with nonempty interior."""

    def __init__(self, normals, offsets, *, _vertices=None, _vertex_facets=None):
        D = np.array(normals, dtype=float, ndmin=2)
        b = np.array(offsets, dtype=float).reshape(-1)
        if D.shape[1] != 2 or D.shape[0] != b.size:
            raise GeometryError(f"expected (m, 2) normals and m offsets, got {D.shape} and {b.shape}")
        if not (np.all(np.isfinite(D)) and np.all(np.isfinite(b))):
            raise GeometryError("non-finite halfspace data")
        norms = np.linalg.norm(D, axis=1)
        if np.any(norms < 1e-12):
            raise GeometryError("zero facet normal")
        D = D / norms[:, None]
        b = b / norms
        D.setflags(write=False)
        b.setflags(write=False)
        self.normals = D
        self.offsets = b
        if _vertices is None:
            _vertices, _vertex_facets = self._compute_vertices()
        self._vertices = _vertices
        self._vertex_facets = _vertex_facets

    @classmethod
    def from_vertices(cls, points) -> "ConvexPolytope":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise GeometryError("need at least three 2-D points")
        try:
            hull = ConvexHull(pts)
        except Exception as exc:  # qhull raises on degenerate input
            raise GeometryError(f"degenerate vertex set: {exc}") from None
        V = pts[hull.vertices]  # counter-clockwise in 2-D
        nxt = np.roll(V, -1, axis=0)
        edge = nxt - V
        D = np.column_stack([edge[:, 1], -edge[:, 0]])
        D /= np.linalg.norm(D, axis=1)[:, None]
        b = np.einsum("ij,ij->i", D, V)
        # vertex i sits between facet i-1 (incoming edge) and facet i
        k = len(V)
        facets = np.column_stack([(np.arange(k) - 1) % k, np.arange(k)])
        return cls(D, b, _vertices=V, _vertex_facets=facets)

    def _compute_vertices(self):
        D, b = self.normals, self.offsets
        angles = np.sort(np.arctan2(D[:, 1], D[:, 0]))
        gaps = np.diff(np.concatenate([angles, angles[:1] + 2 * np.pi]))
        if D.shape[0] < 3 or np.max(gaps) >= np.pi - 1e-12:
            raise GeometryError("polytope is unbounded")
        m = D.shape[0]
        i, j = np.triu_indices(m, k=1)
        det = D[i, 0] * D[j, 1] - D[i, 1] * D[j, 0]
        ok = np.abs(det) > 1e-12
        i, j, det = i[ok], j[ok], det[ok]
        px = (b[i] * D[j, 1] - D[i, 1] * b[j]) / det
        py = (D[i, 0] * b[j] - b[i] * D[j, 0]) / det
        P = np.column_stack([px, py])
        scale = 1.0 + np.max(np.abs(b))
        feas = np.all(P @ D.T <= b + 1e-9 * scale, axis=1)
        P, i, j = P[feas], i[feas], j[feas]
        if P.shape[0] < 3:
            raise GeometryError("polytope is empty or degenerate")
        center = P.mean(axis=0)
        order = np.argsort(np.arctan2(P[:, 1] - center[1], P[:, 0] - center[0]))
        P, i, j = P[order], i[order], j[order]
        keep = np.ones(len(P), dtype=bool)
        for k in range(1, len(P)):
            if np.linalg.norm(P[k] - P[np.flatnonzero(keep[:k])[-1]]) < 1e-10 * scale:
                keep[k] = False
        if len(P) > 1 and keep.sum() > 1 and np.linalg.norm(P[0] - P[np.flatnonzero(keep)[-1]]) < 1e-10 * scale:
            keep[np.flatnonzero(keep)[-1]] = False
        P, i, j = P[keep], i[keep], j[keep]
        x, y = P[:, 0], P[:, 1]
        area = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        if P.shape[0] < 3 or area < 1e-14 * scale ** 2:
            raise GeometryError("polytope has empty interior")
        return P, np.column_stack([i, j])

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @cached_property
    def radius(self) -> float:
        """Radius of the vertex-centroid circle enclosing the polytope."""
        return float(np.max(np.linalg.norm(self._vertices - self.center, axis=1)))

    @cached_property
    def center(self) -> np.ndarray:
        return self._vertices.mean(axis=0)

    def contains(self, point, tol: float = 0.0) -> bool:
        return bool(np.all(self.normals @ np.asarray(point, dtype=float) <= self.offsets + tol))

    def support(self, direction) -> tuple[float, int]:
        """Return ``max_x d'x`` and the index of a maximizing vertex."""
        vals = self._vertices @ np.asarray(direction, dtype=float)
        k = int(np.argmax(vals))
        return float(vals[k]), k

    def translated(self, shift) -> "ConvexPolytope":
        shift = np.asarray(shift, dtype=float)
        return ConvexPolytope(self.normals, self.offsets + self.normals @ shift,
                              _vertices=self._vertices + shift, _vertex_facets=self._vertex_facets)

    def to_records(self) -> list[list[float]]:
        return [[float(n[0]), float(n[1]), float(c)] for n, c in zip(self.normals, self.offsets)]

    @classmethod
    def from_records(cls, records) -> "ConvexPolytope":
        arr = np.asarray(records, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise GeometryError("records must be (normal_x, normal_y, offset) triples")
        return cls(arr[:, :2], arr[:, 2])

    def __repr__(self):
        return f"ConvexPolytope(m={len(self.offsets)}, vertices={np.round(self._vertices, 4).tolist()})"


@dataclass(frozen=True)
class RigidPose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rotation(self.theta)


@dataclass(frozen=True)
class DualVariables:
    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float).reshape(-1)
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        if np.any(lam < 0) or np.any(mu < 0):
            raise GeometryError("dual variables must be nonnegative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def zeros(cls, n_obstacle_facets: int, n_ego_facets: int) -> "DualVariables":
        return cls(np.zeros(n_obstacle_facets), np.zeros(n_ego_facets))


def rectangle_polytope(length: float, width: float) -> ConvexPolytope:
    """Axis-aligned box of the given size centred at the origin."""
    if not (length > 0 and width > 0):
        raise GeometryError(f"rectangle dimensions must be positive, got {length} x {width}")
    hl, hw = 0.5 * length, 0.5 * width
    return ConvexPolytope.from_vertices([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])


def point_polytope(point, side: float = 1e-6) -> ConvexPolytope:
    """Tiny box standing in for a point obstacle."""
    return rectangle_polytope(side, side).translated(point)


def transform_to_world(body: ConvexPolytope, pose: RigidPose2) -> ConvexPolytope:
    """Image of a body-frame polytope under ``x = R(theta) z + p``."""
    R = pose.rotation
    p = pose.position
    D = body.normals @ R.T
    b = body.offsets + D @ p
    return ConvexPolytope(D, b, _vertices=body.vertices @ R.T + p, _vertex_facets=body._vertex_facets)


def transform_poses(body: ConvexPolytope, poses) -> list[ConvexPolytope]:
    """:func:`transform_to_world` for a ``(K, 3)`` array of poses at once."""
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    theta = normalize_angle(poses[:, 2])
    c, s = np.cos(theta), np.sin(theta)
    Rt = np.empty((len(poses), 2, 2))
    Rt[:, 0, 0], Rt[:, 0, 1], Rt[:, 1, 0], Rt[:, 1, 1] = c, s, -s, c
    p = poses[:, :2]
    D = body.normals @ Rt
    b = body.offsets + np.einsum("kmi,ki->km", D, p)
    V = body.vertices @ Rt + p[:, None, :]
    norms = np.linalg.norm(D, axis=2)
    if np.any(norms < 1e-12) or not (np.all(np.isfinite(D)) and np.all(np.isfinite(b))):
        raise GeometryError("invalid pose batch")
    D = D / norms[..., None]
    b = b / norms
    D.setflags(write=False)
    b.setflags(write=False)
    out = []
    for k in range(len(poses)):
        poly = object.__new__(ConvexPolytope)
        poly.normals, poly.offsets = D[k], b[k]
        poly._vertices, poly._vertex_facets = V[k], body._vertex_facets
        out.append(poly)
    return out


def stack_polytopes(polys):
    """Stack polytopes sharing vertex and facet counts into batch arrays."""
    V = np.stack([p.vertices for p in polys])
    N = np.stack([p.normals for p in polys])
    b = np.stack([p.offsets for p in polys])
    F = np.stack([p._vertex_facets for p in polys])
    return V, N, b, F


def _segment_distances(P, A, B):
    """Point-to-segment distances, batched.

    ``P`` is ``(K, p, 2)``, segments ``A[k, j] -> B[k, j]`` are ``(K, s, 2)``.
    Returns distances and segment parameters of shape ``(K, p, s)``.
    """
    AB = B - A
    AP = P[:, :, None, :] - A[:, None, :, :]
    denom = np.maximum(np.einsum("ksi,ksi->ks", AB, AB), 1e-300)
    t = np.clip(np.einsum("kpsi,ksi->kps", AP, AB) / denom[:, None, :], 0.0, 1.0)
    diff = AP - t[..., None] * AB[:, None, :, :]
    return np.sqrt(np.einsum("kpsi,kpsi->kps", diff, diff)), t


def batch_separation(Va, Na, ba, Vb, Nb, bb):
    """Signed separation of sets ``a[k]`` from ``b[k]`` for a batch of pairs.

    Returns ``(value, n)`` with shapes ``(K,)`` and ``(K, 2)`` where ``n`` is a
    unit vector satisfying ``min_{x in a} n'x - max_{o in b} n'o == value``.
    ``value`` is the distance for disjoint pairs and minus the minimum
    translation distance for overlapping ones.
    """
    K = Va.shape[0]
    rows = np.arange(K)
    # separating-axis test over all facet normals
    gap_b = np.min(np.einsum("kpi,kmi->kpm", Va, Nb), axis=1) - bb   # a pushed along b's normals
    gap_a = np.min(np.einsum("kpi,kmi->kpm", Vb, Na), axis=1) - ba   # b pushed along a's normals
    ib = np.argmax(gap_b, axis=1)
    ia = np.argmax(gap_a, axis=1)
    gb = gap_b[rows, ib]
    ga = gap_a[rows, ia]
    use_b = gb >= ga
    value = np.where(use_b, gb, ga)
    n = np.where(use_b[:, None], Nb[rows, ib], -Na[rows, ia])
    disjoint = value > 0.0
    if np.any(disjoint):
        k = np.flatnonzero(disjoint)
        va, vb = Va[k], Vb[k]
        da, ta = _segment_distances(va, vb, np.roll(vb, -1, axis=1))
        db, tb = _segment_distances(vb, va, np.roll(va, -1, axis=1))
        r = np.arange(len(k))
        fa = da.reshape(len(k), -1).argmin(axis=1)
        fb = db.reshape(len(k), -1).argmin(axis=1)
        pa, sa = np.unravel_index(fa, da.shape[1:])
        pb, sb = np.unravel_index(fb, db.shape[1:])
        dist_a = da[r, pa, sa]
        dist_b = db[r, pb, sb]
        sb_next = (sa + 1) % vb.shape[1]
        sa_next = (sb + 1) % va.shape[1]
        # vertex of a against an edge of b, or vertex of b against an edge of a
        x_a = va[r, pa]
        o_a = vb[r, sa] + ta[r, pa, sa][:, None] * (vb[r, sb_next] - vb[r, sa])
        o_b = vb[r, pb]
        x_b = va[r, sb] + tb[r, pb, sb][:, None] * (va[r, sa_next] - va[r, sb])
        first = dist_a <= dist_b
        dist = np.where(first, dist_a, dist_b)
        x = np.where(first[:, None], x_a, x_b)
        o = np.where(first[:, None], o_a, o_b)
        value[k] = dist
        n[k] = (x - o) / dist[:, None]
    return value, n


def separation(a: ConvexPolytope, b: ConvexPolytope):
    """Signed separation of ``a`` from ``b``; see :func:`batch_separation`."""
    value, n = batch_separation(a.vertices[None], a.normals[None], a.offsets[None],
                                b.vertices[None], b.normals[None], b.offsets[None])
    return float(value[0]), n[0]


def min_distance(a: ConvexPolytope, b: ConvexPolytope) -> float:
    """Euclidean distance between two polytopes (0 when they intersect)."""
    if not isinstance(a, ConvexPolytope) or not isinstance(b, ConvexPolytope):
        raise GeometryError("min_distance expects ConvexPolytope arguments")
    return max(separation(a, b)[0], 0.0)


def _batch_facet_weights(V, N, b, F, d):
    """Nonnegative ``w[k]`` with ``N[k]' w[k] = d[k]`` supported on the facets
    active at the support vertex in direction ``d[k]``, so ``w[k]' b[k]``
    equals the support value."""
    K, m = b.shape
    rows = np.arange(K)
    kv = np.argmax(np.einsum("kpi,ki->kp", V, d), axis=1)
    pair = F[rows, kv]                                   # (K, 2)
    M0 = N[rows, pair[:, 0]]
    M1 = N[rows, pair[:, 1]]
    det = M0[:, 0] * M1[:, 1] - M0[:, 1] * M1[:, 0]
    w0 = (M1[:, 1] * d[:, 0] - M1[:, 0] * d[:, 1]) / det
    w1 = (-M0[:, 1] * d[:, 0] + M0[:, 0] * d[:, 1]) / det
    W = np.zeros((K, m))
    W[rows, pair[:, 0]] = np.maximum(w0, 0.0)
    W[rows, pair[:, 1]] += np.maximum(w1, 0.0)
    vert = V[rows, kv]
    slack = np.abs(np.einsum("kmi,ki->km", N, vert) - b)
    n_active = np.sum(slack <= 1e-8 * (1 + np.abs(b)), axis=1)
    bad = (w0 < -1e-9) | (w1 < -1e-9) | (n_active > 2)
    for k in np.flatnonzero(bad):
        active = np.flatnonzero(slack[k] <= 1e-8 * (1 + np.abs(b[k])))
        sol, _ = nnls(N[k, active].T, d[k])
        W[k] = 0.0
        W[k, active] = sol
    return W


def batch_max_margin_duals(ego_body: ConvexPolytope, poses, obstacles):
    """Max-margin duals for one ego footprint against a batch of obstacles.

    ``poses`` is ``(K, 3)`` (x, y, theta); ``obstacles`` is a sequence of K
    polytopes with a common facet count, or the tuple returned by
    :func:`stack_polytopes` for them.  Returns ``(lam, mu, margin)`` of
    shapes ``(K, m_obs)``, ``(K, m_ego)``, ``(K,)``.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    K = poses.shape[0]
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    R = np.empty((K, 2, 2))
    R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1] = c, -s, s, c
    p = poses[:, :2]
    G, h, Vc = ego_body.normals, ego_body.offsets, ego_body.vertices
    Vw = np.einsum("kij,pj->kpi", R, Vc) + p[:, None, :]
    Nw = np.einsum("mj,kij->kmi", G, R)                  # rows of G R'
    bw = h[None, :] + np.einsum("kmi,ki->km", Nw, p)
    Vo, No, bo, Fo = obstacles if isinstance(obstacles, tuple) else stack_polytopes(obstacles)
    margin, n = batch_separation(Vw, Nw, bw, Vo, No, bo)
    lam = _batch_facet_weights(Vo, No, bo, Fo, n)
    w = -np.einsum("kji,kj->ki", R, n)                   # -R' n
    Fe = np.broadcast_to(ego_body._vertex_facets, (K,) + ego_body._vertex_facets.shape)
    mu = _batch_facet_weights(np.broadcast_to(Vc, (K,) + Vc.shape), np.broadcast_to(G, (K,) + G.shape),
                              np.broadcast_to(h, (K,) + h.shape), Fe, w)
    value = np.einsum("km,km->k", lam, np.einsum("kmi,ki->km", No, p) - bo) - mu @ h
    err = np.abs(value - margin)
    if np.any(err > 1e-7 * (1.0 + np.abs(margin))):
        raise NumericFailure("dual certificate disagrees with distance", residual=float(err.max()))
    return lam, mu, margin


def max_margin_duals(ego_body: ConvexPolytope, pose: RigidPose2, obstacle: ConvexPolytope):
    """Dual variables maximizing the certified clearance.

    Returns ``(duals, margin)``.  For disjoint sets the margin is the exact
    distance and the duals are optimal for the (convex) dual problem.  For
    overlapping sets the duals are normalized to ``||D' lam|| = 1`` and the
    margin is the negative penetration depth, which keeps a useful
    separating direction available to the motion update.
    """
    lam, mu, margin = batch_max_margin_duals(ego_body, [[pose.x, pose.y, pose.theta]], [obstacle])
    return DualVariables(lam[0], mu[0]), float(margin[0])


def _check_dims(ego_body, obstacle, duals):
    if duals.lam.size != len(obstacle.offsets) or duals.mu.size != len(ego_body.offsets):
        raise GeometryError(
            f"dual sizes ({duals.lam.size}, {duals.mu.size}) do not match facets "
            f"({len(obstacle.offsets)}, {len(ego_body.offsets)})")


def certificate_value(ego_body, pose, obstacle, duals) -> float:
    """The certified lower bound ``lam'(D p - b) - mu' h``."""
    _check_dims(ego_body, obstacle, duals)
    return float(duals.lam @ (obstacle.normals @ pose.position - obstacle.offsets) - duals.mu @ ego_body.offsets)


def certificate_rows(ego_body, pose, obstacle, duals, d_safe):
    """Left-hand sides of the stacked conditions (all must be <= 0, last one == 0).

    Returns ``(ineq, eq)``: ``ineq`` concatenates ``-lam``, ``-mu``,
    ``d_safe - clearance`` and ``||D' lam|| - 1``; ``eq`` is
    ``G' mu + R' D' lam``.
    """
    _check_dims(ego_body, obstacle, duals)
    Dl = obstacle.normals.T @ duals.lam
    ineq = np.concatenate([
        -duals.lam,
        -duals.mu,
        [d_safe - certificate_value(ego_body, pose, obstacle, duals)],
        [np.linalg.norm(Dl) - 1.0],
    ])
    eq = ego_body.normals.T @ duals.mu + pose.rotation.T @ Dl
    return ineq, eq


def certificate_residual(ego_body, pose, obstacle, duals, d_safe) -> float:
    """Largest violation among the certificate conditions (0 when satisfied)."""
    ineq, eq = certificate_rows(ego_body, pose, obstacle, duals, d_safe)
    return float(max(np.max(np.maximum(ineq, 0.0)), np.max(np.abs(eq))))


def dual_certificate_feasible(ego_body, pose, obstacle, duals, d_safe, tol=1e-9) -> bool:
    if tol < 0:
        raise GeometryError("tolerance must be nonnegative")
    ineq, eq = certificate_rows(ego_body, pose, obstacle, duals, d_safe)
    return bool(np.all(ineq <= tol) and np.all(np.abs(eq) <= tol))
