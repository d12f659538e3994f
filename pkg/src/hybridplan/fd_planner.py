"""Fast-driving mode: lateral path samples, tracking MPC, and one-hot path selection.

Obstacles are treated as points (their centres).  Each candidate path is a
lateral offset of the reference window; all candidates are tracked by the
same condensed QP (they share the linearization, so one factorization serves
the whole batch) and the selection variables are enumerated leaf by leaf.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .qp import IPMSettings, QPError, solve_qp_ipm
from .reference import ReferenceSlice, Track
from .vehicle import ActionBounds, VehicleParams, condense, jacobians, project_inputs

TIE_TOL = 1e-9


class PlannerError(RuntimeError):
    """Numeric failure inside a planner; carries the last valid plan if any."""

    def __init__(self, message, last_plan=None):
        super().__init__(message)
        self.last_plan = last_plan


@dataclass
class PlanResult:
    states: np.ndarray            # (H+1, 3)
    inputs: np.ndarray            # (H, 2)
    feasible: bool
    cost: float
    mode: str                     # "fd" | "sa"
    selected: int | None = None
    offset: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FdConfig:
    M: int = 3
    H: int = 10
    eps: float = 0.3
    d_safe: float = 4.0
    offsets: tuple = (-3.5, 0.0, 3.5)
    state_weights: tuple = (1.0, 1.0, 1.0)
    speed_weight: float = 1.0
    steer_weight: float = 1e-3

    def __post_init__(self):
        if self.M < 1 or self.M > len(self.offsets):
            raise ValueError(f"M={self.M} must be between 1 and the offset grid size {len(self.offsets)}")
        if not (self.eps > 0 and self.d_safe > 0 and self.H >= 1):
            raise ValueError("eps, d_safe and H must be positive")
        if 0.0 not in self.offsets:
            raise ValueError("the offset grid must contain 0")


@dataclass(frozen=True)
class CandidatePath:
    id: int
    waypoints: np.ndarray        # (H+1, 3)
    speeds: np.ndarray           # (H+1,)
    offset: float


@dataclass
class CandidateRollout:
    path: CandidatePath
    states: np.ndarray           # (H+1, 3)
    inputs: np.ndarray           # (H, 2)
    tracking_cost: float
    adherent: bool               # max_h ||s_h - w_h|| <= eps


def _select_offsets(config: FdConfig) -> list[float]:
    grid = list(config.offsets)
    chosen = sorted(range(len(grid)), key=lambda i: (abs(grid[i]), i))[: config.M]
    return sorted(grid[i] for i in chosen)


def sample_paths(reference: ReferenceSlice, track: Track | None, config: FdConfig,
                 vehicle_width: float = 2.0) -> list[CandidatePath]:
    """Laterally offset copies of the reference window.

    Offsets are clipped so the vehicle stays inside the track; duplicates
    created by clipping are dropped (the zero offset always survives).
    """
    ref = reference.states
    offsets = _select_offsets(config)
    if track is not None:
        _, lat0 = track.project(ref[0, :2])
        limit = track.half_width - 0.5 * vehicle_width
        if limit <= 0:
            offsets = [0.0]
        else:
            offsets = [float(np.clip(o, -limit - lat0, limit - lat0)) if o else 0.0 for o in offsets]
    uniq = []
    for o in offsets:
        if all(abs(o - u) > 1e-6 for u in uniq):
            uniq.append(o)
    normal = np.column_stack([-np.sin(ref[:, 2]), np.cos(ref[:, 2])])
    out = []
    for m, off in enumerate(uniq):
        if off == 0.0:
            wp = ref.copy()
        else:
            xy = ref[:, :2] + off * normal
            d = np.gradient(xy, axis=0) if len(xy) > 1 else np.zeros_like(xy)
            heading = np.where(np.linalg.norm(d, axis=1) > 1e-6, np.arctan2(d[:, 1], d[:, 0]), ref[:, 2])
            # keep the reference branch of the heading
            heading = ref[:, 2] + np.mod(heading - ref[:, 2] + np.pi, 2 * np.pi) - np.pi
            wp = np.column_stack([xy, heading])
        out.append(CandidatePath(m, wp, reference.speeds.copy(), off))
    return out


class TrackingQP:
    """Condensed tracking MPC over ``H`` steps.

    Minimizes ``sum_h ||s_h - w_h||_W^2 + w_v (v_h - v_ref_h)^2 + w_psi psi_h^2``
    under the linearized kinematics and the input box/rate bounds, optionally
    with extra affine rows supplied by the caller.
    """

    def __init__(self, s0, lin_states, lin_inputs, params: VehicleParams, bounds: ActionBounds,
                 state_weights=(1.0, 1.0, 1.0), speed_weight=1.0, steer_weight=1e-3):
        self.H = H = len(lin_inputs)
        A, B, c = jacobians(lin_states[:H], lin_inputs, params)
        self.F, self.g = condense(A, B, c, s0)
        self.W = np.tile(np.asarray(state_weights, dtype=float), H)
        self.wu = np.tile([speed_weight, steer_weight], H)
        self.bounds = bounds
        self.P = 2.0 * (self.F.T @ (self.W[:, None] * self.F) + np.diag(self.wu))

    def linear_cost(self, targets, speed_refs):
        """``q`` rows for targets ``(k, H, 3)`` (states 1..H) and speeds ``(k, H)``."""
        T = np.asarray(targets, dtype=float).reshape(-1, 3 * self.H)
        V = np.asarray(speed_refs, dtype=float).reshape(T.shape[0], self.H)
        uref = np.zeros((T.shape[0], 2 * self.H))
        uref[:, 0::2] = V
        return 2.0 * ((self.g[None, :] - T) * self.W) @ self.F - 2.0 * self.wu * uref

    def bound_rows(self, u_prev=None):
        H = self.H
        n = 2 * H
        I = np.eye(n)
        Dm = np.eye(n) - np.eye(n, k=-2)
        lo_box = np.tile(self.bounds.u_min, H)
        hi_box = np.tile(self.bounds.u_max, H)
        lo_rate = np.tile(self.bounds.a_min, H).astype(float)
        hi_rate = np.tile(self.bounds.a_max, H).astype(float)
        if u_prev is None:
            lo_rate[:2], hi_rate[:2] = -np.inf, np.inf
        else:
            lo_rate[:2] += u_prev
            hi_rate[:2] += u_prev
        return np.vstack([I, Dm]), np.concatenate([lo_box, lo_rate]), np.concatenate([hi_box, hi_rate])

    def states(self, u):
        """Linear rollout ``(k, H+1, 3)`` including the initial state."""
        U = np.atleast_2d(u)
        S = U @ self.F.T + self.g
        return S.reshape(U.shape[0], self.H, 3)

    def cost(self, states, inputs, targets, speed_refs):
        """Tracking cost for explicit trajectories (states 1..H, inputs 0..H-1)."""
        ds = (np.asarray(states) - np.asarray(targets)).reshape(-1)
        du = np.asarray(inputs).reshape(-1).copy()
        du[0::2] -= np.asarray(speed_refs).reshape(-1)
        return float(np.sum(self.W * ds ** 2) + np.sum(self.wu * du ** 2))


def reference_inputs(reference: ReferenceSlice, params: VehicleParams, bounds: ActionBounds, H: int):
    """Feed-forward inputs along a reference window: speed and curvature steering."""
    v = reference.speeds[:H]
    psi = np.arctan(params.wheelbase * reference.curvature[:H])
    u = np.column_stack([v, psi])
    return np.clip(u, bounds.u_min, bounds.u_max)


def track_candidates(paths, s_t, u_prev, reference: ReferenceSlice, bounds: ActionBounds, params: VehicleParams,
                     config: FdConfig, qp_settings: IPMSettings | None = None) -> list[CandidateRollout]:
    """Track every candidate path with the same linearized MPC.

    The linearization is taken along the reference window; lateral offsets
    do not change headings, speeds or steering, so ``A, B, c`` are shared.
    """
    H = config.H
    lin_inputs = reference_inputs(reference, params, bounds, H)
    mpc = TrackingQP(s_t, reference.states, lin_inputs, params, bounds,
                     config.state_weights, config.speed_weight, config.steer_weight)
    Arows, lo, hi = mpc.bound_rows(u_prev)
    targets = np.stack([p.waypoints[1:] for p in paths])
    speeds = np.stack([p.speeds[:H] for p in paths])
    # one batched solve: the candidates differ only in their linear cost
    try:
        sol = solve_qp_ipm(mpc.P, mpc.linear_cost(targets, speeds), Arows, lo, hi, qp_settings)
    except QPError as exc:
        raise PlannerError(f"tracking QP failed: {exc}") from exc
    if not np.all(np.isfinite(sol.x)):
        raise PlannerError("tracking QP returned non-finite inputs")
    out = []
    X = np.atleast_2d(sol.x)
    for m, path in enumerate(paths):
        u = project_inputs(X[m].reshape(H, 2), bounds, u_prev)
        S = mpc.states(u.reshape(-1))[0]
        states = np.vstack([np.asarray(s_t, dtype=float)[None, :], S])
        cost = mpc.cost(S, u, path.waypoints[1:], path.speeds[:H])
        dev = np.max(np.linalg.norm(states[:, :2] - path.waypoints[:, :2], axis=1))
        out.append(CandidateRollout(path, states, u, cost, bool(dev <= config.eps)))
    return out


def track_candidate(path: CandidatePath, s_t, u_prev, reference: ReferenceSlice, bounds: ActionBounds,
                    params: VehicleParams, config: FdConfig) -> CandidateRollout:
    return track_candidates([path], s_t, u_prev, reference, bounds, params, config)[0]


def min_clearance(path_states, obstacles) -> float:
    """Smallest centre distance between the path and the point predictions."""
    obs = np.asarray(obstacles, dtype=float)
    if obs.size == 0:
        return np.inf
    xy = np.asarray(path_states)[:, :2]
    return float(np.min(np.linalg.norm(obs[..., :2] - xy[None, :, :], axis=-1)))


def clearance(path_states, obstacles, d_safe: float) -> bool:
    """True iff every point prediction stays at least ``d_safe`` from the path."""
    return min_clearance(path_states, obstacles) >= d_safe


def deviation_cost(states, reference: ReferenceSlice) -> float:
    return float(np.sum((np.asarray(states) - reference.states) ** 2))


def tree_search_select(candidates: list[CandidateRollout], obstacles, reference: ReferenceSlice,
                       d_safe: float) -> PlanResult:
    """Enumerate the one-hot selections and keep the cheapest collision-free one.

    Each leaf fixes ``alpha = e_m``; the combined motion is ``sum alpha_m s^(m)``.
    Leaves failing the clearance test are pruned; the survivors form the
    feasible set and the member closest to the reference wins, ties going to
    the smaller ``|offset|`` and then the lower id.  With no survivor the
    result is flagged infeasible and carries the leaf with most clearance.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    M = len(candidates)
    S = np.stack([c.states for c in candidates])
    U = np.stack([c.inputs for c in candidates])
    feasible_set = []
    clear = []
    for m in range(M):
        alpha = np.zeros(M)
        alpha[m] = 1.0
        states = np.tensordot(alpha, S, axes=1)
        gap = min_clearance(states, obstacles)
        clear.append(gap)
        if gap >= d_safe:
            feasible_set.append((deviation_cost(states, reference), m))
    if feasible_set:
        best_cost = min(c for c, _ in feasible_set)
        ties = [m for c, m in feasible_set if c <= best_cost + TIE_TOL * (1.0 + abs(best_cost))]
        m_star = min(ties, key=lambda m: (abs(candidates[m].path.offset), candidates[m].path.id))
        feasible = True
    else:
        m_star = int(np.argmax(clear))
        feasible = False
    alpha = np.zeros(M)
    alpha[m_star] = 1.0
    states = np.tensordot(alpha, S, axes=1)
    inputs = np.tensordot(alpha, U, axes=1)
    return PlanResult(states, inputs, feasible, deviation_cost(states, reference), "fd",
                      selected=candidates[m_star].path.id, offset=candidates[m_star].path.offset,
                      diagnostics={"feasible_set": sorted(m for _, m in feasible_set),
                                   "clearances": clear, "adherent": candidates[m_star].adherent})


def exhaustive_select(candidates, obstacles, reference, d_safe):
    """Brute-force over every binary vector with a single one (test oracle)."""
    M = len(candidates)
    best = None
    for bits in range(1, 2 ** M):
        alpha = np.array([(bits >> m) & 1 for m in range(M)], dtype=float)
        if alpha.sum() != 1:
            continue
        m = int(np.argmax(alpha))
        st = sum(a * c.states for a, c in zip(alpha, candidates))
        if min_clearance(st, obstacles) < d_safe:
            continue
        key = (deviation_cost(st, reference), abs(candidates[m].path.offset), candidates[m].path.id)
        if best is None or key[0] < best[0][0] - TIE_TOL * (1 + abs(best[0][0])) or (
                abs(key[0] - best[0][0]) <= TIE_TOL * (1 + abs(best[0][0])) and key[1:] < best[0][1:]):
            best = (key, m)
    return None if best is None else best[1]


def predict_points(positions, velocities, H: int, dt: float) -> np.ndarray:
    """Constant-velocity extrapolation: ``(N, H+1, 2)``."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    v = np.asarray(velocities, dtype=float).reshape(-1, 2)
    steps = np.arange(H + 1) * dt
    return p[:, None, :] + steps[None, :, None] * v[:, None, :]


class FdPlanner:
    """Fast-driving planner; it keeps no state between cycles."""

    def __init__(self, config: FdConfig, params: VehicleParams, bounds: ActionBounds,
                 qp_settings: IPMSettings | None = None):
        self.config = config
        self.params = params.with_dt(params.dt)
        self.bounds = bounds
        self.qp_settings = qp_settings

    def plan(self, s_t, u_prev, reference: ReferenceSlice, obstacles, track: Track | None = None) -> PlanResult:
        t0 = time.perf_counter()
        paths = sample_paths(reference, track, self.config, self.params.width)
        rollouts = track_candidates(paths, s_t, u_prev, reference, self.bounds, self.params, self.config,
                                    self.qp_settings)
        result = tree_search_select(rollouts, obstacles, reference, self.config.d_safe)
        result.diagnostics["solve_time"] = time.perf_counter() - t0
        result.diagnostics["candidates"] = len(rollouts)
        return result
