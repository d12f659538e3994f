"""Shape-aware mode: full-footprint collision constraints through dual certificates.

The decision variables split into the motion ``(s, u)`` and, for each
obstacle ``i`` and step ``h``, the dual pair ``(lam, mu)``.  Alternating
minimization fixes one block and solves for the other:

* duals fixed: the certificate is affine in the position and, after
  eliminating ``mu`` through the support function of the ego footprint,
  depends on the heading only through ``g(theta) = max_v -n'R(theta)v``.
  That term is linearized around the previous headings (trust region on
  ``theta``), giving a QP in the inputs with one slack per row.
* motion fixed: every pair is an independent max-margin dual problem,
  solved in closed form by :func:`geometry.batch_max_margin_duals`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fd_planner import PlanResult, PlannerError, TrackingQP, min_clearance, reference_inputs, sample_paths, FdConfig
from .geometry import ConvexPolytope, NumericFailure, batch_max_margin_duals, stack_polytopes
from .qp import IPMSettings, QPError, solve_qp_ipm
from .reference import ReferenceSlice, Track
from .vehicle import ActionBounds, VehicleParams, check_bounds, project_inputs, rollout


@dataclass(frozen=True)
class SaConfig:
    H: int = 10
    d_safe: float = 0.5
    am_iterations: int = 3
    tolerance: float = 1e-3
    trust_region: float = 0.2
    slack_weight: float = 1e4
    step_tolerance: float = 1e-3
    state_weights: tuple = (1.0, 1.0, 1.0)
    speed_weight: float = 1.0
    steer_weight: float = 1e-3
    # pairs whose margin exceeds d_safe by more than this stay out of the motion QP
    screen_distance: float = 15.0
    # optional cap on the tracked speed (conservative driving)
    speed_cap: float | None = None
    # lateral offsets considered for the tracked lane
    offsets: tuple = (-3.5, 0.0, 3.5)

    def __post_init__(self):
        if not 2 <= self.am_iterations <= 10:
            raise ValueError(f"am_iterations must lie in [2, 10], got {self.am_iterations}")
        if not (self.H >= 1 and self.d_safe > 0 and self.tolerance > 0 and self.trust_region > 0):
            raise ValueError("H, d_safe, tolerance and trust_region must be positive")
        if self.slack_weight <= 0 or self.screen_distance <= 0:
            raise ValueError("slack_weight and screen_distance must be positive")
        if self.speed_cap is not None and self.speed_cap <= 0:
            raise ValueError("speed_cap must be positive")


@dataclass
class ObstaclePrediction:
    """World-frame polytopes ``polytopes[i][h]`` for ``h = 0..H``."""

    polytopes: list

    def __post_init__(self):
        lengths = {len(p) for p in self.polytopes}
        if len(lengths) > 1:
            raise ValueError("every obstacle needs the same number of predicted steps")
        for row in self.polytopes:
            for p in row:
                if not isinstance(p, ConvexPolytope):
                    raise TypeError("predictions must be ConvexPolytope instances")
        self._stacked = [stack_polytopes(row) for row in self.polytopes]

    @property
    def N(self) -> int:
        return len(self.polytopes)

    @property
    def steps(self) -> int:
        return len(self.polytopes[0]) if self.polytopes else 0

    def stacked(self, i):
        return self._stacked[i]

    def centers(self) -> np.ndarray:
        """``(N, H+1, 2)`` vertex centroids, the point view used for lane choice."""
        if not self.polytopes:
            return np.zeros((0, 0, 2))
        return np.stack([V.mean(axis=1) for V, _, _, _ in self._stacked])


def predict_polytopes(polytopes, velocities, H: int, dt: float) -> ObstaclePrediction:
    """Constant-velocity translation of the current footprints (rotation held)."""
    v = np.asarray(velocities, dtype=float).reshape(-1, 2)
    if len(v) != len(polytopes):
        raise ValueError("one velocity per obstacle is required")
    rows = [[p.translated(h * dt * v[i]) for h in range(H + 1)] for i, p in enumerate(polytopes)]
    return ObstaclePrediction(rows)


@dataclass
class DualBlock:
    lam: np.ndarray          # (H+1, m_i)
    mu: np.ndarray           # (H+1, m_ego)
    margin: np.ndarray       # (H+1,)


@dataclass
class SaState:
    states: np.ndarray       # (H+1, 3)
    inputs: np.ndarray       # (H, 2)
    duals: list              # DualBlock per obstacle
    iterations: int = 0
    residual: float = 0.0

    def __post_init__(self):
        for d in self.duals:
            if np.any(d.lam < 0) or np.any(d.mu < 0):
                raise ValueError("dual variables must be nonnegative")
        if not self.residual >= 0:
            raise ValueError("residual must be nonnegative")


@dataclass
class MotionSolution:
    states: np.ndarray       # linear-model rollout, (H+1, 3)
    inputs: np.ndarray       # (H, 2)
    slack: np.ndarray        # one entry per certificate row
    objective: float         # tracking cost + slack penalty at the solution
    objective_at_lin: float  # same objective at the linearization inputs
    pairs: list              # (i, h) of each certificate row
    qp_iterations: int


def _rot_and_derivative(theta):
    c, s = np.cos(theta), np.sin(theta)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    dR = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)
    return R, dR


def _collision_rows(duals, lin_states, prediction: ObstaclePrediction, ego_body: ConvexPolytope,
                    d_safe: float, screen: float, trust_region: float):
    """Affine rows ``coef . s_h >= rhs`` for the certificate of each active pair.

    ``coef`` acts on ``(x_h, y_h, theta_h)``.  ``g(theta) = max_v g_v(theta)``
    with ``g_v = -n'R(theta)v`` is a max of sinusoids, so one row is emitted
    per vertex that can become the maximizer inside the trust region.  Each
    row adds the curvature bound ``|n||v| rho^2 / 2`` of its sinusoid, which
    makes the rows imply the exact certificate for any heading within
    ``rho`` of the linearization.  Returns ``(pairs, coef, rhs)``; a pair
    appears once per row.
    """
    Vc = ego_body.vertices
    rv = np.linalg.norm(Vc, axis=1)
    pairs, coefs, rhss = [], [], []
    H1 = len(lin_states)
    R, dR = _rot_and_derivative(lin_states[:, 2])
    for i, block in enumerate(duals):
        _, No, bo, _ = prediction.stacked(i)
        n = np.einsum("hmi,hm->hi", No, block.lam)               # D' lam per step
        nn = np.linalg.norm(n, axis=1)
        lb = np.einsum("hm,hm->h", block.lam, bo)
        vals = -np.einsum("hi,hij,pj->hp", n, R, Vc)
        dvals = -np.einsum("hi,hij,pj->hp", n, dR, Vc)
        g = vals.max(axis=1)
        for h in range(1, H1):
            if nn[h] < 1e-9 or block.margin[h] > d_safe + screen:
                continue
            # each g_v moves by at most |n||v| rho over the trust region
            reach = nn[h] * trust_region * (rv + rv.max())
            for p in np.flatnonzero(vals[h] + reach >= g[h]):
                pairs.append((i, h))
                coefs.append([n[h, 0], n[h, 1], -dvals[h, p]])
                rhss.append(d_safe + lb[h] + vals[h, p] - dvals[h, p] * lin_states[h, 2]
                            + 0.5 * nn[h] * rv[p] * trust_region ** 2)
    return pairs, np.array(coefs).reshape(-1, 3), np.array(rhss)


def solve_motion_subproblem(duals, s_t, reference: ReferenceSlice, prediction: ObstaclePrediction,
                            bounds: ActionBounds, params: VehicleParams, prev_motion, config: SaConfig,
                            ego_body: ConvexPolytope | None = None, u_prev=None,
                            qp_settings: IPMSettings | None = None) -> MotionSolution:
    """Tracking QP with the certificate rows of the fixed duals.

    ``prev_motion`` is ``(states, inputs)``; the dynamics are linearized along
    it and the heading term of each certificate row is expanded around its
    headings.  ``duals`` is a list of :class:`DualBlock` (empty for the
    obstacle-free problem).
    """
    H = config.H
    ego_body = ego_body or params.footprint()
    lin_s, lin_u = (np.asarray(a, dtype=float) for a in prev_motion)
    s_t = np.asarray(s_t, dtype=float)
    if lin_u.shape != (H, 2) or lin_s.shape != (H + 1, 3):
        raise ValueError("prev_motion must hold (H+1, 3) states and (H, 2) inputs")
    mpc = TrackingQP(s_t, lin_s, lin_u, params, bounds, config.state_weights, config.speed_weight,
                     config.steer_weight)
    targets = reference.states[1:H + 1]
    speeds = reference.speeds[:H]
    pairs, coef, rhs = _collision_rows(duals, lin_s, prediction, ego_body, config.d_safe,
                                       config.screen_distance, config.trust_region) if duals else ([], np.zeros((0, 3)), np.zeros(0))
    npair = len(pairs)
    nu = 2 * H
    n = nu + npair
    F3 = mpc.F.reshape(H, 3, nu)
    g3 = mpc.g.reshape(H, 3)

    Ab, lb, ub = mpc.bound_rows(u_prev)
    rows = [np.hstack([Ab, np.zeros((len(Ab), npair))])]
    lo, hi = [lb], [ub]
    # trust region on the headings
    Ft = F3[:, 2, :]
    rows.append(np.hstack([Ft, np.zeros((H, npair))]))
    lo.append(lin_s[1:, 2] - config.trust_region - g3[:, 2])
    hi.append(lin_s[1:, 2] + config.trust_region - g3[:, 2])
    if npair:
        hs = np.array([h for _, h in pairs])
        a = np.einsum("ki,kin->kn", coef, F3[hs - 1])
        a0 = np.einsum("ki,ki->k", coef, g3[hs - 1])
        rows.append(np.hstack([a, np.eye(npair)]))
        lo.append(rhs - a0)
        hi.append(np.full(npair, np.inf))
        rows.append(np.hstack([np.zeros((npair, nu)), np.eye(npair)]))
        lo.append(np.zeros(npair))
        hi.append(np.full(npair, np.inf))
    A = np.vstack(rows)
    P = np.zeros((n, n))
    P[:nu, :nu] = mpc.P
    q = np.concatenate([mpc.linear_cost(targets[None], speeds[None])[0], np.full(npair, config.slack_weight)])
    try:
        sol = solve_qp_ipm(P, q, A, np.concatenate(lo), np.concatenate(hi), qp_settings)
    except QPError as exc:
        raise PlannerError(f"motion QP failed: {exc}") from exc
    u = project_inputs(sol.x[:nu].reshape(H, 2), bounds, u_prev)

    def evaluate(uu):
        S = mpc.states(uu.reshape(-1))[0]
        cost = mpc.cost(S, uu, targets, speeds)
        if npair:
            viol = rhs - np.einsum("ki,ki->k", coef, S[hs - 1])
            slack = np.maximum(viol, 0.0)
        else:
            slack = np.zeros(0)
        return S, cost + config.slack_weight * float(np.sum(slack)), slack

    S, obj, slack = evaluate(u)
    _, obj_lin, _ = evaluate(lin_u)
    states = np.vstack([s_t[None], S])
    return MotionSolution(states, u, slack, obj, obj_lin, pairs, int(sol.iterations))


def solve_dual_subproblem(states, prediction: ObstaclePrediction, ego_body: ConvexPolytope,
                          d_safe: float, previous=None):
    """Max-margin duals for every (obstacle, step) pair at the given poses.

    Returns ``(duals, flagged)``; ``flagged`` lists obstacles whose batch
    failed numerically and kept their previous duals.
    """
    states = np.asarray(states, dtype=float)
    if not np.all(np.isfinite(states)):
        raise PlannerError("non-finite motion passed to the dual update")
    out, flagged = [], []
    for i in range(prediction.N):
        try:
            lam, mu, margin = batch_max_margin_duals(ego_body, states, prediction.stacked(i))
        except NumericFailure:
            flagged.append(i)
            if previous is not None and i < len(previous):
                out.append(previous[i])
            else:
                m = prediction.stacked(i)[2].shape[1]
                out.append(DualBlock(np.zeros((len(states), m)), np.zeros((len(states), len(ego_body.offsets))),
                                     np.full(len(states), -np.inf)))
            continue
        out.append(DualBlock(lam, mu, margin))
    return out, flagged


def certificate_residuals(states, prediction: ObstaclePrediction, ego_body: ConvexPolytope, duals,
                          d_safe: float) -> np.ndarray:
    """Largest violated-row magnitude of the certificate for each pair, ``(N, H+1)``."""
    states = np.asarray(states, dtype=float)
    if prediction.N == 0:
        return np.zeros((0, len(states)))
    R, _ = _rot_and_derivative(states[:, 2])
    G, hvec = ego_body.normals, ego_body.offsets
    out = []
    for i, block in enumerate(duals):
        _, No, bo, _ = prediction.stacked(i)
        n = np.einsum("hmi,hm->hi", No, block.lam)
        value = np.einsum("hi,hi->h", n, states[:, :2]) - np.einsum("hm,hm->h", block.lam, bo) - block.mu @ hvec
        eq = block.mu @ G + np.einsum("hji,hj->hi", R, n)
        viol = np.stack([
            np.maximum(d_safe - value, 0.0),
            np.maximum(np.linalg.norm(n, axis=1) - 1.0, 0.0),
            np.max(np.abs(eq), axis=1),
            np.maximum(-block.lam.min(axis=1), 0.0),
            np.maximum(-block.mu.min(axis=1), 0.0),
        ])
        out.append(np.max(viol, axis=0))
    return np.array(out)


def _motion_residual(states, prediction, ego_body, duals, d_safe):
    r = certificate_residuals(states, prediction, ego_body, duals, d_safe)
    return float(r.max()) if r.size else 0.0


def am_solve(s_t, prediction: ObstaclePrediction, reference: ReferenceSlice, config: SaConfig,
             params: VehicleParams, bounds: ActionBounds, warm_start: SaState | None = None,
             ego_body: ConvexPolytope | None = None, u_prev=None,
             qp_settings: IPMSettings | None = None, shift: int = 1) -> PlanResult:
    """Alternate motion and dual updates; see the module docstring.

    The first frame starts from the obstacle-free tracking solution with
    zero duals.  A warm start shifts the previous inputs by ``shift`` steps
    (the time elapsed since that plan).  The
    loop stops after ``am_iterations`` or once the certificate residual is
    within tolerance and the inputs have settled.
    """
    H = config.H
    ego_body = ego_body or params.footprint()
    s_t = np.asarray(s_t, dtype=float)
    if not np.all(np.isfinite(s_t)):
        raise PlannerError("non-finite initial state")
    if warm_start is not None:
        shift = min(max(int(shift), 0), H - 1)
        u0 = np.vstack([warm_start.inputs[shift:], np.repeat(warm_start.inputs[-1:], shift, axis=0)])
        u0 = project_inputs(u0, bounds, u_prev)
        motion = (rollout(s_t, u0, params), u0)
        history = []
    else:
        u_lin = project_inputs(reference_inputs(reference, params, bounds, H), bounds, u_prev)
        first = solve_motion_subproblem([], s_t, reference, prediction, bounds, params,
                                        (rollout(s_t, u_lin, params), u_lin), config, ego_body, u_prev, qp_settings)
        motion = (first.states, first.inputs)
        history = []
    duals, flagged = solve_dual_subproblem(motion[0], prediction, ego_body, config.d_safe)
    residual = _motion_residual(motion[0], prediction, ego_body, duals, config.d_safe)
    last_valid = SaState(motion[0], motion[1], duals, 0, residual)
    to_tol = None
    k = 0
    slack = np.zeros(0)
    for k in range(1, config.am_iterations + 1):
        u_lin = motion[1]
        lin = (rollout(s_t, u_lin, params), u_lin)
        try:
            sol = solve_motion_subproblem(duals, s_t, reference, prediction, bounds, params, lin, config,
                                          ego_body, u_prev, qp_settings)
            duals, flag_k = solve_dual_subproblem(sol.states, prediction, ego_body, config.d_safe, duals)
        except PlannerError as exc:
            raise PlannerError(str(exc), last_valid) from exc
        flagged = sorted(set(flagged) | set(flag_k))
        residual = _motion_residual(sol.states, prediction, ego_body, duals, config.d_safe)
        step = float(np.max(np.abs(sol.inputs - u_lin)))
        history.append({"objective_at_lin": sol.objective_at_lin, "objective": sol.objective,
                        "residual": residual, "slack": float(sol.slack.sum()), "pairs": len(sol.pairs),
                        "step": step, "qp_iterations": sol.qp_iterations})
        motion = (sol.states, sol.inputs)
        slack = sol.slack
        last_valid = SaState(motion[0], motion[1], duals, k, residual)
        if residual <= config.tolerance and to_tol is None:
            to_tol = k
        if residual <= config.tolerance and step <= config.step_tolerance:
            break
    states, inputs = motion
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(inputs))):
        raise PlannerError("non-finite AM iterate", last_valid)
    mpc_cost = float(np.sum((states - reference.states[:H + 1]) ** 2))
    margins = np.array([d.margin for d in duals]) if duals else np.zeros((0, H + 1))
    return PlanResult(states, inputs, bool(residual <= config.tolerance), mpc_cost, "sa",
                      diagnostics={"residual": residual, "iterations": k, "iterations_to_tolerance": to_tol,
                                   "history": history, "slack": float(np.sum(slack)),
                                   "min_margin": float(margins.min()) if margins.size else np.inf,
                                   "flagged": flagged, "sa_state": last_valid,
                                   "bounds_ok": check_bounds(inputs, bounds, u_prev, tol=1e-9)})


class SaPlanner:
    """Shape-aware planner keeping the previous AM state as its warm start.

    Each cycle tracks the lane (lateral offset of the reference window) with
    the most point clearance, so that the collision rows can steer the
    vehicle around an obstacle instead of only braking behind it.
    """

    def __init__(self, config: SaConfig, params: VehicleParams, bounds: ActionBounds,
                 qp_settings: IPMSettings | None = None):
        self.config = config
        self.params = params
        self.bounds = bounds
        self.qp_settings = qp_settings
        self.ego_body = params.footprint()
        self._lanes = FdConfig(M=len(config.offsets), H=config.H, offsets=tuple(config.offsets))
        self.state: SaState | None = None

    def reset(self):
        self.state = None

    def choose_lane(self, reference: ReferenceSlice, prediction: ObstaclePrediction, track: Track | None,
                    s_t) -> tuple[ReferenceSlice, float]:
        paths = sample_paths(reference, track, self._lanes, self.params.width)
        if prediction.N == 0 or len(paths) == 1:
            zero = next(p for p in paths if p.offset == 0.0)
            return ReferenceSlice(zero.waypoints, reference.speeds, reference.arc, reference.curvature), 0.0
        centers = prediction.centers()
        normal = np.array([-np.sin(reference.states[0, 2]), np.cos(reference.states[0, 2])])
        lat = float(normal @ (np.asarray(s_t, dtype=float)[:2] - reference.states[0, :2]))
        cap = 2.0 * (self.config.d_safe + self.params.length)

        def key(p):
            gap = min(min_clearance(p.waypoints, centers), cap)
            return (-round(gap, 9), abs(p.offset - lat), abs(p.offset), p.id)

        best = min(paths, key=key)
        return ReferenceSlice(best.waypoints, reference.speeds, reference.arc, reference.curvature), best.offset

    def plan(self, s_t, u_prev, reference: ReferenceSlice, prediction: ObstaclePrediction,
             track: Track | None = None, shift: int = 1) -> PlanResult:
        t0 = time.perf_counter()
        if self.config.speed_cap is not None:
            reference = ReferenceSlice(reference.states, np.minimum(reference.speeds, self.config.speed_cap),
                                       reference.arc, reference.curvature)
        lane_ref, offset = self.choose_lane(reference, prediction, track, s_t)
        result = am_solve(s_t, prediction, lane_ref, self.config, self.params, self.bounds, self.state,
                          self.ego_body, u_prev, self.qp_settings, shift)
        self.state = result.diagnostics["sa_state"]
        result.offset = offset
        result.diagnostics["solve_time"] = time.perf_counter() - t0
        return result
