"""Closed-loop kinematic simulation and the two experiment protocols.

Background vehicles follow the track at a fixed lane offset and speed.  The
ego runs the planner stack: the switcher publishes a mode configuration
(after a modeled latency) into a latest-value cell, the active planner
replans at the plan rate and the controller holds the planned inputs at the
control rate.  Everything is driven by simulated time, so a run is a pure
function of (scenario, seed, rates).
"""
from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .fd_planner import FdConfig, FdPlanner, PlannerError
from .geometry import NumericFailure, batch_separation, rectangle_polytope, transform_poses
from .reference import ReferencePlan, Track, generate_reference, query_reference, stadium_track, straight_track
from .sa_planner import ObstaclePrediction, SaConfig, SaPlanner
from .switcher import (ModeCell, ModeCommand, Switcher, SwitchTriggerPolicy, describe_scene,
                       should_trigger, to_config)
from .vehicle import ActionBounds, VehicleParams, propagate

MODES = ("fd-only", "sa-only", "switched")
SA_SPEED_CAP = 15.0


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class ObstacleSpec:
    arc: float               # start arc length along the track
    lane_offset: float
    speed: float
    length: float = 4.5
    width: float = 2.0


@dataclass(frozen=True)
class Scenario:
    track: Track
    plan: ReferencePlan
    ego_start: tuple                    # (x, y, theta)
    ego_speed: float
    obstacles: tuple = ()
    max_time: float = 60.0
    goal_arc: float | None = None       # distance to travel; None for no distance goal
    stop_on_overtake: bool = False
    stop_on_collision: bool = False
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.max_time <= 0:
            raise SimError("max_time must be positive")
        if self.goal_arc is not None and self.goal_arc <= 0:
            raise SimError("goal_arc must be positive")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))


@dataclass(frozen=True)
class Rates:
    plan_hz: float = 10.0
    control_hz: float = 100.0
    trigger: SwitchTriggerPolicy = SwitchTriggerPolicy()
    switch_latency: float = 0.0

    def __post_init__(self):
        if not (self.plan_hz > 0 and self.control_hz > 0):
            raise SimError("rates must be positive")
        if self.control_hz < self.plan_hz or self.plan_hz < 1.0 / self.trigger.period:
            raise SimError("need control rate >= plan rate >= switch rate")
        ratio = self.control_hz / self.plan_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise SimError("control rate must be an integer multiple of the plan rate")
        if self.switch_latency < 0:
            raise SimError("switch latency must be nonnegative")

    @property
    def substeps(self) -> int:
        return int(round(self.control_hz / self.plan_hz))


@dataclass
class WorldState:
    time: float
    ego: np.ndarray                     # (3,)
    ego_input: np.ndarray               # (2,)
    obstacle_arcs: np.ndarray           # (N,)
    obstacle_states: np.ndarray         # (N, 3)
    in_contact: np.ndarray              # (N,) bool
    collisions: int = 0
    detected: frozenset = frozenset()
    progress: float = 0.0               # unwrapped arc length travelled
    track_arc: float = 0.0              # arc of the ego projection
    min_distance: float = math.inf


@dataclass
class EpisodeMetrics:
    completion_time: float
    avg_speed_kmh: float
    max_speed_kmh: float
    collisions: int
    overtake_success: bool
    completed: bool
    failed: bool
    distance: float
    mode_trace: list = field(default_factory=list)
    gamma_trace: list = field(default_factory=list)
    sa_infeasible: int = 0
    fd_escalations: int = 0
    degraded_switches: int = 0

    def record(self) -> dict:
        """Flat summary with rounded floats (deterministic text output)."""
        modes = self.mode_trace
        return {
            "completion_time": round(self.completion_time, 6),
            "avg_speed_kmh": round(self.avg_speed_kmh, 6),
            "max_speed_kmh": round(self.max_speed_kmh, 6),
            "collisions": self.collisions,
            "overtake_success": self.overtake_success,
            "completed": self.completed,
            "failed": self.failed,
            "distance": round(self.distance, 6),
            "plans": len(modes),
            "sa_fraction": round(modes.count("sa") / len(modes), 6) if modes else 0.0,
            "sa_infeasible": self.sa_infeasible,
            "fd_escalations": self.fd_escalations,
            "degraded_switches": self.degraded_switches,
        }


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    log: list                           # one dict per control step
    plans: list                         # per planning cycle diagnostics


# -- world ------------------------------------------------------------------

@lru_cache(maxsize=None)
def _body(length, width):
    return rectangle_polytope(length, width)


def _footprints(states, length, width):
    """Vertices/normals/offsets of oriented rectangles, batched."""
    states = np.atleast_2d(states)
    body = _body(float(length), float(width))
    c, s = np.cos(states[:, 2]), np.sin(states[:, 2])
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    V = np.einsum("kij,pj->kpi", R, body.vertices) + states[:, None, :2]
    N = np.einsum("mj,kij->kmi", body.normals, R)
    b = body.offsets[None, :] + np.einsum("kmi,ki->km", N, states[:, :2])
    return V, N, b


def obstacle_states(track: Track, specs, arcs) -> np.ndarray:
    if not len(specs):
        return np.zeros((0, 3))
    offs = np.array([o.lane_offset for o in specs])
    return np.atleast_2d(track.pose_at(np.asarray(arcs, dtype=float), offs))


def ego_obstacle_distances(ego, obs_states, params: VehicleParams, specs) -> np.ndarray:
    """Exact footprint distances (0 on contact) from the ego to every obstacle."""
    if not len(specs):
        return np.zeros(0)
    K = len(specs)
    Ve, Ne, be = _footprints(np.asarray(ego)[None], params.length, params.width)
    # obstacles share the rectangle shape within a scenario in practice; group by size
    out = np.empty(K)
    sizes = {}
    for i, o in enumerate(specs):
        sizes.setdefault((o.length, o.width), []).append(i)
    for (L, W), idx in sizes.items():
        Vo, No, bo = _footprints(obs_states[idx], L, W)
        k = len(idx)
        val, _ = batch_separation(np.repeat(Ve, k, 0), np.repeat(Ne, k, 0), np.repeat(be, k, 0), Vo, No, bo)
        out[idx] = np.maximum(val, 0.0)
    return out


def _contacts_and_min(ego, obs_states, params: VehicleParams, specs):
    """Contact flags and the smallest footprint distance.

    Pairs whose bounding circles lie farther apart than the closest centre
    distance can neither touch nor hold the minimum, so only the rest get
    the exact computation.
    """
    if not len(specs):
        return np.zeros(0, dtype=bool), math.inf
    centre = np.linalg.norm(obs_states[:, :2] - np.asarray(ego)[:2], axis=1)
    radii = np.array([math.hypot(o.length, o.width) for o in specs]) / 2.0
    lower = centre - radii - math.hypot(params.length, params.width) / 2.0
    near = np.flatnonzero(lower <= centre.min())
    dist = ego_obstacle_distances(ego, obs_states[near], params, [specs[i] for i in near])
    contact = np.zeros(len(specs), dtype=bool)
    contact[near] = dist <= 0.0
    return contact, float(dist.min())


def make_world(scenario: Scenario, params: VehicleParams, sensing_radius: float = 50.0) -> WorldState:
    arcs = np.array([o.arc for o in scenario.obstacles], dtype=float)
    obs = obstacle_states(scenario.track, scenario.obstacles, arcs)
    ego = np.array(scenario.ego_start, dtype=float)
    contact, dmin = _contacts_and_min(ego, obs, params, scenario.obstacles)
    arc, _ = scenario.track.project(ego[:2])
    detected = frozenset(int(i) for i in np.flatnonzero(np.linalg.norm(obs[:, :2] - ego[:2], axis=1) <= sensing_radius)) \
        if len(obs) else frozenset()
    return WorldState(0.0, ego, np.array([scenario.ego_speed, 0.0]), arcs, obs, contact, int(contact.sum()),
                      detected, 0.0, arc, dmin)


def step_world(world: WorldState, ego_input, dt_sim: float, scenario: Scenario, params: VehicleParams,
               sensing_radius: float = 50.0) -> WorldState:
    """Advance every agent by one substep and account for new contacts.

    A collision is counted when an ego/obstacle pair goes from separated to
    touching; the episode carries on either way.
    """
    u = np.asarray(ego_input, dtype=float)
    ego = propagate(world.ego, u, params, dt_sim)
    speeds = np.array([o.speed for o in scenario.obstacles], dtype=float)
    arcs = world.obstacle_arcs + speeds * dt_sim
    obs = obstacle_states(scenario.track, scenario.obstacles, arcs)
    contact, dmin = _contacts_and_min(ego, obs, params, scenario.obstacles)
    new = int(np.sum(contact & ~world.in_contact))
    arc, _ = scenario.track.project(ego[:2])
    d_arc = arc - world.track_arc
    if scenario.track.closed:
        d_arc = (d_arc + 0.5 * scenario.track.length) % scenario.track.length - 0.5 * scenario.track.length
    detected = frozenset(int(i) for i in np.flatnonzero(np.linalg.norm(obs[:, :2] - ego[:2], axis=1) <= sensing_radius)) \
        if len(obs) else frozenset()
    return WorldState(world.time + dt_sim, ego, u.copy(), arcs, obs, contact, world.collisions + new, detected,
                      world.progress + d_arc, arc, dmin)


def _passed_all(world: WorldState, scenario: Scenario) -> bool:
    if not scenario.obstacles:
        return True
    ego_arc = scenario.track.project(world.ego[:2])[0] if not scenario.track.closed else None
    if ego_arc is None:
        # closed tracks: compare unwrapped progress against obstacle travel
        start = scenario.track.project(np.asarray(scenario.ego_start)[:2])[0]
        ego_total = start + world.progress
        return bool(np.all(ego_total > world.obstacle_arcs))
    return bool(np.all(ego_arc > world.obstacle_arcs))


# -- planner stack ----------------------------------------------------------

@dataclass
class PlannerStack:
    mode: str
    fd: FdPlanner
    sa: SaPlanner
    switcher: Switcher
    v0: float = 2.0
    sensing_radius: float = 50.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise SimError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def forced(self, command: ModeCommand) -> ModeCommand:
        if self.mode == "fd-only":
            return ModeCommand("fd", command.c2)
        if self.mode == "sa-only":
            return ModeCommand("sa", command.c2)
        return command


def build_stack(mode: str, params: VehicleParams | None = None, bounds: ActionBounds | None = None,
                fd_config: FdConfig | None = None, sa_config: SaConfig | None = None,
                switcher: Switcher | None = None, v0: float = 2.0, sensing_radius: float = 50.0,
                sa_speed_cap: float | None = SA_SPEED_CAP) -> PlannerStack:
    """Planner stack for one mode.

    SA runs with a peak-speed cap standing in for its lower operating rate;
    an explicit ``sa_config`` takes precedence.
    """
    params = params or VehicleParams()
    bounds = bounds or ActionBounds()
    fd = FdPlanner(fd_config or FdConfig(), params, bounds)
    sa = SaPlanner(sa_config or SaConfig(speed_cap=sa_speed_cap), params, bounds)
    return PlannerStack(mode, fd, sa, switcher or Switcher("rule", v0=v0), v0, sensing_radius)


def _obstacle_rows(world: WorldState, scenario: Scenario, ids):
    rows = []
    for i in ids:
        x, y, th = world.obstacle_states[i]
        rows.append([x, y, th, scenario.obstacles[i].speed])
    return np.array(rows, dtype=float).reshape(-1, 4)


def predicted_obstacle_states(world: WorldState, scenario: Scenario, ids, H: int, dt: float) -> np.ndarray:
    """``(n, H+1, 3)`` poses of the listed obstacles along their scripted lanes."""
    if not len(ids):
        return np.zeros((0, H + 1, 3))
    specs = [scenario.obstacles[i] for i in ids]
    steps = np.arange(H + 1) * dt
    out = np.empty((len(ids), H + 1, 3))
    for k, (i, o) in enumerate(zip(ids, specs)):
        arcs = world.obstacle_arcs[i] + o.speed * steps
        out[k] = scenario.track.pose_at(arcs, np.full(H + 1, o.lane_offset))
    return out


def _plan_once(stack: PlannerStack, scenario: Scenario, world: WorldState, config, params: VehicleParams,
               sa_shift: int, sa_continuing: bool):
    """One planning cycle; returns ``(result, mode_used, escalated)``.

    Both planners receive the obstacles' future poses along their lanes, the
    same information a perfect constant-speed predictor would give.
    """
    ids = sorted(world.detected)
    mode = config.mode
    escalated = False
    if mode == "fd":
        H = stack.fd.config.H
        ref = query_reference(scenario.plan, world.ego, config.gamma, H, params.dt)
        pts = predicted_obstacle_states(world, scenario, ids, H, params.dt)[..., :2]
        result = stack.fd.plan(world.ego, world.ego_input, ref, pts, scenario.track)
        if result.feasible or stack.mode == "fd-only":
            return result, "fd", False
        escalated = True
        mode = "sa"
    H = stack.sa.config.H
    ref = query_reference(scenario.plan, world.ego, config.gamma, H, params.dt, stack.sa.config.speed_cap)
    poses = predicted_obstacle_states(world, scenario, ids, H, params.dt)
    polys = []
    for k, i in enumerate(ids):
        o = scenario.obstacles[i]
        body = _body(float(o.length), float(o.width))
        polys.append(transform_poses(body, poses[k]))
    pred = ObstaclePrediction(polys)
    if not sa_continuing:
        stack.sa.reset()
    result = stack.sa.plan(world.ego, world.ego_input, ref, pred, scenario.track, shift=sa_shift)
    return result, "sa", escalated


def run_episode(scenario: Scenario, stack: PlannerStack, rates: Rates = Rates(),
                params: VehicleParams | None = None, bounds: ActionBounds | None = None,
                keep_log: bool = True) -> EpisodeResult:
    params = params or stack.fd.params
    bounds = bounds or stack.fd.bounds
    dt_ctrl = 1.0 / rates.control_hz
    sub = rates.substeps
    sa_shift = max(int(round(1.0 / rates.plan_hz / params.dt)), 1)
    n_max = int(math.ceil(scenario.max_time * rates.control_hz - 1e-9))
    world = make_world(scenario, params, stack.sensing_radius)
    v0 = stack.v0
    cell = ModeCell(to_config(stack.forced(ModeCommand("fd", "keep")), v0))
    events: list = []                  # (publish_time, seq, config)
    seq = 0
    last_trigger = None
    reactive_pending = False
    prev_detected = frozenset()
    plan = None
    plan_stamp = 0.0
    last_mode = None
    metrics = EpisodeMetrics(0.0, 0.0, 0.0, 0, False, False, False, 0.0)
    log_rows, plan_rows = [], []
    speeds = []
    failed = False
    stop_reason = "time"
    for k in range(n_max):
        t = k * dt_ctrl
        # switcher: trigger, then publish everything whose latency has elapsed
        newly = bool(world.detected - prev_detected) or reactive_pending
        prev_detected = world.detected
        if not failed and should_trigger(rates.trigger, t, last_trigger, newly):
            ids = sorted(world.detected)
            scene = describe_scene(world.ego, world.ego_input[0], _obstacle_rows(world, scenario, ids),
                                   scenario.plan, stack.sensing_radius)
            dec = stack.switcher.decide(scene, now=t)
            metrics.degraded_switches += int(dec.degraded)
            seq += 1
            heapq.heappush(events, (t + rates.switch_latency, seq, to_config(stack.forced(dec.command), v0)))
            last_trigger = t
            reactive_pending = False
        while events and events[0][0] <= t + 1e-12:
            _, s_id, cfg = heapq.heappop(events)
            cell.publish(s_id, cfg)
        # planning
        if k % sub == 0 and not failed:
            _, config = cell.read()
            try:
                result, used, escalated = _plan_once(stack, scenario, world, config, params, sa_shift,
                                                     sa_continuing=(last_mode == "sa"))
            except (PlannerError, NumericFailure, FloatingPointError) as exc:
                failed = True
                stop_reason = f"numeric failure: {exc}"
                result = None
            if result is not None:
                plan, plan_stamp = result, t
                last_mode = used
                metrics.mode_trace.append(used)
                metrics.gamma_trace.append(config.gamma)
                if escalated:
                    metrics.fd_escalations += 1
                    reactive_pending = True
                if used == "sa" and not result.feasible:
                    metrics.sa_infeasible += 1
                plan_rows.append({"time": round(t, 6), "mode": used, "feasible": bool(result.feasible),
                                  "residual": float(result.diagnostics.get("residual", 0.0)),
                                  "min_margin": float(result.diagnostics.get("min_margin", math.inf)),
                                  "iterations": result.diagnostics.get("iterations"),
                                  "iterations_to_tolerance": result.diagnostics.get("iterations_to_tolerance"),
                                  "selected": result.selected, "offset": float(result.offset)})
        # control: zero-order hold on the plan indexed by elapsed time
        if failed:
            # brake to a stop at the rate limit, easing the steering back to zero
            frac = dt_ctrl / params.dt
            u = world.ego_input.copy()
            u[0] = max(u[0] + bounds.a_min[0] * frac, 0.0)
            u[1] = float(np.clip(0.0, u[1] + bounds.a_min[1] * frac, u[1] + bounds.a_max[1] * frac))
        else:
            j = min(int((t - plan_stamp) / params.dt + 1e-9), len(plan.inputs) - 1)
            u = plan.inputs[j].copy()
        world = step_world(world, u, dt_ctrl, scenario, params, stack.sensing_radius)
        speeds.append(float(u[0]))
        if keep_log:
            log_rows.append({"time": round(world.time, 6), "x": world.ego[0], "y": world.ego[1],
                             "theta": world.ego[2], "v": u[0], "psi": u[1],
                             "mode": last_mode or "",
                             "gamma": metrics.gamma_trace[-1] if metrics.gamma_trace else 0.0,
                             "residual": plan_rows[-1]["residual"] if plan_rows else 0.0,
                             "min_obstacle_distance": world.min_distance, "collisions": world.collisions})
        if failed and u[0] <= 0.0:
            break
        if scenario.goal_arc is not None and world.progress >= scenario.goal_arc:
            metrics.completed = True
            stop_reason = "goal"
            break
        if scenario.stop_on_overtake and world.collisions == 0 and _passed_all(world, scenario):
            metrics.overtake_success = True
            stop_reason = "overtake"
            break
        if scenario.stop_on_collision and world.collisions > 0:
            stop_reason = "collision"
            break
    metrics.completion_time = world.time
    metrics.collisions = world.collisions
    metrics.failed = failed
    metrics.distance = world.progress
    metrics.avg_speed_kmh = 3.6 * float(np.mean(speeds)) if speeds else 0.0
    metrics.max_speed_kmh = 3.6 * max(speeds, default=0.0)
    if not metrics.overtake_success and scenario.obstacles and world.collisions == 0 and not failed:
        metrics.overtake_success = _passed_all(world, scenario)
    plan_rows.append({"stop_reason": stop_reason})
    return EpisodeResult(metrics, log_rows, plan_rows)


# -- scenarios --------------------------------------------------------------

@dataclass(frozen=True)
class OvertakeSetup:
    road_length: float = 600.0
    half_width: float = 5.25
    lateral_range: float = 3.75
    ego_arc: float = 10.0
    ego_speed: float = 12.0
    first_gap: float = 35.0
    spacing: float = 18.0
    arc_jitter: float = 3.0
    speed_range: tuple = (7.0, 11.0)
    max_time: float = 30.0
    max_density: int = 5


def overtake_obstacles(setup: OvertakeSetup, seed: int) -> list[ObstacleSpec]:
    """The full obstacle cluster of one trial; density ``d`` uses its first ``d`` members."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(setup.max_density):
        arc = setup.ego_arc + setup.first_gap + setup.spacing * i + rng.uniform(-setup.arc_jitter, setup.arc_jitter)
        lane = rng.uniform(-setup.lateral_range, setup.lateral_range)
        speed = rng.uniform(*setup.speed_range)
        out.append(ObstacleSpec(float(arc), float(lane), float(speed)))
    return out


def overtake_scenario(setup: OvertakeSetup, plan: ReferencePlan, track: Track, density: int, seed: int) -> Scenario:
    if not 0 <= density <= setup.max_density:
        raise SimError(f"density must lie in [0, {setup.max_density}]")
    obs = overtake_obstacles(setup, seed)[:density]
    start = track.pose_at(setup.ego_arc)
    return Scenario(track, plan, tuple(float(v) for v in start), setup.ego_speed, tuple(obs), setup.max_time,
                    None, stop_on_overtake=True, stop_on_collision=True, seed=seed,
                    name=f"overtake-d{density}-s{seed}")


@dataclass(frozen=True)
class LapSetup:
    straight: float = 300.0
    radius: float = 60.0
    half_width: float = 6.0
    lanes: tuple = (-3.5, 0.0, 3.5)
    lane_jitter: float = 0.25
    speed_range: tuple = (8.0, 12.0)
    ego_speed: float = 10.0
    max_time: float = 150.0
    first_gap: float = 40.0


def lap_track(setup: LapSetup) -> Track:
    return stadium_track(setup.straight, setup.radius, setup.half_width)


def lap_scenario(setup: LapSetup, plan: ReferencePlan, track: Track, n_obstacles: int, seed: int) -> Scenario:
    rng = np.random.default_rng(seed)
    obs = []
    span = track.length - 2 * setup.first_gap
    for i in range(n_obstacles):
        arc = setup.first_gap + span * (i + rng.uniform(0.2, 0.8)) / max(n_obstacles, 1)
        lane = float(rng.choice(setup.lanes)) + rng.uniform(-setup.lane_jitter, setup.lane_jitter)
        obs.append(ObstacleSpec(float(arc), float(lane), float(rng.uniform(*setup.speed_range))))
    start = plan.waypoints[0]
    return Scenario(track, plan, tuple(float(v) for v in start), setup.ego_speed, tuple(obs), setup.max_time,
                    track.length, seed=seed, name=f"lap-n{n_obstacles}-s{seed}")


# -- studies ----------------------------------------------------------------

def trial_seed(base_seed: int, trial: int) -> int:
    return int(base_seed) + int(trial)


def overtake_study(setup: OvertakeSetup, stack_factory, densities=(1, 2, 3, 4, 5), trials: int = 20,
                   modes=("fd-only", "sa-only", "switched"), base_seed: int = 0, rates: Rates = Rates(),
                   params: VehicleParams | None = None, bounds: ActionBounds | None = None, progress=None):
    """Success fraction per (mode, density).

    ``stack_factory(mode)`` builds a fresh :class:`PlannerStack`.  Trial
    ``j`` uses the same obstacle cluster for every density (its first ``d``
    members), so densities are compared on common random numbers.
    Returns ``(table, records)`` with ``table[mode]`` a list aligned with
    ``densities``.
    """
    if trials < 1:
        raise SimError("trials must be at least 1")
    params = params or VehicleParams()
    bounds = bounds or ActionBounds()
    track = straight_track(setup.road_length, setup.half_width)
    plan = generate_reference(track, params, bounds)
    table, records = {}, []
    for mode in modes:
        row = []
        for d in densities:
            ok = 0
            for j in range(trials):
                seed = trial_seed(base_seed, j)
                scen = overtake_scenario(setup, plan, track, d, seed)
                res = run_episode(scen, stack_factory(mode), rates, params, bounds, keep_log=False)
                ok += int(res.metrics.overtake_success)
                rec = {"mode": mode, "density": d, "trial": j, "seed": seed, **res.metrics.record()}
                records.append(rec)
                if progress:
                    progress(rec)
            row.append(ok / trials)
        table[mode] = row
    return table, records


LAP_ROWS = ("switched", "sa-only", "fd-only", "optimistic")


def lap_study(setup: LapSetup, stack_factory, n_obstacles: int = 10, trials: int = 10, base_seed: int = 0,
              rows=LAP_ROWS, rates: Rates = Rates(), params: VehicleParams | None = None,
              bounds: ActionBounds | None = None, progress=None):
    """Best-of-trials lap metrics for each configuration.

    The optimistic row is the switched stack on an empty track; being
    deterministic it needs a single run.  With ``n_obstacles == 0`` only that
    row is produced.  Returns ``(best, records)``; ``best[row]`` is the
    record of the fastest completed trial (or of the first trial when none
    completed).
    """
    if trials < 1:
        raise SimError("trials must be at least 1")
    params = params or VehicleParams()
    bounds = bounds or ActionBounds()
    track = lap_track(setup)
    plan = generate_reference(track, params, bounds)
    if n_obstacles == 0:
        rows = ("optimistic",)
    best, records = {}, []
    for row in rows:
        mode = "switched" if row == "optimistic" else row
        n = 0 if row == "optimistic" else n_obstacles
        runs = 1 if row == "optimistic" else trials
        row_best = None
        for j in range(runs):
            seed = trial_seed(base_seed, j)
            scen = lap_scenario(setup, plan, track, n, seed)
            res = run_episode(scen, stack_factory(mode), rates, params, bounds, keep_log=False)
            rec = {"row": row, "trial": j, "seed": seed, **res.metrics.record()}
            records.append(rec)
            if progress:
                progress(rec)
            key = (not rec["completed"], rec["completion_time"], j)
            if row_best is None or key < row_best[0]:
                row_best = (key, rec)
        best[row] = row_best[1]
    return best, records


# -- output -----------------------------------------------------------------

LOG_FIELDS = ("time", "x", "y", "theta", "v", "psi", "mode", "gamma", "residual", "min_obstacle_distance",
              "collisions")


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.9g}"
    return str(v)


def write_episode_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in LOG_FIELDS])


def write_records(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_table(header, rows, path):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(v) for v in r) + "\n")


def write_series(series: dict, path):
    """Plot data: ``{"name": [[x, y], ...]}``."""
    with open(path, "w") as fh:
        json.dump({k: [[float(x), float(y)] for x, y in v] for k, v in series.items()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
