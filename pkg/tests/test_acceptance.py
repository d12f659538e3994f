"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible
without ``-s``) before asserting.  Studies are long; run just this file with
``pytest tests/test_acceptance.py -v``.
"""
import math
import statistics
import time

import numpy as np
import pytest

from hybridplan import cli
from hybridplan.fd_planner import FdConfig, FdPlanner, exhaustive_select, tree_search_select
from hybridplan.geometry import (ConvexPolytope, DualVariables, RigidPose2, certificate_value,
                                 dual_certificate_feasible, max_margin_duals, transform_to_world)
from hybridplan.reference import generate_reference, query_reference, straight_track
from hybridplan.sa_planner import SaConfig, SaPlanner, predict_polytopes
from hybridplan.sim import (LapSetup, OvertakeSetup, build_stack, lap_study, overtake_scenario, overtake_study,
                            run_episode)
from hybridplan.switcher import (C1_VALUES, C2_VALUES, EchoEndpoint, database_from_labeled, evaluate_precision,
                                 labeled_scenes, llm_switch, map_mode, map_speed, rule_based_switch)
from hybridplan.vehicle import ActionBounds, ControlInput, VehicleParams, VehicleState, linearize, propagate
from oracles import brute_force_one_hot, random_convex_polygon, sampled_distance

PARAMS = VehicleParams()
BOUNDS = ActionBounds()


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# 1 ---------------------------------------------------------------------------

def test_duality_correctness(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_margin, flips, pairs = 0.0, 0, 0
    while pairs < 500:
        ego = ConvexPolytope.from_vertices(random_convex_polygon(rng))
        obstacle = ConvexPolytope.from_vertices(random_convex_polygon(rng) + rng.uniform(-8, 8, 2))
        pose = RigidPose2(*rng.uniform(-2, 2, 2), rng.uniform(-math.pi, math.pi))
        oracle = sampled_distance(transform_to_world(ego, pose).vertices, obstacle.vertices)
        if oracle <= 1e-3:
            continue                        # keep disjoint pairs only
        pairs += 1
        duals, margin = max_margin_duals(ego, pose, obstacle)
        worst_margin = max(worst_margin, abs(margin - oracle))
        below = dual_certificate_feasible(ego, pose, obstacle, duals, margin - 1e-5)
        above = dual_certificate_feasible(ego, pose, obstacle, duals, margin + 1e-5)
        flips += int(below and not above)
    elapsed = time.perf_counter() - t0
    ok = worst_margin <= 1e-6 and flips == 500 and elapsed < 30.0
    report(1, ok, f"max |margin - oracle| {worst_margin:.2e} m, flips {flips}/500, {elapsed:.1f} s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_linearization_order(report):
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(20):
        s = np.array([*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi)])
        u = np.array([rng.uniform(1.0, 20.0), rng.uniform(-0.45, 0.45)])
        lin = linearize(VehicleState(*s), ControlInput(*u), PARAMS)
        d = rng.normal(size=5)
        d /= np.linalg.norm(d)

        def err(delta):
            ds, du = delta * d[:3], delta * d[3:]
            return np.linalg.norm(lin.step(s + ds, u + du) - propagate(s + ds, u + du, PARAMS))
        ratios.append(err(1e-2) / err(5e-3))
    ok = all(3.5 <= r <= 4.5 for r in ratios)
    report(2, ok, f"error ratio on halving in [{min(ratios):.3f}, {max(ratios):.3f}] over 20 points")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_fd_equivalence(report):
    from test_fd_planner import _random_layout
    mismatches, feasible, total = 0, 0, 0
    for M in range(1, 9):
        rng = np.random.default_rng(100 + M)
        for _ in range(100):
            ref, rolls, obs, S = _random_layout(rng, M)
            res = tree_search_select(rolls, obs, ref, 3.0)
            idx, cost = brute_force_one_hot(S, obs, ref.states, 3.0, [r.path.offset for r in rolls],
                                            [r.path.id for r in rolls])
            total += 1
            same = res.feasible == (idx is not None) and exhaustive_select(rolls, obs, ref, 3.0) == idx
            if same and idx is not None:
                feasible += 1
                same = res.selected == rolls[idx].path.id and res.cost == cost
            mismatches += int(not same)
    ok = mismatches == 0
    report(3, ok, f"{total} layouts (M = 1..8), {feasible} feasible, {mismatches} mismatches")
    assert ok


# 4 ---------------------------------------------------------------------------

def _corridor():
    track = straight_track(300.0, 5.25)
    plan = generate_reference(track, PARAMS, BOUNDS)
    body = PARAMS.footprint()
    boxes = [transform_to_world(body, RigidPose2(x, y, 0.0)) for x, y in ((24, 0), (30, 3.5), (45, -3.5))]
    vel = [[5.0, 0.0], [8.0, 0.0], [5.0, 0.0]]
    return track, plan, boxes, vel


def test_am_behavior(report):
    track, plan, boxes, vel = _corridor()
    cfg = SaConfig()
    s_t, u_prev = np.array([10.0, 0.0, 0.0]), np.array([15.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, cfg.H, PARAMS.dt)
    pred = predict_polytopes(boxes, vel, cfg.H, PARAMS.dt)
    planner = SaPlanner(cfg, PARAMS, BOUNDS)
    first = planner.plan(s_t, u_prev, ref, pred, track)
    monotone = all(it["objective"] <= it["objective_at_lin"] + 1e-9 for it in first.diagnostics["history"])
    residual = first.diagnostics["residual"]
    # next frame: warm start from the stored state versus a fresh planner
    s_1 = first.states[1]
    pred_1 = predict_polytopes([b.translated(PARAMS.dt * np.asarray(v)) for b, v in zip(boxes, vel)],
                               vel, cfg.H, PARAMS.dt)
    ref_1 = query_reference(plan, s_1, 0.0, cfg.H, PARAMS.dt)
    warm = planner.plan(s_1, first.inputs[0], ref_1, pred_1, track)
    cold = SaPlanner(cfg, PARAMS, BOUNDS).plan(s_1, first.inputs[0], ref_1, pred_1, track)
    it_warm = warm.diagnostics["iterations_to_tolerance"]
    it_cold = cold.diagnostics["iterations_to_tolerance"]
    # timing: repeated cold cycles (cold is the slower case); the minimum is the
    # cycle cost, the median is reported to show scheduling noise on a shared machine
    sa_times = []
    for _ in range(15):
        planner.reset()
        t0 = time.perf_counter()
        planner.plan(s_t, u_prev, ref, pred, track)
        sa_times.append(time.perf_counter() - t0)
    fd = FdPlanner(FdConfig(), PARAMS, BOUNDS)
    pts = np.stack([b.vertices.mean(axis=0) + np.arange(cfg.H + 1)[:, None] * PARAMS.dt * np.asarray(v)
                    for b, v in zip(boxes, vel)])
    fd.plan(s_t, u_prev, ref, pts, track)
    fd_times = []
    for _ in range(21):
        t0 = time.perf_counter()
        fd.plan(s_t, u_prev, ref, pts, track)
        fd_times.append(time.perf_counter() - t0)
    sa_ms, fd_ms = 1e3 * min(sa_times), 1e3 * min(fd_times)
    ok = (monotone and first.feasible and residual <= 1e-3 and warm.diagnostics["residual"] <= 1e-3
          and it_warm <= it_cold and sa_ms <= 50.0 and fd_ms <= 10.0)
    report(4, ok, f"monotone {monotone}, residual {residual:.1e}, iterations warm {it_warm} / cold {it_cold}, "
                  f"SA {sa_ms:.1f} ms (median {1e3 * statistics.median(sa_times):.1f}), "
                  f"FD {fd_ms:.2f} ms (median {1e3 * statistics.median(fd_times):.2f})")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_overtake_trend(report):
    t0 = time.perf_counter()
    table, _ = overtake_study(OvertakeSetup(), build_stack, densities=(1, 2, 3, 4, 5), trials=20,
                              modes=("fd-only", "sa-only"))
    elapsed = time.perf_counter() - t0
    fd, sa = table["fd-only"], table["sa-only"]
    ok = (all(a >= b for a, b in zip(fd, fd[1:])) and fd[4] <= 0.25
          and all(s >= 0.9 for s in sa[:3]) and all(s > f for s, f in zip(sa[2:], fd[2:]))
          and elapsed < 600.0)
    report(5, ok, f"FD-only {fd}, SA-only {sa}, {elapsed:.0f} s")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_lap_ordering(report):
    best, _ = lap_study(LapSetup(), build_stack, n_obstacles=10, trials=10)
    opt, sw, sa = (best[r]["completion_time"] for r in ("optimistic", "switched", "sa-only"))
    completed = all(best[r]["completed"] for r in ("optimistic", "switched", "sa-only"))
    ok = (completed and opt <= sw <= sa and sw <= 1.1 * opt and best["sa-only"]["collisions"] == 0)
    report(6, ok, f"optimistic {opt:.2f} s, switched {sw:.2f} s ({100 * (sw / opt - 1):.1f}% over), "
                  f"SA-only {sa:.2f} s with {best['sa-only']['collisions']} collisions, "
                  f"FD-only {best['fd-only']['completion_time']:.2f} s")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_switcher_plumbing(report):
    labeled = labeled_scenes(10, 0)
    database = database_from_labeled(labeled)
    echo = EchoEndpoint()
    with_k = evaluate_precision(lambda s: llm_switch(s, database, 3, echo).command, labeled)
    without = evaluate_precision(lambda s: llm_switch(s, database, 0, echo).command, labeled)
    fallback = evaluate_precision(rule_based_switch, labeled)
    ok = with_k == 1.0 and without == fallback and with_k > without
    report(7, ok, f"echo k=3 {with_k:.3f}, k=0 {without:.3f}, rule fallback {fallback:.3f}")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_mapping_exactness(report):
    v0 = 2.0
    modes = {c: map_mode(c) for c in C1_VALUES}
    speeds = {c: map_speed(c, v0) for c in C2_VALUES}
    ok = modes == {"fd": 0, "sa": 1} and speeds == {"acc": v0, "keep": 0.0, "dec": -v0}
    report(8, ok, f"map_mode {modes}, map_speed {speeds}")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_determinism(report, tmp_path):
    args = ["study", "overtake", "--override", "study.trials=3", "--override", "study.densities=[1, 3, 5]",
            "--override", "scenario.overtake={road_length: 300.0, max_time: 10.0}"]
    codes = [cli.main(args + ["--out-dir", str(tmp_path / d)]) for d in ("a", "b")]
    names = ("overtake_table.tsv", "overtake_trials.jsonl", "overtake_plot.json")
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    ok = codes == [0, 0] and all(same.values())
    report(9, ok, f"byte-identical reruns: {same}")
    assert ok


# 10 --------------------------------------------------------------------------

def test_safety_contract(report, monkeypatch):
    cfg = SaConfig()
    body = PARAMS.footprint()
    seen = {"plans": 0, "feasible": 0, "pairs": 0, "checked": 0}
    worst = [math.inf, math.inf]             # certified value, oracle distance
    original = SaPlanner.plan

    def audited(self, s_t, u_prev, reference, prediction, track=None, shift=1):
        res = original(self, s_t, u_prev, reference, prediction, track, shift)
        seen["plans"] += 1
        if not res.feasible:
            return res
        seen["feasible"] += 1
        state = res.diagnostics["sa_state"]
        for i, block in enumerate(state.duals):
            for h, s in enumerate(state.states):
                pose = RigidPose2(*s)
                obstacle = prediction.polytopes[i][h]
                value = certificate_value(body, pose, obstacle, DualVariables(block.lam[h], block.mu[h]))
                seen["pairs"] += 1
                worst[0] = min(worst[0], value)
                if value < cfg.d_safe + 1.0:
                    # near pairs: the true distance must dominate the certified value
                    d = sampled_distance(transform_to_world(body, pose).vertices, obstacle.vertices)
                    worst[1] = min(worst[1], d - value)
                    seen["checked"] += 1
        return res

    monkeypatch.setattr(SaPlanner, "plan", audited)
    setup = OvertakeSetup()
    track = straight_track(setup.road_length, setup.half_width)
    plan = generate_reference(track, PARAMS, BOUNDS)
    for density in (1, 3, 5):
        for seed in range(4):
            run_episode(overtake_scenario(setup, plan, track, density, seed), build_stack("sa-only"), keep_log=False)
    ok = seen["feasible"] > 0 and worst[0] >= cfg.d_safe - 1e-2 and worst[1] >= -1e-6
    report(10, ok, f"{seen['feasible']}/{seen['plans']} feasible SA plans, {seen['pairs']} pairs, "
                   f"min certified clearance {worst[0]:.4f} m (d_safe {cfg.d_safe}), "
                   f"oracle distance minus certified value >= {worst[1]:.2e} over {seen['checked']} near pairs")
    assert ok
