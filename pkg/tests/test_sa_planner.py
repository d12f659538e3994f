import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridplan.geometry import RigidPose2, min_distance, rectangle_polytope, transform_to_world
from hybridplan.reference import ReferenceSlice, generate_reference, query_reference, straight_track
from hybridplan.sa_planner import (DualBlock, ObstaclePrediction, SaConfig, SaPlanner, SaState, am_solve,
                                   certificate_residuals, predict_polytopes, solve_dual_subproblem,
                                   solve_motion_subproblem)
from hybridplan.fd_planner import reference_inputs
from hybridplan.vehicle import ActionBounds, VehicleParams, check_bounds, rollout
from oracles import sampled_distance

PARAMS = VehicleParams()
BOUNDS = ActionBounds()
BODY = PARAMS.footprint()
TRACK = straight_track(300.0, half_width=5.25)


@pytest.fixture(scope="module")
def plan():
    return generate_reference(TRACK, PARAMS, BOUNDS)


def box_at(x, y, th=0.0):
    return transform_to_world(BODY, RigidPose2(x, y, th))


def static(polys, H=10):
    return ObstaclePrediction([[p] * (H + 1) for p in polys])


def min_footprint_distance(states, prediction):
    out = np.inf
    for row in prediction.polytopes:
        for h, obs in enumerate(row):
            out = min(out, min_distance(transform_to_world(BODY, RigidPose2(*states[h])), obs))
    return out


def first_motion(s_t, ref, u_prev=None, config=SaConfig()):
    u_lin = reference_inputs(ref, PARAMS, BOUNDS, config.H)
    return rollout(s_t, u_lin, PARAMS), u_lin


# -- configuration and containers -------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SaConfig(am_iterations=1)
    with pytest.raises(ValueError):
        SaConfig(am_iterations=11)
    with pytest.raises(ValueError):
        SaConfig(d_safe=0.0)
    with pytest.raises(ValueError):
        SaConfig(speed_cap=-1.0)


def test_state_rejects_negative_duals():
    with pytest.raises(ValueError):
        SaState(np.zeros((2, 3)), np.zeros((1, 2)), [DualBlock(-np.ones((2, 4)), np.zeros((2, 4)), np.zeros(2))])


def test_prediction_shapes_checked():
    with pytest.raises(ValueError):
        ObstaclePrediction([[box_at(0, 0)] * 3, [box_at(5, 0)] * 2])
    with pytest.raises(TypeError):
        ObstaclePrediction([[np.zeros((4, 2))]])


def test_constant_velocity_polytopes():
    pred = predict_polytopes([box_at(10, 0)], [[5.0, 1.0]], 4, 0.1)
    np.testing.assert_allclose(pred.centers()[0, -1], [12.0, 0.4], atol=1e-12)
    assert pred.N == 1 and pred.steps == 5


# -- motion subproblem ------------------------------------------------------

def test_pure_tracking_from_the_path(plan):
    s_t = np.array([20.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, 10, 0.1)
    sol = solve_motion_subproblem([], s_t, ref, static([]), BOUNDS, PARAMS, first_motion(s_t, ref), SaConfig(),
                                  u_prev=np.array([20.0, 0.0]))
    assert sol.objective < 1e-6
    assert sol.pairs == [] and sol.slack.size == 0


def test_gamma_shift_lowers_speeds(plan):
    s_t = np.array([20.0, 0.0, 0.0])
    # the plain envelope sits on the upper speed bound here, so compare two shifted references
    v = []
    for gamma in (-2.0, -4.0):
        ref = query_reference(plan, s_t, gamma, 10, 0.1)
        sol = solve_motion_subproblem([], s_t, ref, static([]), BOUNDS, PARAMS, first_motion(s_t, ref), SaConfig())
        v.append(sol.inputs[:, 0])
    np.testing.assert_allclose(v[1], v[0] - 2.0, atol=1e-4)


def certified_value(state, lam, obstacle):
    """Weak-duality lower bound on the distance for fixed obstacle duals, mu eliminated exactly."""
    n = lam @ obstacle.normals
    R = RigidPose2(*state).rotation
    return float(n @ state[:2] - lam @ obstacle.offsets - np.max(-(BODY.vertices @ R.T) @ n))


def test_active_duals_keep_clearance(plan, x_obs=32.0):
    """A stopped car in the lane: with duals held fixed the rows certify d_safe."""
    cfg = SaConfig()
    s_t = np.array([10.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, cfg.H, 0.1)
    pred = static([box_at(x_obs, 0.0)])
    lin = first_motion(s_t, ref)
    duals, _ = solve_dual_subproblem(lin[0], pred, BODY, cfg.d_safe)
    assert duals[0].margin.min() < cfg.d_safe          # the unconstrained plan would hit it
    u_prev = np.array([15.0, 0.0])
    sol = solve_motion_subproblem(duals, s_t, ref, pred, BOUNDS, PARAMS, lin, cfg, u_prev=u_prev)
    assert sol.pairs and np.all(sol.slack <= 1e-9)
    assert check_bounds(sol.inputs, BOUNDS, u_prev, tol=1e-9)
    assert np.all(np.abs(sol.states[:, 2] - lin[0][:, 2]) <= cfg.trust_region + 1e-9)
    for _, h in set(sol.pairs):
        value = certified_value(sol.states[h], duals[0].lam[h], pred.polytopes[0][h])
        assert value >= cfg.d_safe - 1e-6
        ego = transform_to_world(BODY, RigidPose2(*sol.states[h]))
        assert min_distance(ego, pred.polytopes[0][h]) >= value - 1e-9


def test_unreachable_certificate_uses_slack(plan):
    """Too close to clear in one subproblem: the rows relax and the slack is reported."""
    cfg = SaConfig()
    s_t = np.array([10.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, cfg.H, 0.1)
    pred = static([box_at(28.0, 0.0)])
    lin = first_motion(s_t, ref)
    duals, _ = solve_dual_subproblem(lin[0], pred, BODY, cfg.d_safe)
    u_prev = np.array([15.0, 0.0])
    sol = solve_motion_subproblem(duals, s_t, ref, pred, BOUNDS, PARAMS, lin, cfg, u_prev=u_prev)
    assert sol.slack.sum() > 0
    assert check_bounds(sol.inputs, BOUNDS, u_prev, tol=1e-9)
    assert sol.objective >= cfg.slack_weight * sol.slack.sum()


def test_motion_rows_reject_bad_shapes(plan):
    s_t = np.array([10.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, 10, 0.1)
    with pytest.raises(ValueError):
        solve_motion_subproblem([], s_t, ref, static([]), BOUNDS, PARAMS, (np.zeros((5, 3)), np.zeros((4, 2))),
                                SaConfig())


# -- dual subproblem --------------------------------------------------------

def test_far_obstacle_margin_is_distance():
    states = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
    obs = box_at(60.0, 8.0, 0.3)
    duals, flagged = solve_dual_subproblem(states, static([obs]), BODY, 0.5)
    assert flagged == []
    for h in (0, 5, 10):
        ego = transform_to_world(BODY, RigidPose2(*states[h]))
        assert duals[0].margin[h] == pytest.approx(sampled_distance(ego.vertices, obs.vertices), abs=1e-6)
    assert np.max(certificate_residuals(states, static([obs]), BODY, duals, 0.5)) <= 1e-9


def test_overlap_reports_negative_margin():
    states = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
    duals, _ = solve_dual_subproblem(states, static([box_at(5.0, 0.5)]), BODY, 0.5)
    assert duals[0].margin[5] < 0
    res = certificate_residuals(states, static([box_at(5.0, 0.5)]), BODY, duals, 0.5)
    assert res[0, 5] >= 0.5


def test_no_obstacles():
    states = np.zeros((11, 3))
    duals, flagged = solve_dual_subproblem(states, static([]), BODY, 0.5)
    assert duals == [] and flagged == []
    assert certificate_residuals(states, static([]), BODY, duals, 0.5).size == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_dual_solutions_valid_and_order_free(seed):
    rng = np.random.default_rng(seed)
    states = np.column_stack([rng.uniform(-5, 5, (11, 2)), rng.uniform(-np.pi, np.pi, 11)])
    polys = [box_at(*rng.uniform(-15, 15, 2), rng.uniform(-3, 3)) for _ in range(3)]
    duals, _ = solve_dual_subproblem(states, static(polys), BODY, 0.5)
    for d, p in zip(duals, polys):
        assert np.all(d.lam >= 0) and np.all(d.mu >= 0)
        assert np.all(np.linalg.norm(d.lam @ p.normals, axis=1) <= 1 + 1e-8)
    perm = [2, 0, 1]
    again, _ = solve_dual_subproblem(states, static([polys[i] for i in perm]), BODY, 0.5)
    for j, i in enumerate(perm):
        np.testing.assert_array_equal(again[j].lam, duals[i].lam)
        np.testing.assert_array_equal(again[j].margin, duals[i].margin)


# -- alternating minimization -----------------------------------------------

def test_free_road_converges_at_once(plan):
    s_t = np.array([20.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, 10, 0.1)
    res = am_solve(s_t, static([]), ref, SaConfig(), PARAMS, BOUNDS, u_prev=np.array([20.0, 0.0]))
    assert res.feasible and res.diagnostics["iterations"] == 1
    assert res.cost < 1e-6


def test_swerves_around_stopped_car(plan):
    cfg = SaConfig()
    planner = SaPlanner(cfg, PARAMS, BOUNDS)
    s_t = np.array([10.0, 0.0, 0.0])
    u_prev = np.array([15.0, 0.0])
    pred = static([box_at(24.0, 0.0)])
    ref = query_reference(plan, s_t, 0.0, cfg.H, 0.1)
    res = planner.plan(s_t, u_prev, ref, pred, TRACK)
    assert res.feasible and res.offset != 0.0
    assert abs(res.states[-1, 1]) > 1.0
    # nonlinear rollout of the planned inputs keeps the full footprints apart
    traj = rollout(s_t, res.inputs, PARAMS)
    assert min_footprint_distance(traj, pred) >= cfg.d_safe - 1e-2
    assert res.diagnostics["bounds_ok"]


def test_objective_non_increasing_per_iteration(plan):
    cfg = SaConfig()
    s_t = np.array([10.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, cfg.H, 0.1)
    pred = predict_polytopes([box_at(24, 0), box_at(30, 3.5), box_at(45, -3.5)], [[5, 0], [8, 0], [5, 0]], cfg.H, 0.1)
    planner = SaPlanner(cfg, PARAMS, BOUNDS)
    res = planner.plan(s_t, np.array([15.0, 0.0]), ref, pred, TRACK)
    for it in res.diagnostics["history"]:
        assert it["objective"] <= it["objective_at_lin"] + 1e-6


def test_warm_start_not_slower_than_cold(plan):
    cfg = SaConfig()
    pred_rows = [box_at(24, 0), box_at(30, 3.5), box_at(45, -3.5)]
    vel = [[5, 0], [8, 0], [5, 0]]
    s_t = np.array([10.0, 0.0, 0.0])
    planner = SaPlanner(cfg, PARAMS, BOUNDS)
    first = planner.plan(s_t, np.array([15.0, 0.0]), query_reference(plan, s_t, 0.0, cfg.H, 0.1),
                         predict_polytopes(pred_rows, vel, cfg.H, 0.1), TRACK)
    # next frame: the vehicle followed the plan for one step, obstacles moved on
    s_1 = first.states[1]
    moved = [p.translated(0.1 * np.asarray(v, dtype=float)) for p, v in zip(pred_rows, vel)]
    pred_1 = predict_polytopes(moved, vel, cfg.H, 0.1)
    ref_1 = query_reference(plan, s_1, 0.0, cfg.H, 0.1)
    warm = planner.plan(s_1, first.inputs[0], ref_1, pred_1, TRACK)
    cold = SaPlanner(cfg, PARAMS, BOUNDS).plan(s_1, first.inputs[0], ref_1, pred_1, TRACK)
    assert warm.feasible and cold.feasible
    assert warm.diagnostics["iterations_to_tolerance"] <= cold.diagnostics["iterations_to_tolerance"]


def test_feasible_means_certified(plan):
    cfg = SaConfig()
    s_t = np.array([10.0, 0.0, 0.0])
    pred = static([box_at(24.0, 0.0), box_at(40.0, 3.5)])
    res = SaPlanner(cfg, PARAMS, BOUNDS).plan(s_t, np.array([15.0, 0.0]),
                                              query_reference(plan, s_t, 0.0, cfg.H, 0.1), pred, TRACK)
    assert res.feasible
    assert res.diagnostics["residual"] <= cfg.tolerance
    assert min_footprint_distance(res.states, pred) >= cfg.d_safe - cfg.tolerance


def test_speed_cap_limits_tracked_speed(plan):
    cfg = SaConfig(speed_cap=12.0)
    s_t = np.array([10.0, 0.0, 0.0])
    ref = query_reference(plan, s_t, 0.0, 10, 0.1, v_cap=12.0)
    res = SaPlanner(cfg, PARAMS, BOUNDS).plan(s_t, np.array([12.0, 0.0]), ref, static([]), TRACK)
    assert np.all(res.inputs[:, 0] <= 12.0 + 1e-6)


def test_planner_reset_clears_warm_start(plan):
    planner = SaPlanner(SaConfig(), PARAMS, BOUNDS)
    s_t = np.array([10.0, 0.0, 0.0])
    planner.plan(s_t, None, query_reference(plan, s_t, 0.0, 10, 0.1), static([]), TRACK)
    assert planner.state is not None
    planner.reset()
    assert planner.state is None
