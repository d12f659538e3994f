import itertools
import json
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridplan.reference import generate_reference, stadium_track, straight_track
from hybridplan.switcher import (C1_VALUES, C2_VALUES, EXPERT_THRESHOLDS, FEATURE_NAMES, BrokenEndpoint,
                                 EchoEndpoint, EndpointConfig, ExperienceDatabase, ExperienceEntry, FailingEndpoint,
                                 ModeCell, ModeCommand, ModeConfig, ObstacleObservation, RuleThresholds,
                                 SceneDescription, SlowEndpoint, Switcher, SwitcherError, SwitchTriggerPolicy,
                                 build_prompt, database_from_labeled, describe_scene, evaluate_precision,
                                 labeled_scenes, llm_switch, load_labeled, map_mode, map_speed, parse_command,
                                 retrieve_topk, rule_based_switch, save_labeled, should_trigger, to_config)
from hybridplan.vehicle import ActionBounds, VehicleParams


def scene(speed=10.0, obstacles=(), kappa=0.0, env=20.0):
    return SceneDescription(0.0, 0.0, 0.0, speed, tuple(ObstacleObservation(*o) for o in obstacles),
                            "curve" if kappa >= 0.01 else "straight", kappa, env)


def entry(i, feats, c1="fd", c2="keep"):
    return ExperienceEntry(f"e{i}", tuple(feats), ModeCommand(c1, c2))


# -- mappings ---------------------------------------------------------------

def test_map_mode_table():
    assert map_mode("fd") == 0
    assert map_mode("sa") == 1


def test_map_speed_table():
    assert map_speed("acc", 2.0) == 2.0
    assert map_speed("keep", 2.0) == 0.0
    assert map_speed("keep", 7.5) == 0.0
    assert map_speed("dec", 2.0) == -2.0


def test_map_mode_bijective():
    assert sorted(map_mode(c) for c in C1_VALUES) == [0, 1]


def test_unknown_commands_rejected():
    with pytest.raises(SwitcherError):
        map_mode("fast")
    with pytest.raises(SwitcherError):
        map_speed("brake", 2.0)
    with pytest.raises(SwitcherError):
        map_speed("acc", 0.0)
    with pytest.raises(SwitcherError):
        ModeCommand("fd", "faster")


@given(st.sampled_from(C1_VALUES), st.sampled_from(C2_VALUES), st.floats(0.01, 50))
def test_config_domain(c1, c2, v0):
    cfg = to_config(ModeCommand(c1, c2), v0)
    assert cfg.beta in (0, 1)
    assert cfg.gamma in (-v0, 0.0, v0)
    assert cfg.mode == c1


def test_mode_config_rejects_other_values():
    with pytest.raises(SwitcherError):
        ModeConfig(2, 0.0, 1.0)
    with pytest.raises(SwitcherError):
        ModeConfig(0, 0.5, 1.0)


# -- scenes -----------------------------------------------------------------

def test_scene_density_and_gaps():
    sc = scene(obstacles=[(20.0, 0.5, -3.0, 0.5), (8.0, 3.5, -1.0, 3.5), (-5.0, 0.0, 1.0, 0.0)])
    assert sc.density == 3
    assert sc.gap_ahead() == 20.0
    assert sc.nearest_gap() == pytest.approx(5.0)


def test_scene_rejects_nonfinite():
    with pytest.raises(SwitcherError):
        scene(speed=float("nan"))


def test_scene_roundtrip():
    sc = scene(obstacles=[(20.0, 0.5, -3.0, 0.5)], kappa=0.02)
    assert SceneDescription.from_dict(json.loads(json.dumps(sc.to_dict()))) == sc


def test_describe_scene_filters_by_radius():
    plan = generate_reference(straight_track(300.0), VehicleParams(), ActionBounds())
    obstacles = [[30.0, 0.0, 0.0, 8.0], [40.0, 3.5, 0.0, 9.0], [120.0, 0.0, 0.0, 8.0]]
    sc = describe_scene([10.0, 0.0, 0.0], 12.0, obstacles, plan, radius=50.0)
    assert sc.density == 2
    assert sc.obstacles[0].rel_x == pytest.approx(20.0)
    assert sc.obstacles[0].rel_speed == pytest.approx(-4.0)
    assert sc.obstacles[1].lane_offset == pytest.approx(3.5, abs=1e-6)
    assert sc.segment_kind == "straight"


def test_describe_scene_sees_curve_ahead():
    plan = generate_reference(stadium_track(100.0, 30.0), VehicleParams(), ActionBounds())
    sc = describe_scene(plan.waypoints[180], 12.0, np.zeros((0, 4)), plan)
    assert sc.segment_kind == "curve"
    assert sc.curvature_ahead == pytest.approx(1 / 30.0, rel=0.15)


# -- rules ------------------------------------------------------------------

def test_rule_empty_road():
    assert rule_based_switch(scene(speed=10.0)) == ModeCommand("fd", "acc")


def test_rule_dense_traffic():
    obs = [(15.0 + 10 * i, 3.5, -2.0, 3.5) for i in range(4)]
    assert rule_based_switch(scene(obstacles=obs)).c1 == "sa"


def test_rule_tight_curve():
    assert rule_based_switch(scene(kappa=0.05)).c2 == "dec"


def test_rule_close_leader():
    assert rule_based_switch(scene(obstacles=[(6.0, 0.0, -3.0, 0.0)])) == ModeCommand("fd", "dec")


def test_rule_keep_at_envelope():
    assert rule_based_switch(scene(speed=20.0, env=20.0)).c2 == "keep"


def test_thresholds_validated():
    with pytest.raises(SwitcherError):
        RuleThresholds(density_sa=0)


# -- retrieval --------------------------------------------------------------

def test_identical_scene_ranks_first():
    sc = scene(obstacles=[(20.0, 0.0, -2.0, 0.0)])
    db = ExperienceDatabase([entry(0, [0, 50, 50, 0, 10, 20]), entry(1, sc.features()), entry(2, [5, 5, 5, 0, 5, 5])])
    assert retrieve_topk(sc, db, 1)[0].id == "e1"


def test_full_retrieval_sorted_by_distance():
    sc = scene()
    rng = np.random.default_rng(0)
    db = ExperienceDatabase([entry(i, rng.uniform(0, 30, 6)) for i in range(10)])
    out = retrieve_topk(sc, db, 10)
    d = [np.linalg.norm((np.array(e.features) - sc.features()) / [1, 10, 10, 0.01, 5, 5]) for e in out]
    assert len(out) == 10 and d == sorted(d)


def test_equidistant_entries_keep_insertion_order():
    sc = scene()
    f = sc.features()
    a = f.copy()
    a[4] += 5.0
    b = f.copy()
    b[4] -= 5.0
    db = ExperienceDatabase([entry(0, [9, 9, 9, 0, 0, 0]), entry(1, a), entry(2, b)])
    assert [e.id for e in retrieve_topk(sc, db, 2)] == ["e1", "e2"]
    db = ExperienceDatabase([entry(0, [9, 9, 9, 0, 0, 0]), entry(2, b), entry(1, a)])
    assert [e.id for e in retrieve_topk(sc, db, 2)] == ["e2", "e1"]


def test_k_above_size_returns_everything():
    db = ExperienceDatabase([entry(0, [0] * 6), entry(1, [1] * 6)])
    assert len(retrieve_topk(scene(), db, 5)) == 2


def test_retrieval_needs_data_and_k():
    with pytest.raises(SwitcherError):
        retrieve_topk(scene(), ExperienceDatabase(), 1)
    with pytest.raises(SwitcherError):
        retrieve_topk(scene(), ExperienceDatabase([entry(0, [0] * 6)]), 0)


def test_permutation_invariance_without_ties():
    rng = np.random.default_rng(4)
    entries = [entry(i, rng.uniform(0, 30, 6)) for i in range(12)]
    sc = scene(speed=12.0)
    ref = [e.id for e in retrieve_topk(sc, ExperienceDatabase(entries), 5)]
    for perm in itertools.islice(itertools.permutations(range(12)), 0, 50, 7):
        shuffled = ExperienceDatabase([entries[i] for i in perm])
        assert [e.id for e in retrieve_topk(sc, shuffled, 5)] == ref


def test_database_roundtrip(tmp_path):
    db = database_from_labeled(labeled_scenes(2, seed=1))
    db.save(tmp_path / "db.json")
    again = ExperienceDatabase.load(tmp_path / "db.json")
    assert [e.to_dict() for e in again.entries] == [e.to_dict() for e in db.entries]


def test_duplicate_ids_rejected():
    with pytest.raises(SwitcherError):
        ExperienceDatabase([entry(0, [0] * 6), entry(0, [1] * 6)])


def test_entry_feature_length_checked():
    with pytest.raises(SwitcherError):
        entry(0, [0] * 5)


def test_database_load_reports_line(tmp_path):
    p = tmp_path / "db.json"
    p.write_text('{"entries": [\n  {"id": 1,\n}')
    with pytest.raises(SwitcherError, match=":3:"):
        ExperienceDatabase.load(p)


# -- prompt and parsing -----------------------------------------------------

def test_prompt_without_experience():
    text = build_prompt(scene(), [])
    assert "## Scene" in text and "## Answer" in text
    assert "## Experience" not in text


def test_prompt_lists_entries_in_rank_order():
    entries = [entry(i, [i] * 6) for i in (7, 3, 5)]
    text = build_prompt(scene(), entries)
    assert text.count("## Experience") == 3
    assert text.index("id e7") < text.index("id e3") < text.index("id e5")
    assert "## Experience 1 (id e7)" in text


def test_prompt_deterministic():
    sc = scene(obstacles=[(20.0, 0.0, -2.0, 0.0)])
    entries = [entry(1, sc.features())]
    assert build_prompt(sc, entries) == build_prompt(sc, entries)


def test_parse_takes_last_valid_record():
    text = 'maybe {"c1": "sa", "c2": "dec"} but no, {"c1": "fd", "c2": "acc"} and {"x": 1}'
    assert parse_command(text) == ModeCommand("fd", "acc")


def test_parse_failure():
    with pytest.raises(SwitcherError):
        parse_command('{"c1": "fast", "c2": 3')


# -- endpoint path ----------------------------------------------------------

def test_echo_returns_top_entry_command():
    sc = scene(obstacles=[(20.0, 0.0, -2.0, 0.0)])
    db = ExperienceDatabase([entry(0, [9] * 6, "fd", "acc"), entry(1, sc.features(), "sa", "dec")])
    dec = llm_switch(sc, db, 2, EchoEndpoint())
    assert dec.command == ModeCommand("sa", "dec") and not dec.degraded
    assert dec.retrieved == ["e1", "e0"]


def test_malformed_response_falls_back():
    sc = scene()
    dec = llm_switch(sc, None, 0, BrokenEndpoint())
    assert dec.degraded and dec.command == rule_based_switch(sc)


def test_unreachable_endpoint_falls_back():
    dec = llm_switch(scene(), None, 0, FailingEndpoint())
    assert dec.degraded and "URLError" in dec.error


def test_timeout_falls_back_without_blocking():
    sc = scene()
    db = ExperienceDatabase([entry(0, sc.features(), "sa", "dec")])
    t0 = time.perf_counter()
    dec = llm_switch(sc, db, 1, SlowEndpoint(2.0), timeout=0.5)
    elapsed = time.perf_counter() - t0
    assert dec.degraded and dec.command == rule_based_switch(sc)
    assert elapsed < 1.0


def test_endpoint_config_from_env(monkeypatch):
    monkeypatch.setenv("MODE_SWITCH_URL", "http://example.invalid/x")
    monkeypatch.setenv("MODE_SWITCH_TIMEOUT", "0.25")
    cfg = EndpointConfig.from_env()
    assert cfg.url == "http://example.invalid/x" and cfg.timeout == 0.25


# -- precision --------------------------------------------------------------

def test_labeled_set_balanced():
    labeled = labeled_scenes(5, seed=3)
    counts = {}
    for _, cmd in labeled:
        counts[(cmd.c1, cmd.c2)] = counts.get((cmd.c1, cmd.c2), 0) + 1
    assert len(counts) == 6 and set(counts.values()) == {5}


def test_labeler_scores_one():
    labeled = labeled_scenes(5, seed=3)
    assert evaluate_precision(lambda s: rule_based_switch(s, EXPERT_THRESHOLDS), labeled) == 1.0


def test_constant_switch_scores_one_sixth():
    labeled = labeled_scenes(5, seed=3)
    assert evaluate_precision(lambda s: ModeCommand("fd", "keep"), labeled) == pytest.approx(1 / 6)


def test_echo_with_database_scores_one():
    labeled = labeled_scenes(5, seed=3)
    sw = Switcher("mock", database_from_labeled(labeled), k=3)
    assert evaluate_precision(sw.command, labeled) == 1.0


def test_echo_without_retrieval_equals_fallback():
    labeled = labeled_scenes(5, seed=3)
    sw = Switcher("mock", database_from_labeled(labeled), k=0)
    rule = evaluate_precision(lambda s: rule_based_switch(s), labeled)
    assert evaluate_precision(sw.command, labeled) == rule
    assert all(r.degraded for r in sw.log)


def test_precision_needs_scenes():
    with pytest.raises(SwitcherError):
        evaluate_precision(rule_based_switch, [])


def test_labeled_roundtrip(tmp_path):
    labeled = labeled_scenes(2, seed=9)
    save_labeled(labeled, tmp_path / "l.json")
    assert load_labeled(tmp_path / "l.json") == labeled


# -- triggers and the mode cell ---------------------------------------------

def test_trigger_rules():
    pol = SwitchTriggerPolicy()
    assert not should_trigger(pol, 10.5, 10.0, False)
    assert should_trigger(pol, 11.0, 10.0, False)
    assert should_trigger(pol, 10.1, 10.0, True)
    assert should_trigger(pol, 0.0, None, False)
    assert not should_trigger(SwitchTriggerPolicy(reactive=False), 10.1, 10.0, True)


def test_trigger_period_after_float_steps():
    now = 0.0
    for _ in range(100):
        now += 0.01
    assert should_trigger(SwitchTriggerPolicy(), now, 0.0, False)


def test_trigger_timestamps_monotone():
    with pytest.raises(SwitcherError):
        should_trigger(SwitchTriggerPolicy(), 1.0, 2.0, False)


def test_mode_cell_drops_stale_publish():
    cell = ModeCell(ModeConfig(0, 0.0, 2.0))
    assert cell.publish(2, ModeConfig(1, -2.0, 2.0))
    assert not cell.publish(1, ModeConfig(0, 2.0, 2.0))
    assert cell.read() == (2, ModeConfig(1, -2.0, 2.0))


def test_mode_cell_concurrent_publishers():
    cell = ModeCell(ModeConfig(0, 0.0, 2.0))
    values = [ModeConfig(i % 2, 0.0, 2.0) for i in range(200)]

    def worker(start):
        for seq in range(start, 200, 4):
            cell.publish(seq, values[seq])
    threads = [threading.Thread(target=worker, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seq, val = cell.read()
    assert seq == 199 and val == values[199]


def test_rule_switcher_has_no_endpoint(tmp_path):
    sw = Switcher("rule")
    assert sw.endpoint is None
    sw.decide(scene(), now=1.0)
    sw.write_log(tmp_path / "log.jsonl")
    rec = json.loads((tmp_path / "log.jsonl").read_text())
    assert rec["command"] == {"c1": "fd", "c2": "acc"} and rec["time"] == 1.0
    assert set(rec["scene"]) == set(FEATURE_NAMES)


def test_unknown_backend():
    with pytest.raises(SwitcherError):
        Switcher("oracle")
