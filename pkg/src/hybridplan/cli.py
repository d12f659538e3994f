"""Command-line entry points: gen-reference, run, study, eval-switcher.

Every command takes a YAML config (``--config``; the bundled demo config
when omitted) which is merged over the defaults below and validated in full
before any compute starts.  ``--override a.b=value`` patches single fields,
values being parsed as YAML scalars.

Exit codes: 0 success, 2 config/input error, 3 episode failure, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import yaml

from .fd_planner import FdConfig
from .reference import (GenerationError, ReferencePlan, Track, TrackError, generate_reference, segment_track,
                        stadium_track, straight_track)
from .sa_planner import SaConfig
from .sim import (MODES, LapSetup, ObstacleSpec, OvertakeSetup, Rates, Scenario, SimError, build_stack,
                  lap_scenario, lap_study, lap_track, overtake_scenario, overtake_study, run_episode,
                  write_episode_log, write_records, write_series, write_table)
from .switcher import (EXPERT_THRESHOLDS, EchoEndpoint, EndpointConfig, ExperienceDatabase, HttpEndpoint,
                       RuleThresholds, Switcher, SwitcherError, SwitchTriggerPolicy, database_from_labeled,
                       evaluate_precision, labeled_scenes, llm_switch, load_labeled, rule_based_switch)
from .vehicle import ActionBounds, VehicleError, VehicleParams

log = logging.getLogger("hybridplan")

EXIT_OK, EXIT_CONFIG, EXIT_EPISODE, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "track": {"kind": "straight", "path": None, "length": 600.0, "straight": 300.0, "radius": 60.0,
              "half_width": 5.25},
    "reference": {"path": None, "lookahead": 5.0, "a_lat_max": 6.0, "spacing": 0.5},
    "vehicle": {"wheelbase": 2.8, "dt": 0.1, "length": 4.5, "width": 2.0},
    "bounds": {"u_min": [0.0, -0.5], "u_max": [20.0, 0.5], "a_min": [-0.8, -0.1], "a_max": [0.5, 0.1]},
    "fd": {"M": 3, "H": 10, "eps": 0.3, "d_safe": 4.0, "offsets": [-3.5, 0.0, 3.5]},
    "sa": {"H": 10, "d_safe": 0.5, "am_iterations": 3, "tolerance": 1e-3, "trust_region": 0.2,
           "speed_cap": 15.0, "offsets": [-3.5, 0.0, 3.5]},
    "switcher": {"mode": "rule", "database": None, "k": 3, "v0": 2.0, "timeout": 0.5,
                 "thresholds": {"density_sa": 2, "gap_dec": 10.0, "curve_dec": 0.02, "clear_gap": 30.0}},
    "rates": {"plan_hz": 10.0, "control_hz": 100.0, "trigger_period": 1.0, "reactive": True,
              "switch_latency": 0.0},
    "scenario": {"kind": "overtake", "mode": "switched", "density": 3, "n_obstacles": 10,
                 "ego_speed": 12.0, "max_time": 30.0, "goal_arc": None, "ego_arc": 10.0, "obstacles": [],
                 "overtake": {}, "lap": {}},
    "study": {"kind": "overtake", "densities": [1, 2, 3, 4, 5], "trials": 20,
              "modes": ["fd-only", "sa-only", "switched"], "n_obstacles": 10},
    "eval": {"labels": None, "n_per_class": 10},
}

# fields whose default is None but which take a value of this type
NULLABLE = {"track.path": str, "reference.path": str, "switcher.database": str, "sa.speed_cap": float,
            "scenario.goal_arc": float, "eval.labels": str}
CHOICES = {"track.kind": ("straight", "stadium", "file"), "switcher.mode": ("rule", "endpoint", "mock"),
           "scenario.kind": ("overtake", "lap", "custom"), "scenario.mode": MODES,
           "study.kind": ("overtake", "lap")}
# free-form mappings checked later against a dataclass
OPEN = {"scenario.overtake": OvertakeSetup, "scenario.lap": LapSetup}


def _type_ok(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(base: dict, patch, prefix=""):
    if not isinstance(patch, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping, got {type(patch).__name__}")
    for key, value in patch.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown field")
        default = base[key]
        if path in OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping")
            known = {f.name for f in fields(OPEN[path])}
            for k in value:
                if k not in known:
                    raise ConfigError(f"{path}.{k}: unknown field")
            base[key] = {**default, **value}
        elif isinstance(default, dict):
            _merge(default, value, path + ".")
        else:
            want = NULLABLE[path]() if path in NULLABLE else default
            if not ((path in NULLABLE and value is None) or _type_ok(value, want)):
                raise ConfigError(f"{path}: expected {type(want).__name__}, got {value!r}")
            base[key] = float(value) if isinstance(want, float) and value is not None else value
    return base


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    patch = node = {}
    for k in keys[:-1]:
        node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    return _merge(cfg, patch)


def demo_config_path() -> Path:
    return Path(str(resources.files("hybridplan") / "data" / "demo.yaml"))


def load_config(path=None, overrides=(), seed=None, out_dir=None) -> dict:
    """Defaults, then the file, then ``key=value`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    path = Path(path) if path is not None else demo_config_path()
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: malformed YAML") from None
    _merge(cfg, data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(f"override {key}: unparsable value {raw!r}") from None
        _set_path(cfg, key.strip(), value)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    validate(cfg, base=path.parent)
    return cfg


def validate(cfg: dict, base: Path = Path(".")):
    for path, options in CHOICES.items():
        sec, key = path.split(".")
        if cfg[sec][key] not in options:
            raise ConfigError(f"{path}: must be one of {list(options)}, got {cfg[sec][key]!r}")
    for key in ("plan_hz", "control_hz", "trigger_period"):
        if not cfg["rates"][key] > 0:
            raise ConfigError(f"rates.{key}: must be positive")
    if cfg["rates"]["switch_latency"] < 0:
        raise ConfigError("rates.switch_latency: must be nonnegative")
    if not cfg["switcher"]["v0"] > 0:
        raise ConfigError("switcher.v0: must be positive")
    if cfg["switcher"]["k"] < 0:
        raise ConfigError("switcher.k: must be nonnegative")
    if cfg["study"]["trials"] < 1:
        raise ConfigError("study.trials: must be at least 1")
    for m in cfg["study"]["modes"]:
        if m not in MODES:
            raise ConfigError(f"study.modes: unknown mode {m!r}")
    for name in ("u_min", "u_max", "a_min", "a_max"):
        v = cfg["bounds"][name]
        if len(v) != 2 or not all(isinstance(x, (int, float)) for x in v):
            raise ConfigError(f"bounds.{name}: expected two numbers")
    # referenced files must exist (relative paths resolve against the config file)
    for path in ("track.path", "reference.path", "switcher.database", "eval.labels"):
        sec, key = path.split(".")
        p = cfg[sec][key]
        if p is not None:
            full = _resolve(p, base)
            if not full.is_file():
                raise ConfigError(f"{path}: file {p} does not exist")
            cfg[sec][key] = str(full)
    if cfg["track"]["kind"] == "file" and cfg["track"]["path"] is None:
        raise ConfigError("track.path: required when track.kind is file")
    for i, o in enumerate(cfg["scenario"]["obstacles"]):
        if not isinstance(o, dict) or set(o) - {"arc", "lane_offset", "speed", "length", "width"} \
                or not {"arc", "lane_offset", "speed"} <= set(o):
            raise ConfigError(f"scenario.obstacles[{i}]: needs arc, lane_offset, speed (optional length, width)")
    # the dataclasses run their own checks; report them under the section name
    for section, build in (("vehicle", vehicle_params), ("bounds", action_bounds), ("fd", fd_config),
                           ("sa", sa_config), ("rates", rates), ("switcher.thresholds", thresholds),
                           ("scenario.overtake", overtake_setup), ("scenario.lap", lap_setup)):
        try:
            build(cfg)
        except (ValueError, TypeError, VehicleError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return cfg


def _resolve(p, base: Path) -> Path:
    p = Path(p)
    if p.is_absolute() or p.exists():
        return p
    return base / p


# -- config -> objects ----------------------------------------------------

def vehicle_params(cfg) -> VehicleParams:
    return VehicleParams(**cfg["vehicle"])


def action_bounds(cfg) -> ActionBounds:
    return ActionBounds(**{k: list(map(float, v)) for k, v in cfg["bounds"].items()})


def fd_config(cfg) -> FdConfig:
    c = dict(cfg["fd"])
    c["offsets"] = tuple(float(o) for o in c["offsets"])
    return FdConfig(**c)


def sa_config(cfg) -> SaConfig:
    c = dict(cfg["sa"])
    c["offsets"] = tuple(float(o) for o in c["offsets"])
    return SaConfig(**c)


def rates(cfg) -> Rates:
    r = cfg["rates"]
    return Rates(r["plan_hz"], r["control_hz"], SwitchTriggerPolicy(r["trigger_period"], r["reactive"]),
                 r["switch_latency"])


def thresholds(cfg) -> RuleThresholds:
    return RuleThresholds(**cfg["switcher"]["thresholds"])


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def overtake_setup(cfg) -> OvertakeSetup:
    return OvertakeSetup(**_tuples(cfg["scenario"]["overtake"]))


def lap_setup(cfg) -> LapSetup:
    return LapSetup(**_tuples(cfg["scenario"]["lap"]))


def build_track(cfg) -> Track:
    t = cfg["track"]
    if t["kind"] == "file":
        return Track.load(t["path"])
    if t["kind"] == "stadium":
        return stadium_track(t["straight"], t["radius"], t["half_width"])
    return straight_track(t["length"], t["half_width"])


def make_reference(cfg, track: Track) -> ReferencePlan:
    r = cfg["reference"]
    if r["path"] is not None:
        return ReferencePlan.load(r["path"])
    return generate_reference(track, vehicle_params(cfg), action_bounds(cfg), lookahead=r["lookahead"],
                              a_lat_max=r["a_lat_max"], spacing=r["spacing"])


def make_switcher(cfg) -> Switcher:
    s = cfg["switcher"]
    database = ExperienceDatabase.load(s["database"]) if s["database"] else None
    endpoint = None
    if s["mode"] == "endpoint":
        e = EndpointConfig.from_env()
        endpoint = HttpEndpoint(EndpointConfig(e.url, e.model, e.api_key_env, s["timeout"]))
    return Switcher(s["mode"], database, s["k"], s["v0"], thresholds(cfg), endpoint, s["timeout"])


def stack_factory(cfg):
    params, bounds = vehicle_params(cfg), action_bounds(cfg)
    fd, sa = fd_config(cfg), sa_config(cfg)

    def make(mode):
        return build_stack(mode, params, bounds, fd, sa, make_switcher(cfg), cfg["switcher"]["v0"])
    return make


def build_scenario(cfg) -> Scenario:
    sc = cfg["scenario"]
    params, bounds = vehicle_params(cfg), action_bounds(cfg)
    if sc["kind"] == "overtake":
        setup = overtake_setup(cfg)
        track = straight_track(setup.road_length, setup.half_width)
        return overtake_scenario(setup, generate_reference(track, params, bounds), track, sc["density"],
                                 cfg["seed"])
    if sc["kind"] == "lap":
        setup = lap_setup(cfg)
        track = lap_track(setup)
        return lap_scenario(setup, generate_reference(track, params, bounds), track, sc["n_obstacles"],
                            cfg["seed"])
    track = build_track(cfg)
    plan = make_reference(cfg, track)
    obs = tuple(ObstacleSpec(**{k: float(v) for k, v in o.items()}) for o in sc["obstacles"])
    start = track.pose_at(sc["ego_arc"])
    return Scenario(track, plan, tuple(float(v) for v in start), sc["ego_speed"], obs, sc["max_time"],
                    sc["goal_arc"], stop_on_overtake=bool(obs), seed=cfg["seed"], name="custom")


# -- commands ---------------------------------------------------------------

def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_reference(args) -> int:
    cfg = load_config(args.config, args.override, args.seed, args.out_dir)
    if args.track is not None:
        if not Path(args.track).is_file():
            raise ConfigError(f"track file {args.track} does not exist")
        track = Track.load(args.track)
    else:
        track = build_track(cfg)
    plan = make_reference(dict(cfg, reference=dict(cfg["reference"], path=None)), track)
    out = _out_dir(cfg)
    target = out / "reference.json"
    plan.save(target)
    segs = segment_track(track, 0.01)
    print(f"reference: {len(plan)} waypoints, spacing {plan.spacing:g} m, closed={plan.closed}, "
          f"v in [{plan.speeds.min():.3f}, {plan.speeds.max():.3f}] m/s -> {target}")
    for s in segs:
        print(f"  {s.kind:8s} [{s.start:6d}, {s.stop:6d})  mean curvature {s.mean_curvature:+.5f} 1/m")
    return EXIT_OK


def _episode_ok(scenario: Scenario, m) -> bool:
    if m.collisions:
        return False
    if scenario.goal_arc is not None:
        return m.completed
    if scenario.obstacles and scenario.stop_on_overtake:
        return m.overtake_success
    return True


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.override, args.seed, args.out_dir)
    scenario = build_scenario(cfg)
    stack = stack_factory(cfg)(cfg["scenario"]["mode"])
    result = run_episode(scenario, stack, rates(cfg), vehicle_params(cfg), action_bounds(cfg))
    out = _out_dir(cfg)
    write_episode_log(result.log, out / "episode_log.tsv")
    write_records(result.plans, out / "plans.jsonl")
    rec = {"scenario": scenario.name, "mode": cfg["scenario"]["mode"], "seed": cfg["seed"],
           **result.metrics.record()}
    write_records([rec], out / "metrics.jsonl")
    stack.switcher.write_log(out / "switcher_log.jsonl")
    m = result.metrics
    print(f"{scenario.name}: time {m.completion_time:.2f} s, collisions {m.collisions}, "
          f"avg {m.avg_speed_kmh:.2f} km/h, max {m.max_speed_kmh:.2f} km/h, "
          f"stop: {result.plans[-1]['stop_reason']}")
    if m.failed:
        return EXIT_NUMERIC
    return EXIT_OK if _episode_ok(scenario, m) else EXIT_EPISODE


def cmd_study(args) -> int:
    cfg = load_config(args.config, args.override, args.seed, args.out_dir)
    st = cfg["study"]
    kind = args.study or st["kind"]
    out = _out_dir(cfg)
    factory = stack_factory(cfg)
    params, bounds, r = vehicle_params(cfg), action_bounds(cfg), rates(cfg)

    def progress(rec):
        log.info("trial %s", {k: rec[k] for k in rec if k in ("mode", "row", "density", "trial")})

    if kind == "overtake":
        dens = [int(d) for d in st["densities"]]
        table, records = overtake_study(overtake_setup(cfg), factory, dens, st["trials"], tuple(st["modes"]),
                                        cfg["seed"], r, params, bounds, progress)
        modes = list(table)
        write_table(["density"] + modes, [[d] + [table[m][i] for m in modes] for i, d in enumerate(dens)],
                    out / "overtake_table.tsv")
        write_series({m: list(zip(dens, table[m])) for m in modes}, out / "overtake_plot.json")
        write_records(records, out / "overtake_trials.jsonl")
        for i, d in enumerate(dens):
            print(f"density {d}: " + "  ".join(f"{m} {table[m][i]:.2f}" for m in modes))
    else:
        best, records = lap_study(lap_setup(cfg), factory, st["n_obstacles"], st["trials"], cfg["seed"],
                                  rates=r, params=params, bounds=bounds, progress=progress)
        cols = ["completion_time", "avg_speed_kmh", "collisions", "max_speed_kmh", "completed"]
        write_table(["row"] + cols, [[row] + [best[row][c] for c in cols] for row in best],
                    out / "lap_table.tsv")
        write_series({row: [(rec["trial"], rec["completion_time"]) for rec in records if rec["row"] == row]
                      for row in best}, out / "lap_plot.json")
        write_records(records, out / "lap_trials.jsonl")
        for row, rec in best.items():
            print(f"{row:10s} lap {rec['completion_time']:.2f} s  avg {rec['avg_speed_kmh']:.2f} km/h  "
                  f"collisions {rec['collisions']}  max {rec['max_speed_kmh']:.2f} km/h")
    return EXIT_OK


@dataclass
class PrecisionRow:
    backend: str
    k: int
    precision: float


def evaluate_switchers(labeled, database: ExperienceDatabase | None, k: int, deploy: RuleThresholds,
                       label_rules: RuleThresholds = EXPERT_THRESHOLDS, endpoint=None, timeout: float = 0.5):
    """Precision of each offline backend (and the endpoint when given) on labeled scenes.

    ``label_rules`` is the rule set that produced the labels (self-check);
    ``deploy`` is the switcher's own rule set, which is also what the
    language-model path falls back to.
    """
    echo = EchoEndpoint()
    rows = [PrecisionRow("rule-labels", 0, evaluate_precision(lambda s: rule_based_switch(s, label_rules), labeled)),
            PrecisionRow("rule", 0, evaluate_precision(lambda s: rule_based_switch(s, deploy), labeled))]
    for kk in (0, k):
        rows.append(PrecisionRow("mock-echo", kk, evaluate_precision(
            lambda s: llm_switch(s, database, kk, echo, deploy, timeout).command, labeled)))
    if endpoint is not None:
        for kk in (0, k):
            rows.append(PrecisionRow("endpoint", kk, evaluate_precision(
                lambda s: llm_switch(s, database, kk, endpoint, deploy, timeout).command, labeled)))
    return rows


def _endpoint_reachable(config: EndpointConfig) -> bool:
    import urllib.parse
    import socket
    u = urllib.parse.urlparse(config.url)
    try:
        with socket.create_connection((u.hostname, u.port or (443 if u.scheme == "https" else 80)),
                                      timeout=config.timeout):
            return True
    except OSError:
        return False


def cmd_eval_switcher(args) -> int:
    cfg = load_config(args.config, args.override, args.seed, args.out_dir)
    labels = args.labels or cfg["eval"]["labels"]
    if labels is not None:
        if not Path(labels).is_file():
            raise ConfigError(f"labeled-scene file {labels} does not exist")
        labeled = load_labeled(labels)
    else:
        labeled = labeled_scenes(cfg["eval"]["n_per_class"], cfg["seed"])
    s = cfg["switcher"]
    database = ExperienceDatabase.load(s["database"]) if s["database"] else database_from_labeled(labeled)
    endpoint = None
    if s["mode"] == "endpoint" or os.environ.get("MODE_SWITCH_URL"):
        e = EndpointConfig.from_env()
        e = EndpointConfig(e.url, e.model, e.api_key_env, s["timeout"])
        if _endpoint_reachable(e):
            endpoint = HttpEndpoint(e)
        else:
            log.warning("endpoint %s unreachable; reporting offline backends only", e.url)
    rows = evaluate_switchers(labeled, database, max(s["k"], 1), thresholds(cfg), endpoint=endpoint,
                              timeout=s["timeout"])
    out = _out_dir(cfg)
    write_table(["backend", "k", "precision"], [[r.backend, r.k, r.precision] for r in rows],
                out / "switcher_precision.tsv")
    print(f"{len(labeled)} labeled scenes, database of {len(database)} experiences")
    for r in rows:
        print(f"  {r.backend:12s} k={r.k:<2d} precision {r.precision:.3f}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (defaults to the bundled demo config)")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--out-dir", help="output directory (overrides the config)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config field, e.g. study.trials=5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="hybridplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-reference", parents=[common], help="offline reference path and speed envelope")
    g.add_argument("track", nargs="?", help="track JSON file (defaults to the config track)")
    g.set_defaults(func=cmd_gen_reference)
    r = sub.add_parser("run", parents=[common], help="run one episode")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("study", parents=[common], help="overtake or lap study")
    s.add_argument("study", nargs="?", choices=("overtake", "lap"))
    s.set_defaults(func=cmd_study)
    e = sub.add_parser("eval-switcher", parents=[common], help="switcher precision on labeled scenes")
    e.add_argument("labels", nargs="?", help="labeled-scene JSON file")
    e.set_defaults(func=cmd_eval_switcher)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TrackError, SwitcherError, SimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
