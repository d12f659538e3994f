"""Scenario-aware mode selection.

A scene is summarized as a fixed numeric feature vector.  Stored
experiences close to the scene (normalized Euclidean distance) are placed
in a prompt for a completion endpoint that answers with a command record
``{"c1": fd|sa, "c2": acc|keep|dec}``.  The rule engine doubles as the
fallback when the endpoint is slow, unreachable or unparsable.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

C1_VALUES = ("fd", "sa")
C2_VALUES = ("acc", "keep", "dec")
PROMPT_VERSION = "mode-switch/1"

FEATURE_NAMES = ("density", "gap_ahead", "nearest_gap", "curvature_ahead", "speed", "envelope_speed")
# fixed scales so that distances do not depend on the database contents
FEATURE_SCALES = np.array([1.0, 10.0, 10.0, 0.01, 5.0, 5.0])


class SwitcherError(ValueError):
    pass


@dataclass(frozen=True)
class ModeCommand:
    c1: str
    c2: str

    def __post_init__(self):
        if self.c1 not in C1_VALUES or self.c2 not in C2_VALUES:
            raise SwitcherError(f"invalid command ({self.c1!r}, {self.c2!r})")

    def to_dict(self):
        return {"c1": self.c1, "c2": self.c2}


@dataclass(frozen=True)
class ModeConfig:
    beta: int
    gamma: float
    v0: float

    def __post_init__(self):
        if self.v0 <= 0:
            raise SwitcherError("v0 must be positive")
        if self.beta not in (0, 1):
            raise SwitcherError(f"beta must be 0 or 1, got {self.beta}")
        if self.gamma not in (-self.v0, 0.0, self.v0):
            raise SwitcherError(f"gamma must be one of -v0, 0, +v0, got {self.gamma}")

    @property
    def mode(self) -> str:
        return C1_VALUES[self.beta]


def map_mode(c1: str) -> int:
    if c1 not in C1_VALUES:
        raise SwitcherError(f"unknown planner mode {c1!r}")
    return 0 if c1 == "fd" else 1


def map_speed(c2: str, v0: float) -> float:
    if v0 <= 0:
        raise SwitcherError("v0 must be positive")
    if c2 not in C2_VALUES:
        raise SwitcherError(f"unknown speed command {c2!r}")
    return {"acc": float(v0), "keep": 0.0, "dec": -float(v0)}[c2]


def to_config(command: ModeCommand, v0: float) -> ModeConfig:
    return ModeConfig(map_mode(command.c1), map_speed(command.c2, v0), float(v0))


# -- scenes -----------------------------------------------------------------

@dataclass(frozen=True)
class ObstacleObservation:
    rel_x: float          # along the ego heading, meters
    rel_y: float          # to the left of the ego, meters
    rel_speed: float      # obstacle speed minus ego speed
    lane_offset: float    # lateral offset from the ego's path, meters


@dataclass(frozen=True)
class SceneDescription:
    x: float
    y: float
    theta: float
    speed: float
    obstacles: tuple = ()
    segment_kind: str = "straight"
    curvature_ahead: float = 0.0
    envelope_speed: float = 20.0
    radius: float = 50.0
    lane_half_width: float = 1.75

    def __post_init__(self):
        nums = [self.x, self.y, self.theta, self.speed, self.curvature_ahead, self.envelope_speed, self.radius]
        for o in self.obstacles:
            nums += [o.rel_x, o.rel_y, o.rel_speed, o.lane_offset]
        if not np.all(np.isfinite(nums)):
            raise SwitcherError("scene fields must be finite")
        if self.segment_kind not in ("straight", "curve"):
            raise SwitcherError(f"unknown segment kind {self.segment_kind!r}")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    @property
    def density(self) -> int:
        return len(self.obstacles)

    def gap_ahead(self) -> float:
        """Distance to the nearest obstacle ahead in the ego lane (radius if none)."""
        gaps = [o.rel_x for o in self.obstacles if o.rel_x > 0 and abs(o.lane_offset) < self.lane_half_width]
        return float(min(gaps, default=self.radius))

    def nearest_gap(self) -> float:
        return float(min((np.hypot(o.rel_x, o.rel_y) for o in self.obstacles), default=self.radius))

    def features(self) -> np.ndarray:
        return np.array([self.density, self.gap_ahead(), self.nearest_gap(), self.curvature_ahead,
                         self.speed, self.envelope_speed], dtype=float)

    def summary(self) -> dict:
        return dict(zip(FEATURE_NAMES, (round(float(v), 6) for v in self.features())))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obstacles"] = [asdict(o) for o in self.obstacles]
        return d

    @classmethod
    def from_dict(cls, d) -> "SceneDescription":
        d = dict(d)
        d["obstacles"] = tuple(ObstacleObservation(**o) for o in d.get("obstacles", ()))
        return cls(**d)


def describe_scene(ego_state, ego_speed: float, obstacles, plan, radius: float = 50.0,
                   curvature_lookahead: float = 40.0, curve_threshold: float = 0.01,
                   lane_half_width: float = 1.75) -> SceneDescription:
    """Summarize the surroundings of the ego.

    ``obstacles`` holds rows ``(x, y, theta, speed)``; only those within
    ``radius`` of the ego enter the scene.  ``plan`` is the
    :class:`~hybridplan.reference.ReferencePlan` being followed.
    """
    ego = np.asarray(ego_state, dtype=float)
    c, s = np.cos(ego[2]), np.sin(ego[2])
    s_ego = plan.anchor(ego[:2])
    ref_pose, _, _ = plan.sample(np.array([s_ego]))
    ref_pose = ref_pose[0]
    lat_ego = -np.sin(ref_pose[2]) * (ego[0] - ref_pose[0]) + np.cos(ref_pose[2]) * (ego[1] - ref_pose[1])
    obs = []
    for row in np.asarray(obstacles, dtype=float).reshape(-1, 4):
        d = row[:2] - ego[:2]
        if np.hypot(*d) > radius:
            continue
        s_o = plan.anchor(row[:2])
        pose_o, _, _ = plan.sample(np.array([s_o]))
        pose_o = pose_o[0]
        lat_o = -np.sin(pose_o[2]) * (row[0] - pose_o[0]) + np.cos(pose_o[2]) * (row[1] - pose_o[1])
        obs.append(ObstacleObservation(float(c * d[0] + s * d[1]), float(-s * d[0] + c * d[1]),
                                       float(row[3] - ego_speed), float(lat_o - lat_ego)))
    obs.sort(key=lambda o: (np.hypot(o.rel_x, o.rel_y), o.rel_x, o.rel_y))
    arcs = s_ego + np.linspace(0.0, curvature_lookahead, 9)
    _, speeds, kappa = plan.sample(arcs)
    kappa_max = float(np.max(np.abs(kappa)))
    return SceneDescription(float(ego[0]), float(ego[1]), float(ego[2]), float(ego_speed), tuple(obs),
                            "curve" if kappa_max >= curve_threshold else "straight", kappa_max,
                            float(speeds[0]), float(radius), float(lane_half_width))


# -- rule engine ------------------------------------------------------------

@dataclass(frozen=True)
class RuleThresholds:
    density_sa: int = 2
    gap_dec: float = 10.0
    curve_dec: float = 0.02
    clear_gap: float = 30.0      # lane counts as clear beyond this gap
    speed_margin: float = 0.5    # "below envelope" means by more than this

    def __post_init__(self):
        if self.density_sa < 1 or self.gap_dec <= 0 or self.curve_dec <= 0 or self.clear_gap <= 0:
            raise SwitcherError("rule thresholds must be positive")


# labeler used to produce the reference decisions of the precision study
EXPERT_THRESHOLDS = RuleThresholds(density_sa=3, gap_dec=15.0, curve_dec=0.012, clear_gap=25.0)


def rule_based_switch(scene: SceneDescription, thresholds: RuleThresholds = RuleThresholds()) -> ModeCommand:
    """Deterministic decision from the scene features alone."""
    f = dict(zip(FEATURE_NAMES, scene.features()))
    c1 = "sa" if f["density"] >= thresholds.density_sa else "fd"
    if f["gap_ahead"] < thresholds.gap_dec or f["curvature_ahead"] > thresholds.curve_dec:
        c2 = "dec"
    elif f["gap_ahead"] >= thresholds.clear_gap and f["speed"] < f["envelope_speed"] - thresholds.speed_margin:
        c2 = "acc"
    else:
        c2 = "keep"
    return ModeCommand(c1, c2)


# -- experience database ----------------------------------------------------

@dataclass(frozen=True)
class ExperienceEntry:
    id: str
    features: tuple
    command: ModeCommand
    rationale: str = ""

    def __post_init__(self):
        f = tuple(float(v) for v in self.features)
        if len(f) != len(FEATURE_NAMES) or not np.all(np.isfinite(f)):
            raise SwitcherError(f"entry {self.id}: feature vector must hold {len(FEATURE_NAMES)} finite values")
        object.__setattr__(self, "features", f)

    def to_dict(self):
        return {"id": self.id, "features": dict(zip(FEATURE_NAMES, self.features)),
                "command": self.command.to_dict(), "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d):
        feats = d["features"]
        if isinstance(feats, dict):
            feats = [feats[k] for k in FEATURE_NAMES]
        return cls(str(d["id"]), tuple(feats), ModeCommand(**d["command"]), d.get("rationale", ""))


class ExperienceDatabase:
    def __init__(self, entries=()):
        self.entries: list[ExperienceEntry] = list(entries)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise SwitcherError("duplicate experience ids")

    def __len__(self):
        return len(self.entries)

    def add(self, entry: ExperienceEntry):
        if any(e.id == entry.id for e in self.entries):
            raise SwitcherError(f"duplicate experience id {entry.id}")
        self.entries.append(entry)

    def matrix(self) -> np.ndarray:
        return np.array([e.features for e in self.entries], dtype=float).reshape(-1, len(FEATURE_NAMES))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"version": 1, "entries": [e.to_dict() for e in self.entries]}, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ExperienceDatabase":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SwitcherError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        try:
            return cls(ExperienceEntry.from_dict(d) for d in data["entries"])
        except (KeyError, TypeError) as exc:
            raise SwitcherError(f"{path}: malformed entry ({exc})") from exc


def retrieve_topk(scene: SceneDescription, database: ExperienceDatabase, k: int) -> list[ExperienceEntry]:
    """The ``k`` nearest entries; exact ties keep insertion order."""
    if k < 1:
        raise SwitcherError("k must be at least 1")
    if len(database) == 0:
        raise SwitcherError("experience database is empty")
    d = np.sqrt(np.sum(((database.matrix() - scene.features()) / FEATURE_SCALES) ** 2, axis=1))
    order = np.argsort(d, kind="stable")
    return [database.entries[i] for i in order[:k]]


# -- prompt and parsing -----------------------------------------------------

def build_prompt(scene: SceneDescription, entries) -> str:
    lines = [
        f"[template {PROMPT_VERSION}]",
        "You select the motion planner and speed adjustment for a race car.",
        "Planner c1: fd (fast driving, point obstacles) or sa (shape aware, full footprints).",
        "Speed c2: acc, keep or dec relative to the reference speed envelope.",
        "",
        "## Scene",
        json.dumps(scene.summary(), sort_keys=True),
        "obstacles (rel_x, rel_y, rel_speed, lane_offset):",
    ]
    for o in scene.obstacles:
        lines.append(f"  {o.rel_x:.2f} {o.rel_y:.2f} {o.rel_speed:.2f} {o.lane_offset:.2f}")
    lines.append(f"segment: {scene.segment_kind}")
    for rank, e in enumerate(entries, 1):
        lines += ["", f"## Experience {rank} (id {e.id})",
                  json.dumps(dict(zip(FEATURE_NAMES, e.features)), sort_keys=True),
                  f"decision: {json.dumps(e.command.to_dict(), sort_keys=True)}",
                  f"rationale: {e.rationale}"]
    lines += ["", "## Answer",
              "Think step by step, then finish with one line holding a JSON record",
              '{"c1": "fd"|"sa", "c2": "acc"|"keep"|"dec"}.']
    return "\n".join(lines) + "\n"


_RECORD = re.compile(r"\{[^{}]*\}")


def parse_command(text: str) -> ModeCommand:
    """Last JSON record in ``text`` carrying valid ``c1`` and ``c2`` fields."""
    if not isinstance(text, str):
        raise SwitcherError("response is not text")
    for chunk in reversed(_RECORD.findall(text)):
        try:
            rec = json.loads(chunk)
            return ModeCommand(rec["c1"], rec["c2"])
        except (json.JSONDecodeError, KeyError, TypeError, SwitcherError):
            continue
    raise SwitcherError("no command record in response")


# -- endpoints --------------------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    url: str = "http://127.0.0.1:8000/v1/completions"
    model: str = "default"
    api_key_env: str = "MODE_SWITCH_API_KEY"
    timeout: float = 0.5

    @classmethod
    def from_env(cls, prefix: str = "MODE_SWITCH_") -> "EndpointConfig":
        base = cls()
        return cls(os.environ.get(prefix + "URL", base.url), os.environ.get(prefix + "MODEL", base.model),
                   os.environ.get(prefix + "KEY_ENV", base.api_key_env),
                   float(os.environ.get(prefix + "TIMEOUT", base.timeout)))


class HttpEndpoint:
    """Plain JSON completion request: ``{"model", "prompt"}`` in, text out."""

    def __init__(self, config: EndpointConfig):
        self.config = config

    def complete(self, prompt: str) -> str:
        body = json.dumps({"model": self.config.model, "prompt": prompt, "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.config.url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
            data = json.loads(resp.read().decode())
        if isinstance(data, dict) and "choices" in data:
            choice = data["choices"][0]
            return choice.get("text") or choice.get("message", {}).get("content", "")
        if isinstance(data, dict) and "text" in data:
            return data["text"]
        raise SwitcherError("unexpected endpoint payload")


class EchoEndpoint:
    """Answers with the decision of the first experience block in the prompt."""

    _DECISION = re.compile(r"## Experience 1 .*?\ndecision: (\{[^\n]*\})", re.S)

    def complete(self, prompt: str) -> str:
        m = self._DECISION.search(prompt)
        if not m:
            return "no experience to echo"
        return f"Following the closest experience.\n{m.group(1)}"


class SlowEndpoint:
    def __init__(self, delay: float, inner=None):
        self.delay = delay
        self.inner = inner or EchoEndpoint()

    def complete(self, prompt: str) -> str:
        time.sleep(self.delay)
        return self.inner.complete(prompt)


class BrokenEndpoint:
    def complete(self, prompt: str) -> str:
        return '{"c1": "fast", "c2": 3'


class FailingEndpoint:
    def complete(self, prompt: str) -> str:
        raise urllib.error.URLError("endpoint unreachable")


@dataclass
class SwitchDecision:
    command: ModeCommand
    degraded: bool
    latency: float
    retrieved: list = field(default_factory=list)
    raw: str = ""
    error: str = ""


_EXECUTOR = ThreadPoolExecutor(max_workers=4, thread_name_prefix="mode-switch")


def llm_switch(scene: SceneDescription, database: ExperienceDatabase | None, k: int, endpoint,
               thresholds: RuleThresholds = RuleThresholds(), timeout: float = 0.5) -> SwitchDecision:
    """Ask the endpoint for a command; any failure falls back to the rule engine.

    The call never blocks longer than ``timeout``: the request runs on a
    worker thread and is abandoned when the deadline passes.
    """
    t0 = time.perf_counter()
    entries = retrieve_topk(scene, database, k) if (k > 0 and database is not None and len(database)) else []
    prompt = build_prompt(scene, entries)
    ids = [e.id for e in entries]
    raw = ""
    try:
        future = _EXECUTOR.submit(endpoint.complete, prompt)
        raw = future.result(timeout=timeout)
        cmd = parse_command(raw)
        return SwitchDecision(cmd, False, time.perf_counter() - t0, ids, raw)
    except FutureTimeout:
        future.cancel()
        err = f"timeout after {timeout:.3f} s"
    except Exception as exc:  # network, payload and parse errors all degrade the same way
        err = f"{type(exc).__name__}: {exc}"
    log.info("mode switch degraded to rules: %s", err)
    return SwitchDecision(rule_based_switch(scene, thresholds), True, time.perf_counter() - t0, ids, str(raw), err)


def evaluate_precision(switch_fn, labeled) -> float:
    """Fraction of ``(scene, command)`` pairs where ``switch_fn`` agrees on both fields."""
    labeled = list(labeled)
    if not labeled:
        raise SwitcherError("need at least one labeled scene")
    hits = sum(1 for scene, cmd in labeled if switch_fn(scene) == cmd)
    return hits / len(labeled)


def labeled_scenes(n_per_class: int, seed: int, thresholds: RuleThresholds = EXPERT_THRESHOLDS):
    """Random scenes balanced over the six commands, labeled by the rule engine."""
    rng = np.random.default_rng(seed)
    buckets = {(a, b): [] for a in C1_VALUES for b in C2_VALUES}
    tries = 0
    while any(len(v) < n_per_class for v in buckets.values()):
        tries += 1
        if tries > 200000:
            raise SwitcherError("could not balance the labeled set")
        n_obs = int(rng.integers(0, 6))
        obs = tuple(ObstacleObservation(float(rng.uniform(-20, 45)), float(rng.uniform(-6, 6)),
                                        float(rng.uniform(-8, 2)), float(rng.choice([-3.5, 0.0, 3.5]) + rng.normal(0, 0.3)))
                    for _ in range(n_obs))
        kappa = float(rng.choice([0.0, rng.uniform(0.0, 0.04)]))
        env = float(rng.uniform(12, 20))
        scene = SceneDescription(0.0, 0.0, 0.0, float(rng.uniform(5, 20)), obs,
                                 "curve" if kappa >= 0.01 else "straight", kappa, env)
        cmd = rule_based_switch(scene, thresholds)
        bucket = buckets[(cmd.c1, cmd.c2)]
        if len(bucket) < n_per_class:
            bucket.append((scene, cmd))
    out = []
    for key in sorted(buckets):
        out += buckets[key]
    return out


def database_from_labeled(labeled, prefix: str = "exp") -> ExperienceDatabase:
    return ExperienceDatabase(
        ExperienceEntry(f"{prefix}{i:04d}", tuple(scene.features()), cmd,
                        f"density {scene.density}, gap {scene.gap_ahead():.1f} m")
        for i, (scene, cmd) in enumerate(labeled))


def save_labeled(labeled, path):
    with open(path, "w") as fh:
        json.dump([{"scene": s.to_dict(), "label": c.to_dict()} for s, c in labeled], fh, indent=1)
        fh.write("\n")


def load_labeled(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SwitcherError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return [(SceneDescription.from_dict(d["scene"]), ModeCommand(**d["label"])) for d in data]


# -- trigger policy and the shared mode cell --------------------------------

@dataclass(frozen=True)
class SwitchTriggerPolicy:
    period: float = 1.0
    reactive: bool = True

    def __post_init__(self):
        if not self.period > 0:
            raise SwitcherError("trigger period must be positive")


def should_trigger(policy: SwitchTriggerPolicy, now: float, last_trigger: float | None,
                   newly_detected_obstacle: bool) -> bool:
    if last_trigger is None:
        return True
    if now < last_trigger:
        raise SwitcherError("timestamps must be monotone")
    # small slack so that accumulated float time steps still hit the period
    return (now - last_trigger >= policy.period - 1e-9) or (policy.reactive and newly_detected_obstacle)


class ModeCell:
    """Latest-value cell; a publish with an older sequence number is dropped."""

    def __init__(self, initial: ModeConfig):
        self._lock = threading.Lock()
        self._value = initial
        self._seq = -1

    def publish(self, seq: int, value: ModeConfig) -> bool:
        with self._lock:
            if seq <= self._seq:
                return False
            self._seq, self._value = seq, value
            return True

    def read(self) -> tuple[int, ModeConfig]:
        with self._lock:
            return self._seq, self._value


@dataclass
class DecisionRecord:
    time: float
    scene: dict
    retrieved: list
    raw: str
    command: dict
    degraded: bool
    latency: float


class Switcher:
    """Backend wrapper producing decisions and keeping the decision log.

    ``backend`` is ``rule``, ``endpoint`` or ``mock`` (echo).  In ``rule``
    mode no endpoint object exists, so no network access can happen.
    """

    def __init__(self, backend: str = "rule", database: ExperienceDatabase | None = None, k: int = 3,
                 v0: float = 2.0, thresholds: RuleThresholds = RuleThresholds(), endpoint=None,
                 timeout: float = 0.5):
        if backend not in ("rule", "endpoint", "mock"):
            raise SwitcherError(f"unknown switcher backend {backend!r}")
        if v0 <= 0:
            raise SwitcherError("v0 must be positive")
        self.backend = backend
        self.database = database
        self.k = k
        self.v0 = v0
        self.thresholds = thresholds
        self.timeout = timeout
        if backend == "endpoint":
            self.endpoint = endpoint or HttpEndpoint(EndpointConfig(timeout=timeout))
        elif backend == "mock":
            self.endpoint = endpoint or EchoEndpoint()
        else:
            self.endpoint = None
        self.log: list[DecisionRecord] = []

    def decide(self, scene: SceneDescription, now: float = 0.0) -> SwitchDecision:
        if self.endpoint is None:
            t0 = time.perf_counter()
            dec = SwitchDecision(rule_based_switch(scene, self.thresholds), False, time.perf_counter() - t0)
        else:
            dec = llm_switch(scene, self.database, self.k, self.endpoint, self.thresholds, self.timeout)
        self.log.append(DecisionRecord(now, scene.summary(), dec.retrieved, dec.raw, dec.command.to_dict(),
                                       dec.degraded, dec.latency))
        return dec

    def command(self, scene: SceneDescription) -> ModeCommand:
        return self.decide(scene).command

    def write_log(self, path):
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
