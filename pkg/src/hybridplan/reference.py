"""Offline track processing: segmentation, pure-pursuit reference and speed envelope."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vehicle import VehicleParams, ActionBounds, propagate

KAPPA_FLOOR = 1e-4


class TrackError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class Track:
    """Centerline polyline with a constant half-width."""

    def __init__(self, centerline, half_width: float, closed: bool = False):
        pts = np.array(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise TrackError("centerline needs at least 3 points of 2 coordinates")
        if not np.all(np.isfinite(pts)):
            raise TrackError("centerline contains non-finite values")
        if closed and np.linalg.norm(pts[0] - pts[-1]) < 1e-9:
            pts = pts[:-1]
        seg = np.diff(np.vstack([pts, pts[:1]]) if closed else pts, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths < 1e-9):
            raise TrackError("consecutive centerline points must be distinct")
        if not half_width > 0:
            raise TrackError("half_width must be positive")
        pts.setflags(write=False)
        self.centerline = pts
        self.half_width = float(half_width)
        self.closed = bool(closed)
        self._seg = seg
        self._seglen = lengths
        self._s = np.concatenate([[0.0], np.cumsum(lengths)])
        self.length = float(self._s[-1])

    # -- arc-length parametrization ----------------------------------
    def _wrap(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            return np.mod(s, self.length)
        return np.clip(s, 0.0, self.length)

    def pose_at(self, s, offset=0.0) -> np.ndarray:
        """Pose(s) ``(x, y, heading)`` at arc length ``s`` and lateral ``offset`` (left positive)."""
        arr = np.atleast_1d(self._wrap(s))
        off = np.broadcast_to(np.asarray(offset, dtype=float), arr.shape)
        i = np.clip(np.searchsorted(self._s, arr, side="right") - 1, 0, len(self._seglen) - 1)
        t = (arr - self._s[i]) / self._seglen[i]
        base = self.centerline[i] + t[:, None] * self._seg[i]
        heading = np.arctan2(self._seg[i, 1], self._seg[i, 0])
        normal = np.column_stack([-np.sin(heading), np.cos(heading)])
        out = np.column_stack([base + off[:, None] * normal, heading])
        return out[0] if np.ndim(s) == 0 else out

    def project(self, xy):
        """Arc length and signed lateral offset of the closest centerline point."""
        xy = np.asarray(xy, dtype=float)
        a = self.centerline[: len(self._seglen)]
        ap = xy - a
        t = np.clip(np.einsum("ij,ij->i", ap, self._seg) / self._seglen ** 2, 0.0, 1.0)
        closest = a + t[:, None] * self._seg
        d = np.linalg.norm(xy - closest, axis=1)
        i = int(np.argmin(d))
        cross = self._seg[i, 0] * ap[i, 1] - self._seg[i, 1] * ap[i, 0]
        return float(self._s[i] + t[i] * self._seglen[i]), float(math.copysign(d[i], cross))

    def curvature(self) -> np.ndarray:
        return three_point_curvature(self.centerline, self.closed)

    # -- I/O -----------------------------------------------------------
    def to_dict(self) -> dict:
        return {"centerline": self.centerline.tolist(), "half_width": self.half_width, "closed": self.closed}

    @classmethod
    def from_dict(cls, data) -> "Track":
        try:
            return cls(data["centerline"], data["half_width"], bool(data.get("closed", False)))
        except KeyError as exc:
            raise TrackError(f"missing track field {exc}") from None

    @classmethod
    def load(cls, path) -> "Track":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TrackError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def straight_track(length: float, half_width: float = 5.25, spacing: float = 1.0, heading: float = 0.0) -> Track:
    s = np.arange(0.0, length + 1e-9, spacing)
    pts = np.column_stack([s * math.cos(heading), s * math.sin(heading)])
    return Track(pts, half_width, closed=False)


def circle_track(radius: float, half_width: float = 5.0, n: int = 400) -> Track:
    a = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return Track(np.column_stack([radius * np.sin(a), radius * (1 - np.cos(a))]), half_width, closed=True)


def stadium_track(straight: float, radius: float, half_width: float = 6.0, spacing: float = 1.0) -> Track:
    """Two parallel straights joined by semicircles, driven counter-clockwise."""
    n_s = max(int(round(straight / spacing)), 2)
    n_c = max(int(round(np.pi * radius / spacing)), 8)
    xs = np.linspace(0.0, straight, n_s, endpoint=False)
    bottom = np.column_stack([xs, np.zeros_like(xs)])
    a = np.linspace(-np.pi / 2, np.pi / 2, n_c, endpoint=False)
    right = np.column_stack([straight + radius * np.cos(a), radius + radius * np.sin(a)])
    top = np.column_stack([straight - xs, np.full_like(xs, 2 * radius)])
    a2 = np.linspace(np.pi / 2, 3 * np.pi / 2, n_c, endpoint=False)
    left = np.column_stack([radius * np.cos(a2), radius + radius * np.sin(a2)])
    return Track(np.vstack([bottom, right, top, left]), half_width, closed=True)


def three_point_curvature(points, closed: bool) -> np.ndarray:
    """Signed curvature from the circumcircle through each point and its neighbours.

    Collinear triples give zero; open-path endpoints copy their neighbour.
    """
    p = np.asarray(points, dtype=float)
    if closed:
        a, b, c = np.roll(p, 1, axis=0), p, np.roll(p, -1, axis=0)
    else:
        a, b, c = p[:-2], p[1:-1], p[2:]
    ab, bc, ca = b - a, c - b, a - c
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    denom = np.linalg.norm(ab, axis=1) * np.linalg.norm(bc, axis=1) * np.linalg.norm(ca, axis=1)
    kappa = np.where(denom > 1e-12, 2.0 * cross / np.maximum(denom, 1e-300), 0.0)
    if not closed:
        kappa = np.concatenate([kappa[:1], kappa, kappa[-1:]])
    return kappa


@dataclass(frozen=True)
class TrackSegment:
    start: int
    stop: int          # exclusive; may exceed len(centerline) when wrapping a closed track
    kind: str          # "straight" | "curve"
    mean_curvature: float


def segment_track(track: Track, curvature_threshold: float) -> list[TrackSegment]:
    """Partition the centerline into maximal runs of straights and curves."""
    if not curvature_threshold > 0:
        raise TrackError("curvature threshold must be positive")
    kappa = track.curvature()
    curve = np.abs(kappa) >= curvature_threshold
    n = len(kappa)
    edges = np.flatnonzero(curve[1:] != curve[:-1]) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [n]])
    runs = list(zip(starts.tolist(), stops.tolist()))
    if track.closed and len(runs) > 1 and curve[0] == curve[-1]:
        first = runs.pop(0)
        last = runs.pop()
        runs.append((last[0], first[1] + n))
    out = []
    for a, b in runs:
        idx = np.arange(a, b) % n
        out.append(TrackSegment(a, b, "curve" if curve[idx[0]] else "straight", float(np.mean(kappa[idx]))))
    return out


def speed_envelope(curvature, a_lat_max: float, v_max: float):
    """Lateral-acceleration-limited speed ``min(v_max, sqrt(a_lat / |kappa|))``."""
    if not (a_lat_max > 0 and v_max > 0):
        raise ValueError("a_lat_max and v_max must be positive")
    k = np.maximum(np.abs(np.asarray(curvature, dtype=float)), KAPPA_FLOOR)
    v = np.minimum(v_max, np.sqrt(a_lat_max / k))
    return float(v) if np.ndim(v) == 0 else v


@dataclass(frozen=True)
class ReferenceSlice:
    """Horizon window of a reference plan: ``H+1`` poses and speeds."""

    states: np.ndarray      # (H+1, 3), headings unwrapped along the slice
    speeds: np.ndarray      # (H+1,), already shifted by gamma and clipped
    arc: np.ndarray         # (H+1,) arc length along the plan
    curvature: np.ndarray   # (H+1,)


class ReferencePlan:
    """Uniformly spaced reference poses with a speed envelope."""

    def __init__(self, waypoints, speeds, spacing: float, closed: bool, v_max: float, curvature=None):
        wp = np.array(waypoints, dtype=float)
        sp = np.array(speeds, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) != len(sp) or len(wp) < 2:
            raise TrackError("waypoints (N, 3) and speeds (N,) must agree")
        if np.any(sp < 0) or np.any(sp > v_max + 1e-9):
            raise TrackError("speeds must lie in [0, v_max]")
        self.waypoints = wp
        self.speeds = sp
        self.spacing = float(spacing)
        self.closed = bool(closed)
        self.v_max = float(v_max)
        self.curvature = np.zeros(len(wp)) if curvature is None else np.asarray(curvature, dtype=float)
        self.arc = np.arange(len(wp)) * self.spacing
        self.length = len(wp) * self.spacing if closed else (len(wp) - 1) * self.spacing
        self._unwrapped = np.unwrap(wp[:, 2])

    def __len__(self):
        return len(self.waypoints)

    def nearest(self, xy) -> int:
        d = np.sum((self.waypoints[:, :2] - np.asarray(xy)[:2]) ** 2, axis=1)
        return int(np.argmin(d))

    def anchor(self, xy) -> float:
        """Arc length of the projection of ``xy`` onto the plan near its nearest waypoint."""
        j = self.nearest(xy)
        n = len(self)
        best = float(j)
        best_d = np.inf
        for a, b in ((j - 1, j), (j, j + 1)):
            if not self.closed and (a < 0 or b >= n):
                continue
            pa, pb = self.waypoints[a % n, :2], self.waypoints[b % n, :2]
            seg = pb - pa
            t = float(np.clip(np.dot(np.asarray(xy)[:2] - pa, seg) / np.dot(seg, seg), 0.0, 1.0))
            d = float(np.linalg.norm(pa + t * seg - np.asarray(xy)[:2]))
            if d < best_d - 1e-12:
                best_d, best = d, a + t
        return best * self.spacing

    def sample(self, s):
        """Interpolated poses, speeds and curvatures at arc lengths ``s``."""
        s = np.asarray(s, dtype=float)
        n = len(self)
        u = s / self.spacing
        if self.closed:
            i0 = np.floor(u).astype(int)
            t = u - i0
            a, b = i0 % n, (i0 + 1) % n
        else:
            u = np.clip(u, 0.0, n - 1)
            i0 = np.minimum(np.floor(u).astype(int), n - 2)
            t = u - i0
            a, b = i0, i0 + 1
        xy = (1 - t)[:, None] * self.waypoints[a, :2] + t[:, None] * self.waypoints[b, :2]
        th_a = self._unwrapped[a]
        dth = np.mod(self._unwrapped[b] - th_a + np.pi, 2 * np.pi) - np.pi
        th = th_a + t * dth
        sp = (1 - t) * self.speeds[a] + t * self.speeds[b]
        kp = (1 - t) * self.curvature[a] + t * self.curvature[b]
        return np.column_stack([xy, th]), sp, kp

    # -- I/O -----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "spacing": self.spacing,
            "closed": self.closed,
            "v_max": self.v_max,
            "waypoints": [[round(float(v), 9) for v in w] for w in self.waypoints],
            "speeds": [round(float(v), 9) for v in self.speeds],
            "curvature": [round(float(v), 9) for v in self.curvature],
        }

    @classmethod
    def from_dict(cls, d) -> "ReferencePlan":
        return cls(d["waypoints"], d["speeds"], d["spacing"], d["closed"], d["v_max"], d.get("curvature"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ReferencePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _resample(path_xy, spacing, closed):
    seg = np.diff(path_xy, axis=0)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])
    total = s[-1]
    if closed:
        n = max(int(round(total / spacing)), 3)
        spacing = total / n
        grid = np.arange(n) * spacing
    else:
        grid = np.arange(0.0, total + 1e-9, spacing)
    x = np.interp(grid, s, path_xy[:, 0])
    y = np.interp(grid, s, path_xy[:, 1])
    return np.column_stack([x, y]), spacing


def _tangent_headings(xy, closed):
    if closed:
        d = np.roll(xy, -1, axis=0) - np.roll(xy, 1, axis=0)
    else:
        d = np.gradient(xy, axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


def generate_reference(track: Track, params: VehicleParams, bounds: ActionBounds, lookahead: float = 5.0,
                       a_lat_max: float = 6.0, spacing: float = 0.5, sim_dt: float = 0.02,
                       smooth_window: int = 9) -> ReferencePlan:
    """Drive a pure-pursuit follower along the centerline and record its path.

    The follower runs on the nonlinear kinematics at the envelope speed of
    the centerline.  The recorded path is resampled at uniform arc spacing;
    headings are the resampled path tangents and speeds come from
    :func:`speed_envelope` applied to the (lightly smoothed) path curvature.
    """
    if not lookahead > 0:
        raise ValueError("lookahead must be positive")
    v_max = bounds.v_max
    steer_lim = float(bounds.u_max[1])
    center_kappa = track.curvature()
    s = track.pose_at(0.0)
    params = params.with_dt(sim_dt)
    target_len = track.length * (1.15 if track.closed else 1.0)
    poses = [s.copy()]
    prog = 0.0
    max_steps = int(10 * target_len / (0.5 * sim_dt)) + 1000
    for _ in range(max_steps):
        arc, lat = track.project(s[:2])
        if abs(lat) > track.half_width:
            raise GenerationError(f"pure-pursuit follower left the track (lateral offset {lat:.2f} m)")
        if track.closed:
            delta = (arc - prog + track.length / 2) % track.length - track.length / 2
            prog += delta
        else:
            prog = arc
        if prog >= (target_len if track.closed else track.length - 0.5 * lookahead):
            break
        goal = track.pose_at(prog + lookahead)[:2]
        dx, dy = goal - s[:2]
        alpha = math.atan2(dy, dx) - s[2]
        ld = max(math.hypot(dx, dy), 1e-6)
        psi = float(np.clip(math.atan(2.0 * params.wheelbase * math.sin(alpha) / ld), -steer_lim, steer_lim))
        i = int(np.clip(np.searchsorted(track._s, prog % track.length if track.closed else prog) - 1,
                        0, len(center_kappa) - 1))
        v = max(speed_envelope(center_kappa[i], a_lat_max, v_max), 1.0)
        s = propagate(s, np.array([v, psi]), params)
        poses.append(s.copy())
    else:
        raise GenerationError("pure-pursuit follower did not finish the track")
    path = np.array(poses)[:, :2]
    if track.closed:
        # cut the path where it first returns next to the start after most of a lap
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        late = np.flatnonzero(cum > 0.8 * track.length)
        k = late[np.argmin(np.linalg.norm(path[late] - path[0], axis=1))]
        path = path[:k]
    xy, spacing = _resample(path, spacing, track.closed)
    heading = _tangent_headings(xy, track.closed)
    kappa = three_point_curvature(xy, track.closed)
    if smooth_window > 1:
        w = np.ones(smooth_window) / smooth_window
        if track.closed:
            pad = smooth_window // 2
            kappa = np.convolve(np.concatenate([kappa[-pad:], kappa, kappa[:pad]]), w, mode="valid")
        else:
            kappa = np.convolve(np.pad(kappa, smooth_window // 2, mode="edge"), w, mode="valid")
    speeds = speed_envelope(kappa, a_lat_max, v_max)
    return ReferencePlan(np.column_stack([xy, heading]), speeds, spacing, track.closed, v_max, kappa)


def query_reference(plan: ReferencePlan, pose, gamma: float, H: int, dt: float,
                    v_cap: float | None = None) -> ReferenceSlice:
    """Reference window starting at the projection of ``pose``.

    Successive points advance by the (shifted, clipped) reference speed
    times ``dt``; speeds are ``v_ref + gamma`` clipped to ``[0, v_max]``
    (or to ``[0, v_cap]`` when a lower cap is given).
    """
    top = plan.v_max if v_cap is None else min(plan.v_max, v_cap)
    pose = np.asarray(pose, dtype=float)
    s0 = plan.anchor(pose[:2])
    arcs = np.empty(H + 1)
    arcs[0] = s0
    for h in range(H):
        _, v, _ = plan.sample(arcs[h:h + 1])
        arcs[h + 1] = arcs[h] + float(np.clip(v[0] + gamma, 0.0, top)) * dt
    states, speeds, kappa = plan.sample(arcs)
    speeds = np.clip(speeds + gamma, 0.0, top)
    states[:, 2] = np.unwrap(states[:, 2])
    if pose.size > 2:
        # express the slice headings on the same branch as the vehicle heading
        states[:, 2] += 2 * np.pi * np.round((pose[2] - states[0, 2]) / (2 * np.pi))
    return ReferenceSlice(states, speeds, arcs, kappa)
