"""Kinematic Ackermann model, its Jacobian linearization and input bounds.

State ``s = [x, y, theta]``, input ``u = [v, psi]`` with ``psi`` the steering
angle.  One forward-Euler step of length ``dt``::

    x'     = x + v cos(theta) dt
    y'     = y + v sin(theta) dt
    theta' = theta + v tan(psi) / L dt

Array helpers operate on unwrapped headings so that linearizations stay
exact along a horizon; :func:`step_nonlinear` wraps the heading.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import normalize_angle, rectangle_polytope


class VehicleError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(np.isfinite([self.x, self.y, self.theta])):
            raise VehicleError("state must be finite")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ControlInput:
    v: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.psi])


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.8
    dt: float = 0.1
    length: float = 4.5
    width: float = 2.0

    def __post_init__(self):
        if not (self.wheelbase > 0 and self.dt > 0 and self.length > 0 and self.width > 0):
            raise VehicleError(f"vehicle parameters must be positive: {self}")

    def footprint(self):
        return rectangle_polytope(self.length, self.width)

    def with_dt(self, dt: float) -> "VehicleParams":
        return VehicleParams(self.wheelbase, dt, self.length, self.width)


@dataclass(frozen=True)
class ActionBounds:
    """Box bounds on ``u`` and per-step bounds on ``u[k+1] - u[k]``."""

    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.5]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([20.0, 0.5]))
    a_min: np.ndarray = field(default_factory=lambda: np.array([-0.8, -0.1]))
    a_max: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.1]))

    def __post_init__(self):
        for name in ("u_min", "u_max", "a_min", "a_max"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.u_min > self.u_max):
            raise VehicleError("u_min must not exceed u_max")
        if np.any(self.a_min > 0) or np.any(self.a_max < 0):
            raise VehicleError("rate bounds must bracket zero")
        if np.any(np.abs(self.u_min[1:]) >= np.pi / 2) or np.any(np.abs(self.u_max[1:]) >= np.pi / 2):
            raise VehicleError("steering bounds must stay inside (-pi/2, pi/2)")

    @property
    def v_max(self) -> float:
        return float(self.u_max[0])


@dataclass(frozen=True)
class LinearizedDynamics:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def step(self, s, u):
        return self.A @ s + self.B @ u + self.c


def _check_steer(psi):
    if np.any(np.abs(psi) >= np.pi / 2):
        raise VehicleError("steering angle must satisfy |psi| < pi/2")


def propagate(s, u, params: VehicleParams, dt: float | None = None):
    """One Euler step on arrays without heading wrap; broadcasts over leading axes."""
    dt = params.dt if dt is None else dt
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_steer(u[..., 1])
    th = s[..., 2]
    v = u[..., 0]
    return np.stack([s[..., 0] + v * np.cos(th) * dt,
                     s[..., 1] + v * np.sin(th) * dt,
                     th + v * np.tan(u[..., 1]) / params.wheelbase * dt], axis=-1)


def step_nonlinear(s: VehicleState, u: ControlInput, params: VehicleParams, dt: float | None = None) -> VehicleState:
    nxt = propagate(s.as_array(), u.as_array(), params, dt)
    return VehicleState.from_array(nxt)


def rollout(s0, inputs, params: VehicleParams, dt: float | None = None) -> np.ndarray:
    """Nonlinear rollout; returns ``(H+1, 3)`` states for ``(H, 2)`` inputs."""
    inputs = np.asarray(inputs, dtype=float)
    out = np.empty((len(inputs) + 1, 3))
    out[0] = s0
    for k, u in enumerate(inputs):
        out[k + 1] = propagate(out[k], u, params, dt)
    return out


def jacobians(s_ref, u_ref, params: VehicleParams):
    """Batched ``A, B, c`` for references of shape ``(..., 3)`` and ``(..., 2)``."""
    s_ref = np.asarray(s_ref, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    _check_steer(u_ref[..., 1])
    dt, L = params.dt, params.wheelbase
    th, v, psi = s_ref[..., 2], u_ref[..., 0], u_ref[..., 1]
    ct, st, tp = np.cos(th), np.sin(th), np.tan(psi)
    shape = th.shape
    A = np.zeros(shape + (3, 3))
    A[..., 0, 0] = A[..., 1, 1] = A[..., 2, 2] = 1.0
    A[..., 0, 2] = -v * st * dt
    A[..., 1, 2] = v * ct * dt
    B = np.zeros(shape + (3, 2))
    B[..., 0, 0] = ct * dt
    B[..., 1, 0] = st * dt
    B[..., 2, 0] = tp / L * dt
    B[..., 2, 1] = v / (L * np.cos(psi) ** 2) * dt
    f = propagate(s_ref, u_ref, params)
    c = f - np.einsum("...ij,...j->...i", A, s_ref) - np.einsum("...ij,...j->...i", B, u_ref)
    return A, B, c


def linearize(s_ref: VehicleState, u_ref: ControlInput, params: VehicleParams) -> LinearizedDynamics:
    """First-order expansion of one step around ``(s_ref, u_ref)``.

    ``c`` is computed with the unwrapped heading, so ``A s + B u + c``
    reproduces the step exactly up to a multiple of 2 pi in the heading.
    """
    A, B, c = jacobians(s_ref.as_array(), u_ref.as_array(), params)
    return LinearizedDynamics(A, B, c)


def condense(A, B, c, s0):
    """Stack ``s[k+1] = A[k] s[k] + B[k] u[k] + c[k]`` into ``S = F u + g``.

    Returns ``F`` of shape ``(3H, 2H)`` and ``g`` of shape ``(3H,)`` for the
    states ``s[1..H]``.
    """
    H = A.shape[0]
    F = np.zeros((H, 3, H, 2))
    g = np.empty((H, 3))
    prev_g = np.asarray(s0, dtype=float)
    for k in range(H):
        g[k] = A[k] @ prev_g + c[k]
        if k:
            F[k, :, :k] = np.einsum("ij,jkl->ikl", A[k], F[k - 1, :, :k])
        F[k, :, k] = B[k]
        prev_g = g[k]
    return F.reshape(3 * H, 2 * H), g.reshape(-1)


def check_bounds(u_seq, bounds: ActionBounds, u_prev=None, tol: float = 0.0) -> bool:
    """True iff every input and every consecutive difference is within bounds."""
    u = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u.shape[0] == 0:
        raise VehicleError("empty input sequence")
    if np.any(u < bounds.u_min - tol) or np.any(u > bounds.u_max + tol):
        return False
    if u_prev is not None:
        u = np.vstack([u_prev, u])
    du = np.diff(u, axis=0)
    return bool(np.all(du >= bounds.a_min - tol) and np.all(du <= bounds.a_max + tol))


def project_inputs(u_seq, bounds: ActionBounds, u_prev=None) -> np.ndarray:
    """Clip an input sequence onto the bounds, sequentially.

    Each step is clipped to the box intersected with the rate window around
    the previous (already clipped) input; the window is never empty because
    the rate bounds bracket zero.
    """
    u = np.array(u_seq, dtype=float)
    prev = None if u_prev is None else np.clip(np.asarray(u_prev, dtype=float), bounds.u_min, bounds.u_max)
    for k in range(len(u)):
        lo, hi = bounds.u_min, bounds.u_max
        if prev is not None:
            lo = np.maximum(lo, prev + bounds.a_min)
            hi = np.minimum(hi, prev + bounds.a_max)
        u[k] = np.clip(u[k], lo, hi)
        prev = u[k]
    return u
