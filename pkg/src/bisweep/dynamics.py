"""Sweeping dynamics: exact truncated-cone field, smooth approximation, integrators.

Two integration routes are provided and compared throughout the test suite:

* ``integrate_smooth`` -- RK4 on the smoothed field, where the cone correction
  is ramped in by a capped exponential coefficient of the boundary gap;
* ``integrate_catchup`` -- Moreau-style time stepping: an explicit drift step
  followed by a projection move back toward the translated disk, truncated to
  the cone budget M * omega * dt per step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Scenario, h_lower, h_upper, project_disk, target_distance

__all__ = [
    "TimeGrid",
    "ControlProfile",
    "StateTrajectory",
    "SmoothingSchedule",
    "ViolationReport",
    "InfeasibleStateError",
    "FeasibilityLossWarning",
    "drift",
    "sweeping_field_exact",
    "smoothing_coefficient",
    "sweeping_field_smooth",
    "integrate_smooth",
    "integrate_catchup",
    "feasibility_monitor",
    "convergence_study",
]

BOUNDARY_TOL_FACTOR = 1e-9


class InfeasibleStateError(ValueError):
    """State handed to the exact field lies strictly outside the moving disk."""


class FeasibilityLossWarning(UserWarning):
    """Catching-up step needed a correction beyond the cone truncation budget."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of N+1 nodes on the fixed reparametrized horizon [0, T*]."""

    n_intervals: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.n_intervals < 2:
            raise ValueError("need at least 2 intervals")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_intervals

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_intervals + 1)

    @property
    def n_nodes(self) -> int:
        return self.n_intervals + 1


@dataclass(frozen=True)
class ControlProfile:
    """Node-sampled controls on the reparametrized horizon."""

    grid: TimeGrid
    v: np.ndarray      # (N+1, n) plan velocity, |v| <= v_bound
    u: np.ndarray      # (N+1, m) lower drift control, |u| <= u_bound
    u0: np.ndarray     # (N+1,)   cone activation in [0, 1]
    omega: np.ndarray  # (N+1,)   time dilation, >= 0

    def __post_init__(self):
        n = self.grid.n_nodes
        for name in ("v", "u", "u0", "omega"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape[0] != n:
                raise ValueError(f"{name} must have {n} node values")
        if self.u0.min() < -1e-12 or self.u0.max() > 1.0 + 1e-12:
            raise ValueError("u0 must lie in [0, 1]")
        if self.omega.min() < -1e-12:
            raise ValueError("omega must be nonnegative")

    def check_bounds(self, s: Scenario, tol: float = 1e-9) -> None:
        if np.linalg.norm(self.v, axis=1).max() > s.v_bound + tol:
            raise ValueError("v exceeds its ball bound")
        if np.linalg.norm(self.u, axis=1).max() > s.u_bound + tol:
            raise ValueError("u exceeds its ball bound")

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int = 2) -> "ControlProfile":
        n = grid.n_nodes
        return cls(grid, np.zeros((n, dim)), np.zeros((n, dim)), np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class StateTrajectory:
    """Node-sampled states plus accumulated cost and physical time."""

    grid: TimeGrid
    y: np.ndarray  # (N+1, n)
    x: np.ndarray  # (N+1, n)
    z: np.ndarray  # (N+1,)
    t: np.ndarray  # (N+1,)
    u0_realized: Optional[np.ndarray] = None   # catching-up only
    feasibility_loss: Optional[dict] = None    # catching-up only

    @property
    def T(self) -> float:
        return float(self.t[-1])


@dataclass(frozen=True)
class SmoothingSchedule:
    """Increasing sequence of smoothing sharpness values gamma_k."""

    gammas: tuple

    def __post_init__(self):
        g = tuple(float(x) for x in self.gammas)
        object.__setattr__(self, "gammas", g)
        if len(g) == 0:
            raise ValueError("schedule must be nonempty")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("gammas must be strictly increasing")

    def validate_against(self, s: Scenario) -> None:
        if self.gammas[0] <= s.cone_gain:
            raise ValueError(f"every gamma must exceed M/R1 = {s.cone_gain}")

    @classmethod
    def default_for(cls, s: Scenario, factors: Sequence[float] = (2, 4, 8, 16, 32, 64)) -> "SmoothingSchedule":
        sched = cls(tuple(f * s.cone_gain for f in factors))
        sched.validate_against(s)
        return sched


def drift(x, u, s: Scenario):
    """Controlled drift f(x, u) of the chosen family, saturated at M1 (H1).

    Broadcasts over leading batch axes.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if s.drift.name == "identity":
        return u + np.zeros_like(x)
    A = s.drift.matrix(s.dim)
    raw = x @ A.T + u
    nrm = np.linalg.norm(raw, axis=-1, keepdims=True)
    scale = np.where(nrm > s.M1, s.M1 / np.maximum(nrm, 1e-300), 1.0)
    return raw * scale


def sweeping_field_exact(x, y, u, u0, s: Scenario):
    """Right-hand side with the exact truncated-cone term (active on the rim only)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    tol = BOUNDARY_TOL_FACTOR * s.R1
    hl = h_lower(x, y, s)
    if np.any(hl > s.R1 * tol + 1e-12):
        raise InfeasibleStateError(f"state outside the moving disk: h_lower={np.max(hl):.3e}")
    f = drift(x, u, s)
    dist = np.linalg.norm(x - y, axis=-1)
    on_rim = dist >= s.R1 - tol
    corr = s.cone_gain * np.asarray(u0, dtype=float) * np.where(on_rim, 1.0, 0.0)
    return f - corr[..., None] * (x - y)


def smoothing_coefficient(gamma: float, x, y, s: Scenario):
    """Capped exponential ramp of the cone coefficient: min{M/R1, gamma*exp(gamma*h_L)}."""
    if gamma <= s.cone_gain:
        raise ValueError(f"gamma must exceed M/R1 = {s.cone_gain}")
    hl = h_lower(x, y, s)
    expo = np.minimum(gamma * hl, 50.0)  # cap below overflow; min() caps the value anyway
    return np.minimum(s.cone_gain, gamma * np.exp(expo))


def sweeping_field_smooth(x, y, u, u0, gamma: float, s: Scenario):
    """Smoothed field: drift minus ramped cone pull toward the disk center."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c = smoothing_coefficient(gamma, x, y, s)
    f = drift(x, u, s)
    return f - (np.asarray(u0, dtype=float) * c)[..., None] * (x - y)


def _as_batched(arr, n_nodes, width=None):
    """Normalize node arrays to (N+1, B, width) / (N+1, B)."""
    arr = np.asarray(arr, dtype=float)
    if width is None:
        if arr.ndim == 1:
            arr = arr[:, None]
        return arr
    if arr.ndim == 2:
        arr = arr[:, None, :]
    return arr


def propagate_smooth(v, u, u0, omega, x_init, gamma: float, s: Scenario, grid: TimeGrid):
    """Batched RK4 propagation of (y, x) under the smoothed field.

    Controls have shape (N+1, ...) with an optional batch axis; x_init is
    (..., n).  z and t come from trapezoidal quadrature of the node values,
    matching the transcription order.  Returns (y, x, z, t) node arrays.
    """
    n = grid.n_nodes
    v = _as_batched(v, n, width=s.dim)
    u = _as_batched(u, n, width=s.dim)
    u0 = _as_batched(u0, n)
    omega = _as_batched(omega, n)
    x0 = np.asarray(x_init, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    B = max(v.shape[1], u.shape[1], u0.shape[1], omega.shape[1], x0.shape[0])
    v = np.broadcast_to(v, (n, B, s.dim))
    u = np.broadcast_to(u, (n, B, s.dim))
    u0 = np.broadcast_to(u0, (n, B))
    omega = np.broadcast_to(omega, (n, B))
    x0 = np.broadcast_to(x0, (B, s.dim))

    dt = grid.dt
    xs = np.empty((n, B, s.dim))
    xs[0] = x0

    # the plan state y is control-driven only (dy = v*omega per scaled time),
    # so its RK4 path and all four stage values have closed forms; only x
    # needs the stage recursion.  Stage math matches sweeping_field_smooth.
    w1 = v[:-1] * omega[:-1][..., None]
    om_m = 0.5 * (omega[:-1] + omega[1:])
    wm = 0.5 * (v[:-1] + v[1:]) * om_m[..., None]
    w4 = v[1:] * omega[1:][..., None]
    ys = np.empty((n, B, s.dim))
    ys[0] = s.y0_arr
    ys[1:] = s.y0_arr + np.cumsum((dt / 6.0) * (w1 + 4.0 * wm + w4), axis=0)
    y_st = (ys[:-1], ys[:-1] + (0.5 * dt) * w1,
            ys[:-1] + (0.5 * dt) * wm, ys[:-1] + dt * wm)

    um = 0.5 * (u[:-1] + u[1:])
    u0m = 0.5 * (u0[:-1] + u0[1:])
    u_st = (u[:-1], um, um, u[1:])
    w_st = (omega[:-1], om_m, om_m, omega[1:])
    u0w_st = (u0[:-1] * omega[:-1], u0m * om_m, u0m * om_m, u0[1:] * omega[1:])

    cg = s.cone_gain
    r1sq = s.R1 ** 2
    gscale = 0.5 * gamma
    identity_drift = s.drift.name == "identity"
    if identity_drift:
        fw_st = tuple(uu * ww[..., None] for uu, ww in zip(u_st, w_st))

    def stage(xst, j, i):
        diff = xst - y_st[j][i]
        ex = np.exp(np.minimum(gscale * ((diff * diff).sum(-1) - r1sq), 50.0))
        c = np.minimum(cg, gamma * ex)
        if identity_drift:
            return fw_st[j][i] - (u0w_st[j][i] * c)[:, None] * diff
        f = drift(xst, u_st[j][i], s)
        return f * w_st[j][i][:, None] - (u0w_st[j][i] * c)[:, None] * diff

    half = 0.5 * dt
    for i in range(n - 1):
        xi = xs[i]
        k1 = stage(xi, 0, i)
        k2 = stage(xi + half * k1, 1, i)
        k3 = stage(xi + half * k2, 2, i)
        k4 = stage(xi + dt * k3, 3, i)
        xs[i + 1] = xi + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    effort = (np.sum(u * u, axis=2) + u0 * u0) * omega
    zs = np.concatenate([np.zeros((1, B)), np.cumsum(0.5 * (effort[1:] + effort[:-1]) * dt, axis=0)])
    ts = np.concatenate([np.zeros((1, B)), np.cumsum(0.5 * (omega[1:] + omega[:-1]) * dt, axis=0)])
    return ys, xs, zs, ts


def integrate_smooth(cp: ControlProfile, x_init, gamma: float, s: Scenario) -> StateTrajectory:
    """RK4 trajectory of the reparametrized smoothed system for one control profile."""
    ys, xs, zs, ts = propagate_smooth(cp.v, cp.u, cp.u0, cp.omega, x_init, gamma, s, cp.grid)
    return StateTrajectory(cp.grid, ys[:, 0], xs[:, 0], zs[:, 0], ts[:, 0])


def integrate_catchup(cp: ControlProfile, x_init, s: Scenario, warn: bool = True) -> StateTrajectory:
    """Moreau catching-up stepping: Euler drift, then truncated projection pull.

    The per-step correction toward the disk is capped at M * omega_i * dt; the
    implied cone activation is recorded in ``u0_realized``.  If a step needed
    more than the budget, the first violating node is reported and a
    FeasibilityLossWarning is emitted.
    """
    grid = cp.grid
    n = grid.n_nodes
    dt = grid.dt
    y = np.empty((n, s.dim))
    x = np.empty((n, s.dim))
    u0_real = np.zeros(n)
    y[0] = s.y0_arr
    x[0] = np.asarray(x_init, dtype=float)
    loss = None
    for i in range(n - 1):
        w = cp.omega[i]
        y[i + 1] = y[i] + cp.v[i] * w * dt
        x_pred = x[i] + drift(x[i], cp.u[i], s) * w * dt
        target = project_disk(x_pred, y[i + 1], s.R1)
        needed = float(np.linalg.norm(x_pred - target))
        budget = s.M * w * dt
        if needed <= 1e-15:
            x[i + 1] = x_pred
            continue
        step = min(needed, budget)
        x[i + 1] = x_pred + (step / needed) * (target - x_pred)
        u0_real[i] = step / budget if budget > 1e-300 else 0.0
        if needed > budget + 1e-12 and loss is None:
            loss = {"node": i + 1, "needed": needed, "budget": budget}
    if loss is not None and warn:
        warnings.warn(
            f"catching-up correction exceeded the cone budget at node {loss['node']} "
            f"(needed {loss['needed']:.3e} > budget {loss['budget']:.3e})",
            FeasibilityLossWarning,
        )
    effort = (np.sum(cp.u * cp.u, axis=1) + u0_real ** 2) * cp.omega
    z = np.concatenate([[0.0], np.cumsum(0.5 * (effort[1:] + effort[:-1]) * dt)])
    t = np.concatenate([[0.0], np.cumsum(0.5 * (cp.omega[1:] + cp.omega[:-1]) * dt)])
    return StateTrajectory(grid, y, x, z, t, u0_realized=u0_real, feasibility_loss=loss)


@dataclass(frozen=True)
class ViolationReport:
    max_h_lower: float
    node_h_lower: int
    max_h_upper: float
    node_h_upper: int
    terminal_distance: float

    def ok(self, tol: float = 1e-6, target_tol: float = 1e-2) -> bool:
        return (
            self.max_h_lower <= tol
            and self.max_h_upper <= tol
            and self.terminal_distance <= target_tol
        )

    def to_dict(self) -> dict:
        return {
            "max_h_lower": self.max_h_lower,
            "node_h_lower": self.node_h_lower,
            "max_h_upper": self.max_h_upper,
            "node_h_upper": self.node_h_upper,
            "terminal_distance": self.terminal_distance,
        }


def feasibility_monitor(tr: StateTrajectory, s: Scenario) -> ViolationReport:
    """Worst node violations of both containment constraints plus terminal miss."""
    hl = h_lower(tr.x, tr.y, s)
    hu = h_upper(tr.y, s)
    return ViolationReport(
        max_h_lower=float(np.max(hl)),
        node_h_lower=int(np.argmax(hl)),
        max_h_upper=float(np.max(hu)),
        node_h_upper=int(np.argmax(hu)),
        terminal_distance=float(target_distance(tr.y[-1], s)),
    )


def convergence_study(cp: ControlProfile, x_init, sched: SmoothingSchedule, s: Scenario) -> np.ndarray:
    """Sup-norm gap between the smoothed trajectories and the catching-up reference."""
    sched.validate_against(s)
    ref = integrate_catchup(cp, x_init, s, warn=False)
    errs = []
    for g in sched.gammas:
        tr = integrate_smooth(cp, x_init, g, s)
        errs.append(float(np.linalg.norm(tr.x - ref.x, axis=1).max()))
    return np.asarray(errs)
