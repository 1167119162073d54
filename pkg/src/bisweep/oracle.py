"""Independent brute-force and finite-difference references.

Everything here deliberately avoids the solver code paths: propagation is
plain Euler, optimization is exhaustive enumeration.  Only the geometry
module is shared.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import Scenario, h_lower, h_upper, target_distance

__all__ = [
    "EnumSpec",
    "OracleInfeasibleError",
    "brute_lower",
    "brute_bilevel",
    "sigma_sup_oracle",
    "fd_check",
]

MAX_COMBINATIONS = 10 ** 7


class OracleInfeasibleError(RuntimeError):
    """No enumerated combination satisfied the constraints."""


@dataclass(frozen=True)
class EnumSpec:
    """Enumeration budget: piecewise-constant controls on a tiny grid."""

    n_intervals: int = 4
    levels_per_control: int = 3
    omega_max: float = 10.0
    feas_tol: float = 1e-9
    target_tol: float = 0.25
    x_init_points: int = 9
    chunk: int = 200_000

    def __post_init__(self):
        if not (2 <= self.n_intervals <= 5):
            raise ValueError("n_intervals must be in [2, 5]")
        if not (2 <= self.levels_per_control <= 5):
            raise ValueError("levels_per_control must be in [2, 5]")


def _interval_to_nodes(vals: np.ndarray) -> np.ndarray:
    """Piecewise-constant interval values -> node array (last node repeats)."""
    return np.concatenate([vals, vals[-1:]], axis=0)


def _x_init_grid(s: Scenario, count: int) -> np.ndarray:
    """Coarse grid over the initial disk: center plus one or two rings."""
    pts = [s.y0_arr.copy()]
    n_ring = max(4, count - 1)
    ang = np.linspace(0, 2 * math.pi, n_ring, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts.append(s.y0_arr + s.R1 * ring)
    pts.append(s.y0_arr + 0.5 * s.R1 * ring)
    return np.concatenate([[p] if np.ndim(p) == 1 else p for p in pts], axis=0)


def _euler_smooth_batch(x0, y_nodes, u_nodes, u0_nodes, omega_nodes, gamma, s, dt):
    """Euler propagation of x under the smoothed field; everything batched.

    x0 (B, n); u_nodes (N+1, B, n); u0/omega (N+1, B); y_nodes (N+1, n).
    Returns node states (N+1, B, n).
    """
    n_nodes = u_nodes.shape[0]
    B = x0.shape[0]
    xs = np.empty((n_nodes, B, s.dim))
    xs[0] = x0
    gain = s.cone_gain
    for i in range(n_nodes - 1):
        d = xs[i] - y_nodes[i]
        hl = 0.5 * (np.sum(d * d, axis=-1) - s.R1 ** 2)
        c = np.minimum(gain, gamma * np.exp(np.minimum(gamma * hl, 50.0)))
        if s.drift.name == "identity":
            f = u_nodes[i]
        else:
            A = s.drift.matrix(s.dim)
            f = xs[i] @ A.T + u_nodes[i]
            nrm = np.linalg.norm(f, axis=-1, keepdims=True)
            f = f * np.where(nrm > s.M1, s.M1 / np.maximum(nrm, 1e-300), 1.0)
        xs[i + 1] = xs[i] + (f - (u0_nodes[i] * c)[:, None] * d) * (omega_nodes[i] * dt)[:, None]
    return xs


def _control_levels(bound: float, levels: int) -> np.ndarray:
    return np.linspace(-bound, bound, levels)


def brute_lower(omega, v, gamma: float, spec: EnumSpec, s: Scenario,
                return_decision: bool = False):
    """Exhaustive minimum of the lower effort over piecewise-constant (u, u0)
    and a coarse initial-position grid, for frozen (omega, v) node values."""
    N = spec.n_intervals
    omega = np.asarray(omega, dtype=float)
    v = np.asarray(v, dtype=float)
    if omega.shape[0] != N + 1:
        raise ValueError("omega must be given at the oracle's N+1 nodes")
    dt = 1.0 / N
    # y path by Euler (independent route)
    y = np.empty((N + 1, s.dim))
    y[0] = s.y0_arr
    for i in range(N):
        y[i + 1] = y[i] + v[i] * omega[i] * dt

    u_lv = _control_levels(s.u_bound, spec.levels_per_control)
    u0_lv = np.linspace(0.0, 1.0, spec.levels_per_control)
    x_grid = _x_init_grid(s, spec.x_init_points)

    # index all per-node combinations once
    combos_node = np.array(list(itertools.product(range(spec.levels_per_control),
                                                  repeat=s.dim + 1)))
    u_node = np.stack([u_lv[combos_node[:, 0]], u_lv[combos_node[:, 1]]], axis=1)
    u0_node = u0_lv[combos_node[:, 2]]
    # keep only grid points inside the control ball
    ok = np.linalg.norm(u_node, axis=1) <= s.u_bound + 1e-12
    u_node, u0_node = u_node[ok], u0_node[ok]
    per_node = len(u_node)
    total = (per_node ** N) * len(x_grid)
    if total > MAX_COMBINATIONS:
        raise ValueError(f"enumeration budget exceeded: {total} > {MAX_COMBINATIONS}")

    all_seq = itertools.product(range(per_node), repeat=N)
    best_val = np.inf
    best = None
    seq_list = np.array(list(all_seq))  # (C, N)
    C = seq_list.shape[0]
    for start in range(0, C, max(1, spec.chunk // max(1, len(x_grid)))):
        idx = seq_list[start:start + max(1, spec.chunk // max(1, len(x_grid)))]
        B = idx.shape[0]
        u_seq = u_node[idx]      # (B, N, dim)
        u0_seq = u0_node[idx]    # (B, N)
        u_nodes = _interval_to_nodes(u_seq.transpose(1, 0, 2))    # (N+1, B, dim)
        u0_nodes = _interval_to_nodes(u0_seq.T)                   # (N+1, B)
        for xg in x_grid:
            x0 = np.broadcast_to(xg, (B, s.dim))
            xs = _euler_smooth_batch(x0, y, u_nodes, u0_nodes,
                                     np.broadcast_to(omega[:, None], (N + 1, B)),
                                     gamma, s, dt)
            hl = 0.5 * (np.sum((xs - y[:, None, :]) ** 2, axis=-1) - s.R1 ** 2)
            feas = np.all(hl <= spec.feas_tol, axis=0)
            if not np.any(feas):
                continue
            effort = (np.sum(u_nodes * u_nodes, axis=2) + u0_nodes ** 2) * omega[:, None]
            z = np.sum(0.5 * (effort[1:] + effort[:-1]) * dt, axis=0)
            z = np.where(feas, z, np.inf)
            j = int(np.argmin(z))
            if z[j] < best_val:
                best_val = float(z[j])
                best = (xg.copy(), u_nodes[:, j, :].copy(), u0_nodes[:, j].copy())
    if best is None:
        raise OracleInfeasibleError("no feasible (u, u0, x_init) combination")
    if return_decision:
        return best_val, best
    return best_val


def brute_bilevel(spec: EnumSpec, s: Scenario, gamma: Optional[float] = None):
    """Exhaustive search over piecewise-constant (v, omega); each feasible
    candidate is costed with its own brute lower solve.  Returns
    (T_best, decision dict)."""
    if gamma is None:
        gamma = 8.0 * s.cone_gain
    N = spec.n_intervals
    dt = 1.0 / N
    L = spec.levels_per_control
    v_lv = _control_levels(s.v_bound, L)
    w_lv = np.linspace(0.0, spec.omega_max, L)
    combos_node = np.array(list(itertools.product(range(L), repeat=s.dim + 1)))
    v_node = np.stack([v_lv[combos_node[:, 0]], v_lv[combos_node[:, 1]]], axis=1)
    # enforce the ball bound on v (component grid overshoots the ball corners)
    ok = np.linalg.norm(v_node, axis=1) <= s.v_bound + 1e-12
    v_node = v_node[ok]
    w_node = w_lv[combos_node[ok, 2]]
    per_node = len(v_node)
    C = per_node ** N
    if C > MAX_COMBINATIONS:
        raise ValueError("enumeration budget exceeded")
    seq = np.array(list(itertools.product(range(per_node), repeat=N)))
    v_seq = v_node[seq].transpose(1, 0, 2)   # (N, C, dim)
    w_seq = w_node[seq].T                    # (N, C)
    # y path and upper feasibility, vectorized
    y = np.empty((N + 1, C, s.dim))
    y[0] = s.y0_arr
    for i in range(N):
        y[i + 1] = y[i] + v_seq[i] * (w_seq[i] * dt)[:, None]
    hu = 0.5 * (np.sum((y - s.q0_arr) ** 2, axis=-1) - (s.R - s.R1) ** 2)
    term = target_distance(y[-1], s)
    w_nodes_full = _interval_to_nodes(w_seq)
    t_final = np.sum(0.5 * (w_nodes_full[1:] + w_nodes_full[:-1]) * dt, axis=0)
    feas = np.all(hu <= spec.feas_tol, axis=0) & (term <= spec.target_tol)
    if not np.any(feas):
        raise OracleInfeasibleError("no (v, omega) candidate reaches the exit target")
    order = np.argsort(np.where(feas, t_final, np.inf))
    for j in order:
        if not feas[j]:
            break
        v_nodes = _interval_to_nodes(v_seq[:, j, :])
        w_nodes = w_nodes_full[:, j]
        try:
            phi, dec = brute_lower(w_nodes, v_nodes, gamma, spec, s, return_decision=True)
        except OracleInfeasibleError:
            continue
        return float(t_final[j]), {
            "v": v_nodes, "omega": w_nodes, "phi": phi,
            "x_init": dec[0], "u": dec[1], "u0": dec[2],
        }
    raise OracleInfeasibleError("no candidate admits a feasible lower solve")


def sigma_sup_oracle(qL, nuL: float, r: float, x, y, s: Scenario,
                     grid_pts: int = 10_000, coeff: Optional[float] = None) -> float:
    """Grid supremum over the cone activation of its Hamiltonian contribution.

    Evaluates sup over u0 in [0,1] of <qL - nuL (x - y), -coeff (x - y) u0> - r u0^2
    on a dense grid, refined by one parabolic vertex evaluation (the objective
    is a concave quadratic, so the refinement stays an honest evaluation)."""
    if grid_pts < 100:
        raise ValueError("need at least 100 grid points")
    qL = np.asarray(qL, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = s.cone_gain if coeff is None else coeff
    d = x - y
    lin = float(np.dot(qL - nuL * d, -a * d))
    u0 = np.linspace(0.0, 1.0, grid_pts)
    vals = lin * u0 - r * u0 ** 2
    j = int(np.argmax(vals))
    best = float(vals[j])
    # parabolic vertex through an adjacent triple, then evaluate there; the
    # objective is a concave quadratic, so the vertex is exact even when the
    # grid argmax sits at an endpoint
    jc = min(max(j, 1), grid_pts - 2)
    h = u0[1] - u0[0]
    denom = vals[jc - 1] - 2 * vals[jc] + vals[jc + 1]
    if abs(denom) > 1e-300:
        ustar = u0[jc] + 0.5 * h * (vals[jc - 1] - vals[jc + 1]) / denom
        ustar = min(1.0, max(0.0, ustar))
        best = max(best, lin * ustar - r * ustar ** 2)
    return best


def fd_check(fn: Callable[[np.ndarray], float], grad: np.ndarray, point: np.ndarray,
             directions: Sequence[np.ndarray], h: float = 1e-6) -> float:
    """Max relative error of a supplied gradient against central differences
    along the given directions."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=float)
    grad = np.asarray(grad, dtype=float)
    worst = 0.0
    for delta in directions:
        delta = np.asarray(delta, dtype=float)
        fd = (fn(point + h * delta) - fn(point - h * delta)) / (2 * h)
        pred = float(np.dot(grad, delta))
        scale = max(abs(fd), abs(pred), 1e-12)
        worst = max(worst, abs(fd - pred) / scale)
    return worst
