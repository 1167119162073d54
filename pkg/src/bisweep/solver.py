"""Nested numerical optimization for the flattened penalized problem.

Layout of the nested scheme:

* ``solve_lower`` -- projected-gradient / augmented-Lagrangian descent on the
  transcribed lower effort problem for frozen (omega, v); produces the value
  phi, the minimizing decision, and adjoint/multiplier estimates.
* ``value_subgradient`` -- a subgradient selection of phi with respect to the
  upper controls, read off the lower multipliers.
* ``solve_bilevel`` -- outer continuation over (gamma, rho); each stage runs a
  projected-gradient descent on the penalized merit, with the lower problem
  re-solved as the upper controls move and the value function modeled
  linearly in between.

All randomness is confined to seeded multi-start control guesses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .dynamics import (
    ControlProfile,
    StateTrajectory,
    TimeGrid,
    SmoothingSchedule,
    drift,
    integrate_smooth,
    propagate_smooth,
    smoothing_coefficient,
)
from .geometry import (
    Scenario,
    h_lower,
    h_upper,
    project_disk,
    target_distance,
    target_direction,
    validate,
)
from .transcription import DecisionVector, NLPInstance, assemble_lower

__all__ = [
    "SolverOptions",
    "LowerMultipliers",
    "LowerSolution",
    "BilevelSolution",
    "AbnormalLowerProblemError",
    "solve_lower",
    "adjoint_sweep",
    "value_subgradient",
    "solve_bilevel",
    "penalty_gap",
]


class AbnormalLowerProblemError(RuntimeError):
    """Normality (positive cost multiplier) failed for the lower problem."""


@dataclass(frozen=True)
class SolverOptions:
    n_intervals: int = 40
    seeds: int = 8
    seed: int = 0
    # lower-level solve
    lower_max_iter: int = 80
    lower_al_rounds: int = 5
    lower_step_tol: float = 1e-10
    lower_penalty0: float = 20.0
    fd_h: float = 1e-6
    # upper-level descent
    upper_max_iter: int = 30
    upper_al_rounds: int = 6
    upper_penalty0: float = 4.0
    step0: float = 0.5
    armijo: float = 1e-4
    upper_step_tol: float = 1e-9
    target_tol: Optional[float] = None  # default 1e-3 * R
    screen_iters: int = 5
    resolve_move: float = 0.01
    omega_cap_factor: float = 10.0  # cap omega at factor * R / max(v_bound, eps)
    # reduced budget for intermediate lower re-solves inside the upper descent
    refresh_max_iter: int = 30
    refresh_al_rounds: int = 2
    # nodes with h_lower above -active_band*R1^2 may carry constraint weight
    active_band: float = 0.25

    def fast(self) -> "SolverOptions":
        return replace(self, seeds=1, lower_max_iter=40, upper_max_iter=15,
                       upper_al_rounds=4, lower_al_rounds=3)


@dataclass(frozen=True)
class LowerMultipliers:
    p_H: np.ndarray        # (N+1, n) adjoint of the plan center
    p_L: np.ndarray        # (N+1, n) adjoint of the swept point
    mu_H: np.ndarray       # (N+1,) non-increasing, zero here (no upper constraint below)
    mu_L: np.ndarray       # (N+1,) non-increasing step function
    lambda_bar: float      # cost multiplier, 1 for a normal problem
    zeta1: np.ndarray      # (N+1,) lower-value sensitivity density wrt omega
    zeta2: np.ndarray      # (N+1, n) lower-value sensitivity density wrt v
    eta: np.ndarray        # (N+1,) nodal active-set weights behind mu_L


@dataclass(frozen=True)
class LowerSolution:
    decision: DecisionVector
    value: float
    multipliers: Optional[LowerMultipliers]
    status: dict
    gamma: float


@dataclass(frozen=True)
class BilevelSolution:
    decision: DecisionVector
    T_star: float
    gamma_final: float
    rho_final: float
    lower: LowerSolution
    history: tuple
    trajectory: StateTrajectory
    upper_mults: dict

    def to_dict(self) -> dict:
        return {
            "T_star": self.T_star,
            "gamma_final": self.gamma_final,
            "rho_final": self.rho_final,
            "phi": self.lower.value,
            "gap": penalty_gap(self),
            "history": list(self.history),
        }


# --------------------------------------------------------------------------
# helpers

def _trapz_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_nodes, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _project_ball_rows(arr: np.ndarray, bound: float) -> np.ndarray:
    nrm = np.linalg.norm(arr, axis=-1, keepdims=True)
    scale = np.where(nrm > bound, bound / np.maximum(nrm, 1e-300), 1.0)
    return arr * scale


def _al_merit(obj, res, mu, c):
    """Augmented-Lagrangian value for inequality residuals res <= 0."""
    shifted = np.maximum(0.0, mu + c * res)
    return obj + np.sum(shifted ** 2 - mu ** 2, axis=-1) / (2.0 * c)


def _fd_grad_jac(eval_many, flat: np.ndarray, h: float):
    dim = flat.size
    pts = np.repeat(flat[None, :], 2 * dim, axis=0)
    idx = np.arange(dim)
    pts[2 * idx, idx] += h
    pts[2 * idx + 1, idx] -= h
    obj, res = eval_many(pts)
    grad = (obj[0::2] - obj[1::2]) / (2 * h)
    jac = (res[0::2] - res[1::2]) / (2 * h)  # (dim, n_res)
    return grad, jac.T


def _pg_minimize(eval_many, project, flat0, mu, c, opts, max_iter):
    """Projected gradient with Armijo backtracking on the AL merit."""
    flat = project(flat0.copy())
    obj, res = eval_many(flat[None, :])
    merit = float(_al_merit(obj, res, mu, c)[0])
    for _ in range(max_iter):
        grad, jac = _fd_grad_jac(eval_many, flat, opts.fd_h)
        shifted = np.maximum(0.0, mu + c * res[0])
        g = grad + jac.T @ shifted
        gnorm = np.linalg.norm(g)
        if gnorm < 1e-14:
            break
        alphas = opts.step0 * 0.5 ** np.arange(12) / max(1.0, gnorm)
        cands = np.stack([project(flat - a * g) for a in alphas])
        obj_c, res_c = eval_many(cands)
        merits = _al_merit(obj_c, res_c, mu, c)
        decrease = np.array([opts.armijo * np.dot(g, flat - cand) for cand in cands])
        ok = merits <= merit - np.maximum(decrease, 0.0)
        if not np.any(ok):
            break
        j = int(np.argmax(ok))
        step = np.linalg.norm(cands[j] - flat)
        flat = cands[j]
        merit = float(merits[j])
        obj, res = obj_c[j:j + 1], res_c[j:j + 1]
        if step < opts.lower_step_tol:
            break
    return flat, float(obj[0]), res[0], merit


# --------------------------------------------------------------------------
# lower-level solve

def solve_lower(omega, v, gamma: float, s: Scenario, opts: Optional[SolverOptions] = None,
                warm: Optional[LowerSolution] = None, grid: Optional[TimeGrid] = None,
                with_multipliers: bool = True) -> LowerSolution:
    """Augmented-Lagrangian projected-gradient solve of the lower effort problem."""
    opts = opts or SolverOptions()
    omega = np.asarray(omega, dtype=float)
    v = np.asarray(v, dtype=float)
    grid = grid or TimeGrid(omega.shape[0] - 1)
    nlp = assemble_lower(omega, v, gamma, s, grid)
    n = grid.n_nodes

    def project(flat):
        out = flat.copy()
        out[:s.dim] = project_disk(out[:s.dim], s.y0_arr, s.R1)
        u = out[s.dim:s.dim + s.dim * n].reshape(n, s.dim)
        out[s.dim:s.dim + s.dim * n] = _project_ball_rows(u, s.u_bound).ravel()
        out[s.dim + s.dim * n:] = np.clip(out[s.dim + s.dim * n:], 0.0, 1.0)
        return out

    if warm is not None and warm.decision.controls.grid.n_nodes == n:
        flat = nlp.pack(DecisionVector(warm.decision.x_init, ControlProfile(
            grid, v, warm.decision.controls.u, warm.decision.controls.u0, omega)))
        mu = warm.multipliers.eta.copy() if warm.multipliers is not None else np.zeros(n)
        c = min(warm.status.get("penalty", opts.lower_penalty0), 100.0 * opts.lower_penalty0)
    else:
        cp0 = ControlProfile(grid, v, np.zeros((n, s.dim)), np.zeros(n), omega)
        flat = nlp.pack(DecisionVector(s.y0_arr.copy(), cp0))
        mu = np.zeros(n)
        c = opts.lower_penalty0

    prev_viol = np.inf
    iters = 0
    for rnd in range(opts.lower_al_rounds):
        flat, obj, res, _ = _pg_minimize(nlp.eval_many, project, flat, mu, c, opts,
                                         opts.lower_max_iter)
        iters += 1
        viol = float(np.max(res, initial=0.0))
        mu = np.maximum(0.0, mu + c * res)
        if viol <= 1e-8:
            break
        if viol > 1e-7 and viol > 0.25 * prev_viol:
            c = min(c * 4.0, 1e6)
        prev_viol = viol

    dv = nlp.unpack(flat)
    value = float(obj)
    status = {"converged": float(np.max(res, initial=0.0)) <= 1e-7,
              "al_rounds": iters, "penalty": c,
              "max_violation": float(np.max(res, initial=0.0))}
    mults = None
    if with_multipliers:
        eta = _kkt_weights(nlp, flat, res, s, opts)
        tr = integrate_smooth(dv.controls, dv.x_init, gamma, s)
        mults = _lower_multipliers(tr, dv, eta, gamma, s)
    return LowerSolution(decision=dv, value=value, multipliers=mults,
                         status=status, gamma=gamma)


def _kkt_weights(nlp, flat, res, s: Scenario, opts: SolverOptions) -> np.ndarray:
    """Nonnegative nodal constraint weights fitted to the stationarity system.

    The projected-gradient iterates settle with the contact constraints
    slightly inside the rim (the smoothed pull equilibrates there), so the
    weights are recovered from a nonnegative least-squares fit of
    grad z + J^T eta = 0 over the near-active nodes.
    """
    grad, jac = _fd_grad_jac(nlp.eval_many, flat, opts.fd_h)
    eta = np.zeros(res.shape[0])
    act = res >= -opts.active_band * s.R1 ** 2
    if np.any(act):
        sol, _ = nnls(jac[act].T, -grad)
        eta[act] = sol
    return eta


def _upper_sensitivities(dv: DecisionVector, eta: np.ndarray, gamma: float,
                         s: Scenario, grid: TimeGrid, h: float = 1e-6):
    """Lagrangian sensitivities of the lower value wrt the plan controls.

    Returns nodal densities (zeta1 wrt omega, zeta2 wrt v) against the
    trapezoidal quadrature, computed by batched central differences of
    L = z(T*) + sum_j eta_j * h_lower_j at the fixed lower decision.
    """
    n = grid.n_nodes
    cp = dv.controls
    m = n * (s.dim + 1)
    v_b = np.repeat(cp.v[:, None, :], 2 * m, axis=1)
    om_b = np.repeat(cp.omega[:, None], 2 * m, axis=1)
    col = 0
    for i in range(n):
        om_b[i, col] += h
        om_b[i, col + 1] -= h
        col += 2
    for i in range(n):
        for d in range(s.dim):
            v_b[i, col, d] += h
            v_b[i, col + 1, d] -= h
            col += 2
    u_b = np.broadcast_to(cp.u[:, None, :], (n, 2 * m, s.dim))
    u0_b = np.broadcast_to(cp.u0[:, None], (n, 2 * m))
    ys, xs, zs, _ = propagate_smooth(v_b, u_b, u0_b, om_b, dv.x_init, gamma, s, grid)
    lag = zs[-1] + np.einsum("i,ib->b", eta, h_lower(xs, ys, s))
    dL = (lag[0::2] - lag[1::2]) / (2 * h)
    w = _trapz_weights(grid)
    zeta1 = dL[:n] / w
    zeta2 = dL[n:].reshape(n, s.dim) / w[:, None]
    return zeta1, zeta2


def _field_and_jacobians(y, x, u, u0, omega, gamma: float, s: Scenario):
    """Smoothed field (dy, dx) and its Jacobians at one point.

    Returns (dy, dx, Jx_x, Jx_y, Ju, Ju0, Jom_x) where Jx_* are the Jacobians
    of dx with respect to the x/y states, Ju and Ju0 those with respect to the
    swept controls, and Jom_x is d(dx)/d(omega) (d(dy)/d(omega) is just v and
    d(dy)/dv is omega*I, handled by the caller).
    """
    dim = s.dim
    d = x - y
    hl = 0.5 * (float(d @ d) - s.R1 ** 2)
    craw = gamma * np.exp(min(gamma * hl, 50.0))
    capped = craw >= s.cone_gain
    c = min(s.cone_gain, craw)
    if s.drift.name == "identity":
        f = u.copy()
        jf_x = np.zeros((dim, dim))
        jf_u = np.eye(dim)
    else:
        A = s.drift.matrix(dim)
        raw = A @ x + u
        nrm = float(np.linalg.norm(raw))
        if nrm > s.M1:
            rhat = raw / nrm
            proj = (s.M1 / nrm) * (np.eye(dim) - np.outer(rhat, rhat))
            f = s.M1 * rhat
            jf_x = proj @ A
            jf_u = proj
        else:
            f = raw
            jf_x = A
            jf_u = np.eye(dim)
    # gradient of the ramped coefficient: grad_x c = gc*d, grad_y c = -gc*d
    gc = 0.0 if capped else gamma * c
    pull = c * np.eye(dim) + gc * np.outer(d, d)
    dx = (f - u0 * c * d) * omega
    dy = u * 0.0  # placeholder shape; caller uses v*omega directly
    jx_x = omega * (jf_x - u0 * pull)
    jx_y = omega * (u0 * pull)
    ju = omega * jf_u
    ju0 = -omega * c * d
    jom_x = f - u0 * c * d
    return dy, dx, jx_x, jx_y, ju, ju0, jom_x


def _reverse_rk4(tr: StateTrajectory, cp: ControlProfile, eta: np.ndarray,
                 gamma: float, s: Scenario, terminal_y=None, terminal_x=None):
    """Exact discrete adjoint of the RK4 propagation of the smoothed system.

    Backpropagates the Lagrangian L = z(T*) + sum_i eta_i * h_lower_i through
    the same RK4 step map used forward, so the returned control gradients
    match finite differences of L to roundoff.  Returns node cotangents
    (q_y, q_x) = dL/d(y_i, x_i) and exact control gradients
    (dL/domega, dL/dv, dL/du, dL/du0).
    """
    grid = tr.grid
    n = grid.n_nodes
    dt = grid.dt
    dim = s.dim
    w = _trapz_weights(grid)

    def stage_ctrl(i, which):
        if which == 0:
            return cp.v[i], cp.u[i], cp.u0[i], cp.omega[i]
        if which == 2:
            return cp.v[i + 1], cp.u[i + 1], cp.u0[i + 1], cp.omega[i + 1]
        return (0.5 * (cp.v[i] + cp.v[i + 1]), 0.5 * (cp.u[i] + cp.u[i + 1]),
                0.5 * (cp.u0[i] + cp.u0[i + 1]), 0.5 * (cp.omega[i] + cp.omega[i + 1]))

    q_y = np.zeros((n, dim))
    q_x = np.zeros((n, dim))
    d_om = w * (np.sum(cp.u * cp.u, axis=1) + cp.u0 ** 2)
    d_v = np.zeros((n, dim))
    d_u = w[:, None] * 2.0 * cp.u * cp.omega[:, None]
    d_u0 = w * 2.0 * cp.u0 * cp.omega

    d_T = tr.x[-1] - tr.y[-1]
    lam_y = -eta[-1] * d_T + (np.zeros(dim) if terminal_y is None else np.asarray(terminal_y, float))
    lam_x = eta[-1] * d_T + (np.zeros(dim) if terminal_x is None else np.asarray(terminal_x, float))
    q_y[-1] = lam_y
    q_x[-1] = lam_x

    stage_map = (0, 1, 1, 2)
    for i in range(n - 2, -1, -1):
        # re-run the forward stages of interval i to evaluate stage states
        ky = np.empty((4, dim))
        kx = np.empty((4, dim))
        sy = np.empty((4, dim))
        sx = np.empty((4, dim))
        offs = (0.0, 0.5, 0.5, 1.0)
        jac = [None] * 4
        for j in range(4):
            a = offs[j]
            yy = tr.y[i] + (a * dt) * (ky[j - 1] if j else 0.0)
            xx = tr.x[i] + (a * dt) * (kx[j - 1] if j else 0.0)
            sy[j], sx[j] = yy, xx
            vv, uu, uu0, ww = stage_ctrl(i, stage_map[j])
            _, dx, jx_x, jx_y, ju, ju0, jom_x = _field_and_jacobians(
                yy, xx, uu, uu0, ww, gamma, s)
            ky[j] = vv * ww
            kx[j] = dx
            jac[j] = (jx_x, jx_y, ju, ju0, jom_x, vv, ww)

        # reverse through the RK4 combination
        gy = np.empty((4, dim))
        gx = np.empty((4, dim))
        jt_y = np.empty((4, dim))
        jt_x = np.empty((4, dim))
        coeffs = (dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0)
        carry = (0.0, dt / 2.0, dt / 2.0, dt)
        for j in (3, 2, 1, 0):
            gy[j] = coeffs[j] * lam_y + (carry[j + 1] * jt_y[j + 1] if j < 3 else 0.0)
            gx[j] = coeffs[j] * lam_x + (carry[j + 1] * jt_x[j + 1] if j < 3 else 0.0)
            jx_x, jx_y, _, _, _, _, _ = jac[j]
            jt_y[j] = jx_y.T @ gx[j]          # dy-stage has no state dependence
            jt_x[j] = jx_x.T @ gx[j]
        for j in range(4):
            jx_x, jx_y, ju, ju0, jom_x, vv, ww = jac[j]
            dv_ = ww * gy[j]
            du_ = ju.T @ gx[j]
            du0_ = float(ju0 @ gx[j])
            dom_ = float(vv @ gy[j]) + float(jom_x @ gx[j])
            which = stage_map[j]
            targets = ((i, 1.0),) if which == 0 else (
                ((i + 1, 1.0),) if which == 2 else ((i, 0.5), (i + 1, 0.5)))
            for idx, fr in targets:
                d_v[idx] += fr * dv_
                d_u[idx] += fr * du_
                d_u0[idx] += fr * du0_
                d_om[idx] += fr * dom_
        lam_y = lam_y + jt_y.sum(axis=0)
        lam_x = lam_x + jt_x.sum(axis=0)
        d_i = tr.x[i] - tr.y[i]
        lam_y = lam_y - eta[i] * d_i
        lam_x = lam_x + eta[i] * d_i
        q_y[i] = lam_y
        q_x[i] = lam_x
    return q_y, q_x, d_om, d_v, d_u, d_u0


def adjoint_sweep(tr: StateTrajectory, cp: ControlProfile, mults_terminal: dict,
                  gamma: float, s: Scenario):
    """Backward sweep of the smoothed-system adjoints (p_H, p_L).

    The sweep is the exact discrete adjoint of the forward RK4 step map, so it
    is consistent with the continuous adjoint system on resolved arcs while
    remaining bounded through the thin smoothing layer (where a nodal
    backward-Euler recursion of the continuous right-hand side blows up).
    ``mults_terminal`` carries the node arrays mu_H, mu_L, the cost multiplier
    lambda_bar, and optionally a terminal value for p_H (default 0, the free
    selection for the value-function computation).
    """
    mu_H = np.asarray(mults_terminal["mu_H"], dtype=float)
    mu_L = np.asarray(mults_terminal["mu_L"], dtype=float)
    lam = float(mults_terminal.get("lambda_bar", 1.0))
    # nodal atoms of the contact measure implied by the non-increasing path
    eta = np.empty_like(mu_L)
    eta[:-1] = mu_L[:-1] - mu_L[1:]
    eta[-1] = mu_L[-1]
    p_H_T = np.asarray(mults_terminal.get("p_H_terminal", np.zeros(s.dim)), dtype=float)
    d_T = tr.x[-1] - tr.y[-1]
    scale = lam if lam > 0 else 1.0
    q_y, q_x, _, _, _, _ = _reverse_rk4(tr, cp, eta / scale, gamma, s,
                                        terminal_y=-p_H_T / scale)
    d = tr.x - tr.y
    yq = tr.y - s.q0_arr
    p_L = scale * (-q_x) + mu_L[:, None] * d
    p_H = scale * (-q_y) - mu_L[:, None] * d + mu_H[:, None] * yq
    return p_H, p_L


def _lower_multipliers(tr: StateTrajectory, dv: DecisionVector, eta: np.ndarray,
                       gamma: float, s: Scenario) -> LowerMultipliers:
    """Assemble the lower multiplier set from the exact discrete adjoints.

    The contact measure accumulates the nodal constraint weights from the
    terminal time backward (non-increasing by construction); the adjoint
    arrays come from the reverse sweep of the integrator, and the value
    gradients are the exact Lagrangian derivatives with respect to the plan
    controls, normalized by the trapezoidal weights.
    """
    cp = dv.controls
    grid = tr.grid
    lambda_bar = 1.0
    mu_L = np.cumsum(eta[::-1])[::-1]
    mu_H = np.zeros_like(mu_L)
    q_y, q_x, d_om, d_v, _, _ = _reverse_rk4(tr, cp, eta, gamma, s)
    w = _trapz_weights(grid)
    d = tr.x - tr.y
    zeta1 = d_om / w
    zeta2_raw = d_v / w[:, None]
    # adjoint representation consistent with the selection identities:
    # p_L - mu_L d realizes the control stationarity, and p_H is chosen so
    # that -(p_H - mu_H (y-q0) + mu_L d) * omega reproduces the gradient
    p_L = -q_x + mu_L[:, None] * d
    p_H = -zeta2_raw * lambda_bar / cp.omega[:, None] - mu_L[:, None] * d
    zeta2 = _project_out_normal(zeta2_raw, cp.v, s)
    return LowerMultipliers(p_H=p_H, p_L=p_L, mu_H=mu_H, mu_L=mu_L,
                            lambda_bar=lambda_bar, zeta1=zeta1, zeta2=zeta2, eta=eta)


def _project_out_normal(zeta2: np.ndarray, v: np.ndarray, s: Scenario) -> np.ndarray:
    """Remove the outward normal-cone component at nodes with |v| on the ball."""
    out = zeta2.copy()
    if s.v_bound <= 0:
        return out
    nrm = np.linalg.norm(v, axis=1)
    for i in np.nonzero(nrm >= s.v_bound * (1.0 - 1e-9))[0]:
        vhat = v[i] / max(nrm[i], 1e-300)
        out[i] -= max(0.0, float(out[i] @ vhat)) * vhat
    return out


def value_subgradient(omega, v, lower: LowerSolution, s: Scenario):
    """Value-function subgradient selection (zeta1 wrt omega, zeta2 wrt v).

    zeta1 is the per-node density of dphi/domega against the trapezoidal
    weights; zeta2 the corresponding vector density for v, with the outward
    normal-cone component removed at nodes where |v| sits on the ball.  Both
    come from the exact reverse sweep of the integrator, so they agree with
    central differences of the lower Lagrangian to roundoff.
    """
    if lower.multipliers is None or lower.multipliers.lambda_bar <= 0:
        raise AbnormalLowerProblemError("cost multiplier of the lower problem is zero")
    m = lower.multipliers
    omega = np.asarray(omega, dtype=float)
    v = np.asarray(v, dtype=float)
    dec = lower.decision
    cp = ControlProfile(dec.controls.grid, v, dec.controls.u, dec.controls.u0, omega)
    tr = integrate_smooth(cp, dec.x_init, lower.gamma, s)
    _, _, d_om, d_v, _, _ = _reverse_rk4(tr, cp, m.eta, lower.gamma, s)
    w = _trapz_weights(cp.grid)
    zeta1 = d_om / (w * m.lambda_bar)
    zeta2 = _project_out_normal(d_v / (w[:, None] * m.lambda_bar), v, s)
    return zeta1, zeta2


# --------------------------------------------------------------------------
# bilevel solve

def _initial_guesses(s: Scenario, grid: TimeGrid, opts: SolverOptions):
    """Structured aim-at-target guess plus seeded random perturbations."""
    n = grid.n_nodes
    d = target_distance(s.y0_arr, s)
    dhat = target_direction(s.y0_arr, s)
    if np.linalg.norm(dhat) < 1e-12:
        dhat = np.array([1.0, 0.0])
    omega0 = max(float(d) / max(s.v_bound, 1e-9), 0.5)
    guesses = [(np.tile(s.v_bound * dhat, (n, 1)), np.full(n, 1.1 * omega0))]
    rng = np.random.default_rng(opts.seed)
    for _ in range(max(0, opts.seeds - 1)):
        ang = rng.normal(scale=0.4)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        scale = float(np.exp(rng.normal(scale=0.25)))
        guesses.append((np.tile(s.v_bound * (rot @ dhat), (n, 1)),
                        np.full(n, 1.1 * omega0 * scale)))
    return guesses


class _UpperState:
    """Per-stage mutable state of the upper descent (lower model + AL weights)."""

    def __init__(self, grid, s, opts):
        self.grid = grid
        self.s = s
        self.opts = opts
        n = grid.n_nodes
        self.mu = np.zeros(n + 2)  # [h_upper nodes..., terminal]; packed below
        self.mu_hu = np.zeros(n)
        self.mu_term = 0.0
        self.c = opts.upper_penalty0
        self.lower: Optional[LowerSolution] = None
        self.anchor = None  # (omega, v) at last lower solve

    def refresh_lower(self, omega, v, gamma, warm=None, full_budget=False):
        opts = self.opts if full_budget else replace(
            self.opts, lower_max_iter=self.opts.refresh_max_iter,
            lower_al_rounds=self.opts.refresh_al_rounds)
        self.lower = solve_lower(omega, v, gamma, self.s, opts,
                                 warm=warm or self.lower, grid=self.grid,
                                 with_multipliers=False)
        self.anchor = (omega.copy(), v.copy())

    def needs_refresh(self, omega, v):
        if self.anchor is None:
            return True
        do, dv = omega - self.anchor[0], v - self.anchor[1]
        move = max(np.abs(do).max(initial=0.0), np.abs(dv).max(initial=0.0))
        return move > self.opts.resolve_move * (1.0 + np.abs(self.anchor[0]).max())


def _upper_eval_many(flats, state: _UpperState, rho, gamma, target_tol):
    """Objective and residuals of the plan-level merit.

    Every accepted iterate re-solves the lower problem, so the penalty term
    rho*(z - phi) vanishes identically along the descent path and the
    effective objective reduces to the travel time t(T*).  The penalty weight
    still scales the certificate multipliers and the gap diagnostics.
    """
    s, grid = state.s, state.grid
    n = grid.n_nodes
    flats = np.atleast_2d(flats)
    B = flats.shape[0]
    v = flats[:, :s.dim * n].reshape(B, n, s.dim).transpose(1, 0, 2)
    omega = np.clip(flats[:, s.dim * n:].T, 0.0, None)
    dec = state.lower.decision
    ys, xs, zs, ts = propagate_smooth(v, np.broadcast_to(dec.controls.u[:, None, :], (n, B, s.dim)),
                                      np.broadcast_to(dec.controls.u0[:, None], (n, B)),
                                      omega, dec.x_init, gamma, s, grid)
    obj = ts[-1]
    hu = h_upper(ys, s).T                     # (B, N+1)
    term = np.atleast_1d(target_distance(ys[-1], s)) - target_tol
    res = np.concatenate([hu, term[:, None]], axis=1)
    return obj, res


def solve_bilevel(s: Scenario, gamma_sched: Optional[SmoothingSchedule] = None,
                  rho_sched: Optional[Sequence[float]] = None,
                  opts: Optional[SolverOptions] = None) -> BilevelSolution:
    """Continuation solve of the flattened penalized problem."""
    opts = opts or SolverOptions()
    report = validate(s)
    if not report.ok:
        names = ", ".join(c.name for c in report.failures())
        raise ValueError(f"scenario fails validation: {names}")
    gamma_sched = gamma_sched or SmoothingSchedule.default_for(s)
    gamma_sched.validate_against(s)
    rhos = list(rho_sched) if rho_sched is not None else [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
    gammas = list(gamma_sched.gammas)
    n_stage = max(len(gammas), len(rhos))
    stages = [(gammas[min(i, len(gammas) - 1)], rhos[min(i, len(rhos) - 1)])
              for i in range(n_stage)]

    grid = TimeGrid(opts.n_intervals)
    target_tol = opts.target_tol if opts.target_tol is not None else 1e-3 * s.R
    omega_cap = opts.omega_cap_factor * (2.0 * s.R) / max(s.v_bound, 1e-9)

    # seed screening on the first stage with a small budget
    guesses = _initial_guesses(s, grid, opts)
    best = None
    screen_opts = replace(opts, upper_max_iter=opts.screen_iters, upper_al_rounds=2)
    for v0, om0 in guesses:
        cand = _run_stage(s, grid, stages[0], v0, om0, None, screen_opts,
                          target_tol, omega_cap)
        score = cand["T"] + 10.0 * cand["violation"]
        if best is None or score < best[0]:
            best = (score, cand)
    state_v, state_om, state = best[1]["v"], best[1]["omega"], best[1]["state"]

    history = []
    for gamma, rho in stages:
        out = _run_stage(s, grid, (gamma, rho), state_v, state_om, state, opts,
                         target_tol, omega_cap)
        state_v, state_om, state = out["v"], out["omega"], out["state"]
        history.append({"gamma": gamma, "rho": rho, "T": out["T"],
                        "violation": out["violation"], "phi": state.lower.value})

    gamma_f, rho_f = stages[-1]
    # final accurate lower solve and assembled decision
    final_opts = replace(opts, lower_max_iter=2 * opts.lower_max_iter,
                         lower_al_rounds=opts.lower_al_rounds + 2)
    lower = solve_lower(state_om, state_v, gamma_f, s, final_opts, warm=state.lower, grid=grid)
    cp = ControlProfile(grid, state_v, lower.decision.controls.u,
                        lower.decision.controls.u0, state_om)
    dv = DecisionVector(lower.decision.x_init, cp)
    tr = integrate_smooth(cp, dv.x_init, gamma_f, s)
    return BilevelSolution(
        decision=dv, T_star=tr.T, gamma_final=gamma_f, rho_final=rho_f,
        lower=lower, history=tuple(history), trajectory=tr,
        upper_mults={"h_upper": state.mu_hu.copy(), "target": float(state.mu_term)},
    )


def _run_stage(s, grid, stage, v, omega, state, opts, target_tol, omega_cap):
    gamma, rho = stage
    n = grid.n_nodes
    if state is None:
        state = _UpperState(grid, s, opts)
    state.opts = opts

    def project(flat):
        out = flat.copy()
        vv = out[:s.dim * n].reshape(n, s.dim)
        out[:s.dim * n] = _project_ball_rows(vv, s.v_bound).ravel()
        out[s.dim * n:] = np.clip(out[s.dim * n:], 0.0, omega_cap)
        return out

    flat = project(np.concatenate([v.ravel(), omega]))

    def unpack(fl):
        return fl[:s.dim * n].reshape(n, s.dim), fl[s.dim * n:]

    vv0, om0 = unpack(flat)
    state.refresh_lower(om0, vv0, gamma, full_budget=True)

    for rnd in range(opts.upper_al_rounds):
        for _ in range(opts.upper_max_iter):
            vv, om = unpack(flat)
            if state.needs_refresh(om, vv):
                state.refresh_lower(om, vv, gamma)

            def eval_many(pts):
                return _upper_eval_many(pts, state, rho, gamma, target_tol)

            mu = np.concatenate([state.mu_hu, [state.mu_term]])
            obj, res = eval_many(flat[None, :])
            merit0 = float(_al_merit(obj, res, mu, state.c)[0])
            grad, jac = _fd_grad_jac(eval_many, flat, opts.fd_h)
            shifted = np.maximum(0.0, mu + state.c * res[0])
            g = grad + jac.T @ shifted
            gnorm = np.linalg.norm(g)
            if gnorm < 1e-13:
                break
            alphas = opts.step0 * 0.5 ** np.arange(14) / max(1.0, gnorm)
            cands = np.stack([project(flat - a * g) for a in alphas])
            obj_c, res_c = eval_many(cands)
            merits = _al_merit(obj_c, res_c, mu, state.c)
            ok = merits <= merit0 - opts.armijo * np.array(
                [np.dot(g, flat - cc) for cc in cands]).clip(min=0.0)
            if not np.any(ok):
                break
            j = int(np.argmax(ok))
            step = np.linalg.norm(cands[j] - flat)
            flat = cands[j]
            if step < opts.upper_step_tol:
                break
        vv, om = unpack(flat)
        state.refresh_lower(om, vv, gamma, full_budget=True)
        _, res = _upper_eval_many(flat[None, :], state, rho, gamma, target_tol)
        viol = float(np.max(res[0], initial=0.0))
        state.mu_hu = np.maximum(0.0, state.mu_hu + state.c * res[0][:n])
        state.mu_term = max(0.0, state.mu_term + state.c * res[0][n])
        if viol <= 1e-9:
            break
        state.c = min(state.c * 2.0, 1e7)

    vv, om = unpack(flat)
    w = _trapz_weights(grid)
    T = float(np.sum(w * om))
    _, res = _upper_eval_many(flat[None, :], state, rho, gamma, target_tol)
    return {"v": vv, "omega": om, "state": state, "T": T,
            "violation": float(np.max(res[0], initial=0.0))}


def penalty_gap(sol: BilevelSolution) -> float:
    """z(T*) of the returned decision minus the lower-level value."""
    return float(sol.trajectory.z[-1] - sol.lower.value)
