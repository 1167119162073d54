"""Problem-instance data model: disks, constraint functions, exit target, assumption checks.

The moving set is a small disk Q1 (radius ``R1``) translated by the plan
center ``y`` inside a big disk Q (center ``q0``, radius ``R``).  The exit
target is the boundary of the exit arc thickened by ``R1`` and clipped to Q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import yaml
from scipy.spatial.distance import cdist

__all__ = [
    "DriftSpec",
    "ExitArc",
    "Scenario",
    "TruncationBounds",
    "ValidationCheck",
    "ValidationReport",
    "h_upper",
    "h_lower",
    "project_disk",
    "truncation_bounds",
    "target_distance",
    "validate",
    "load_scenario",
    "save_scenario",
    "straight_corridor",
]


@dataclass(frozen=True)
class DriftSpec:
    """Named drift family.

    ``identity``: f(x, u) = u.
    ``affine``:   f(x, u) = A x + u, saturated at magnitude ``M1`` so the
    global bound of H1 holds (the saturation never activates inside the
    working box |x| <= R + R1 for sane A).
    """

    name: str = "identity"
    A: Optional[tuple] = None  # row-major n x n matrix entries, affine only

    def matrix(self, dim: int) -> np.ndarray:
        if self.name == "identity" or self.A is None:
            return np.zeros((dim, dim))
        A = np.asarray(self.A, dtype=float).reshape(dim, dim)
        return A

    def __post_init__(self):
        if self.name not in ("identity", "affine"):
            raise ValueError(f"unsupported drift family {self.name!r}")


@dataclass(frozen=True)
class ExitArc:
    """Closed angular arc of the big circle's boundary; degenerate (point) arcs allowed."""

    angle_lo: float = 0.0
    angle_hi: float = 0.0

    def __post_init__(self):
        if self.angle_lo > self.angle_hi:
            raise ValueError("angle_lo must not exceed angle_hi")


@dataclass(frozen=True)
class TruncationBounds:
    """Admissible window (m_bar, M_bar) for the cone truncation level."""

    M_bar: float
    m_bar: float

    @property
    def window_nonempty(self) -> bool:
        return self.M_bar > self.m_bar


@dataclass(frozen=True)
class Scenario:
    """All problem constants for one bilevel sweeping instance."""

    q0: tuple = (0.0, 0.0)
    R: float = 10.0
    R1: float = 1.0
    y0: tuple = (0.0, 0.0)
    exit: ExitArc = field(default_factory=ExitArc)
    M: float = 1.5
    u_bound: float = 1.0
    v_bound: float = 1.0
    drift: DriftSpec = field(default_factory=DriftSpec)
    M1: Optional[float] = None
    K_f: Optional[float] = None
    delta: Optional[float] = None
    dim: int = 2
    exit_samples: int = 2048

    def __post_init__(self):
        if self.dim != 2:
            raise ValueError("only planar scenarios are supported")
        if not (self.R > self.R1 > 0.0):
            raise ValueError("need R > R1 > 0")
        if np.linalg.norm(self.y0_arr - self.q0_arr) > self.R - self.R1 + 1e-12:
            raise ValueError("initial small disk must be contained in the big disk")
        if self.u_bound < 0 or self.v_bound < 0:
            raise ValueError("control bounds must be nonnegative")
        if self.M1 is None:
            object.__setattr__(self, "M1", self._default_M1())
        if self.K_f is None:
            object.__setattr__(self, "K_f", float(np.linalg.norm(self.drift.matrix(self.dim), 2)))
        if self.delta is None:
            # identity drift covers delta*B with any delta <= u_bound
            object.__setattr__(self, "delta", self.u_bound)

    def _default_M1(self) -> float:
        if self.drift.name == "identity":
            return self.u_bound
        A = self.drift.matrix(self.dim)
        box = self.R + self.R1
        return float(np.linalg.norm(A, 2) * box + self.u_bound)

    @property
    def q0_arr(self) -> np.ndarray:
        return np.asarray(self.q0, dtype=float)

    @property
    def y0_arr(self) -> np.ndarray:
        return np.asarray(self.y0, dtype=float)

    @property
    def cone_gain(self) -> float:
        """M / R1, the cap of the cone coefficient."""
        return self.M / self.R1

    # cached exit-target sample cloud (lazy; Scenario stays hashable/immutable)
    def exit_boundary_samples(self) -> np.ndarray:
        cached = _EXIT_CACHE.get(id(self))
        if cached is not None and cached[0] == self._exit_key():
            return cached[1]
        pts = _sample_exit_boundary(self)
        _EXIT_CACHE[id(self)] = (self._exit_key(), pts)
        return pts

    def _exit_key(self):
        return (self.q0, self.R, self.R1, self.exit.angle_lo, self.exit.angle_hi, self.exit_samples)

    def to_dict(self) -> dict:
        return {
            "geometry": {
                "q0": list(self.q0),
                "R": self.R,
                "R1": self.R1,
                "y0": list(self.y0),
                "exit": {"angle_lo": self.exit.angle_lo, "angle_hi": self.exit.angle_hi},
                "exit_samples": self.exit_samples,
            },
            "cone": {"M": self.M},
            "controls": {"u_bound": self.u_bound, "v_bound": self.v_bound},
            "drift": {
                "name": self.drift.name,
                "A": None if self.drift.A is None else list(self.drift.A),
                "M1": self.M1,
                "K_f": self.K_f,
                "delta": self.delta,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        g = d.get("geometry", {})
        cone = d.get("cone", {})
        ctrl = d.get("controls", {})
        dr = d.get("drift", {})
        exit_d = g.get("exit", {})
        return cls(
            q0=tuple(g.get("q0", (0.0, 0.0))),
            R=float(g.get("R", 10.0)),
            R1=float(g.get("R1", 1.0)),
            y0=tuple(g.get("y0", (0.0, 0.0))),
            exit=ExitArc(float(exit_d.get("angle_lo", 0.0)), float(exit_d.get("angle_hi", 0.0))),
            exit_samples=int(g.get("exit_samples", 2048)),
            M=float(cone.get("M", 1.5)),
            u_bound=float(ctrl.get("u_bound", 1.0)),
            v_bound=float(ctrl.get("v_bound", 1.0)),
            drift=DriftSpec(dr.get("name", "identity"), None if dr.get("A") is None else tuple(dr["A"])),
            M1=dr.get("M1"),
            K_f=dr.get("K_f"),
            delta=dr.get("delta"),
        )


_EXIT_CACHE: dict = {}


def straight_corridor(**overrides) -> Scenario:
    """Canonical demo instance: exit dead ahead at angle 0, everything symmetric."""
    base = Scenario()
    return replace(base, **overrides) if overrides else base


def load_scenario(path) -> Scenario:
    with open(path, "r") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"scenario file {path} did not parse to a mapping")
    return Scenario.from_dict(data)


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(s.to_dict(), fh, sort_keys=False)


def h_upper(y, s: Scenario) -> float:
    """Upper containment constraint: <= 0 iff Q1 + y lies inside Q."""
    y = np.asarray(y, dtype=float)
    d2 = np.sum((y - s.q0_arr) ** 2, axis=-1)
    return 0.5 * (d2 - (s.R - s.R1) ** 2)


def h_lower(x, y, s: Scenario) -> float:
    """Lower containment constraint: <= 0 iff x lies in Q1 + y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d2 = np.sum((x - y) ** 2, axis=-1)
    return 0.5 * (d2 - s.R1 ** 2)


def project_disk(p, center, radius: float) -> np.ndarray:
    """Euclidean projection onto the closed disk of the given center and radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    p = np.asarray(p, dtype=float)
    center = np.asarray(center, dtype=float)
    d = p - center
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(norm > radius, radius / np.maximum(norm, 1e-300), 1.0)
    return center + d * scale


def truncation_bounds(s: Scenario, samples: int = 256) -> TruncationBounds:
    """Admissible truncation window (M_bar, m_bar) for the cone level M.

    For ball control sets with identity drift the minimax has the closed form
    M_bar = b_U + b_V, m_bar = -(b_U + b_V).  Other drifts are estimated by
    minimax over sampled unit normals and control extremes over the working box.
    """
    if samples < 8:
        raise ValueError("need at least 8 normal samples")
    bU, bV = s.u_bound, s.v_bound
    if s.drift.name == "identity":
        return TruncationBounds(M_bar=bU + bV, m_bar=-(bU + bV))
    # sampled minimax: zeta on the unit circle, x on the working box boundary region
    thetas = np.linspace(0.0, 2.0 * math.pi, samples, endpoint=False)
    zetas = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    A = s.drift.matrix(s.dim)
    box = s.R  # centers of Q1 + y stay within |y - q0| <= R - R1; x within R
    xs = s.q0_arr + box * np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    # max_u <zeta, Ax + u> = <zeta, Ax> + bU ; min over x samples handled jointly
    proj = np.einsum("ij,kj->ik", zetas, xs @ A.T)  # <zeta_i, A x_k>
    upper = (proj + bU).max(axis=1) + bV  # max_u - min_v = ... + bU + bV
    lower = (proj - bU).min(axis=1) - bV
    return TruncationBounds(M_bar=float(upper.min()), m_bar=float(lower.max()))


def _sample_exit_boundary(s: Scenario) -> np.ndarray:
    """Dense point cloud on the exit target curve, the boundary of
    (arc + R1*ball) intersected with the big disk Q."""
    n = max(64, s.exit_samples)
    lo, hi = s.exit.angle_lo, s.exit.angle_hi
    q0 = s.q0_arr
    R, R1 = s.R, s.R1
    pts = []

    def arc_distance(p):
        # distance from points p (..., 2) to the exit arc on the circle of radius R
        rel = p - q0
        ang = np.arctan2(rel[..., 1], rel[..., 0])
        # wrap angle into the arc interval by shifting multiples of 2*pi
        ang_cl = np.clip(_wrap_to(ang, lo, hi), lo, hi)
        nearest = q0 + R * np.stack([np.cos(ang_cl), np.sin(ang_cl)], axis=-1)
        return np.linalg.norm(p - nearest, axis=-1)

    # piece 1: offset curve {d_arc = R1}: two radial offsets over the arc plus
    # end caps around the arc endpoints
    ts = np.linspace(lo, hi, n)
    ring = np.stack([np.cos(ts), np.sin(ts)], axis=1)
    for rad in (R - R1, R + R1):
        cand = q0 + rad * ring
        pts.append(cand)
    for end in (lo, hi):
        center = q0 + R * np.array([math.cos(end), math.sin(end)])
        ts2 = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        cap = center + R1 * np.stack([np.cos(ts2), np.sin(ts2)], axis=1)
        keep = np.abs(arc_distance(cap) - R1) <= 1e-9 * max(R, 1.0) + 1e-12
        pts.append(cap[keep])
    cloud = np.concatenate(pts, axis=0)
    # clip piece 1 to the big disk
    inside_q = np.linalg.norm(cloud - q0, axis=1) <= R + 1e-12
    cloud = cloud[inside_q]
    # piece 2: portion of the big circle within R1 of the arc
    ts3 = np.linspace(0.0, 2.0 * math.pi, 4 * n, endpoint=False)
    rim = q0 + R * np.stack([np.cos(ts3), np.sin(ts3)], axis=1)
    rim = rim[arc_distance(rim) <= R1 + 1e-12]
    return np.concatenate([cloud, rim], axis=0)


def _wrap_to(ang, lo, hi):
    """Shift angles by multiples of 2*pi as close as possible into [lo, hi]."""
    mid = 0.5 * (lo + hi)
    return ang + 2.0 * math.pi * np.round((mid - ang) / (2.0 * math.pi))


def target_distance(y, s: Scenario) -> float:
    """How far the moving disk Q1 + y is from touching the exit target curve.

    Returns max(0, dist(y, target curve) - R1): zero exactly when the disk
    around y reaches the sampled curve.  The subtraction of R1 (rather than the
    raw point distance of y itself) is what makes the canonical corridor
    instance have an 8-unit straight-line run; see README notes on the target.
    """
    y = np.asarray(y, dtype=float)
    cloud = s.exit_boundary_samples()
    if y.ndim == 1:
        d = np.min(np.linalg.norm(cloud - y, axis=1))
    else:
        # chunk the batch so the pairwise distance block stays bounded in memory
        step = max(1, 8_000_000 // max(1, cloud.shape[0]))
        d = np.empty(y.shape[0])
        for i in range(0, y.shape[0], step):
            d[i:i + step] = cdist(y[i:i + step], cloud).min(axis=1)
    return np.maximum(0.0, d - s.R1)


def target_direction(y, s: Scenario) -> np.ndarray:
    """Unit vector from y toward the nearest exit-target sample (zero if on it)."""
    y = np.asarray(y, dtype=float)
    cloud = s.exit_boundary_samples()
    idx = int(np.argmin(np.linalg.norm(cloud - y, axis=1)))
    d = cloud[idx] - y
    nrm = np.linalg.norm(d)
    if nrm < 1e-12:
        return np.zeros_like(y)
    return d / nrm


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
        }


def validate(s: Scenario, samples: int = 256, rng: Optional[np.random.Generator] = None) -> ValidationReport:
    """Check the standing assumptions H1-H6 on a scenario, by sampling where needed."""
    from . import dynamics  # local import: drift evaluation lives there

    rng = rng or np.random.default_rng(0)
    checks = []

    # H1: bound M1 and Lipschitz constant K_f by sampling the working box
    box = s.R + s.R1
    xs = rng.uniform(-box, box, size=(samples, s.dim)) + s.q0_arr
    us = rng.normal(size=(samples, s.dim))
    us *= (s.u_bound * rng.uniform(0, 1, size=(samples, 1)) ** 0.5) / np.maximum(
        np.linalg.norm(us, axis=1, keepdims=True), 1e-12
    )
    fvals = np.array([dynamics.drift(x, u, s) for x, u in zip(xs, us)])
    sup_f = float(np.linalg.norm(fvals, axis=1).max())
    checks.append(
        ValidationCheck("H1-bound", sup_f <= s.M1 + 1e-9, f"sampled sup|f|={sup_f:.6g}, M1={s.M1:.6g}")
    )
    # Lipschitz sample in x at fixed u
    x2 = xs + rng.normal(scale=0.1, size=xs.shape)
    f2 = np.array([dynamics.drift(x, u, s) for x, u in zip(x2, us)])
    num = np.linalg.norm(f2 - fvals, axis=1)
    den = np.maximum(np.linalg.norm(x2 - xs, axis=1), 1e-12)
    lip = float((num / den).max())
    checks.append(
        ValidationCheck("H1-lipschitz", lip <= s.K_f + 1e-9, f"sampled Lipschitz={lip:.6g}, K_f={s.K_f:.6g}")
    )
    # H2: convex image -- satisfied by construction for the supported families
    checks.append(ValidationCheck("H2-convex-image", True, "by construction for identity/affine drift"))
    # H3: ball control sets are compact convex by construction, but degenerate
    # zero-radius pairs break H5 downstream
    checks.append(ValidationCheck("H3-compact-convex", True, "U, V are closed balls"))
    # H4: delta * B subset of f(x, U); for identity drift iff delta <= u_bound
    h4_ok = s.delta is not None and s.delta > 0 and s.delta <= s.u_bound + 1e-12
    checks.append(ValidationCheck("H4-inner-ball", bool(h4_ok), f"delta={s.delta}, u_bound={s.u_bound}"))
    # H5: truncation window
    tb = truncation_bounds(s, samples=max(samples, 8))
    h5_ok = (s.M > 0) and (tb.m_bar < s.M < tb.M_bar)
    detail = f"m_bar={tb.m_bar:.6g} < M={s.M:.6g} < M_bar={tb.M_bar:.6g}"
    if s.M <= 0:
        detail = f"M={s.M:.6g} must be positive"
    elif s.M >= tb.M_bar:
        detail += " violated: strong invariance, bilevel collapses"
    elif s.M <= tb.m_bar:
        detail += " violated: lower-level feasibility may be lost"
    if not tb.window_nonempty:
        detail += " (window empty: degenerate control sets)"
        h5_ok = False
    checks.append(ValidationCheck("H5-truncation-window", bool(h5_ok), detail))
    # geometric containment
    cont = np.linalg.norm(s.y0_arr - s.q0_arr) <= s.R - s.R1 + 1e-12
    checks.append(ValidationCheck("geometry-containment", bool(cont), "Q1 + y0 inside Q"))
    # exit target nonempty
    n_exit = len(s.exit_boundary_samples())
    checks.append(ValidationCheck("exit-target-nonempty", n_exit > 0, f"{n_exit} boundary samples"))
    # H6 is not machine checkable: recorded as assumed
    checks.append(ValidationCheck("H6-nonisolated-optimum", True, "assumed (not machine-checkable)"))
    return ValidationReport(tuple(checks))
