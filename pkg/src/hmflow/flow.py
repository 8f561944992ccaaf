"""Time integration of the radial heat flow u_t = T(u) with energy bookkeeping.

Each step is a linearly implicit Euler step on the interior nodes: the
discrete Laplacian and the linearized nonlinearity sit in one banded solve,
so the step is stable for dt far above the grid's explicit limit.  Step
doubling gives a local error estimate and a Richardson-extrapolated,
second-order update.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import minimize_scalar

from .radial import (
    RadialGrid,
    RadialProfile,
    energy,
    energy_cumulative,
    energy_norm_sq,
    make_grid,
    read_profile,
    resample,
    sector_of,
    tension,
    write_profile,
)


class FlowError(RuntimeError):
    """Solver failure: divergence, step-size underflow or remesh failure."""


class UnderResolvedError(FlowError):
    pass


@dataclass(frozen=True)
class FlowControls:
    t_end: float = 1.0
    t_start: float = 0.0
    dt_init: float = 1e-4
    tol: float = 1e-6
    dt_max: float = math.inf
    dt_min_factor: float = 1e-14
    fixed_dt: bool = False
    checkpoint_dt: float = 0.1
    checkpoint_shrink: float = 1.1
    max_steps: int = 200_000
    eps0: float | None = None
    stationary_tol: float | None = None
    blowup_shrink: float = 1e4
    remesh: bool = True
    min_cells: int = 16
    inner_margin: float = 1e4

    def __post_init__(self):
        for name in ("t_end", "dt_init", "tol", "dt_max", "checkpoint_dt", "blowup_shrink"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.t_start < self.t_end:
            raise ValueError("need 0 <= t_start < t_end")
        if self.checkpoint_shrink <= 1:
            raise ValueError("checkpoint_shrink must exceed 1")

    def eps0_for(self, k: int) -> float:
        return self.eps0 if self.eps0 is not None else 2 * math.pi * k


@dataclass(frozen=True)
class FlowState:
    t: float
    profile: RadialProfile
    dt_last: float = 0.0
    step_count: int = 0
    inner_scale: float | None = None


@dataclass(frozen=True)
class LedgerRow:
    t: float
    E: float
    dissipation: float
    residual: float
    dt: float
    n_nodes: int


@dataclass
class EnergyLedger:
    """E(t), cumulative 2 pi int ||T||^2 dt and the identity residual at each checkpoint."""

    rows: list = field(default_factory=list)
    remesh_jumps: list = field(default_factory=list)

    def max_residual(self) -> float:
        return max((abs(r.residual) for r in self.rows), default=0.0)

    def max_increase(self) -> float:
        """Largest E(t2) - E(t1) over checkpoint pairs t1 < t2 (<= 0 when monotone)."""
        worst, running_min = -math.inf, math.inf
        for row in self.rows:
            worst = max(worst, row.E - running_min)
            running_min = min(running_min, row.E)
        return worst if self.rows else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "E", "dissipation", "residual", "dt", "n_nodes"])
            for r in self.rows:
                w.writerow([f"{r.t:.17g}", f"{r.E:.17g}", f"{r.dissipation:.17g}",
                            f"{r.residual:.17g}", f"{r.dt:.17g}", r.n_nodes])

    @classmethod
    def read_csv(cls, path) -> "EnergyLedger":
        with open(path, newline="") as fh:
            rows = [LedgerRow(float(d["t"]), float(d["E"]), float(d["dissipation"]),
                              float(d["residual"]), float(d["dt"]), int(d["n_nodes"]))
                    for d in csv.DictReader(fh)]
        return cls(rows)


@dataclass
class TerminationReport:
    status: str
    t_final: float
    steps: int
    eps0: float
    t_plus: float | None = None
    radius_history: list = field(default_factory=list)
    message: str = ""

    def to_text(self) -> str:
        lines = [
            f"status: {self.status}",
            f"t_final: {self.t_final:.17g}",
            f"steps: {self.steps}",
            f"eps0: {self.eps0:.17g}",
            f"t_plus: {'none' if self.t_plus is None else format(self.t_plus, '.17g')}",
            f"message: {self.message}",
            "radius_history:",
        ]
        lines += [f"  {t:.17g} {r:.17g}" for t, r in self.radius_history]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TerminationReport":
        head, _, hist = text.partition("radius_history:")
        kv = {}
        for line in head.splitlines():
            key, _, val = line.partition(":")
            kv[key.strip()] = val.strip()
        history = [tuple(float(v) for v in line.split()) for line in hist.splitlines() if line.strip()]
        t_plus = None if kv["t_plus"] == "none" else float(kv["t_plus"])
        return cls(kv["status"], float(kv["t_final"]), int(kv["steps"]), float(kv["eps0"]),
                   t_plus, history, kv.get("message", ""))


# -- spatial operator on interior nodes ------------------------------------

class _Stepper:
    def __init__(self, grid: RadialGrid, k: int):
        self.grid, self.k = grid, k
        n = grid.n
        S = grid.stiffness.tocsr()
        self.inner = slice(1, n - 1)
        Si = S[1:-1, 1:-1].todia()
        ni = n - 2
        self.band = np.zeros((5, ni))
        for off, diag in zip(Si.offsets, Si.data):
            if abs(off) > 2:
                raise FlowError("stiffness matrix is wider than pentadiagonal")
            # both layouts index by column, so diagonals copy straight across
            self.band[2 - off] = diag[:ni]
        self.S = S
        self.w = grid.weights[1:-1]
        self.hn = grid.hn[1:-1]

    def step(self, u: np.ndarray, dt: float) -> np.ndarray:
        k2 = self.k * self.k
        ui = u[1:-1]
        f = 0.5 * k2 * np.sin(2 * ui)
        fp = k2 * np.cos(2 * ui)
        ab = self.band.copy()
        ab[2] += self.w / dt + self.hn * fp
        ends = np.zeros_like(u)
        ends[0], ends[-1] = u[0], u[-1]
        rhs = self.w * ui / dt - self.hn * (f - fp * ui) - (self.S @ ends)[1:-1]
        try:
            new = solve_banded((2, 2), ab, rhs, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise FlowError(f"singular step matrix at dt={dt:.3g}") from exc
        if not np.all(np.isfinite(new)):
            raise FlowError(f"non-finite values after step dt={dt:.3g}")
        out = u.copy()
        out[1:-1] = new
        return out

    def dissipation_rate(self, u: np.ndarray) -> float:
        """2 pi sum_interior w T^2, the exact time derivative of -E_h along the semi-discrete flow."""
        g = (self.S @ u)[1:-1] + 0.5 * self.k**2 * np.sin(2 * u[1:-1]) * self.hn
        return 2 * math.pi * float(np.sum(g * g / self.w))


@lru_cache(maxsize=8)
def _stepper(grid: RadialGrid, k: int) -> _Stepper:
    return _Stepper(grid, k)


def _norm_e(grid: RadialGrid, g: np.ndarray, k: int) -> float:
    return math.sqrt(energy_norm_sq(grid, g, k))


# -- concentration --------------------------------------------------------

def concentration_radius(profile: RadialProfile, eps0: float) -> float | None:
    """Smallest r with E(u; 0, r) >= eps0, or None when the total energy stays below."""
    cum = energy_cumulative(profile)
    if cum[-1] < eps0:
        return None
    i = int(np.searchsorted(cum, eps0))
    x = profile.grid.x
    if i == 0:
        return float(profile.grid.r[0])
    frac = (eps0 - cum[i - 1]) / (cum[i] - cum[i - 1])
    return float(math.exp(x[i - 1] + frac * (x[i] - x[i - 1])))


def cells_near(grid: RadialGrid, scale: float) -> int:
    """Nodes within one log-unit of ``scale``."""
    x0 = math.log(scale)
    return int(np.count_nonzero(np.abs(grid.x - x0) <= 1.0))


def detect_blowup(states, eps0: float, r0_schedule=None, shrink: float = 1.05):
    """Concentration test over a window of checkpoints.

    Without a schedule, r0 at each state is its concentration radius and the
    test fires when these shrink by at least ``shrink`` between consecutive
    states.  With an explicit schedule (which must itself shrink
    geometrically) the test fires when E(u; 0, r0_i) >= eps0 for every i.

    Returns ``(fired, radius)`` with the smallest r0 at which the energy bound held.
    """
    states = list(states)
    if len(states) < 3:
        return False, None
    profiles = [s.profile if isinstance(s, FlowState) else s for s in states]
    if r0_schedule is None:
        radii = [concentration_radius(p, eps0) for p in profiles]
        if any(r is None for r in radii):
            return False, None
        ok = all(b * shrink <= a for a, b in zip(radii, radii[1:]))
        return ok, (min(radii) if ok else None)
    sched = [float(r) for r in r0_schedule]
    if len(sched) != len(profiles):
        raise ValueError("schedule length must match the number of states")
    if not all(b * shrink <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("r0 schedule must shrink geometrically")
    held = [energy(p, 0.0, r0).total >= eps0 for p, r0 in zip(profiles, sched)]
    if all(held):
        return True, min(sched)
    return False, None


def estimate_t_plus(times, radii, min_points: int = 4) -> float | None:
    """Fit r = c (T - t)^p to the trailing monotone tail of a shrinking radius history."""
    t = np.asarray(times, dtype=float)
    r = np.asarray(radii, dtype=float)
    ok = np.isfinite(r) & (r > 0)
    t, r = t[ok], r[ok]
    # trailing strictly decreasing run
    j = len(r) - 1
    while j > 0 and r[j - 1] > r[j]:
        j -= 1
    t, r = t[j:], r[j:]
    if len(t) < min_points:
        return None
    y = np.log(r)
    span = t[-1] - t[0]

    def resid(T):
        A = np.column_stack([np.ones_like(t), np.log(T - t)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        return float(np.sum((A @ coef - y) ** 2))

    lo, hi = t[-1] + 1e-12 * max(1.0, span), t[-1] + 10 * span
    # scan then refine in log(T - t_last)
    gaps = np.geomspace(lo - t[-1], hi - t[-1], 200)
    vals = [resid(t[-1] + g) for g in gaps]
    i = int(np.argmin(vals))
    a = math.log(gaps[max(i - 1, 0)])
    b = math.log(gaps[min(i + 1, len(gaps) - 1)])
    res = minimize_scalar(lambda s: resid(t[-1] + math.exp(s)), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-10})
    return float(t[-1] + math.exp(res.x))


# -- stepping -------------------------------------------------------------

def _euler(profile: RadialProfile, dt: float) -> np.ndarray:
    return _stepper(profile.grid, profile.k).step(profile.u, dt)


def advance_pair(profile: RadialProfile, dt: float):
    """One doubled step: returns (extrapolated values, error estimate in energy norm)."""
    st = _stepper(profile.grid, profile.k)
    u0 = profile.u
    full = st.step(u0, dt)
    half = st.step(st.step(u0, 0.5 * dt), 0.5 * dt)
    err = _norm_e(profile.grid, half - full, profile.k)
    return 2 * half - full, err


def advance(state: FlowState, dt: float, eps0: float | None = None) -> FlowState:
    """One Richardson-extrapolated step of size dt with Dirichlet ends."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = state.profile
    eps0 = eps0 if eps0 is not None else 2 * math.pi * p.k
    scale = state.inner_scale or concentration_radius(p, eps0)
    if scale is not None and cells_near(p.grid, scale) < 8:
        raise UnderResolvedError(f"scale {scale:.3g} spans fewer than 8 cells")
    u, _ = advance_pair(p, dt)
    new = p.with_values(u)
    return FlowState(state.t + dt, new, dt, state.step_count + 1, concentration_radius(new, eps0))


def remesh(profile: RadialProfile, scale: float, controls: FlowControls) -> RadialProfile:
    """Extend the grid inward and/or add a band around ``scale`` when it is poorly resolved.

    An inward extension keeps every existing node and prepends nodes at the
    innermost spacing, so the resolved part of the profile is not
    interpolated.  New values follow the regular behaviour ell pi + c r^k and
    are then relaxed for a short time on the r^2 scale of the new nodes.
    """
    grid = profile.grid
    needs_domain = scale / grid.r_min < controls.inner_margin
    needs_band = cells_near(grid, scale) < controls.min_cells
    if not (needs_domain or needs_band):
        return profile
    ell, k = profile.sector[0], profile.k
    out = profile
    if needs_domain:
        h = float(grid.x[1] - grid.x[0])
        target = math.log(scale / (controls.inner_margin * 10))
        extra = int(math.ceil((grid.x[0] - target) / h))
        x_new = grid.x[0] - h * np.arange(extra, 0, -1)
        r_new = np.exp(x_new)
        c = profile.u[0] - ell * math.pi
        u_new = ell * math.pi + c * (r_new / grid.r_min) ** k
        try:
            new_grid = RadialGrid(np.concatenate([r_new, grid.r]), grid.bands)
        except ValueError as exc:
            raise FlowError(f"remesh failed: {exc}") from exc
        out = RadialProfile(new_grid, np.concatenate([u_new, profile.u]), profile.sector, k,
                            dict(profile.meta))
        out = _relax_inner(out, scale)
    if needs_band:
        g = out.grid
        factor = max(2.0, math.ceil(2 * controls.min_cells / max(cells_near(g, scale), 1)))
        n = int(round((math.log(g.r_max) - math.log(g.r_min)) / float(np.median(np.diff(g.x))))) + 1
        try:
            new_grid = make_grid(g.r_min, g.r_max, n, ((scale / 32, scale * 32, factor),))
        except ValueError as exc:
            raise FlowError(f"remesh failed: {exc}") from exc
        out = resample(out, new_grid)
    return out


def _relax_inner(profile: RadialProfile, scale: float, sweeps: int = 12) -> RadialProfile:
    """Short implicit relaxation after an inward extension.

    The pinned value at the old boundary leaves a thin harmonic layer that
    is out of equilibrium once the nodes inside it exist.  Such layers
    relax on the time scale r^2; stepping up to dt = (0.02 scale)^2 clears
    them while moving a bubble at ``scale`` by a relative amount ~1e-7.
    """
    st = _stepper(profile.grid, profile.k)
    u = profile.u
    for dt in np.geomspace(profile.grid.r_min ** 2, (0.02 * scale) ** 2, sweeps):
        u = st.step(u, float(dt))
    return profile.with_values(u)


def _checkpoint(profile: RadialProfile, t: float, step: int) -> RadialProfile:
    return profile.with_values(profile.u, t=f"{t:.17g}", step=step)


def run(initial: RadialProfile, controls: FlowControls = FlowControls()):
    """Integrate from ``controls.t_start`` to ``controls.t_end`` or until blow-up / stationarity.

    Returns ``(trajectory, ledger, report)`` where the trajectory is the list
    of checkpoint states.
    """
    initial.check()
    k = initial.k
    eps0 = controls.eps0_for(k)
    sector = sector_of(initial.u)
    prof = initial
    t, step, dt = controls.t_start, 0, controls.dt_init
    E0 = energy(prof).total
    dissip, jumps = 0.0, 0.0
    st = _stepper(prof.grid, k)
    rate = st.dissipation_rate(prof.u)
    radius = concentration_radius(prof, eps0)
    r_start = radius
    state = FlowState(t, _checkpoint(prof, t, 0), 0.0, 0, radius)
    trajectory = [state]
    ledger = EnergyLedger([LedgerRow(t, E0, 0.0, 0.0, 0.0, prof.grid.n)])
    history = [(t, radius if radius is not None else math.nan)]
    next_cp = t + controls.checkpoint_dt
    last_cp_radius = radius

    def finish(status, message=""):
        t_plus = None
        if status == "blowup_detected":
            t_plus = estimate_t_plus([h[0] for h in history], [h[1] for h in history], 3)
        rep = TerminationReport(status, t, step, eps0, t_plus, history, message)
        return trajectory, ledger, rep

    while True:
        if t >= controls.t_end * (1 - 1e-14):
            return finish("reached_t_end")
        if step >= controls.max_steps:
            raise FlowError(f"step cap {controls.max_steps} reached at t={t:.17g}")
        floor = controls.dt_min_factor * (radius**2 if radius else 1.0)
        if controls.fixed_dt:
            dt = min(controls.dt_init, controls.t_end - t)
        else:
            dt = min(dt, controls.dt_max, controls.t_end - t, next_cp - t)
        if dt < floor:
            fired, _ = detect_blowup(trajectory[-3:], eps0)
            if fired:
                return finish("blowup_detected", "step size reached the floor")
            raise FlowError(f"step size {dt:.3g} below floor {floor:.3g} at t={t:.17g}; blow-up candidate")
        u_new, err = advance_pair(prof, dt)
        if not controls.fixed_dt and err > controls.tol:
            dt *= max(0.2, 0.9 * math.sqrt(controls.tol / err))
            continue
        new = prof.with_values(u_new)
        if sector_of(new.u) != sector:
            raise FlowError(f"sector changed at t={t + dt:.17g}")
        new_rate = st.dissipation_rate(new.u)
        dissip += 0.5 * dt * (rate + new_rate)
        rate = new_rate
        t += dt
        step += 1
        prof = new
        radius = concentration_radius(prof, eps0)
        dt_used = dt
        if not controls.fixed_dt:
            grow = 2.0 if err == 0 else min(2.0, 0.9 * math.sqrt(controls.tol / err))
            dt *= max(grow, 0.2)

        shrunk = (radius is not None and last_cp_radius is not None
                  and radius * controls.checkpoint_shrink <= last_cp_radius)
        at_cadence = t >= next_cp - (0.5 * dt_used if controls.fixed_dt else 1e-12 * next_cp)
        at_end = t >= controls.t_end * (1 - 1e-14)
        if shrunk or at_cadence or at_end:
            E = energy(prof).total
            ledger.rows.append(LedgerRow(t, E, dissip, E + dissip - E0 - jumps, dt_used, prof.grid.n))
            state = FlowState(t, _checkpoint(prof, t, step), dt_used, step, radius)
            trajectory.append(state)
            history.append((t, radius if radius is not None else math.nan))
            last_cp_radius = radius
            while next_cp <= t * (1 + 1e-12):
                next_cp += controls.checkpoint_dt
            next_cp = min(next_cp, controls.t_end)

            if radius is not None and r_start is not None and radius * controls.blowup_shrink <= r_start:
                fired, _ = detect_blowup(trajectory[-3:], eps0)
                if fired:
                    return finish("blowup_detected")
            if controls.stationary_tol is not None:
                scale = radius if radius is not None else 1.0
                t_inner = tension(prof)[1:-1]
                tl2 = math.sqrt(float(np.dot(t_inner**2, prof.grid.weights[1:-1])))
                if scale * tl2 < controls.stationary_tol:
                    return finish("stationary")
            if controls.remesh and radius is not None:
                new_prof = remesh(prof, radius, controls)
                if new_prof is not prof:
                    E_old = energy(prof).total
                    prof = new_prof
                    jump = energy(prof).total - E_old
                    jumps += jump
                    ledger.remesh_jumps.append((t, jump))
                    st = _stepper(prof.grid, k)
                    rate = st.dissipation_rate(prof.u)


# -- localized energy ------------------------------------------------------

@dataclass(frozen=True)
class Cutoff:
    """phi(t, r) >= 0 with its partial derivatives, all vectorized in r."""

    phi: object
    dphi_dr: object
    dphi_dt: object = None

    def dt(self, t, r):
        return np.zeros_like(r) if self.dphi_dt is None else self.dphi_dt(t, r)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s * s)


def _dsmoothstep(s):
    inside = (s > 0) & (s < 1)
    return np.where(inside, 30 * s * s * (1 - s) ** 2, 0.0)


def constant_cutoff() -> Cutoff:
    return Cutoff(lambda t, r: np.ones_like(r), lambda t, r: np.zeros_like(r))


def exterior_cutoff(r_in: float, r_out: float, shrink_rate: float = 0.0) -> Cutoff:
    """0 for r <= a(t), 1 for r >= b(t), smooth in log r between them.

    With ``shrink_rate`` c > 0 the transition moves outward as a(t) = r_in e^{c t},
    so phi is non-increasing in t.
    """
    if not 0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    L = math.log(r_out / r_in)

    def s(t, r):
        return (np.log(r) - math.log(r_in) - shrink_rate * t) / L

    def phi(t, r):
        return _smoothstep(s(t, r))

    def dphi_dr(t, r):
        return _dsmoothstep(s(t, r)) / (L * r)

    def dphi_dt(t, r):
        return -shrink_rate / L * _dsmoothstep(s(t, r))

    return Cutoff(phi, dphi_dr, dphi_dt if shrink_rate else None)


def interior_cutoff(r_in: float, r_out: float) -> Cutoff:
    """1 for r <= r_in, 0 for r >= r_out, smooth in log r; static."""
    if not 0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    L = math.log(r_out / r_in)

    def s(r):
        return (np.log(r) - math.log(r_in)) / L

    return Cutoff(lambda t, r: 1.0 - _smoothstep(s(r)),
                  lambda t, r: -_dsmoothstep(s(r)) / (L * r))


@dataclass(frozen=True)
class LocalEnergyReport:
    times: np.ndarray
    identity_residual: np.ndarray
    inequality_margin: np.ndarray
    worst_identity: float
    worst_violation: float

    def summary(self) -> str:
        return (f"worst_identity_residual: {self.worst_identity:.17g}\n"
                f"worst_inequality_violation: {self.worst_violation:.17g}\n"
                f"min_inequality_margin: {float(np.min(self.inequality_margin)):.17g}\n")


def _local_terms(profile: RadialProfile, cut: Cutoff, t: float):
    """Cell-based local quantities at one time, all in 2 pi-scaled energy units."""
    grid, u, k = profile.grid, profile.u, profile.k
    r, x = grid.r, grid.x
    rc = np.exp(0.5 * (x[1:] + x[:-1]))
    phi_n = cut.phi(t, r)
    phi_c = cut.phi(t, rc)
    from .radial import _gradient_cells, _nodes_to_cells

    e_cells = math.pi * _gradient_cells(grid, u) + 2 * math.pi * _nodes_to_cells(grid, 0.5 * k * k * np.sin(u) ** 2)
    local_e = float(np.sum(e_cells * phi_c**2))
    T = np.zeros(grid.n)
    T[1:-1] = tension(profile)[1:-1]
    w = grid.weights
    ux = grid.ddx @ u
    phix = cut.dphi_dr(t, r) * r
    dtphi = cut.dt(t, r)
    e_nodes = math.pi * (ux**2 + k * k * np.sin(u) ** 2) * grid.hn
    return {
        "local_e": local_e,
        "diss": 2 * math.pi * float(np.sum(T * T * phi_n**2 * w)),
        "cross": 2 * math.pi * float(np.sum(T * ux * phi_n * phix * grid.hn)),
        "moving": float(np.sum(e_nodes * phi_n * dtphi)),
        "grad_phi": 2 * math.pi * float(np.sum(ux**2 * phix**2 * grid.hn)),
    }


def verify_local_energy(trajectory, cutoff: Cutoff) -> LocalEnergyReport:
    """Both sides of the localized energy identity and its one-sided inequality, per checkpoint.

    With e the energy density,
        D_phi + L(t2) = L(t1) - 2 X + 2 M             (identity)
        L(t2) + D_phi / 2 <= L(t1) + 2 G               (inequality, d_t phi <= 0)
    where L = int e phi^2, D_phi = int int u_t^2 phi^2, X = int int u_t u_r phi phi_r,
    M = int int e phi phi_t, G = int int u_r^2 phi_r^2; time integrals by the
    trapezoid rule over checkpoints.  All quantities carry the factor 2 pi of E.
    """
    states = list(trajectory)
    if len(states) < 2:
        raise ValueError("need at least two checkpoints")
    times = np.array([s.t for s in states])
    for s in states:
        r = s.profile.grid.r
        if np.any(cutoff.dt(s.t, r) > 1e-14):
            raise ValueError("cutoff must be non-increasing in t for the one-sided form")
        if np.any(cutoff.phi(s.t, r) < 0):
            raise ValueError("cutoff must be non-negative")
    terms = [_local_terms(s.profile, cutoff, s.t) for s in states]
    cum = {key: np.zeros(len(states)) for key in ("diss", "cross", "moving", "grad_phi")}
    for i in range(1, len(states)):
        h = times[i] - times[i - 1]
        for key in cum:
            cum[key][i] = cum[key][i - 1] + 0.5 * h * (terms[i][key] + terms[i - 1][key])
    L = np.array([tm["local_e"] for tm in terms])
    ident = cum["diss"] + L - (L[0] - 2 * cum["cross"] + 2 * cum["moving"])
    margin = (L[0] + 2 * cum["grad_phi"]) - (L + 0.5 * cum["diss"])
    return LocalEnergyReport(times, ident, margin, float(np.max(np.abs(ident))),
                             float(max(0.0, -np.min(margin))))


# -- trajectory directory ----------------------------------------------------

def controls_to_text(controls: FlowControls) -> str:
    return "".join(f"{key} = {val}\n" for key, val in asdict(controls).items())


def write_trajectory(out_dir, trajectory, ledger: EnergyLedger, report: TerminationReport,
                     controls_text: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "controls.txt"), "w") as fh:
        fh.write(controls_text)
    ledger.write_csv(os.path.join(out_dir, "ledger.csv"))
    cp_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(cp_dir, exist_ok=True)
    for old in os.listdir(cp_dir):
        if old.startswith("step_") and old.endswith(".txt"):
            os.remove(os.path.join(cp_dir, old))
    for s in trajectory:
        write_profile(s.profile, os.path.join(cp_dir, f"step_{s.step_count:08d}.txt"),
                      t=f"{s.t:.17g}", step=s.step_count)
    with open(os.path.join(out_dir, "termination.txt"), "w") as fh:
        fh.write(report.to_text())


def read_trajectory(out_dir):
    """Load (trajectory, ledger, report) from a directory written by :func:`write_trajectory`."""
    cp_dir = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(cp_dir):
        raise FileNotFoundError(f"{out_dir}: no checkpoints directory")
    names = sorted(n for n in os.listdir(cp_dir) if n.startswith("step_") and n.endswith(".txt"))
    if not names:
        raise FileNotFoundError(f"{cp_dir}: no checkpoint files")
    trajectory = []
    eps0 = None
    report = None
    rep_path = os.path.join(out_dir, "termination.txt")
    if os.path.exists(rep_path):
        with open(rep_path) as fh:
            report = TerminationReport.from_text(fh.read())
        eps0 = report.eps0
    grids = {}
    for name in names:
        p = read_profile(os.path.join(cp_dir, name))
        # share grid objects between checkpoints on the same mesh
        key = (p.grid.n, p.grid.r[0], p.grid.r[-1])
        if key in grids and np.array_equal(grids[key].r, p.grid.r):
            p = RadialProfile(grids[key], p.u, p.sector, p.k, p.meta)
        else:
            grids[key] = p.grid
        t = float(p.meta.get("t", "nan"))
        step = int(p.meta.get("step", name[5:13]))
        e0 = eps0 if eps0 is not None else 2 * math.pi * p.k
        trajectory.append(FlowState(t, p, 0.0, step, concentration_radius(p, e0)))
    ledger = EnergyLedger.read_csv(os.path.join(out_dir, "ledger.csv"))
    return trajectory, ledger, report
