"""Fitting multi-bubble configurations to profiles and tracking them in time.

Distances are minimized over log-scales by nonlinear least squares.  The
residual vector is built so that its squared norm is exactly the windowed
discrete energy norm of the error plus the scale-gap penalty terms, so the
optimizer's objective and the reported distance are the same number.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.optimize import least_squares

from .bubbles import (
    BubbleConfig,
    chi,
    lambda_q_values,
    z_dlog_scale,
    z_values,
)
from .flow import FlowState, concentration_radius
from .radial import (
    RadialGrid,
    RadialProfile,
    _window_x,
    energy_norm_sq,
    inner,
    tension_l2,
)
from .bubbles import virial

DEFAULT_M_CAP = 5
MODULATION_GATE = 0.3


class ModulationError(RuntimeError):
    pass


# -- residual operator ------------------------------------------------------

@lru_cache(maxsize=32)
def _window_operator(grid: RadialGrid, x1: float, x2: float, k: int) -> sparse.csr_matrix:
    """P with |P e|^2 equal to energy_norm_sq(e) over the window [x1, x2] in log r."""
    x, hc = grid.x, grid.hc
    frac = np.clip((x2 - x[:-1]) / hc, 0, 1) - np.clip((x1 - x[:-1]) / hc, 0, 1)
    node_w = np.zeros(grid.n)
    node_w[:-1] += 0.5 * frac * hc
    node_w[1:] += 0.5 * frac * hc
    blocks = [
        sparse.diags(np.sqrt(frac * hc)) @ grid.dplus,
        sparse.diags(np.sqrt(node_w * grid.curvature_coef)) @ grid.d2,
        sparse.diags(k * np.sqrt(node_w)),
    ]
    return sparse.vstack(blocks).tocsr()


def _window(grid: RadialGrid, r1: float, r2: float) -> tuple[float, float]:
    return _window_x(grid, r1, r2)


# -- crossings --------------------------------------------------------------

@dataclass(frozen=True)
class Crossing:
    r: float
    level: int  # crossing of (level + 1/2) pi
    sign: int


def half_level_crossings(grid: RadialGrid, v, r1: float = 0.0, r2: float = math.inf,
                         merge: float = 0.5) -> list:
    """Crossings of odd multiples of pi/2 inside a window, with their directions.

    A crossing is located by linear interpolation in log r.  Pairs of opposite
    crossings of the same level closer than ``merge`` in log r are treated as
    noise and dropped.
    """
    v = np.asarray(v, dtype=float)
    x1, x2 = _window(grid, r1, r2)
    lev = np.floor(v / math.pi - 0.5).astype(int)
    raw = []
    for i in np.nonzero(lev[1:] != lev[:-1])[0]:
        a, b = lev[i], lev[i + 1]
        step = 1 if b > a else -1
        for L in range(a, b, step):
            level = L + 1 if step > 0 else L
            target = (level + 0.5) * math.pi
            du = v[i + 1] - v[i]
            s = 0.5 if du == 0 else (target - v[i]) / du
            xc = grid.x[i] + s * (grid.x[i + 1] - grid.x[i])
            if x1 <= xc <= x2:
                raw.append([xc, level, step])
    out = []
    for c in raw:
        if out and out[-1][1] == c[1] and out[-1][2] == -c[2] and c[0] - out[-1][0] < merge:
            out.pop()
            continue
        out.append(c)
    return [Crossing(math.exp(xc), level, sign) for xc, level, sign in out]


# -- fitting core -------------------------------------------------------------

@dataclass(frozen=True)
class Decomposition:
    """A fitted configuration with its error and distance.

    ``gap_terms`` lists (lambda_j / lambda_{j+1})^k including the boundary
    terms of the window, and ``distance^2 = error_norm^2 + sum(gap_terms)``.
    """

    config: BubbleConfig
    error: np.ndarray = field(repr=False)
    error_norm: float
    gap_terms: tuple
    distance: float
    window: tuple
    inner_scale: float = 0.0
    outer_scale: float = math.inf

    @property
    def M(self) -> int:
        return self.config.M


def _gap_terms(lams, k, inner_scale, outer_scale):
    """(lambda_j / lambda_{j+1})^k over the chain inner_scale, lams..., outer_scale."""
    chain = [inner_scale] + list(lams) + [outer_scale]
    terms = []
    for a, b in zip(chain, chain[1:]):
        if a <= 0 or math.isinf(b):
            terms.append(0.0)
        else:
            terms.append((a / b) ** k)
    return terms


def _solve_scales(grid, target, m, iotas, lam0, k, x1, x2, inner_scale, outer_scale,
                  max_nfev=200):
    """Minimize |P(target - Q(m, iotas, lam))|^2 + gap terms over log lam."""
    P = _window_operator(grid, x1, x2, k)
    r = grid.r
    M = len(iotas)
    log_in = math.log(inner_scale) if inner_scale > 0 else None
    log_out = None if math.isinf(outer_scale) else math.log(outer_scale)

    def config(theta):
        return BubbleConfig(m, iotas, tuple(np.exp(np.sort(theta))), k)

    def chain(theta):
        th = list(theta)
        return ([log_in] if log_in is not None else []) + th + ([log_out] if log_out is not None else [])

    def resid(theta):
        cfg_vals = m * math.pi + sum(i * _qmp(r, t, k) for i, t in zip(iotas, theta))
        e = P @ (target - cfg_vals)
        ch = chain(theta)
        gaps = [math.exp(0.5 * k * (a - b)) for a, b in zip(ch, ch[1:])]
        return np.concatenate([e, gaps])

    def jac(theta):
        cols = np.column_stack([iota * lambda_q_values(r, math.exp(t), k)
                                for iota, t in zip(iotas, theta)])
        Je = P @ cols
        ch = chain(theta)
        off = 1 if log_in is not None else 0
        Jg = np.zeros((len(ch) - 1, M))
        for j, (a, b) in enumerate(zip(ch, ch[1:])):
            g = math.exp(0.5 * k * (a - b))
            ia, ib = j - off, j + 1 - off
            if 0 <= ia < M:
                Jg[j, ia] += 0.5 * k * g
            if 0 <= ib < M:
                Jg[j, ib] -= 0.5 * k * g
        return np.vstack([Je, Jg])

    if M == 0:
        e = P @ (target - m * math.pi)
        ch = chain([])
        gaps = [math.exp(0.5 * k * (a - b)) for a, b in zip(ch, ch[1:])]
        return BubbleConfig(m, (), (), k), float(e @ e + sum(g * g for g in gaps))
    theta0 = np.log(np.asarray(lam0, dtype=float))
    lo, hi = grid.x[0] - 5.0, grid.x[-1] + 5.0
    theta0 = np.clip(theta0, lo + 1e-3, hi - 1e-3)
    res = least_squares(resid, theta0, jac=jac, method="lm", xtol=1e-12, ftol=1e-14,
                        gtol=1e-14, max_nfev=max_nfev * (M + 1))
    theta = res.x
    if np.any(np.diff(theta) <= 0):
        theta = np.sort(theta)
        if np.any(np.diff(theta) <= 0):
            return None, math.inf
    return config(theta), float(2 * res.cost)


def _qmp(r, log_lam, k):
    s = k * (np.log(r) - log_lam)
    return -2.0 * np.arctan(np.exp(np.clip(-s, -700, 700)))


def _make_decomposition(grid, target, cfg, x1, x2, inner_scale, outer_scale):
    err = target - cfg.values(grid.r)
    en2 = energy_norm_sq(grid, err, cfg.k, math.exp(x1), math.exp(x2))
    terms = tuple(_gap_terms(cfg.lambdas, cfg.k, inner_scale, outer_scale))
    dist = math.sqrt(en2 + sum(terms))
    return Decomposition(cfg, err, math.sqrt(en2), terms, dist, (math.exp(x1), math.exp(x2)),
                         inner_scale, outer_scale)


def _alternating(signs):
    return all(a != b for a, b in zip(signs, signs[1:]))


def fit_delta_R(u: RadialProfile, R: float, M_cap: int = DEFAULT_M_CAP, u_star=None,
                seed_perturbation=None) -> Decomposition:
    """Approximate the localized distance delta_R(u) and its minimizer.

    Candidate configurations: the scales and signs read off the half-level
    crossings of u - u* on r <= R, every sub-configuration that drops one
    bubble, and the vacuum.  ``seed_perturbation`` (an array of log-scale
    offsets) restarts the optimizer from displaced seeds.
    """
    grid, k = u.grid, u.k
    x1, x2 = _window(grid, 0.0, R)
    target = u.u - (0.0 if u_star is None else np.asarray(u_star.u if hasattr(u_star, "u") else u_star))
    R = math.exp(x2)
    m_end = int(round(np.interp(x2, grid.x, target) / math.pi))
    crossings = half_level_crossings(grid, target, 0.0, R)
    crossings = crossings[-M_cap:] if M_cap else []
    seeds = [(tuple(c.sign for c in crossings), tuple(c.r for c in crossings))]
    if len(crossings) > 0:
        for j in range(len(crossings)):
            sub = crossings[:j] + crossings[j + 1:]
            seeds.append((tuple(c.sign for c in sub), tuple(c.r for c in sub)))
    best = None
    for signs, lam0 in seeds:
        lam0 = np.asarray(lam0, dtype=float)
        if seed_perturbation is not None and len(lam0):
            lam0 = lam0 * np.exp(np.asarray(seed_perturbation)[: len(lam0)])
        cfg, _ = _solve_scales(grid, target, m_end, signs, lam0, k, x1, x2, 0.0, R)
        if cfg is None:
            continue
        dec = _make_decomposition(grid, target, cfg, x1, x2, 0.0, R)
        if best is None or dec.distance < best.distance - 1e-15 or (
                abs(dec.distance - best.distance) <= 1e-15 and _alternating(signs)):
            best = dec
    return best


def fit_distance(v: RadialProfile, m: int, M: int, initial: BubbleConfig | None = None,
                 u_star=None) -> Decomposition:
    """Distance d_{m,M}(v) to M-bubble configurations over the whole grid, no boundary terms."""
    grid, k = v.grid, v.k
    x1, x2 = grid.x[0], grid.x[-1]
    target = v.u - (0.0 if u_star is None else np.asarray(getattr(u_star, "u", u_star)))
    ell = int(round(target[0] / math.pi))
    if initial is not None:
        candidates = [(initial.iotas, initial.lambdas)]
    else:
        cr = half_level_crossings(grid, target)
        candidates = []
        if len(cr) >= M:
            for combo in itertools.combinations(cr, M):
                candidates.append((tuple(c.sign for c in combo), tuple(c.r for c in combo)))
    best = None
    for signs, lam0 in candidates:
        if m - sum(signs) != ell:
            continue
        cfg, _ = _solve_scales(grid, target, m, signs, lam0, k, x1, x2, 0.0, math.inf)
        if cfg is None:
            continue
        dec = _make_decomposition(grid, target, cfg, x1, x2, 0.0, math.inf)
        if best is None or dec.distance < best.distance:
            best = dec
    if best is None:
        raise ModulationError(f"no admissible {M}-bubble seed with m={m}")
    return best


# -- proximity ----------------------------------------------------------------

@dataclass(frozen=True)
class TimeContext:
    """Time and the outer scale convention: sqrt(T+ - t) for blow-up, sqrt(t) for global runs."""

    t: float
    t_plus: float | None = None

    def outer_scale(self) -> float:
        if self.t_plus is None:
            if self.t <= 0:
                raise ValueError("global outer scale needs t > 0")
            return math.sqrt(self.t)
        if self.t_plus <= self.t:
            raise ValueError("t must be below T+")
        return math.sqrt(self.t_plus - self.t)


def proximity_d(u: RadialProfile, u_star, K: int, rho: float, t_context: TimeContext | None,
                N: int, initial: BubbleConfig | None = None, m_delta: int | None = None) -> Decomposition:
    """Localized proximity d_K(t; rho) of u - u* to N - K exterior bubbles on (rho, inf).

    Gap terms run over the chain rho, lambda_{K+1}, ..., lambda_N, outer scale.
    """
    if t_context is None:
        raise ValueError("proximity_d needs a time context for the outer scale")
    if not 0 <= K <= N:
        raise ValueError("need 0 <= K <= N")
    grid, k = u.grid, u.k
    outer = t_context.outer_scale()
    x1, x2 = _window(grid, rho, math.inf)
    target = u.u - (0.0 if u_star is None else np.asarray(getattr(u_star, "u", u_star)))
    m = int(round(target[-1] / math.pi)) if m_delta is None else m_delta
    M = N - K
    if initial is not None and initial.M == M:
        candidates = [(initial.iotas, initial.lambdas)]
    else:
        cr = half_level_crossings(grid, target, rho, math.inf)
        candidates = []
        if len(cr) >= M:
            for combo in itertools.combinations(cr, M):
                candidates.append((tuple(c.sign for c in combo), tuple(c.r for c in combo)))
        else:
            have = [c.r for c in cr]
            lo = max(rho, grid.r_min) if rho > 0 else grid.r_min
            extra = list(np.geomspace(lo * 10, max(outer, lo * 100), M - len(cr) + 2)[1:-1])
            lams = sorted(have + extra)
            signs = [c.sign for c in cr] + [(-1) ** j for j in range(len(extra))]
            candidates.append((tuple(signs[:M]), tuple(lams[:M])))
    best = None
    for signs, lam0 in candidates:
        cfg, _ = _solve_scales(grid, target, m, signs, lam0, k, x1, x2, rho, outer)
        if cfg is None:
            continue
        dec = _make_decomposition(grid, target, cfg, x1, x2, rho, outer)
        if best is None or dec.distance < best.distance:
            best = dec
    if best is None:
        raise ModulationError("proximity fit failed for every seed")
    return best


# -- modulation ---------------------------------------------------------------

@dataclass(frozen=True)
class ModulationState:
    config: BubbleConfig
    error: np.ndarray = field(repr=False)
    residuals: tuple
    iterations: int
    error_norm: float
    gap_sum: float
    reseeded: bool = False

    @property
    def lambdas(self):
        return self.config.lambdas

    @property
    def iotas(self):
        return self.config.iotas


def _z_scale(grid: RadialGrid, lam: float, k: int) -> float:
    """lam ||r Z||_{L^2}: the size of <Z_lam | g> per unit energy norm of g."""
    z = z_values(grid.r, lam, k)
    return math.sqrt(inner(grid, grid.r * z, grid.r * z))


def _orthogonality(grid, target, cfg):
    g = target - cfg.values(grid.r)
    F = np.array([inner(grid, z_values(grid.r, lam, cfg.k), g) for lam in cfg.lambdas])
    return g, F


def modulate(u: RadialProfile, u_star, initial: BubbleConfig, tol: float = 1e-11,
             max_iter: int = 50, allow_reseed: bool = True) -> ModulationState:
    """Scales lambda with <Z_lambda_j | u - u* - Q(m, iota, lambda)> = 0 for every j.

    Damped Newton in log lambda with the analytic Jacobian; on divergence the
    seeds are refreshed once from a distance fit.
    """
    grid, k = u.grid, u.k
    target = u.u - (0.0 if u_star is None else np.asarray(getattr(u_star, "u", u_star)))
    if initial.M == 0:
        g = target - initial.m * math.pi
        return ModulationState(initial, g, (), 0, math.sqrt(energy_norm_sq(grid, g, k)), 0.0)
    try:
        return _newton(grid, target, initial, tol, max_iter)
    except ModulationError:
        if not allow_reseed:
            raise
    fit = fit_distance(u, initial.m, initial.M, initial, u_star)
    state = _newton(grid, target, fit.config, tol, max_iter)
    return ModulationState(state.config, state.error, state.residuals, state.iterations,
                           state.error_norm, state.gap_sum, True)


def _newton(grid, target, initial, tol, max_iter):
    k, iotas, m = initial.k, initial.iotas, initial.m
    r, w = grid.r, grid.weights
    theta = np.log(np.asarray(initial.lambdas, dtype=float))
    scales = None

    def evaluate(th):
        cfg = BubbleConfig(m, iotas, tuple(np.exp(th)), k)
        g, F = _orthogonality(grid, target, cfg)
        return cfg, g, F

    try:
        cfg, g, F = evaluate(theta)
    except ValueError as exc:
        raise ModulationError(str(exc)) from exc
    for it in range(max_iter + 1):
        scales = np.array([_z_scale(grid, lam, k) for lam in cfg.lambdas])
        gnorm = math.sqrt(energy_norm_sq(grid, g, k))
        nu = F / scales
        if np.all(np.abs(nu) <= tol * max(gnorm, 1e-3)):
            return ModulationState(cfg, g, tuple(float(v) for v in nu), it, gnorm, cfg.gap_sum())
        if it == max_iter:
            break
        lams = np.exp(theta)
        J = np.empty((len(theta), len(theta)))
        for j, lam_j in enumerate(lams):
            zj = z_values(r, lam_j, k) * w
            for i, lam_i in enumerate(lams):
                J[j, i] = iotas[i] * float(zj @ lambda_q_values(r, lam_i, k))
            J[j, j] += float(z_dlog_scale(r, lam_j, k) @ (g * w))
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise ModulationError("singular modulation Jacobian (collided scales)") from exc
        if not np.all(np.isfinite(step)):
            raise ModulationError("singular modulation Jacobian (collided scales)")
        step = np.clip(step, -0.5, 0.5)
        merit = float(np.sum(nu**2))
        alpha = 1.0
        while alpha > 1e-4:
            trial = theta + alpha * step
            if np.all(np.diff(trial) > 0):
                try:
                    c2, g2, F2 = evaluate(trial)
                except ValueError:
                    c2 = None
                if c2 is not None:
                    s2 = np.array([_z_scale(grid, lam, k) for lam in c2.lambdas])
                    if float(np.sum((F2 / s2) ** 2)) < merit or alpha == 1.0 and merit < 1e-20:
                        theta, cfg, g, F = trial, c2, g2, F2
                        break
            alpha *= 0.5
        else:
            raise ModulationError("Newton line search failed")
    raise ModulationError(f"modulation did not converge in {max_iter} iterations")


# -- tracking -----------------------------------------------------------------

@dataclass
class TrackPoint:
    t: float
    lambdas: tuple
    iotas: tuple
    d: float
    error_norm: float
    orth_max: float
    virial: float
    tension_l2: float
    provisional: bool
    lost: bool = False


@dataclass
class Tracking:
    points: list
    N: int
    m_delta: int
    lost_count: int = 0

    def times(self):
        return np.array([p.t for p in self.points])

    def d(self):
        return np.array([p.d for p in self.points])

    def lambdas(self):
        return np.array([p.lambdas if not p.lost else (math.nan,) * self.N for p in self.points])


def _sub_values(u_star, grid):
    if u_star is None:
        return None
    if isinstance(u_star, RadialProfile):
        if u_star.grid is grid or (u_star.grid.n == grid.n and np.array_equal(u_star.grid.r, grid.r)):
            return u_star.u
        from .radial import resample
        return resample(u_star, grid).u
    return np.asarray(u_star)


def track_scales(trajectory, u_star=None, initial: BubbleConfig | None = None,
                 t_plus: float | None = None, t_plus_stable: bool = True,
                 start_index: int = 0) -> Tracking:
    """Warm-started modulation along a trajectory plus d(t) at every checkpoint.

    ``initial`` fixes N and the signs; when omitted they are read from the
    crossings of the first tracked checkpoint.  d(t) is the full-space
    proximity d_0(t; 0) with the outer scale from ``t_plus`` (blow-up) or
    sqrt(t) (global).
    """
    states = [s for s in trajectory][start_index:]
    if not states:
        raise ValueError("empty trajectory")
    first = states[0].profile
    us0 = _sub_values(u_star, first.grid)
    target0 = first.u - (0.0 if us0 is None else us0)
    if initial is None:
        cr = half_level_crossings(first.grid, target0)
        m = int(round(target0[-1] / math.pi))
        initial = BubbleConfig(m, tuple(c.sign for c in cr), tuple(c.r for c in cr), first.k)
    N, m = initial.M, initial.m
    cfg = initial
    points, lost_run, lost_total = [], 0, 0
    for s in states:
        p = s.profile
        us = _sub_values(u_star, p.grid)
        tl2 = tension_l2(p)
        vir = virial(p)
        ctx = TimeContext(s.t, t_plus)
        try:
            mod = modulate(p, us, cfg)
            cfg = mod.config
            if s.t > 0 or t_plus is not None:
                dec = proximity_d(p, us, 0, 0.0, ctx, N, initial=cfg, m_delta=m)
                d = dec.distance
            else:
                d = math.nan
            orth = max((abs(v) for v in mod.residuals), default=0.0)
            points.append(TrackPoint(s.t, cfg.lambdas, cfg.iotas, d, mod.error_norm, orth, vir, tl2,
                                     not t_plus_stable))
            lost_run = 0
        except (ModulationError, ValueError):
            lost_run += 1
            lost_total += 1
            points.append(TrackPoint(s.t, (math.nan,) * N, cfg.iotas, math.nan, math.nan, math.nan,
                                     vir, tl2, not t_plus_stable, lost=True))
    return Tracking(points, N, m, lost_total)


# -- collisions -----------------------------------------------------------------

@dataclass
class CollisionInterval:
    a: float
    b: float
    K: int
    duration_ratio: float
    min_scaled_speed: float


@dataclass
class CollisionReport:
    eps: float
    eta: float
    intervals: list
    K: int | None
    rho_curve: list
    d_series: list

    def to_text(self) -> str:
        lines = [f"eps: {self.eps:.17g}", f"eta: {self.eta:.17g}",
                 f"K: {'none' if self.K is None else self.K}",
                 f"intervals: {len(self.intervals)}"]
        for iv in self.intervals:
            lines.append(f"  a={iv.a:.17g} b={iv.b:.17g} K={iv.K} "
                         f"duration_ratio={iv.duration_ratio:.17g} "
                         f"inf_scaled_speed={iv.min_scaled_speed:.17g}")
        lines.append("rho_curve:")
        lines += [f"  {t:.17g} {r:.17g}" for t, r in self.rho_curve]
        lines.append("d_series:")
        lines += [f"  {t:.17g} {d:.17g}" for t, d in self.d_series]
        return "\n".join(lines) + "\n"


def _crossing_time(t0, t1, d0, d1, level):
    if d1 == d0:
        return t1
    return t0 + (level - d0) / (d1 - d0) * (t1 - t0)


def detect_collisions(times, d, lambdas, eps: float, eta: float, tension_norms=None,
                      outer_scales=None, k: int = 1) -> CollisionReport:
    """Maximal intervals on which d rises from eps to eta while staying inside [eps, eta].

    ``lambdas`` is a (T, N) array.  K for an interval is the largest index j
    whose ratio lambda_j / lambda_{j+1} grows the most across it (within a
    factor 2 of the largest growth).  The report gives the duration ratio
    (b - a)^{1/2} / lambda_K(a) and inf lambda_K^2 ||u_t||^2 over the interval,
    with u_t = T(u) from ``tension_norms``.
    """
    if not 0 < eps < eta:
        raise ValueError("need 0 < eps < eta")
    t = np.asarray(times, dtype=float)
    d = np.asarray(d, dtype=float)
    lam = np.asarray(lambdas, dtype=float).reshape(len(t), -1)
    N = lam.shape[1]
    tn = None if tension_norms is None else np.asarray(tension_norms, dtype=float)
    intervals = []
    last_low = None
    for i in range(len(t)):
        if not np.isfinite(d[i]):
            continue
        if d[i] <= eps:
            last_low = i
            continue
        if d[i] >= eta and last_low is not None:
            j = last_low
            a = _crossing_time(t[j], t[j + 1], d[j], d[j + 1], eps)
            b = _crossing_time(t[i - 1], t[i], d[i - 1], d[i], eta)
            ia = j + 1 if t[j + 1] <= b else j
            sl = slice(j, i + 1)
            K = _collision_index(lam[sl], N)
            lamK_a = float(np.interp(a, t[sl], lam[sl, K - 1])) if K else math.nan
            ratio = math.sqrt(max(b - a, 0.0)) / lamK_a if K else math.nan
            speed = math.nan
            if tn is not None and K:
                inside = slice(ia, i + 1)
                speed = float(np.nanmin(lam[inside, K - 1] ** 2 * tn[inside] ** 2))
            intervals.append(CollisionInterval(float(a), float(b), K, ratio, speed))
            last_low = None
    Ks = [iv.K for iv in intervals if iv.K]
    K = max(Ks) if Ks else None
    rho = []
    if K is not None:
        for i in range(len(t)):
            lo = lam[i, K - 1]
            hi = lam[i, K] if K < N else (outer_scales[i] if outer_scales is not None else math.nan)
            rho.append((float(t[i]), float(math.sqrt(lo * hi))))
    return CollisionReport(eps, eta, intervals, K, rho, [(float(a), float(b)) for a, b in zip(t, d)])


def _collision_index(lam, N):
    if N < 2:
        return N
    ratios = np.log(lam[:, :-1] / lam[:, 1:])
    ok = np.all(np.isfinite(ratios), axis=1)
    if ok.sum() < 2:
        return 1
    r = ratios[ok]
    growth = r.max(axis=0) - r[0]
    top = growth.max()
    if top <= 0:
        return 1
    cand = [j for j in range(N - 1) if growth[j] >= 0.5 * top]
    return max(cand) + 1


# -- body map -----------------------------------------------------------------

def extract_body_map(trajectory, t_plus: float | None, status: str = "blowup_detected",
                     rho: float | None = None, eps0: float | None = None):
    """Body map u* and the vacuum shift m_Delta.

    Global runs return u* = 0.  For blow-up runs u* = (1 - chi(r / rho))
    (u(t_last) - m_Delta pi) with m_Delta read off u(t_last) at r = rho,
    where rho defaults to the geometric mean of the concentration radius and
    sqrt(T+ - t_last).  Returns ``(u_star, m_delta)``.
    """
    states = list(trajectory)
    last = states[-1].profile
    ell, m = last.sector
    if status != "blowup_detected":
        zero = RadialProfile(last.grid, np.zeros(last.grid.n), (0, 0), last.k)
        return zero, m
    if len(states) < 3:
        raise ValueError("body map extraction needs at least 3 checkpoints")
    if t_plus is None or t_plus <= states[-1].t:
        raise ValueError("body map extraction needs T+ beyond the last checkpoint")
    if rho is None:
        e0 = eps0 if eps0 is not None else 2 * math.pi * last.k
        lam = concentration_radius(last, e0)
        if lam is None:
            raise ValueError("no concentration at the last checkpoint")
        rho = math.sqrt(lam * math.sqrt(t_plus - states[-1].t))
    grid = last.grid
    m_delta = int(round(float(np.interp(math.log(rho), grid.x, last.u)) / math.pi))
    cut = 1.0 - chi(grid.r / rho)
    ustar = cut * (last.u - m_delta * math.pi)
    prof = RadialProfile(grid, ustar, (0, m - m_delta), last.k, {"rho": f"{rho:.17g}"})
    return prof, m_delta


# -- analysis CSV -----------------------------------------------------------------

def write_analysis_csv(path, tracking: Tracking, K: int | None = None) -> None:
    K = K or 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "d", "N_fit"] + [f"lambda_{j + 1}" for j in range(tracking.N)]
                   + ["g_norm", "orth_residual_max", "virial", "lamK2_tension2", "provisional"])
        for p in tracking.points:
            lamK = p.lambdas[K - 1] if tracking.N >= K and not p.lost else math.nan
            w.writerow([f"{p.t:.17g}", f"{p.d:.17g}", tracking.N]
                       + [f"{v:.17g}" for v in p.lambdas]
                       + [f"{p.error_norm:.17g}", f"{p.orth_max:.17g}", f"{p.virial:.17g}",
                          f"{lamK**2 * p.tension_l2**2:.17g}", int(p.provisional)])
