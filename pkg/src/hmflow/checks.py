"""Quantitative checks on the bubble family, grouped into suites.

Each check returns :class:`CheckRow` records carrying the measured value,
the tolerance it was held to and the verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bubbles import (
    BubbleConfig,
    coercivity_constant,
    cross_term_bound,
    cross_term_integral,
    energy_expansion,
    eval_Q,
    eval_LambdaQ,
    multi_bubble,
    virial,
)
from .radial import RadialProfile, energy, inner, make_grid

# gap-ratio windows where the leading interaction term dominates both the
# next-order correction (small k) and the quadrature floor (large k)
EXPANSION_WINDOWS = {1: (3e-4, 3e-3), 2: (1e-3, 1e-2), 3: (3e-3, 3e-2)}

SUITES = ("energy", "expansion", "crossterm", "coercivity", "virial", "uniqueness")


@dataclass(frozen=True)
class CheckRow:
    suite: str
    name: str
    k: int
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.suite:<11s} k={self.k} {self.name:<40s} "
                f"value={self.value:.17g} tol={self.tolerance:.3g}")


def lambda_q_l2_exact(k: int) -> float:
    """||Lambda Q||_{L^2}^2 = 2 pi / sin(pi / k), finite for k >= 2."""
    if k < 2:
        raise ValueError("Lambda Q is not square integrable for k = 1")
    return 2 * math.pi / math.sin(math.pi / k)


def cross_term_closed_form(lam: float, mu: float, alpha: float, beta: float) -> float:
    """Exact value of the cross-term integral, split at lam and mu."""
    L = math.log(mu / lam)
    mid = L * math.exp(-beta * L) if alpha == beta else \
        (math.exp(-alpha * L) - math.exp(-beta * L)) / (beta - alpha)
    return math.exp(-beta * L) / beta + mid + math.exp(-alpha * L) / alpha


# -- suites -----------------------------------------------------------------

def check_energy(ks, grid=None):
    grid = grid if grid is not None else make_grid()
    rows = []
    for k in ks:
        e = energy(eval_Q(1.0, k, grid)).total
        rel = abs(e / (4 * math.pi * k) - 1)
        rows.append(CheckRow("energy", "E(Q) = 4 pi k (relative)", k, rel, 1e-6, rel <= 1e-6))
        if k >= 2:
            lq = eval_LambdaQ(1.0, k, grid, scaling="l2")
            rel = abs(inner(grid, lq, lq) / lambda_q_l2_exact(k) - 1)
            rows.append(CheckRow("energy", "||Lambda Q||^2 = 2 pi / sin(pi/k)", k, rel, 1e-6,
                                 rel <= 1e-6))
    return rows


def expansion_fit(k: int, grid=None, ratios=None):
    """Regress log|E - 2 E(Q)| on log(gap) for +- and ++ pairs.

    Returns ``(slope, coefficient, below, above)`` where ``below``/``above``
    say whether every opposite-sign pair sits under 2 E(Q) and every same-sign
    pair above it.
    """
    grid = grid if grid is not None else make_grid()
    if ratios is None:
        ratios = np.geomspace(*EXPANSION_WINDOWS.get(k, EXPANSION_WINDOWS[3]), 9)
    ratios = np.asarray(ratios)
    base = 8 * math.pi * k
    dev, below, above = [], True, True
    for q in ratios:
        opp = energy_expansion(BubbleConfig(0, (1, -1), (q, 1.0), k), grid).computed
        same = energy_expansion(BubbleConfig(2, (1, 1), (q, 1.0), k), grid).computed
        below &= opp < base
        above &= same > base
        dev.append(base - opp)
    slope, _ = np.polyfit(np.log(ratios), np.log(np.abs(dev)), 1)
    coef = float(np.exp(np.mean(np.log(np.abs(dev)) - k * np.log(ratios))))
    return float(slope), coef, bool(below), bool(above)


def check_expansion(ks, grid=None):
    rows = []
    for k in ks:
        slope, coef, below, above = expansion_fit(k, grid)
        target = 16 * k * math.pi
        rows.append(CheckRow("expansion", "log-log slope = k", k, slope, 0.05, abs(slope - k) <= 0.05))
        rel = abs(coef / target - 1)
        rows.append(CheckRow("expansion", "coefficient = 16 k pi (relative)", k, rel, 0.02, rel <= 0.02))
        rows.append(CheckRow("expansion", "sign: +- below, ++ above", k, float(below and above), 1.0,
                             below and above))
    return rows


def crossterm_cases(n: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        lam = 10 ** rng.uniform(-4, 0)
        mu = lam * 10 ** rng.uniform(0, 4)
        alpha = rng.uniform(0.5, 4)
        beta = alpha if i % 5 == 0 else rng.uniform(0.5, 4)
        cases.append((lam, mu, alpha, beta))
    return cases


def check_crossterm(ks=(), n: int = 100):
    worst = 0.0
    for lam, mu, a, b in crossterm_cases(n):
        exact = cross_term_closed_form(lam, mu, a, b)
        worst = max(worst, abs(cross_term_integral(lam, mu, a, b) / exact - 1))
    rows = [CheckRow("crossterm", f"quadrature = closed form ({n} cases)", 0, worst, 1e-8, worst <= 1e-8)]
    # equal exponents: integral / s^alpha grows like log(mu/lam)
    s = np.geomspace(1e-2, 1e-6, 5)
    growth = [cross_term_integral(v, 1.0, 2.0, 2.0) / v**2 for v in s]
    slope = float(np.polyfit(np.log(1 / s), growth, 1)[0])
    rows.append(CheckRow("crossterm", "equal exponents: log correction slope = 1", 0,
                         slope, 1e-6, abs(slope - 1) <= 1e-6))
    ratio = max(cross_term_integral(v, 1.0, 2.0, 2.0) / cross_term_bound(v, 1.0, 2.0, 2.0) for v in s)
    rows.append(CheckRow("crossterm", "equal exponents: integral / bound <= 1", 0, ratio, 1.0,
                         ratio <= 1.0 + 1e-12))
    return rows


def check_coercivity(ks, grid=None, fine_grid=None):
    grid = grid if grid is not None else make_grid()
    fine_grid = fine_grid if fine_grid is not None else make_grid(n=2 * grid.n)
    rows = []
    for k in ks:
        one = coercivity_constant((1.0,), (1,), k, m=1, grid=grid)
        fine = coercivity_constant((1.0,), (1,), k, m=1, grid=fine_grid)
        two = coercivity_constant((1e-3, 1.0), (1, -1), k, m=0, grid=grid)
        rows.append(CheckRow("coercivity", "unconstrained minimum ~ 0", k,
                             one.unconstrained_min, 1e-6, abs(one.unconstrained_min) <= 1e-6))
        rows.append(CheckRow("coercivity", "constrained minimum > 0", k,
                             one.constrained_min, 0.0, one.constrained_min > 0))
        for label, other in (("grid refinement", fine), ("two-bubble config", two)):
            rel = abs(other.constrained_min / one.constrained_min - 1)
            rows.append(CheckRow("coercivity", f"c0 stable under {label}", k, rel, 0.2, rel <= 0.2))
    return rows


def check_virial(ks, grid=None):
    grid = grid if grid is not None else make_grid()
    rows = []
    for k in ks:
        worst = max(abs(virial(eval_Q(lam, k, grid))) / (2 * k) for lam in np.geomspace(10**-1.5, 10**1.5, 7))
        rows.append(CheckRow("virial", "|virial(Q_lam)| / (E(Q)/2pi)", k, worst, 1e-8, worst <= 1e-8))
    return rows


def fuzzed_profiles(k: int, count: int, grid, seed: int = 0):
    """Bubble configurations plus small smooth perturbations, with the configurations used."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        M = int(rng.integers(1, 3))
        if M == 1:
            lams = (10 ** rng.uniform(-1, 1),)
        else:
            lo = 10 ** rng.uniform(-2.5, -1.5)
            lams = (lo, lo * 10 ** rng.uniform(2.5, 3.5))
        iotas = tuple(int(v) for v in rng.choice((-1, 1), size=M))
        m = int(rng.integers(-1, 2)) + sum(iotas)
        cfg = BubbleConfig(m, iotas, lams, k)
        x = grid.x
        g = np.zeros(grid.n)
        for _ in range(3):
            c = rng.uniform(math.log(lams[0]) - 1, math.log(lams[-1]) + 1)
            g += rng.uniform(-1, 1) * 0.01 * np.exp(-((x - c) / rng.uniform(0.5, 1.5)) ** 2)
        prof = multi_bubble(cfg, grid)
        out.append((cfg, RadialProfile(grid, prof.u + g, prof.sector, k)))
    return out


def uniqueness_trials(k: int, count: int = 20, restarts: int = 3, grid=None, seed: int = 0):
    """Fit each fuzzed profile from displaced seeds and compare the answers.

    Returns a list of ``(distance, agree_discrete, worst_scale_spread)``.
    """
    from .decomposition import fit_delta_R

    grid = grid if grid is not None else make_grid(n=2048)
    rng = np.random.default_rng(seed + 1)
    out = []
    for cfg, prof in fuzzed_profiles(k, count, grid, seed):
        # boundary gap term (lambda_M / R)^k = 1e-4
        R = cfg.lambdas[-1] * 10 ** (4 / k)
        fits = [fit_delta_R(prof, R)]
        for _ in range(restarts):
            fits.append(fit_delta_R(prof, R, seed_perturbation=rng.uniform(-0.3, 0.3, size=5)))
        ref = fits[0].config
        same = all((f.config.m, f.config.M, f.config.iotas) == (ref.m, ref.M, ref.iotas) for f in fits)
        spread = 0.0
        if same and ref.M:
            for f in fits[1:]:
                spread = max(spread, max(abs(a / b - 1) for a, b in zip(f.config.lambdas, ref.lambdas)))
        out.append((fits[0].distance, same, spread if same else math.inf))
    return out


def check_uniqueness(ks, admissible: int = 20, max_profiles: int = 40):
    rows = []
    for k in ks:
        trials = [t for t in uniqueness_trials(k, max_profiles) if t[0] <= 0.05][:admissible]
        bad = sum(1 for _, same, spread in trials if not same or spread > 0.1)
        worst = max((s for _, _, s in trials), default=math.inf)
        rows.append(CheckRow("uniqueness", f"restarts agree ({len(trials)} admissible fits)", k,
                             worst, 0.1, bad == 0 and len(trials) == admissible))
    return rows


_RUNNERS = {
    "energy": check_energy,
    "expansion": check_expansion,
    "crossterm": check_crossterm,
    "coercivity": check_coercivity,
    "virial": check_virial,
    "uniqueness": check_uniqueness,
}


def run_suite(suite: str, ks=(1, 2, 3)) -> list:
    if suite == "all":
        return [row for name in SUITES for row in _RUNNERS[name](ks)]
    if suite not in _RUNNERS:
        raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES + ('all',))}")
    return _RUNNERS[suite](ks)
