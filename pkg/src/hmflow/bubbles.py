"""Harmonic maps, multi-bubble configurations and the linearized energy.

Q(r) = 2 arctan(r^k) is evaluated in the log variable, where
Lambda Q = r Q'(r) = k sin Q = k sech(k log r) has no overflow issues for
extreme scale ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.integrate import quad
from scipy.sparse.linalg import splu

from .radial import (
    RadialGrid,
    RadialProfile,
    energy,
    energy_norm_sq,
    inner,
)

EXPANSION_GATE = 0.1


class ConvergenceError(RuntimeError):
    pass


def _check_scale(lam: float) -> float:
    lam = float(lam)
    if not lam > 0:
        raise ValueError(f"scale must be positive, got {lam}")
    return lam


def q_values(r, lam: float, k: int) -> np.ndarray:
    """Q_lam(r) = 2 arctan((r/lam)^k)."""
    s = k * (np.log(r) - math.log(_check_scale(lam)))
    return 2.0 * np.arctan(np.exp(np.clip(s, -700, 700)))


def q_minus_pi(r, lam: float, k: int) -> np.ndarray:
    """Q_lam(r) - pi, computed without cancellation at large r."""
    s = k * (np.log(r) - math.log(_check_scale(lam)))
    return -2.0 * np.arctan(np.exp(np.clip(-s, -700, 700)))


def lambda_q_values(r, lam: float, k: int, scaling: str = "energy") -> np.ndarray:
    """Lambda Q at scale lam: ``energy`` gives LQ(r/lam), ``l2`` gives LQ(r/lam)/lam."""
    lam = _check_scale(lam)
    s = k * (np.log(r) - math.log(lam))
    out = k / np.cosh(np.clip(s, -700, 700))
    if scaling == "energy":
        return out
    if scaling == "l2":
        return out / lam
    raise ValueError(f"unknown scaling {scaling!r}")


def chi(r) -> np.ndarray:
    """Quintic smoothstep cutoff: 1 on r <= 1, 0 on r >= 2, C^2 at both joins."""
    s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def z_values(r, lam: float, k: int) -> np.ndarray:
    """Z at scale lam, L^2-invariant: Z(r/lam)/lam with Z = chi LQ (k<=2) or LQ (k>=3)."""
    lam = _check_scale(lam)
    z = lambda_q_values(r, lam, k, "l2")
    if k <= 2:
        z = z * chi(np.asarray(r) / lam)
    return z


def z_dlog_scale(r, lam: float, k: int) -> np.ndarray:
    """d/d(log lam) of the L^2-scaled Z at scale lam, i.e. -(Z + r Z')(r/lam) / lam."""
    lam = _check_scale(lam)
    s = np.log(r) - math.log(lam)
    ks = np.clip(k * s, -700, 700)
    sech = 1.0 / np.cosh(ks)
    lq = k * sech
    dlq = -k * k * sech * np.tanh(ks)
    if k <= 2:
        z = np.asarray(r) / lam
        t = np.clip(z - 1.0, 0.0, 1.0)
        c = chi(z)
        dc = -30.0 * t * t * (1 - t) ** 2 * z
        zval, dz = c * lq, dc * lq + c * dlq
    else:
        zval, dz = lq, dlq
    return -(zval + dz) / lam


def eval_Q(lam: float, k: int, grid: RadialGrid) -> RadialProfile:
    return RadialProfile(grid, q_values(grid.r, lam, k), (0, 1), k)


def eval_LambdaQ(lam: float, k: int, grid: RadialGrid, scaling: str = "energy") -> np.ndarray:
    return lambda_q_values(grid.r, lam, k, scaling)


def eval_Z(lam: float, k: int, grid: RadialGrid) -> np.ndarray:
    return z_values(grid.r, lam, k)


@dataclass(frozen=True)
class BubbleConfig:
    """m pi + sum_j iota_j (Q_{lambda_j} - pi), lambdas strictly increasing."""

    m: int
    iotas: tuple = ()
    lambdas: tuple = ()
    k: int = 1

    def __post_init__(self):
        iotas = tuple(int(i) for i in self.iotas)
        lambdas = tuple(float(v) for v in self.lambdas)
        if len(iotas) != len(lambdas):
            raise ValueError("iotas and lambdas must have the same length")
        if any(i not in (-1, 1) for i in iotas):
            raise ValueError("signs must be +1 or -1")
        if any(not v > 0 for v in lambdas):
            raise ValueError("scales must be positive")
        if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
            raise ValueError("scales must be strictly increasing")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        object.__setattr__(self, "iotas", iotas)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "m", int(self.m))

    @property
    def M(self) -> int:
        return len(self.lambdas)

    @property
    def ell(self) -> int:
        return self.m - sum(self.iotas)

    def gap_ratios(self) -> np.ndarray:
        lam = np.asarray(self.lambdas)
        return lam[:-1] / lam[1:]

    def gap_sum(self) -> float:
        return float(np.sum(self.gap_ratios() ** self.k))

    def values(self, r) -> np.ndarray:
        out = np.full(np.shape(r), self.m * math.pi)
        for iota, lam in zip(self.iotas, self.lambdas):
            out = out + iota * q_minus_pi(r, lam, self.k)
        return out

    def flipped(self) -> "BubbleConfig":
        return BubbleConfig(-self.m, tuple(-i for i in self.iotas), self.lambdas, self.k)


def multi_bubble(config: BubbleConfig, grid: RadialGrid) -> RadialProfile:
    return RadialProfile(grid, config.values(grid.r), (config.ell, config.m), config.k)


@dataclass(frozen=True)
class ExpansionReport:
    computed: float
    predicted: float
    residual: float
    gap_ratios: tuple
    in_regime: bool

    def summary(self) -> str:
        return "\n".join([
            f"computed: {self.computed:.17g}",
            f"predicted: {self.predicted:.17g}",
            f"residual: {self.residual:.17g}",
            "gap_ratios: " + " ".join(f"{g:.17g}" for g in self.gap_ratios),
            f"in_regime: {self.in_regime}",
        ])


def predicted_energy(config: BubbleConfig) -> float:
    k = config.k
    inter = sum(a * b * g**k for a, b, g in zip(config.iotas, config.iotas[1:], config.gap_ratios()))
    return config.M * 4 * math.pi * k + 16 * k * math.pi * inter


def energy_expansion(config: BubbleConfig, grid: RadialGrid | None = None,
                     gate: float = EXPANSION_GATE) -> ExpansionReport:
    """Compare the quadrature energy of a configuration with M E(Q) + 16 k pi sum iota iota' gap^k.

    Ratios above ``gate`` are reported with ``in_regime=False``.
    """
    from .radial import make_grid

    grid = grid if grid is not None else make_grid()
    computed = energy(multi_bubble(config, grid)).total
    predicted = predicted_energy(config)
    gaps = tuple(float(g) for g in config.gap_ratios())
    in_regime = all(g <= gate for g in gaps)
    return ExpansionReport(computed, predicted, computed - predicted, gaps, in_regime)


def cross_term_integral(lam: float, mu: float, alpha: float, beta: float) -> float:
    """int_0^inf max(1, r/lam)^-alpha max(1, mu/r)^-beta dr/r, by adaptive quadrature in log r."""
    if lam > mu:
        raise ValueError(f"need lam <= mu, got {lam} > {mu}")
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    a, b = math.log(lam), math.log(mu)

    def f(s):
        return math.exp(-alpha * max(0.0, s - a) - beta * max(0.0, b - s))

    opts = dict(epsabs=0.0, epsrel=1e-13, limit=200)
    total = quad(f, -math.inf, a, **opts)[0]
    if b > a:
        total += quad(f, a, b, **opts)[0]
    total += quad(f, b, math.inf, **opts)[0]
    return total


def cross_term_bound(lam: float, mu: float, alpha: float, beta: float) -> float:
    """Right-hand side of the cross-term estimate, without the implicit constant."""
    s = lam / mu
    if alpha == beta:
        return s**alpha * (1.0 + math.log(mu / lam))
    return s ** min(alpha, beta)


def _check_field(grid: RadialGrid, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (grid.n,):
        raise ValueError(f"field has shape {g.shape}, grid has {grid.n} nodes")
    return g


def quadratic_form(config: BubbleConfig, g, grid: RadialGrid) -> float:
    """<D^2 E(Q) g | g> = int (g_r^2 + k^2 cos(2Q) g^2 / r^2) r dr, bare measure."""
    g = _check_field(grid, g)
    q = config.values(grid.r)
    k = config.k
    return float(g @ (grid.stiffness @ g) + k * k * np.sum(np.cos(2 * q) * g * g * grid.hn))


def de_pairing(config: BubbleConfig, g, grid: RadialGrid) -> float:
    """<DE(Q) | g> = int (Q_r g_r + k^2 sin(2Q) g / (2 r^2)) r dr."""
    g = _check_field(grid, g)
    q = config.values(grid.r)
    k = config.k
    return float(g @ (grid.stiffness @ q) + 0.5 * k * k * np.sum(np.sin(2 * q) * g * grid.hn))


def virial(profile: RadialProfile) -> float:
    """int (k^2 sin^2(2u) / (2 r^2) + 2 cos(2u) u_r^2) r dr."""
    grid, u, k = profile.grid, profile.u, profile.k
    ux = grid.ddx @ u
    dens = 0.5 * k * k * np.sin(2 * u) ** 2 + 2.0 * ux * ux * np.cos(2 * u)
    return float(np.dot(dens, grid.hn))


@dataclass(frozen=True)
class CoercivityReport:
    constrained_min: float
    unconstrained_min: float
    minimizer: np.ndarray = field(repr=False)
    constraint_residuals: tuple
    r_max: float
    n: int
    iterations: int

    def summary(self) -> str:
        return "\n".join([
            f"constrained_min: {self.constrained_min:.17g}",
            f"unconstrained_min: {self.unconstrained_min:.17g}",
            "constraint_residuals: " + " ".join(f"{c:.3e}" for c in self.constraint_residuals),
            f"r_max: {self.r_max:.17g}",
            f"n: {self.n}",
            f"iterations: {self.iterations}",
        ])


def _lowest_pencil_eig(A, B, C, sigma: float, block: int = 4, tol: float = 1e-11,
                       maxit: int = 400, seed: int = 0):
    """Smallest eigenpair of A x = mu B x on {C^T x = 0} by projected block inverse iteration.

    Each sweep solves the saddle system [[A - sigma B, C], [C^T, 0]] so iterates
    satisfy the constraints exactly; a Rayleigh-Ritz step orders the block.
    """
    n = A.shape[0]
    m = C.shape[1]
    K = A - sigma * B
    if m:
        Cs = sparse.csc_matrix(C)
        K = sparse.bmat([[K, Cs], [Cs.T, None]])
    lu = splu(sparse.csc_matrix(K))

    def solve(rhs):
        if m:
            rhs = np.vstack([rhs, np.zeros((m, rhs.shape[1]))])
        return lu.solve(rhs)[:n]

    rng = np.random.default_rng(seed)
    X = solve(rng.standard_normal((n, block)))
    prev = np.inf
    for it in range(1, maxit + 1):
        Y = solve(B @ X)
        ar = Y.T @ (A @ Y)
        br = Y.T @ (B @ Y)
        ar, br = 0.5 * (ar + ar.T), 0.5 * (br + br.T)
        # whiten the block before the small eigenproblem
        d, V = np.linalg.eigh(br)
        keep = d > d.max() * 1e-14
        W = V[:, keep] / np.sqrt(d[keep])
        theta, U = np.linalg.eigh(W.T @ ar @ W)
        X = Y @ (W @ U)
        if abs(theta[0] - prev) <= tol * max(1.0, abs(theta[0])):
            return float(theta[0]), X[:, 0], it
        prev = theta[0]
    raise ConvergenceError(f"inverse iteration did not converge in {maxit} sweeps")


def coercivity_constant(lambdas, iotas, k: int, m: int = 0, grid: RadialGrid | None = None,
                        eta_sq: float = 0.01) -> CoercivityReport:
    """Lowest Rayleigh quotient <D^2E(Q) g|g> / ||g||_E^2, with and without <Z_lam_j | g> = 0."""
    from .radial import make_grid

    grid = grid if grid is not None else make_grid()
    config = BubbleConfig(m, tuple(iotas), tuple(lambdas), k)
    if config.gap_sum() > eta_sq:
        raise ValueError(f"gap sum {config.gap_sum():.3g} exceeds eta^2 = {eta_sq}")
    q = config.values(grid.r)
    hn = grid.hn
    sl = slice(1, grid.n - 1)
    S = grid.stiffness[sl, sl]
    A = sparse.csr_matrix(S + sparse.diags(k * k * np.cos(2 * q[sl]) * hn[sl]))
    B = sparse.csr_matrix(S + sparse.diags(k * k * hn[sl]))
    Z = np.column_stack([eval_Z(lam, k, grid) * grid.weights for lam in config.lambdas])
    C = Z[sl] if config.M else np.zeros((grid.n - 2, 0))

    # cos(2Q) >= -1 puts every Rayleigh quotient above -1
    sigma = -1.5
    unc, _, it1 = _lowest_pencil_eig(A, B, np.zeros((grid.n - 2, 0)), sigma)
    con, vec, it2 = _lowest_pencil_eig(A, B, C, sigma)
    g = np.zeros(grid.n)
    g[sl] = vec
    g /= math.sqrt(energy_norm_sq(grid, g, k))
    residuals = tuple(inner(grid, eval_Z(lam, k, grid), g) for lam in config.lambdas)
    return CoercivityReport(con, unc, g, residuals, grid.r_max, grid.n, it1 + it2)
