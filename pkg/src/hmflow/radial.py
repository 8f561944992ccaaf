"""Radial grids, quadrature and the energy calculus for k-equivariant profiles.

A profile is a polar-angle function u(r) sampled on a logarithmic grid
r_1 < ... < r_n.  All discrete operators live in the log variable x = log r,
where the measure r dr becomes r^2 dx and the Dirichlet part of the energy
becomes the flat integral of u_x^2.

The discrete energy is

    E_h(u) = 2 pi * [ 1/2 sum_cells (D+u)^2 hc
                      + 1/2 sum_nodes c_i (D2 u)_i^2 hn_i
                      + k^2/2 sum_nodes sin^2(u_i) hn_i ]

with c_i = hc_{i-1} hc_i / 12 away from the boundary.  The curvature term
cancels the leading error of the staggered difference, so E_h is fourth-order
accurate on smooth grids, and its exact gradient is the five-point Laplacian.
The tension, the flow right-hand side and the quadratic forms are all taken
as exact derivatives of E_h, which makes the discrete dissipation identity
hold without a spatial defect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.interpolate import PchipInterpolator

DEFAULT_R_MIN = 1e-6
DEFAULT_R_MAX = 1e6
DEFAULT_N = 4096
SECTOR_TOL = 0.3

# log-distance over which the curvature correction is ramped in at each boundary
_TAPER_LENGTH = 2.0
# spacing growth rate away from a refinement band (relative, per unit spacing)
_BAND_GRADING = 0.1


class GridError(ValueError):
    """Invalid grid construction or a window that leaves the grid."""


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Strictly increasing radii with quadrature weights for r dr.

    ``bands`` records the refinement bands used to build the grid as
    ``(r_lo, r_hi, factor)`` triples.
    """

    r: np.ndarray
    bands: tuple = ()

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        if r.ndim != 1 or r.size < 3:
            raise GridError("grid needs at least 3 nodes")
        if r[0] <= 0:
            raise GridError("r_min must be positive")
        if np.any(np.diff(r) <= 0):
            raise GridError("nodes must be strictly increasing")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @property
    def n(self) -> int:
        return self.r.size

    @property
    def r_min(self) -> float:
        return float(self.r[0])

    @property
    def r_max(self) -> float:
        return float(self.r[-1])

    @cached_property
    def x(self) -> np.ndarray:
        return np.log(self.r)

    @cached_property
    def hc(self) -> np.ndarray:
        """Cell widths in x."""
        return np.diff(self.x)

    @cached_property
    def hn(self) -> np.ndarray:
        """Dual (node) widths in x; half cells at the ends."""
        hn = np.zeros(self.n)
        hn[:-1] += 0.5 * self.hc
        hn[1:] += 0.5 * self.hc
        return hn

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid-in-x weights for the measure r dr."""
        return self.r**2 * self.hn

    @cached_property
    def curvature_coef(self) -> np.ndarray:
        c = np.zeros(self.n)
        c[1:-1] = self.hc[:-1] * self.hc[1:] / 12.0
        edge = np.minimum(self.x - self.x[0], self.x[-1] - self.x) / _TAPER_LENGTH
        s = np.clip(edge, 0.0, 1.0)
        return c * s**3 * (10.0 - 15.0 * s + 6.0 * s * s)

    @cached_property
    def dplus(self) -> sparse.csr_matrix:
        """Forward difference u -> (u_{j+1} - u_j)/hc_j, shape (n-1, n)."""
        inv = 1.0 / self.hc
        return sparse.diags([-inv, inv], [0, 1], shape=(self.n - 1, self.n), format="csr")

    @cached_property
    def d2(self) -> sparse.csr_matrix:
        """Three-point second difference in x at every node (zero rows at the ends)."""
        hn = self.hn.copy()
        hn[0] = hn[-1] = 1.0
        d2 = sparse.diags(1.0 / hn) @ sparse.vstack(
            [sparse.csr_matrix((1, self.n)),
             self.dplus[1:] - self.dplus[:-1],
             sparse.csr_matrix((1, self.n))]
        )
        return d2.tocsr()

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        """Symmetric pentadiagonal S with g^T S g the discrete Dirichlet form."""
        s = self.dplus.T @ sparse.diags(self.hc) @ self.dplus
        s = s + self.d2.T @ sparse.diags(self.curvature_coef * self.hn) @ self.d2
        return sparse.csr_matrix(s)

    @cached_property
    def ddx(self) -> sparse.csr_matrix:
        """Pointwise first derivative in x, seven-point stencils (one-sided at the ends)."""
        return _fd_matrix(self.x, order=1, width=7)

    @cached_property
    def ddx2(self) -> sparse.csr_matrix:
        return _fd_matrix(self.x, order=2, width=5)

    def locate(self, r: float) -> int:
        """Index of the node nearest to ``r`` in log distance."""
        return int(np.argmin(np.abs(self.x - math.log(r))))


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Samples of u on a grid, with sector labels (ell, m) and degree k."""

    grid: RadialGrid
    u: np.ndarray
    sector: tuple[int, int]
    k: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        if u.shape != (self.grid.n,):
            raise ValueError(f"profile has {u.size} samples for a {self.grid.n}-node grid")
        if self.k < 1:
            raise ValueError("equivariance degree k must be >= 1")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "sector", (int(self.sector[0]), int(self.sector[1])))

    def with_values(self, u: np.ndarray, **meta) -> "RadialProfile":
        return RadialProfile(self.grid, u, self.sector, self.k, {**self.meta, **meta})

    def boundary_defect(self) -> tuple[float, float]:
        ell, m = self.sector
        return abs(self.u[0] - ell * math.pi), abs(self.u[-1] - m * math.pi)

    def check(self, tol: float = SECTOR_TOL) -> None:
        d0, d1 = self.boundary_defect()
        if d0 >= tol or d1 >= tol:
            raise ValueError(
                f"boundary values leave sector {self.sector}: defects {d0:.3g}, {d1:.3g}"
            )
        if not np.all(np.isfinite(self.u)):
            raise ValueError("profile has non-finite samples")


@dataclass(frozen=True)
class EnergyReport:
    total: float
    window: tuple[float, float]
    kinetic: float
    potential: float


def make_grid(r_min: float = DEFAULT_R_MIN, r_max: float = DEFAULT_R_MAX,
              n: int = DEFAULT_N, refinement_bands=()) -> RadialGrid:
    """Log-uniform grid with ``n`` base nodes, refined by ``factor`` inside each band.

    Bands are ``(r_lo, r_hi, factor)``.  Spacing grows geometrically back to
    the base spacing outside a band, so the grid stays smooth.
    """
    if not (0 < r_min < r_max) or not np.isfinite(r_max):
        raise GridError(f"need 0 < r_min < r_max, got {r_min}, {r_max}")
    if n < 16:
        raise GridError(f"need n >= 16, got {n}")
    bands = tuple((float(a), float(b), float(f)) for a, b, f in refinement_bands)
    for a, b, f in bands:
        if not (r_min <= a < b <= r_max):
            raise GridError(f"band [{a}, {b}] outside [{r_min}, {r_max}]")
        if f < 1:
            raise GridError(f"band factor must be >= 1, got {f}")
    x0, x1 = math.log(r_min), math.log(r_max)
    if not bands:
        return RadialGrid(np.exp(np.linspace(x0, x1, n)))

    h = (x1 - x0) / (n - 1)
    h_fine = min(h / f for _, _, f in bands)
    xs = np.linspace(x0, x1, int(math.ceil((x1 - x0) / (h_fine / 4))) + 1)
    spacing = np.full_like(xs, h)
    for a, b, f in bands:
        la, lb = math.log(a), math.log(b)
        dist = np.maximum(0.0, np.maximum(la - xs, xs - lb))
        s_band = h / f + _BAND_GRADING * dist
        spacing = np.minimum(spacing, s_band)
    dens = 1.0 / spacing
    count = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
    cells = int(math.ceil(count[-1] - 1e-9))
    targets = np.linspace(0.0, count[-1], cells + 1)
    x = np.interp(targets, count, xs)
    x[0], x[-1] = x0, x1
    return RadialGrid(np.exp(x), bands)


def _fd_weights(z: float, xs: np.ndarray, m: int) -> np.ndarray:
    """Finite-difference weights for the m-th derivative at z (Fornberg's recursion)."""
    n = xs.size
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, xs[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, xs[i] - z
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for s in range(mn, 0, -1):
                    c[i, s] = c1 * (s * c[i - 1, s - 1] - c5 * c[i - 1, s]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for s in range(mn, 0, -1):
                c[j, s] = (c4 * c[j, s] - s * c[j, s - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


def _fd_matrix(x: np.ndarray, order: int, width: int) -> sparse.csr_matrix:
    n = x.size
    half = width // 2
    rows, cols, vals = [], [], []
    for i in range(n):
        lo = min(max(i - half, 0), n - width)
        idx = np.arange(lo, lo + width)
        w = _fd_weights(x[i], x[idx], order)
        rows.extend([i] * width)
        cols.extend(idx)
        vals.extend(w)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _window_x(grid: RadialGrid, r1: float, r2: float) -> tuple[float, float]:
    """Map a radial window to x, treating 0 and inf as the truncated grid ends."""
    tol = 1e-12
    if r1 <= 0:
        x1 = grid.x[0]
    elif r1 < grid.r_min * (1 - tol) or r1 > grid.r_max * (1 + tol):
        raise GridError(f"window start {r1} outside grid [{grid.r_min}, {grid.r_max}]")
    else:
        x1 = min(max(math.log(r1), grid.x[0]), grid.x[-1])
    if math.isinf(r2):
        x2 = grid.x[-1]
    elif r2 > grid.r_max * (1 + tol) or r2 < grid.r_min * (1 - tol):
        raise GridError(f"window end {r2} outside grid [{grid.r_min}, {grid.r_max}]")
    else:
        x2 = min(max(math.log(r2), grid.x[0]), grid.x[-1])
    if x2 < x1:
        raise GridError(f"empty window ({r1}, {r2})")
    return x1, x2


def _windowed(grid: RadialGrid, cell_values: np.ndarray, r1: float, r2: float) -> float:
    cum = np.concatenate([[0.0], np.cumsum(cell_values)])
    x1, x2 = _window_x(grid, r1, r2)
    return float(np.interp(x2, grid.x, cum) - np.interp(x1, grid.x, cum))


def _nodes_to_cells(grid: RadialGrid, node_density: np.ndarray) -> np.ndarray:
    """Split node densities (per unit x) onto the adjacent half cells."""
    return 0.5 * grid.hc * (node_density[:-1] + node_density[1:])


def _check_samples(grid: RadialGrid, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.n,):
        raise GridError(f"sampled function has shape {f.shape}, grid has {grid.n} nodes")
    return f


def integrate(grid: RadialGrid, f, r1: float = 0.0, r2: float = math.inf) -> float:
    """Quadrature of int f(r) r dr over (r1, r2); trapezoid in x."""
    f = _check_samples(grid, f)
    F = f * grid.r**2
    return _windowed(grid, 0.5 * grid.hc * (F[:-1] + F[1:]), r1, r2)


def inner(grid: RadialGrid, phi, psi) -> float:
    """<phi | psi> = int phi psi r dr over the whole grid."""
    phi = _check_samples(grid, phi)
    psi = _check_samples(grid, psi)
    return float(np.dot(phi * psi, grid.weights))


def _gradient_cells(grid: RadialGrid, u: np.ndarray) -> np.ndarray:
    du = grid.dplus @ u
    curv = grid.curvature_coef * (grid.d2 @ u) ** 2
    return du**2 * grid.hc + _nodes_to_cells(grid, curv)


def energy(profile: RadialProfile, r1: float = 0.0, r2: float = math.inf) -> EnergyReport:
    """E(u; r1, r2) = 2 pi int 1/2 (u_r^2 + k^2 sin^2 u / r^2) r dr."""
    grid, u, k = profile.grid, profile.u, profile.k
    kin = math.pi * _windowed(grid, _gradient_cells(grid, u), r1, r2)
    pot_density = 0.5 * k * k * np.sin(u) ** 2
    pot = 2 * math.pi * _windowed(grid, _nodes_to_cells(grid, pot_density), r1, r2)
    x1, x2 = _window_x(grid, r1, r2)
    return EnergyReport(kin + pot, (math.exp(x1), math.exp(x2)), kin, pot)


def energy_cumulative(profile: RadialProfile) -> np.ndarray:
    """E(u; r_min, r_i) at every node."""
    grid, u, k = profile.grid, profile.u, profile.k
    cells = math.pi * _gradient_cells(grid, u)
    cells = cells + 2 * math.pi * _nodes_to_cells(grid, 0.5 * k * k * np.sin(u) ** 2)
    return np.concatenate([[0.0], np.cumsum(cells)])


def energy_norm_sq(grid: RadialGrid, g, k: int, r1: float = 0.0, r2: float = math.inf) -> float:
    """||g||_E(r1, r2)^2 = int (g_r^2 + k^2 g^2 / r^2) r dr (no 2 pi, no sine)."""
    g = _check_samples(grid, g)
    cells = _gradient_cells(grid, g) + _nodes_to_cells(grid, k * k * g * g)
    return max(_windowed(grid, cells, r1, r2), 0.0)


def energy_norm(grid: RadialGrid, g, k: int, r1: float = 0.0, r2: float = math.inf) -> float:
    return math.sqrt(energy_norm_sq(grid, g, k, r1, r2))


def energy_gradient(profile: RadialProfile) -> np.ndarray:
    """Exact gradient of E_h / (2 pi) with respect to the node values."""
    grid, u, k = profile.grid, profile.u, profile.k
    return grid.stiffness @ u + 0.5 * k * k * np.sin(2 * u) * grid.hn


def tension(profile: RadialProfile) -> np.ndarray:
    """T(u) = u_rr + u_r / r - k^2 sin(2u) / (2 r^2).

    Interior nodes use the negative weighted gradient of the discrete energy,
    so <T(u) | phi> = -(1/2pi) dE_h(u + s phi)/ds exactly for phi vanishing
    at the ends.  The two end nodes use one-sided stencils.
    """
    grid, u, k = profile.grid, profile.u, profile.k
    if grid.n < 3:
        raise GridError("tension needs at least 3 nodes")
    t = -energy_gradient(profile) / grid.weights
    for i in (0, grid.n - 1):
        uxx = (grid.ddx2[i] @ u).item()
        t[i] = (uxx - 0.5 * k * k * math.sin(2 * u[i])) / grid.r[i] ** 2
    return t


def tension_l2(profile: RadialProfile) -> float:
    """||T(u)||_{L^2} over interior nodes (the nodes the flow moves)."""
    t = tension(profile)
    return math.sqrt(float(np.dot(t[1:-1] ** 2, profile.grid.weights[1:-1])))


def sector_of(u, tol: float = SECTOR_TOL):
    """Nearest (ell, m) at the two ends, or None when either end is ambiguous."""
    u = np.asarray(u, dtype=float)
    out = []
    for v in (u[0], u[-1]):
        j = round(v / math.pi)
        if abs(v - j * math.pi) >= tol:
            return None
        out.append(int(j))
    return tuple(out)


def resample(profile: RadialProfile, new_grid: RadialGrid) -> RadialProfile:
    """Monotone cubic interpolation in x; constant ell*pi, m*pi outside the old domain."""
    old = profile.grid
    if new_grid.r_max <= old.r_min or new_grid.r_min >= old.r_max:
        raise GridError("new grid does not overlap the profile's domain")
    if new_grid is old or (new_grid.n == old.n and np.array_equal(new_grid.r, old.r)):
        return RadialProfile(new_grid, profile.u, profile.sector, profile.k, dict(profile.meta))
    ell, m = profile.sector
    xn = new_grid.x
    u = PchipInterpolator(old.x, profile.u, extrapolate=False)(xn)
    u = np.where(xn < old.x[0], ell * math.pi, u)
    u = np.where(xn > old.x[-1], m * math.pi, u)
    return RadialProfile(new_grid, u, profile.sector, profile.k, dict(profile.meta))


def constant_profile(grid: RadialGrid, m: int, k: int = 1) -> RadialProfile:
    return RadialProfile(grid, np.full(grid.n, m * math.pi), (m, m), k)


def write_profile(profile: RadialProfile, path, **meta) -> None:
    """Plain-text profile: '# key: value' header lines, then 'r u' rows at 17 digits."""
    ell, m = profile.sector
    header = {"k": profile.k, "ell": ell, "m": m, "n": profile.grid.n, **profile.meta, **meta}
    lines = [f"# {key}: {val}" for key, val in header.items()]
    body = np.column_stack([profile.grid.r, profile.u])
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, body, fmt="%.16e")


class ProfileFormatError(ValueError):
    pass


def read_profile(path) -> RadialProfile:
    header, rows = {}, []
    with open(path, "rb") as fh:
        raw = fh.read()
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.decode("ascii", errors="replace").strip()
        if text.startswith("#"):
            key, _, val = text[1:].partition(":")
            header[key.strip()] = val.strip()
        elif text:
            parts = text.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise ProfileFormatError(f"{path}: bad row at byte offset {offset}") from None
        offset += len(line)
    try:
        k, ell, m, n = (int(header[key]) for key in ("k", "ell", "m", "n"))
    except (KeyError, ValueError):
        raise ProfileFormatError(f"{path}: header missing k/ell/m/n") from None
    if len(rows) != n:
        raise ProfileFormatError(f"{path}: expected {n} rows, found {len(rows)} (byte offset {offset})")
    arr = np.array(rows)
    meta = {key: val for key, val in header.items() if key not in ("k", "ell", "m", "n")}
    return RadialProfile(RadialGrid(arr[:, 0]), arr[:, 1], (ell, m), k, meta)
