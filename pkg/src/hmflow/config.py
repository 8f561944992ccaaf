"""Scenario configuration: a flat ``key = value`` text format with dotted namespaces.

Lines starting with ``#`` and blank lines are ignored.  Every key has a
documented default; :func:`render` writes all of them, and
``parse_config(render(c)) == c`` for every valid configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .bubbles import BubbleConfig, eval_Z, lambda_q_values, multi_bubble
from .flow import FlowControls
from .radial import RadialProfile, make_grid, read_profile, resample

PRESETS = ("single_bubble", "multi_bubble", "bubble_plus_bump", "file")


@dataclass(frozen=True)
class Diagnostic:
    line: int
    key: str
    reason: str

    def __str__(self):
        return f"line {self.line}: {self.key}: {self.reason}"


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split()) if text.strip() else ()


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split()) if text.strip() else ()


def _pairs(text: str) -> tuple:
    """'a:b, c:d' -> ((a, b), (c, d))."""
    out = []
    for item in text.replace(",", " ").split():
        lo, _, hi = item.partition(":")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a!r}:{b!r}" for a, b in value)
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


# key -> (attribute, parser)
_SCHEMA = {
    "k": ("k", int),
    "seed": ("seed", int),
    "sector.ell": ("ell", int),
    "sector.m": ("m", int),
    "initial.preset": ("preset", str),
    "initial.lambda": ("lam", float),
    "initial.iota": ("iota", int),
    "initial.iotas": ("iotas", _ints),
    "initial.lambdas": ("lambdas", _floats),
    "initial.bump_amplitude": ("bump_amplitude", float),
    "initial.bump_center": ("bump_center", float),
    "initial.bump_width": ("bump_width", float),
    "initial.bump_orthogonal": ("bump_orthogonal", _bool),
    "initial.noise": ("noise", float),
    "initial.path": ("path", str),
    "grid.r_min": ("r_min", float),
    "grid.r_max": ("r_max", float),
    "grid.n": ("n", int),
    "time.t_start": ("t_start", float),
    "time.t_end": ("t_end", float),
    "time.dt_init": ("dt_init", float),
    "time.tol": ("tol", float),
    "time.fixed_dt": ("fixed_dt", _bool),
    "time.checkpoint_dt": ("checkpoint_dt", float),
    "time.checkpoint_shrink": ("checkpoint_shrink", float),
    "time.max_steps": ("max_steps", int),
    "time.eps0": ("eps0", _opt_float),
    "time.stationary_tol": ("stationary_tol", _opt_float),
    "time.blowup_shrink": ("blowup_shrink", float),
    "analysis.track": ("track", _bool),
    "analysis.collisions": ("collisions", _bool),
    "analysis.eps": ("eps", float),
    "analysis.eta": ("eta", float),
    "analysis.virial": ("virial", _bool),
    "analysis.local_energy_cutoffs": ("cutoffs", _pairs),
}


@dataclass(frozen=True)
class ScenarioConfig:
    k: int = 1
    seed: int = 0
    ell: int = 0
    m: int = 1
    preset: str = "single_bubble"
    lam: float = 1.0
    iota: int = 1
    iotas: tuple = ()
    lambdas: tuple = ()
    bump_amplitude: float = 0.0
    bump_center: float = 1.0
    bump_width: float = 1.0
    bump_orthogonal: bool = False
    noise: float = 0.0
    path: str = ""
    r_min: float = 1e-6
    r_max: float = 1e6
    n: int = 4096
    t_start: float = 0.0
    t_end: float = 1.0
    dt_init: float = 1e-4
    tol: float = 1e-6
    fixed_dt: bool = False
    checkpoint_dt: float = 0.1
    checkpoint_shrink: float = 1.1
    max_steps: int = 200_000
    eps0: float | None = None
    stationary_tol: float | None = None
    blowup_shrink: float = 1e4
    track: bool = True
    collisions: bool = False
    eps: float = 0.06
    eta: float = 0.3
    virial: bool = True
    cutoffs: tuple = ()

    def bubble_config(self) -> BubbleConfig:
        if self.preset == "single_bubble" or (self.preset == "bubble_plus_bump" and not self.lambdas):
            return BubbleConfig(self.m, (self.iota,), (self.lam,), self.k)
        return BubbleConfig(self.m, self.iotas, self.lambdas, self.k)

    def controls(self) -> FlowControls:
        return FlowControls(
            t_end=self.t_end, t_start=self.t_start, dt_init=self.dt_init, tol=self.tol,
            fixed_dt=self.fixed_dt, checkpoint_dt=self.checkpoint_dt,
            checkpoint_shrink=self.checkpoint_shrink, max_steps=self.max_steps, eps0=self.eps0,
            stationary_tol=self.stationary_tol, blowup_shrink=self.blowup_shrink,
        )


_ATTR_TO_KEY = {attr: key for key, (attr, _) in _SCHEMA.items()}


def _validate(cfg: ScenarioConfig, lines: dict) -> list:
    out = []

    def bad(attr, reason):
        key = _ATTR_TO_KEY[attr]
        out.append(Diagnostic(lines.get(key, 0), key, reason))

    if cfg.k < 1:
        bad("k", "constraint k >= 1 violated")
    if cfg.preset not in PRESETS:
        bad("preset", f"unknown preset; expected one of {', '.join(PRESETS)}")
    if not 0 < cfg.r_min < cfg.r_max:
        bad("r_min", "need 0 < grid.r_min < grid.r_max")
    if cfg.n < 16:
        bad("n", "grid needs n >= 16")
    for attr in ("tol", "dt_init", "checkpoint_dt", "eps", "eta", "blowup_shrink", "bump_width"):
        if not getattr(cfg, attr) > 0:
            bad(attr, "must be positive")
    for attr in ("eps0", "stationary_tol"):
        v = getattr(cfg, attr)
        if v is not None and not v > 0:
            bad(attr, "must be positive or none")
    if cfg.noise < 0:
        bad("noise", "must be non-negative")
    if not 0 <= cfg.t_start < cfg.t_end:
        bad("t_end", "need 0 <= time.t_start < time.t_end")
    if cfg.checkpoint_shrink <= 1:
        bad("checkpoint_shrink", "must exceed 1")
    if cfg.max_steps < 1:
        bad("max_steps", "must be positive")
    if cfg.eps >= cfg.eta:
        bad("eps", "need analysis.eps < analysis.eta")
    for lo, hi in cfg.cutoffs:
        if not 0 < lo < hi:
            bad("cutoffs", f"cutoff {lo}:{hi} needs 0 < r_in < r_out")
    if cfg.preset == "file":
        if not cfg.path:
            bad("path", "preset 'file' needs initial.path")
        return out
    if cfg.preset == "single_bubble" or (cfg.preset == "bubble_plus_bump" and not cfg.lambdas):
        if cfg.iota not in (-1, 1):
            bad("iota", "sign must be +1 or -1")
        if not cfg.lam > 0:
            bad("lam", "scale must be positive")
        signs = (cfg.iota,)
    else:
        if len(cfg.iotas) != len(cfg.lambdas):
            bad("iotas", "initial.iotas and initial.lambdas need the same length")
        if any(i not in (-1, 1) for i in cfg.iotas):
            bad("iotas", "signs must be +1 or -1")
        if any(not v > 0 for v in cfg.lambdas) or any(b <= a for a, b in zip(cfg.lambdas, cfg.lambdas[1:])):
            bad("lambdas", "scales must be positive and strictly increasing")
        signs = cfg.iotas
    if all(i in (-1, 1) for i in signs) and cfg.ell != cfg.m - sum(signs):
        out.append(Diagnostic(lines.get("sector.ell", 0), "sector.ell",
                              f"sector ({cfg.ell}, {cfg.m}) violates ell = m - sum(iotas) "
                              f"= {cfg.m - sum(signs)} for the preset signs"))
    return out


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate; raises :class:`ConfigError` carrying every diagnostic."""
    values, lines, diags = {}, {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            diags.append(Diagnostic(lineno, key, "expected 'key = value'"))
            continue
        if key not in _SCHEMA:
            diags.append(Diagnostic(lineno, key, "unknown key"))
            continue
        if key in lines:
            diags.append(Diagnostic(lineno, key, f"duplicate key (first on line {lines[key]})"))
            continue
        attr, conv = _SCHEMA[key]
        try:
            values[attr] = conv(val)
        except ValueError as exc:
            diags.append(Diagnostic(lineno, key, f"bad value {val!r}: {exc}"))
            continue
        lines[key] = lineno
    if diags:
        raise ConfigError(diags)
    cfg = ScenarioConfig(**values)
    diags = _validate(cfg, lines)
    if diags:
        raise ConfigError(diags)
    return cfg


def render(cfg: ScenarioConfig) -> str:
    by_attr = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    return "".join(f"{key} = {_fmt(by_attr[attr])}\n" for key, (attr, _) in _SCHEMA.items())


def with_overrides(cfg: ScenarioConfig, overrides: dict) -> ScenarioConfig:
    """Re-parse with some keys replaced (values given as text)."""
    text = render(cfg)
    lines = []
    for line in text.splitlines():
        key = line.partition("=")[0].strip()
        lines.append(f"{key} = {overrides[key]}" if key in overrides else line)
    unknown = [k for k in overrides if k not in _SCHEMA]
    if unknown:
        raise ConfigError([Diagnostic(0, k, "unknown key") for k in unknown])
    return parse_config("\n".join(lines) + "\n")


def _bump(cfg: ScenarioConfig, r: np.ndarray) -> np.ndarray:
    return np.exp(-(np.log(r / cfg.bump_center) / cfg.bump_width) ** 2)


def initial_profile(cfg: ScenarioConfig) -> RadialProfile:
    """Build the initial data described by a configuration."""
    grid = make_grid(cfg.r_min, cfg.r_max, cfg.n)
    if cfg.preset == "file":
        prof = read_profile(cfg.path)
        prof = resample(prof, grid) if prof.grid.n != grid.n or not np.array_equal(prof.grid.r, grid.r) else prof
        u = prof.u.copy()
        sector, k = prof.sector, prof.k
    else:
        bc = cfg.bubble_config()
        u = multi_bubble(bc, grid).u.copy()
        sector, k = (bc.ell, bc.m), cfg.k
        if cfg.preset == "bubble_plus_bump" and cfg.bump_amplitude:
            phi = _bump(cfg, grid.r)
            if cfg.bump_orthogonal and bc.M:
                Z = np.column_stack([eval_Z(lam, k, grid) * grid.weights for lam in bc.lambdas])
                L = np.column_stack([lambda_q_values(grid.r, lam, k) for lam in bc.lambdas])
                coef = np.linalg.solve(Z.T @ L, Z.T @ phi)
                phi = phi - L @ coef
            u += cfg.bump_amplitude * phi
    if cfg.noise:
        rng = np.random.default_rng(cfg.seed)
        x = grid.x
        for _ in range(4):
            c = rng.uniform(x[0] + 3, x[-1] - 3)
            w = rng.uniform(0.5, 2.0)
            u += cfg.noise * rng.standard_normal() * np.exp(-((x - c) / w) ** 2)
    return RadialProfile(grid, u, sector, k, {"preset": cfg.preset})
