"""Command-line entry point: simulate, analyze, verify and sweep.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 solver or I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checks import SUITES, run_suite
from .config import ConfigError, ScenarioConfig, initial_profile, parse_config, render, with_overrides
from .decomposition import (
    ModulationError,
    detect_collisions,
    extract_body_map,
    track_scales,
    write_analysis_csv,
)
from .flow import (
    FlowError,
    estimate_t_plus,
    exterior_cutoff,
    read_trajectory,
    run,
    verify_local_energy,
    write_trajectory,
)
from .radial import ProfileFormatError, energy, sector_of, write_profile

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2, 3

# ledger residual and energy increase are held to this fraction of E(u0)
LEDGER_REL_TOL = 1e-4
# consecutive T+ estimates within this relative change count as stable
T_PLUS_STABLE = 0.01


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class VerificationRow:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} value={self.value:.17g} tol={self.tolerance:.3g}"


@dataclass
class RunSummary:
    """Headline numbers copied verbatim from the files a run wrote."""

    status: str
    t_plus: str
    final_energy: str
    n_bubbles: str
    final_d: str
    interval_count: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = [f"status: {self.status}", f"t_plus: {self.t_plus}",
                 f"final_energy: {self.final_energy}", f"N: {self.n_bubbles}",
                 f"final_d: {self.final_d}", f"collision_intervals: {self.interval_count}",
                 "checks:"]
        lines += [f"  {c.line()}" for c in self.checks]
        return "\n".join(lines) + "\n"


# -- file helpers -------------------------------------------------------------

def _read_keyed(path) -> dict:
    out = {}
    if not os.path.exists(path):
        return out
    with open(path) as fh:
        for line in fh:
            if line.startswith(" ") or ":" not in line:
                continue
            key, _, val = line.partition(":")
            out[key.strip()] = val.strip()
    return out


def _last_csv_field(path, column: str) -> str:
    if not os.path.exists(path):
        return "none"
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1][column] if rows else "none"


def _csv_header_count(path, prefix: str) -> str:
    if not os.path.exists(path):
        return "none"
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return str(sum(1 for h in header if h.startswith(prefix)))


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CommandError(f"{path}: {exc.strerror}", EXIT_USAGE) from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise CommandError(f"{path}:\n{exc}", EXIT_USAGE) from None


# -- simulate -----------------------------------------------------------------

def _run_checks(cfg: ScenarioConfig, trajectory, ledger) -> list:
    E0 = ledger.rows[0].E
    bound = LEDGER_REL_TOL * abs(E0) if E0 else LEDGER_REL_TOL
    rows = [
        VerificationRow("energy_identity_residual", ledger.max_residual(), bound,
                        ledger.max_residual() <= bound),
        VerificationRow("energy_increase", max(ledger.max_increase(), 0.0), bound,
                        ledger.max_increase() <= bound),
    ]
    sectors = {sector_of(s.profile.u) for s in trajectory}
    rows.append(VerificationRow("sector_constant", float(len(sectors)), 1.0, len(sectors) == 1))
    for r_in, r_out in cfg.cutoffs:
        rep = verify_local_energy(trajectory, exterior_cutoff(r_in, r_out))
        rows.append(VerificationRow(f"local_energy_inequality[{r_in:g}:{r_out:g}]",
                                    rep.worst_violation, bound, rep.worst_violation <= bound))
    return rows


def simulate(cfg: ScenarioConfig, out_dir) -> RunSummary:
    """Integrate a scenario, write its trajectory directory and the run summary."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(render(cfg))
    except OSError as exc:
        raise CommandError(f"{out_dir}: {exc.strerror}", EXIT_FAILURE) from None
    try:
        initial = initial_profile(cfg)
    except (OSError, ProfileFormatError, ValueError) as exc:
        raise CommandError(f"initial data: {exc}", EXIT_FAILURE) from None
    try:
        trajectory, ledger, report = run(initial, cfg.controls())
    except FlowError as exc:
        raise CommandError(f"solver failure: {exc}", EXIT_FAILURE) from None
    try:
        write_trajectory(out_dir, trajectory, ledger, report, render(cfg))
    except OSError as exc:
        raise CommandError(f"{out_dir}: {exc.strerror}", EXIT_FAILURE) from None
    checks = _run_checks(cfg, trajectory, ledger)
    if cfg.track:
        analyze(out_dir, cfg)
    return _write_summary(out_dir, checks)


def _write_summary(out_dir, checks) -> RunSummary:
    term = _read_keyed(os.path.join(out_dir, "termination.txt"))
    analysis = os.path.join(out_dir, "analysis.csv")
    coll = _read_keyed(os.path.join(out_dir, "collisions.txt"))
    summary = RunSummary(
        status=term.get("status", "none"),
        t_plus=term.get("t_plus", "none"),
        final_energy=_last_csv_field(os.path.join(out_dir, "ledger.csv"), "E"),
        n_bubbles=_csv_header_count(analysis, "lambda_"),
        final_d=_last_csv_field(analysis, "d"),
        interval_count=coll.get("intervals", "none"),
        checks=checks,
    )
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(summary.to_text())
    return summary


# -- analyze ------------------------------------------------------------------

def _provisional_flags(times, history) -> list:
    """True where the running T+ estimate has not yet settled within T_PLUS_STABLE."""
    ht = np.array([h[0] for h in history])
    hr = np.array([h[1] for h in history])
    estimates = []
    for i in range(len(ht)):
        ok = np.isfinite(hr[: i + 1])
        estimates.append(estimate_t_plus(ht[: i + 1][ok], hr[: i + 1][ok], 3) if ok.sum() >= 3 else None)
    stable_from = math.inf
    for i in range(1, len(estimates)):
        a, b = estimates[i - 1], estimates[i]
        if a is not None and b is not None and abs(b - a) <= T_PLUS_STABLE * abs(b):
            stable_from = min(stable_from, ht[i])
        else:
            stable_from = math.inf
    return [t < stable_from for t in times]


def analyze(traj_dir, cfg: ScenarioConfig | None = None, eps: float | None = None,
            eta: float | None = None, collisions: bool | None = None):
    """Scale tracking, d(t), body map and collision intervals for a trajectory directory.

    Writes ``analysis.csv`` and ``collisions.txt`` (plus ``body_map.txt`` for
    blow-up runs); rerunning overwrites them with identical content.
    """
    if cfg is None:
        path = os.path.join(traj_dir, "config.txt")
        cfg = load_config(path) if os.path.exists(path) else ScenarioConfig()
    eps = cfg.eps if eps is None else eps
    eta = cfg.eta if eta is None else eta
    collisions = cfg.collisions if collisions is None else collisions
    if not 0 < eps < eta:
        raise CommandError("need 0 < eps < eta", EXIT_USAGE)
    try:
        trajectory, _, report = read_trajectory(traj_dir)
    except ProfileFormatError as exc:
        raise CommandError(f"corrupt checkpoint: {exc}", EXIT_FAILURE) from None
    except (OSError, KeyError, ValueError) as exc:
        raise CommandError(f"{traj_dir}: cannot read trajectory: {exc}", EXIT_FAILURE) from None
    status = report.status if report else "reached_t_end"
    t_plus = report.t_plus if report else None
    blowup = status == "blowup_detected" and t_plus is not None
    try:
        if blowup:
            u_star, m_delta = extract_body_map(trajectory, t_plus, status, eps0=report.eps0)
            write_profile(u_star, os.path.join(traj_dir, "body_map.txt"))
            states = [s for s in trajectory if s.t < t_plus]
        else:
            u_star, states = None, [s for s in trajectory if s.t > 0]
        if not states:
            raise CommandError("no checkpoints with a usable outer scale", EXIT_FAILURE)
        tracking = track_scales(states, u_star, None, t_plus if blowup else None)
    except (ModulationError, ValueError) as exc:
        raise CommandError(f"analysis failed: {exc}", EXIT_FAILURE) from None
    times = tracking.times()
    if blowup:
        for p, flag in zip(tracking.points, _provisional_flags(times, report.radius_history)):
            p.provisional = flag
    outer = np.sqrt(t_plus - times) if blowup else np.sqrt(times)
    K = None
    if collisions:
        rep = detect_collisions(times, tracking.d(), tracking.lambdas(), eps, eta,
                                [p.tension_l2 for p in tracking.points], outer, trajectory[0].profile.k)
        K = rep.K
        text = rep.to_text()
    else:
        text = f"eps: {eps:.17g}\neta: {eta:.17g}\nK: none\nintervals: 0\nenabled: false\n"
    write_analysis_csv(os.path.join(traj_dir, "analysis.csv"), tracking, K)
    with open(os.path.join(traj_dir, "collisions.txt"), "w") as fh:
        fh.write(text)
    return tracking, K


# -- sweep --------------------------------------------------------------------

def _parse_sets(items) -> list:
    """['a=1;2', 'b=x'] -> [{'a': '1', 'b': 'x'}, {'a': '2', 'b': 'x'}]."""
    axes = []
    for item in items:
        key, sep, vals = item.partition("=")
        if not sep or not vals:
            raise CommandError(f"--set expects key=v1;v2;..., got {item!r}", EXIT_USAGE)
        axes.append([(key.strip(), v.strip()) for v in vals.split(";")])
    return [dict(combo) for combo in itertools.product(*axes)]


def _sweep_one(args):
    text, out_dir = args
    try:
        summary = simulate(parse_config(text), out_dir)
        return out_dir, summary.status, EXIT_OK if summary.passed else EXIT_CHECK, ""
    except CommandError as exc:
        return out_dir, "failed", exc.code, str(exc)


def sweep(cfg: ScenarioConfig, out_dir, sets, workers: int = 1):
    """Run every combination of overrides, one directory per scenario, concurrently."""
    combos = _parse_sets(sets)
    jobs = []
    for i, overrides in enumerate(combos):
        try:
            variant = with_overrides(cfg, overrides)
        except ConfigError as exc:
            raise CommandError(f"sweep point {overrides}:\n{exc}", EXIT_USAGE) from None
        jobs.append((render(variant), os.path.join(out_dir, f"run_{i:03d}")))
    os.makedirs(out_dir, exist_ok=True)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    keys = sorted({k for c in combos for k in c})
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + keys + ["status", "exit_code", "message"])
        for combo, (path, status, code, msg) in zip(combos, results):
            w.writerow([os.path.basename(path)] + [combo.get(k, "") for k in keys] + [status, code, msg])
    return results


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmflow", description="Equivariant harmonic map heat flow toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate a scenario and write its trajectory directory")
    p.add_argument("config", help="scenario config file (key = value lines)")
    p.add_argument("out_dir", help="output directory")

    p = sub.add_parser("analyze", help="track scales, d(t) and collision intervals for a trajectory")
    p.add_argument("trajectory_dir")
    p.add_argument("--eps", type=float, default=None, help="lower collision threshold")
    p.add_argument("--eta", type=float, default=None, help="upper collision threshold")
    p.add_argument("--collisions", action=argparse.BooleanOptionalAction, default=None,
                   help="detect collision intervals (default: from config.txt)")

    p = sub.add_parser("verify", help="run quantitative checks on the bubble family")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--k", type=int, nargs="+", default=[1, 2, 3], help="equivariance classes")

    p = sub.add_parser("sweep", help="run a scenario over a grid of overrides")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=V1;V2",
                   help="override values to sweep (repeatable; combinations are crossed)")
    p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            summary = simulate(load_config(args.config), args.out_dir)
            sys.stdout.write(summary.to_text())
            return EXIT_OK if summary.passed else EXIT_CHECK
        if args.command == "analyze":
            tracking, K = analyze(args.trajectory_dir, eps=args.eps, eta=args.eta, collisions=args.collisions)
            print(f"checkpoints: {len(tracking.points)}  N: {tracking.N}  K: {'none' if K is None else K}  "
                  f"lost: {tracking.lost_count}")
            return EXIT_OK
        if args.command == "verify":
            if any(k < 1 for k in args.k):
                raise CommandError("--k values must be >= 1", EXIT_USAGE)
            rows = run_suite(args.suite, tuple(args.k))
            for row in rows:
                print(row.line())
            return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK
        if args.command == "sweep":
            if args.workers < 1:
                raise CommandError("--workers must be >= 1", EXIT_USAGE)
            results = sweep(load_config(args.config), args.out_dir, args.set, args.workers)
            for path, status, code, msg in results:
                print(f"{path}: {status} (exit {code}){' ' + msg if msg else ''}")
            return max((r[2] for r in results), default=EXIT_OK)
    except CommandError as exc:
        print(f"hmflow {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
