"""Command-line front end.

    quoter quotes   [--s S] [--q Q] [--t T] [--sweep-q=A..B]
    quoter solve    [--order K]
    quoter simulate [--arms a,b,...]
    quoter verify   [--perturb TARGET VALUE]
    quoter convergence

Every command takes ``--config PATH`` (``key = value`` lines with dotted
section prefixes), ``--set KEY=VALUE`` overrides, ``--out DIR`` and
``--seed N``. Without ``--config`` the packaged ``default.cfg`` is used.

Exit codes: 0 success, 2 configuration error, 3 solver stability error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import hjb, model, oracle, sim
from .errors import CFLViolation, NonFiniteField, QuoterError
from .model import MarketState, ModelParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNSTABLE = 3
EXIT_VERIFY = 4


class ConfigError(Exception):
    pass


def fmt(v) -> str:
    return sim.fmt(v)


# -- config parsing -----------------------------------------------------------


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_optional_int(raw: str) -> Optional[int]:
    return None if raw.lower() in ("none", "auto", "") else int(raw)


def _parse_optional_float(raw: str) -> Optional[float]:
    return None if raw.lower() in ("none", "") else float(raw)


def parse_range(raw: str, kind=float) -> tuple:
    """``"a..b"`` -> ``(a, b)``."""
    lo, sep, hi = raw.partition("..")
    if not sep:
        raise ValueError(f"expected a range like 1..5, got {raw!r}")
    return kind(lo), kind(hi)


def _parse_arms(raw: str) -> tuple:
    arms = tuple(a.strip() for a in raw.split(",") if a.strip())
    if not arms:
        raise ValueError("no strategy arms given")
    for a in arms:
        if a not in sim.STRATEGY_NAMES:
            raise ValueError(f"unknown arm {a!r}; choose from {', '.join(sim.STRATEGY_NAMES)}")
    if len(set(arms)) != len(arms):
        raise ValueError(f"duplicate arm in {raw!r}")
    return arms


def _parse_half_spread(raw: str):
    return "matched" if raw.lower() == "matched" else float(raw)


# key -> parser. Keys in MODEL_KEYS must be present when a config file is given.
SCHEMA = {
    "model.sigma": float, "model.gamma": float, "model.A": float,
    "model.kappa": float, "model.T": float, "model.w": _parse_optional_float,
    "state.s": float, "state.q": int, "state.t": float,
    "grid.s_min": float, "grid.s_max": float, "grid.n_s": int,
    "grid.n_t": _parse_optional_int, "grid.q_min": int, "grid.q_max": int,
    "grid.clamp": _parse_bool, "grid.t_stride": int,
    "sim.n_paths": int, "sim.dt": float, "sim.seed": int, "sim.s0": float,
    "sim.x0": float, "sim.q0": int, "sim.q_cap": _parse_optional_int,
    "sim.clamp": _parse_bool, "sim.fill_rule": str, "sim.arms": _parse_arms,
    "sim.half_spread": _parse_half_spread,
    "verify.n_draws": int, "verify.seed": int, "verify.fk_samples": int,
    "verify.gamma": parse_range, "verify.sigma": parse_range,
    "verify.kappa": parse_range, "verify.A": parse_range, "verify.tau": parse_range,
    "verify.q_abs_max": int, "verify.s": parse_range, "verify.x": parse_range,
    "convergence.n_s": int, "convergence.levels": int,
}
MODEL_KEYS = ("model.sigma", "model.gamma", "model.A", "model.kappa", "model.T")


def read_kv_lines(lines, source: str) -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def default_config_text() -> str:
    return resources.files("quoter").joinpath("default.cfg").read_text()


def load_raw_config(path: Optional[str], overrides=()) -> dict:
    """Merge packaged defaults, an optional file and ``KEY=VALUE`` overrides."""
    raw = read_kv_lines(default_config_text().splitlines(), "default.cfg")
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        user = read_kv_lines(text.splitlines(), str(path))
        missing = [k for k in MODEL_KEYS if k not in user]
        if missing:
            raise ConfigError(f"{path}: missing required key {missing[0]}")
        raw.update(user)
    raw.update(read_kv_lines(overrides, "--set"))
    return raw


def typed_config(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key}")
        try:
            out[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return out


@dataclass
class RunConfig:
    """Everything a command needs, validated before any computation."""

    params: ModelParams
    state: MarketState
    grid: hjb.Grid
    grid_auto_n_t: bool
    clamp_field: bool
    t_stride: int
    paths: sim.PathConfig
    arms: tuple
    half_spread: object
    box: oracle.SweepBox
    n_draws: int
    verify_seed: int
    fk_samples: int
    conv_n_s: int
    conv_levels: int
    out: Path = Path("out")
    verbosity: int = 0
    raw: dict = field(default_factory=dict)

    def solve_grid(self, coupled: bool = True) -> hjb.Grid:
        if self.grid_auto_n_t:
            return self.grid.with_n_t(hjb.required_n_t(self.params, self.grid, coupled=coupled))
        return self.grid


def build_run_config(cfg: dict, out=None, seed=None, verbosity: int = 0) -> RunConfig:
    """Validate every sub-config; module errors surface as ``QuoterError``."""
    params = ModelParams(
        sigma=cfg["model.sigma"], gamma=cfg["model.gamma"], big_a=cfg["model.A"],
        kappa=cfg["model.kappa"], horizon_t=cfg["model.T"], discount_w=cfg.get("model.w"),
    )
    state = MarketState(s=cfg["state.s"], t=cfg["state.t"], q=cfg["state.q"])
    n_t = cfg["grid.n_t"]
    grid = hjb.Grid(cfg["grid.s_min"], cfg["grid.s_max"], cfg["grid.n_s"], n_t or 1,
                    cfg["grid.q_min"], cfg["grid.q_max"])
    if cfg["grid.t_stride"] < 1:
        raise ConfigError("grid.t_stride must be >= 1")
    sim_seed = cfg["sim.seed"] if seed is None else seed
    paths = sim.PathConfig(
        n_paths=cfg["sim.n_paths"], dt=cfg["sim.dt"], seed=sim_seed, s0=cfg["sim.s0"],
        x0=cfg["sim.x0"], q0=cfg["sim.q0"], q_cap=cfg["sim.q_cap"], clamp=cfg["sim.clamp"],
        fill_rule=cfg["sim.fill_rule"],
    )
    paths.n_steps(params.horizon_t)
    half = cfg["sim.half_spread"]
    if half != "matched":
        sim.Symmetric(half_spread=half)
    box = oracle.SweepBox(
        gamma=cfg["verify.gamma"], sigma=cfg["verify.sigma"], kappa=cfg["verify.kappa"],
        big_a=cfg["verify.A"], tau=cfg["verify.tau"], q_abs_max=cfg["verify.q_abs_max"],
        s=cfg["verify.s"], x=cfg["verify.x"],
    )
    if cfg["verify.n_draws"] < 1:
        raise ConfigError("verify.n_draws must be >= 1")
    if cfg["verify.fk_samples"] < 2:
        raise ConfigError("verify.fk_samples must be >= 2")
    if cfg["convergence.levels"] < 2:
        raise ConfigError("convergence.levels must be >= 2")
    hjb.Grid(cfg["grid.s_min"], cfg["grid.s_max"], cfg["convergence.n_s"], 1,
             cfg["grid.q_min"], cfg["grid.q_max"])
    return RunConfig(
        params=params, state=state, grid=grid, grid_auto_n_t=n_t is None,
        clamp_field=cfg["grid.clamp"], t_stride=cfg["grid.t_stride"], paths=paths,
        arms=cfg["sim.arms"], half_spread=half, box=box, n_draws=cfg["verify.n_draws"],
        verify_seed=cfg["verify.seed"] if seed is None else seed,
        fk_samples=cfg["verify.fk_samples"], conv_n_s=cfg["convergence.n_s"],
        conv_levels=cfg["convergence.levels"], out=Path(out) if out else Path("out"),
        verbosity=verbosity, raw=cfg,
    )


# -- output helpers -------------------------------------------------------------


def print_table(header, rows, file=None):
    file = file or sys.stdout
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=file)


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# -- commands -------------------------------------------------------------------

QUOTE_HEADER = [
    "q", "s", "t", "r_b", "r_a", "r_mid", "asym_r_b", "asym_r_a",
    "delta_b_raw", "delta_a_raw", "delta_b", "delta_a", "p_b", "p_a", "spread",
]


def quote_row(params: ModelParams, st: MarketState) -> list:
    pair = model.reservation_prices(params, st)
    asym = model.asymptotic_reservation(params, st)
    raw = model.optimal_offsets(params, st, clamp=False)
    q = model.optimal_offsets(params, st, clamp=True)
    vals = [st.s, st.t, pair.r_b, pair.r_a, pair.r_mid, asym.r_b, asym.r_a,
            raw.delta_b, raw.delta_a, q.delta_b, q.delta_a, q.p_b, q.p_a,
            model.optimal_spread(params, st.t)]
    return [st.q] + [fmt(v) for v in vals]


def cmd_quotes(rc: RunConfig, sweep_q=None, write: bool = False) -> int:
    p, st = rc.params, rc.state
    if sweep_q is None:
        row = dict(zip(QUOTE_HEADER, quote_row(p, st)))
        print_table(["quantity", "value"], [[k, v] for k, v in row.items()])
        rows = [quote_row(p, st)]
    else:
        lo, hi = sweep_q
        if lo > hi:
            raise ConfigError(f"empty inventory sweep {lo}..{hi}")
        rows = [quote_row(p, MarketState(s=st.s, t=st.t, q=q)) for q in range(lo, hi + 1)]
        print_table(QUOTE_HEADER, rows)
    if write:
        path = write_csv(rc.out / "quotes.csv", QUOTE_HEADER, rows)
        print(f"wrote {path}")
    return EXIT_OK


def _print_report(rep: hjb.SolveReport, verbosity: int):
    err = rep.sup_error_vs_closed_form
    rows = [
        ["sup_error", "n/a (no closed form for A > 0)" if err is None else fmt(err)],
        ["steps", rep.steps],
        ["cfl_ratio", fmt(rep.cfl_ratio)],
        ["reaction_ratio", fmt(rep.reaction_ratio)],
        ["clamp_events", rep.clamp_events],
    ]
    if verbosity:
        rows.append(["wall_time_s", fmt(rep.wall_time)])
    print_table(["report", "value"], rows)
    if verbosity:
        for note in rep.notes:
            print(f"note: {note}")


def write_order_csv(values, grid: hjb.Grid, horizon_t: float, k: int, path: Path) -> Path:
    s, t = grid.s_nodes(), grid.t_nodes(horizon_t)
    rows = [[fmt(s[j]), k, fmt(t[n]), fmt(values[n, j])]
            for n in range(len(t)) for j in range(len(s))]
    return write_csv(path, ["s", "order", "t", "theta"], rows)


def cmd_solve(rc: RunConfig, order: Optional[int] = None) -> int:
    p = rc.params
    if order is None:
        g = rc.solve_grid(coupled=True)
        print(f"full Bellman solve: n_s={g.n_s} n_t={g.n_t} q in [{g.q_min}, {g.q_max}]")
        fld, rep = hjb.solve_full_hjb(p, g, clamp=rc.clamp_field)
        _print_report(rep, rc.verbosity)
        if p.big_a > 0:
            print(f"truncation_gap {fmt(fld.truncation_gap())}")
        path = hjb.write_field_csv(fld, rc.out / "field.csv", t_stride=rc.t_stride)
    else:
        if order not in (0, 1, 2):
            raise ConfigError(f"--order must be 0, 1 or 2, got {order}")
        g = rc.solve_grid(coupled=False)
        print(f"order-{order} linear solve: n_s={g.n_s} n_t={g.n_t}")
        vals, rep = hjb.solve_theta_k(p, g, order)
        _print_report(rep, rc.verbosity)
        path = write_order_csv(vals, g, p.horizon_t, order, rc.out / f"theta{order}.csv")
    print(f"wrote {path}")
    return EXIT_OK


def make_strategy(name: str, rc: RunConfig) -> sim.Strategy:
    if name == "asymptotic":
        return sim.AsymptoticInventory()
    if name == "symmetric":
        if rc.half_spread == "matched":
            return sim.matched_symmetric(rc.params, rc.paths)
        return sim.Symmetric(half_spread=rc.half_spread)
    if name == "frozen":
        return sim.FrozenReservation()
    if name == "grid":
        fld, _ = hjb.solve_full_hjb(rc.params, rc.solve_grid(coupled=True), clamp=rc.clamp_field)
        return sim.GridPolicy(fld)
    raise ConfigError(f"unknown arm {name!r}")


SUMMARY_VIEW = [
    ("pnl_mean", "pnl_mean"), ("pnl_std", "pnl_std"), ("q_mean", "q_mean"),
    ("q_std", "q_std"), ("utility_mean", "utility_mean"), ("buys", "buys_mean"),
    ("sells", "sells_mean"), ("escapes", "grid_escapes"),
]


def cmd_simulate(rc: RunConfig, arms=None) -> int:
    arms = arms or rc.arms
    strategies = {name: make_strategy(name, rc) for name in arms}
    results = {}
    for name, strat in strategies.items():
        stats, rec = sim.simulate_batch(rc.params, strat, rc.paths)
        results[name] = (stats, rec)
        sim.write_paths_csv(rec, rc.out / f"paths_{name}.csv")
    sim.write_summary_csv({k: v[0] for k, v in results.items()}, rc.out / "summary.csv")
    print(f"{rc.paths.n_paths} paths, dt={fmt(rc.paths.dt)}, seed={rc.paths.seed}")
    print_table(["arm"] + [h for h, _ in SUMMARY_VIEW],
                [[name] + [fmt(getattr(st, attr)) for _, attr in SUMMARY_VIEW]
                 for name, (st, _) in results.items()])
    if len(arms) > 1:
        base = arms[0]
        for other in arms[1:]:
            cmp = sim.paired_comparison(results[base][1], results[other][1])
            print(f"{base} - {other}: utility {fmt(cmp['utility_diff'])} "
                  f"(se {fmt(cmp['utility_diff_se'])}), |q_T| {fmt(cmp['abs_q_diff'])} "
                  f"(se {fmt(cmp['abs_q_diff_se'])})")
    print(f"wrote {rc.out / 'summary.csv'} and {len(arms)} path files")
    return EXIT_OK


def cmd_verify(rc: RunConfig, perturb=None) -> int:
    results = oracle.run_sweep(rc.box, rc.n_draws, rc.verify_seed, perturb=perturb,
                               fk_samples=rc.fk_samples)
    path = oracle.write_verify_csv(results, rc.out / "verify.csv")
    failed = [r for r in results if not r.report.passed]
    by_check = {}
    for r in results:
        n, bad, worst = by_check.get(r.check, (0, 0, 0.0))
        ratio = r.report.residual / r.report.tolerance if r.report.tolerance else 0.0
        by_check[r.check] = (n + 1, bad + (not r.report.passed), max(worst, ratio))
    print_table(["check", "runs", "failed", "worst residual/tol"],
                [[k, n, bad, fmt(w)] for k, (n, bad, w) in by_check.items()])
    print(f"wrote {path}")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed:", file=sys.stderr)
        for r in failed:
            print(f"  {r.check} [{r.params_hash}] residual={fmt(r.report.residual)} "
                  f"tol={fmt(r.report.tolerance)} {r.report.context}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_convergence(rc: RunConfig) -> int:
    base = hjb.Grid(rc.grid.s_min, rc.grid.s_max, rc.conv_n_s, 1, rc.grid.q_min, rc.grid.q_max)
    table = hjb.convergence_study(rc.params, base, rc.conv_levels)
    header = ["level", "n_s", "n_t", "h", "dt"]
    header += [c for c in hjb.ConvergenceTable.COLUMNS]
    header += [f"allow_{c}" for c in hjb.ConvergenceTable.COLUMNS]
    rows = [[r["level"], r["n_s"], r["n_t"]] + [fmt(r[h]) for h in header[3:]] for r in table.rows]
    print_table(header[:5 + len(hjb.ConvergenceTable.COLUMNS)],
                [row[:5 + len(hjb.ConvergenceTable.COLUMNS)] for row in rows])
    for c in hjb.ConvergenceTable.COLUMNS:
        ok = table.non_increasing(c)
        strict = table.non_increasing(c, strict=True)
        print(f"{c}: non-increasing {'yes' if ok else 'NO'} "
              f"(strict: {'yes' if strict else 'no'}), final {fmt(table.rows[-1][c])}")
    path = write_csv(rc.out / "convergence.csv", header, rows)
    print(f"wrote {path}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: packaged defaults)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--out", help="output directory for CSV files (default: out)")
    common.add_argument("--seed", type=int, help="overrides sim.seed and verify.seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="quoter", description="Inventory-aware quoting toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quotes", parents=[common], help="closed-form quotes for one state")
    q.add_argument("--s", type=float, help="mid-price")
    q.add_argument("--q", type=int, help="inventory")
    q.add_argument("--t", help="time, or T for the horizon")
    q.add_argument("--sweep-q", metavar="A..B",
                   help="one row per inventory level (write negatives as --sweep-q=-5..5)")

    s = sub.add_parser("solve", parents=[common], help="finite-difference Bellman solve")
    s.add_argument("--order", type=int, help="solve the order-k linear problem instead")

    m = sub.add_parser("simulate", parents=[common], help="Monte Carlo comparison of arms")
    m.add_argument("--arms", help=f"comma list from {', '.join(sim.STRATEGY_NAMES)}")

    v = sub.add_parser("verify", parents=[common], help="oracle sweep")
    v.add_argument("--perturb", nargs=2, metavar=("TARGET", "VALUE"),
                   help="inject a deliberate error, e.g. --perturb reservation 1e-6")

    sub.add_parser("convergence", parents=[common], help="grid refinement study")
    return ap


def _flag_overrides(args) -> list:
    out = []
    if args.command == "quotes":
        if args.s is not None:
            out.append(f"state.s = {args.s!r}")
        if args.q is not None:
            out.append(f"state.q = {args.q}")
    if args.command == "simulate" and args.arms:
        out.append(f"sim.arms = {args.arms}")
    return out


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set) + _flag_overrides(args)
        cfg = typed_config(load_raw_config(args.config, overrides))
        if args.command == "quotes" and args.t is not None:
            try:
                cfg["state.t"] = cfg["model.T"] if args.t.upper() == "T" else float(args.t)
            except ValueError:
                raise ConfigError(f"bad value for --t: {args.t!r}") from None
        rc = build_run_config(cfg, out=args.out, seed=args.seed, verbosity=args.verbose)

        if args.command == "quotes":
            sweep = None
            if args.sweep_q is not None:
                try:
                    sweep = parse_range(args.sweep_q, int)
                except ValueError as exc:
                    raise ConfigError(f"bad --sweep-q: {exc}") from None
            return cmd_quotes(rc, sweep, write=args.out is not None)
        if args.command == "solve":
            return cmd_solve(rc, args.order)
        if args.command == "simulate":
            return cmd_simulate(rc)
        if args.command == "verify":
            perturb = None
            if args.perturb:
                target, value = args.perturb
                if target != "reservation":
                    raise ConfigError(f"unknown perturbation target {target!r}")
                try:
                    perturb = {target: float(value)}
                except ValueError:
                    raise ConfigError(f"bad perturbation value {value!r}") from None
            return cmd_verify(rc, perturb)
        return cmd_convergence(rc)
    except (CFLViolation, NonFiniteField) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, CFLViolation):
            print(f"required n_t: {exc.required_n_t}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (ConfigError, QuoterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
