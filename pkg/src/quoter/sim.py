"""Monte Carlo simulator for a quoting agent.

The mid-price follows ``S <- S + sigma sqrt(dt) Z``. Each step the strategy
posts offsets from the step-start state. Each side then fills at most once,
independently, at the quoted price. Every path draws from its own Philox
substream keyed by ``(seed, path index)``, so path i gives the same result
whether it runs alone, in a batch, or on any thread.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import hjb
from ._parallel import ordered_map
from .errors import InvalidConfig, ValueOverflow
from .model import ModelParams, asymptotic_offsets_array, optimal_spread

BLOCK = 512
FILL_RULES = ("linear", "exponential")


# -- strategies ---------------------------------------------------------------


class Strategy:
    """Quoting policy: raw ``(delta_b, delta_a)`` arrays for a batch of states."""

    name = "strategy"

    def offsets(self, params: ModelParams, s: np.ndarray, q: np.ndarray, t: float):
        raise NotImplementedError


@dataclass(frozen=True)
class AsymptoticInventory(Strategy):
    """Closed-form asymptotic quotes: centre s - gamma sigma^2 (T-t) q."""

    name = "asymptotic"

    def offsets(self, params, s, q, t):
        return asymptotic_offsets_array(params, q, t)


@dataclass(frozen=True)
class Symmetric(Strategy):
    half_spread: float = 0.0
    name = "symmetric"

    def __post_init__(self):
        if not self.half_spread >= 0:
            raise InvalidConfig(f"symmetric half-spread must be >= 0, got {self.half_spread!r}")

    def offsets(self, params, s, q, t):
        d = np.full(np.shape(q), float(self.half_spread))
        return d, d.copy()


@dataclass(frozen=True)
class FrozenReservation(Strategy):
    """First-order-condition quotes around the no-trading reservation prices."""

    name = "frozen"

    def offsets(self, params, s, q, t):
        half_var = 0.5 * params.gamma * params.sigma**2 * (params.horizon_t - t)
        q = np.asarray(q, dtype=float)
        r_a = s + (1 - 2 * q) * half_var
        r_b = s + (-1 - 2 * q) * half_var
        c = params.log_term
        return (s - r_b) + c, (r_a - s) + c


@dataclass(frozen=True)
class GridPolicy(Strategy):
    """Quotes read off a solved Bellman field.

    Where the state leaves the grid the asymptotic quotes are used instead and
    the event is counted.
    """

    field: hjb.ThetaField
    name = "grid"

    def offsets(self, params, s, q, t):
        db, da, inside = hjb.quotes_array(self.field, s, q, t)
        if not inside.all():
            fb, fa = asymptotic_offsets_array(params, q, t)
            db = np.where(inside, db, fb)
            da = np.where(inside, da, fa)
        return db, da, ~inside


def matched_symmetric(params: ModelParams, cfg: "PathConfig") -> Symmetric:
    """Symmetric baseline whose half-spread is the time-averaged asymptotic one."""
    n = cfg.n_steps(params.horizon_t)
    spreads = [optimal_spread(params, k * cfg.dt) for k in range(n)]
    return Symmetric(half_spread=0.5 * math.fsum(spreads) / n)


STRATEGY_NAMES = ("asymptotic", "symmetric", "frozen", "grid")


# -- configuration and results ------------------------------------------------


@dataclass(frozen=True)
class PathConfig:
    """Monte Carlo settings.

    ``fill_rule`` selects the per-step fill probability: ``"linear"`` uses
    ``min(lambda dt, 1)``, whose expected fill count equals the Poisson mean
    at constant intensity; ``"exponential"`` uses ``1 - exp(-lambda dt)``.
    """

    n_paths: int = 1000
    dt: float = 1e-3
    seed: int = 0
    s0: float = 100.0
    x0: float = 0.0
    q0: int = 0
    q_cap: Optional[int] = None
    clamp: bool = True
    fill_rule: str = "linear"

    def __post_init__(self):
        if self.n_paths < 1:
            raise InvalidConfig(f"n_paths must be >= 1, got {self.n_paths}")
        if not self.dt > 0:
            raise InvalidConfig(f"dt must be > 0, got {self.dt}")
        if self.q_cap is not None and self.q_cap < 1:
            raise InvalidConfig(f"q_cap must be >= 1, got {self.q_cap}")
        if self.q_cap is not None and abs(self.q0) > self.q_cap:
            raise InvalidConfig(f"|q0|={abs(self.q0)} exceeds q_cap={self.q_cap}")
        if self.fill_rule not in FILL_RULES:
            raise InvalidConfig(f"fill_rule must be one of {FILL_RULES}, got {self.fill_rule!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must fit in 64 bits, got {self.seed}")

    def n_steps(self, horizon_t: float) -> int:
        if self.dt > horizon_t:
            raise InvalidConfig(f"dt={self.dt} exceeds T={horizon_t}")
        n = round(horizon_t / self.dt)
        if abs(n * self.dt - horizon_t) > 1e-9 * horizon_t:
            raise InvalidConfig(f"T/dt = {horizon_t / self.dt!r} is not an integer")
        return n


@dataclass(frozen=True)
class PathResult:
    x_T: float
    q_T: int
    s_T: float
    pnl: float
    utility: float
    n_buys: int
    n_sells: int
    grid_escapes: int = 0


@dataclass(frozen=True)
class PathRecords:
    """Per-path outcomes of a batch, as parallel arrays ordered by path index."""

    x_T: np.ndarray
    q_T: np.ndarray
    s_T: np.ndarray
    pnl: np.ndarray
    utility: np.ndarray
    n_buys: np.ndarray
    n_sells: np.ndarray
    grid_escapes: np.ndarray

    def __len__(self):
        return len(self.x_T)

    def __getitem__(self, i: int) -> PathResult:
        return PathResult(
            float(self.x_T[i]), int(self.q_T[i]), float(self.s_T[i]), float(self.pnl[i]),
            float(self.utility[i]), int(self.n_buys[i]), int(self.n_sells[i]),
            int(self.grid_escapes[i]),
        )


@dataclass(frozen=True)
class SummaryStats:
    n_paths: int
    pnl_mean: float
    pnl_std: float
    pnl_se: float
    pnl_min: float
    pnl_max: float
    pnl_quantiles: tuple  # 5%, 25%, 50%, 75%, 95%
    q_mean: float
    q_std: float
    q_se: float
    utility_mean: float
    utility_se: float
    buys_mean: float
    buys_se: float
    sells_mean: float
    sells_se: float
    grid_escapes: int


QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


def _mean_std_se(x: np.ndarray) -> tuple[float, float, float]:
    x = np.asarray(x, dtype=float)
    n = len(x)
    mean = float(np.mean(x))
    if n < 2:
        return mean, 0.0, 0.0
    std = float(np.std(x, ddof=1))
    return mean, std, std / math.sqrt(n)


def summarize(rec: PathRecords) -> SummaryStats:
    pm, ps, pse = _mean_std_se(rec.pnl)
    qm, qs, qse = _mean_std_se(rec.q_T)
    with np.errstate(invalid="ignore", over="ignore"):
        um, _, use = _mean_std_se(rec.utility)
    bm, _, bse = _mean_std_se(rec.n_buys)
    sm, _, sse = _mean_std_se(rec.n_sells)
    quants = tuple(float(v) for v in np.quantile(rec.pnl, QUANTILE_LEVELS))
    return SummaryStats(
        n_paths=len(rec), pnl_mean=pm, pnl_std=ps, pnl_se=pse,
        pnl_min=float(np.min(rec.pnl)), pnl_max=float(np.max(rec.pnl)), pnl_quantiles=quants,
        q_mean=qm, q_std=qs, q_se=qse, utility_mean=um, utility_se=use,
        buys_mean=bm, buys_se=bse, sells_mean=sm, sells_se=sse,
        grid_escapes=int(np.sum(rec.grid_escapes)),
    )


# -- engine -------------------------------------------------------------------


def path_stream(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based generator for path ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _fill_probability(rate: np.ndarray, dt: float, rule: str) -> np.ndarray:
    if rule == "linear":
        return np.minimum(rate * dt, 1.0)
    return -np.expm1(-rate * dt)


@dataclass
class FillTrace:
    """Execution log of a single simulated path: fill prices and inventory per step."""

    bid_prices: list = field(default_factory=list)
    ask_prices: list = field(default_factory=list)
    inventory: list = field(default_factory=list)


def _run_block(params: ModelParams, strategy: Strategy, cfg: PathConfig,
               indices: Sequence[int], trace: Optional[FillTrace] = None) -> PathRecords:
    n_steps = cfg.n_steps(params.horizon_t)
    m = len(indices)
    z = np.empty((m, n_steps))
    u_b = np.empty((m, n_steps))
    u_a = np.empty((m, n_steps))
    for row, i in enumerate(indices):
        gen = path_stream(cfg.seed, i)
        z[row] = gen.standard_normal(n_steps)
        u_b[row] = gen.random(n_steps)
        u_a[row] = gen.random(n_steps)

    s = np.full(m, float(cfg.s0))
    x = np.full(m, float(cfg.x0))
    q = np.full(m, int(cfg.q0), dtype=np.int64)
    buys = np.zeros(m, dtype=np.int64)
    sells = np.zeros(m, dtype=np.int64)
    escapes = np.zeros(m, dtype=np.int64)
    vol = params.sigma * math.sqrt(cfg.dt)
    big_a, kappa = params.big_a, params.kappa

    for k in range(n_steps):
        t = k * cfg.dt
        out = strategy.offsets(params, s, q, t)
        d_b, d_a = np.asarray(out[0], dtype=float), np.asarray(out[1], dtype=float)
        if len(out) > 2:
            escapes += out[2]
        if cfg.clamp:
            d_b = np.maximum(d_b, 0.0)
            d_a = np.maximum(d_a, 0.0)
        if cfg.q_cap is not None:
            d_b = np.where(q >= cfg.q_cap, np.inf, d_b)
            d_a = np.where(q <= -cfg.q_cap, np.inf, d_a)
        p_b = _fill_probability(big_a * np.exp(-kappa * d_b), cfg.dt, cfg.fill_rule)
        p_a = _fill_probability(big_a * np.exp(-kappa * d_a), cfg.dt, cfg.fill_rule)
        fill_b = u_b[:, k] < p_b
        fill_a = u_a[:, k] < p_a
        bid_price = s - d_b
        ask_price = s + d_a
        x = np.where(fill_b, x - bid_price, x)
        x = np.where(fill_a, x + ask_price, x)
        q = q + fill_b - fill_a
        buys += fill_b
        sells += fill_a
        if trace is not None:
            trace.bid_prices.extend(bid_price[fill_b].tolist())
            trace.ask_prices.extend(ask_price[fill_a].tolist())
            trace.inventory.append(int(q[0]))
        s = s + vol * z[:, k]

    wealth = x + q * s
    with np.errstate(over="ignore"):
        utility = -np.exp(-params.gamma * wealth)
    return PathRecords(
        x_T=x, q_T=q, s_T=s, pnl=wealth - (cfg.x0 + cfg.q0 * cfg.s0), utility=utility,
        n_buys=buys, n_sells=sells, grid_escapes=escapes,
    )


def _check_strategy(params: ModelParams, strategy: Strategy, cfg: PathConfig) -> PathConfig:
    if isinstance(strategy, GridPolicy):
        if strategy.field.params != params:
            raise InvalidConfig("GridPolicy field was solved with different parameters")
        if cfg.q_cap is None:
            cfg = _replace(cfg, q_cap=strategy.field.grid.q_max)
    return cfg


def _replace(cfg: PathConfig, **changes) -> PathConfig:
    kw = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    kw.update(changes)
    return PathConfig(**kw)


def simulate_path(params: ModelParams, strategy: Strategy, cfg: PathConfig,
                  path_index: int = 0, trace: Optional[FillTrace] = None) -> PathResult:
    """Simulate one path from substream ``path_index`` of ``cfg.seed``."""
    cfg = _check_strategy(params, strategy, cfg)
    return _run_block(params, strategy, cfg, [path_index], trace=trace)[0]


def simulate_batch(params: ModelParams, strategy: Strategy,
                   cfg: PathConfig) -> tuple[SummaryStats, PathRecords]:
    cfg = _check_strategy(params, strategy, cfg)
    cfg.n_steps(params.horizon_t)
    blocks = [range(lo, min(lo + BLOCK, cfg.n_paths)) for lo in range(0, cfg.n_paths, BLOCK)]
    parts = ordered_map(lambda idx: _run_block(params, strategy, cfg, list(idx)), blocks)
    rec = PathRecords(**{
        name: np.concatenate([getattr(p, name) for p in parts])
        for name in PathRecords.__dataclass_fields__
    })
    return summarize(rec), rec


def estimate_utility(params: ModelParams, strategy: Strategy, cfg: PathConfig) -> tuple[float, float]:
    """Sample mean and standard error of the terminal CARA utility."""
    stats, rec = simulate_batch(params, strategy, cfg)
    if not np.all(np.isfinite(rec.utility)):
        raise ValueOverflow("terminal utility overflows; reduce gamma or the P&L range")
    return stats.utility_mean, stats.utility_se


def paired_comparison(rec_a: PathRecords, rec_b: PathRecords) -> dict:
    """Common-random-number comparison of two arms run on the same seed."""
    du = rec_a.utility - rec_b.utility
    dq = np.abs(rec_a.q_T) - np.abs(rec_b.q_T)
    u_mean, _, u_se = _mean_std_se(du)
    q_mean, _, q_se = _mean_std_se(dq)
    return {"utility_diff": u_mean, "utility_diff_se": u_se,
            "abs_q_diff": q_mean, "abs_q_diff_se": q_se}


# -- CSV ----------------------------------------------------------------------

PATH_HEADER = ["path", "x_T", "q_T", "s_T", "pnl", "utility", "n_buys", "n_sells"]
SUMMARY_HEADER = [
    "arm", "n_paths", "pnl_mean", "pnl_std", "pnl_se", "pnl_min", "pnl_q05", "pnl_q25",
    "pnl_q50", "pnl_q75", "pnl_q95", "pnl_max", "q_mean", "q_std", "q_se",
    "utility_mean", "utility_se", "buys_mean", "sells_mean", "grid_escapes",
]


def fmt(v) -> str:
    """Nine significant digits for floats, plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_paths_csv(rec: PathRecords, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATH_HEADER)
        for i in range(len(rec)):
            r = rec[i]
            w.writerow([i, fmt(r.x_T), r.q_T, fmt(r.s_T), fmt(r.pnl), fmt(r.utility),
                        r.n_buys, r.n_sells])
    return path


def summary_row(arm: str, st: SummaryStats) -> list:
    return [arm, st.n_paths, st.pnl_mean, st.pnl_std, st.pnl_se, st.pnl_min, *st.pnl_quantiles,
            st.pnl_max, st.q_mean, st.q_std, st.q_se, st.utility_mean, st.utility_se,
            st.buys_mean, st.sells_mean, st.grid_escapes]


def write_summary_csv(arms: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for arm, st in arms.items():
            w.writerow([fmt(v) for v in summary_row(arm, st)])
    return path
