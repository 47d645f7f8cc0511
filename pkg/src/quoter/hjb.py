"""Explicit finite-difference solvers for the transformed Bellman equation.

With ``u = -exp(-gamma x) exp(-gamma theta(s, q, t))`` the value function of
the quoting problem reduces to a system of parabolic PDEs in (s, t), one per
inventory level, coupled through neighbouring q rows:

    theta_t + sigma^2/2 theta_ss - gamma sigma^2/2 theta_s^2
        + H_b(r_b) + H_a(r_a) = 0,          theta(s, q, T) = q s,

where ``r_b = theta(q+1) - theta(q)``, ``r_a = theta(q) - theta(q-1)`` and
``H`` is the maximised fill term. At the unconstrained optimum each side
contributes ``A/(kappa+gamma) exp(-kappa delta*)``.

Expanding theta in powers of q gives three linear problems whose solutions
are ``2A/(kappa+gamma) (T-t)``, ``s`` and ``-gamma sigma^2 (T-t)``;
``solve_theta_k`` integrates them numerically so the closed forms can be
checked.

The scheme is forward Euler backwards in time with central differences in s.
The s-boundary nodes are filled by linear extrapolation (zero second
derivative). At the inventory bounds the side that would leave the range is
dropped.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CFLViolation, GridTooSmall, InvalidConfig, NonFiniteField, OutOfGrid
from .model import ModelParams, Quote, _make_quote

CFL_LIMIT = 0.5
REACTION_LIMIT = 0.5
EPS = float(np.finfo(float).eps)

SOLVER_NOTES = (
    "diffusion term taken as sigma^2/2 theta_ss (printed sigma^2 gamma/2 theta_ss^2 is a typo)",
    "fill term taken as A/(kappa+gamma) per side (printed 2A/(kappa+gamma) is a typo)",
    "s-boundary: linear extrapolation (theta_ss = 0)",
    "q-boundary: the side leaving [q_min, q_max] is dropped",
)


@dataclass(frozen=True)
class Grid:
    """Uniform (s, t) mesh plus the inventory range.

    ``n_s`` counts interior price nodes; the two boundary nodes are extra, so
    ``h = (s_max - s_min) / (n_s + 1)``.
    """

    s_min: float
    s_max: float
    n_s: int
    n_t: int
    q_min: int = -5
    q_max: int = 5

    def __post_init__(self):
        if not self.s_max > self.s_min:
            raise GridTooSmall(f"need s_max > s_min, got [{self.s_min}, {self.s_max}]")
        if self.n_s < 3:
            raise GridTooSmall(f"need at least 3 interior price nodes, got {self.n_s}")
        if self.n_t < 1:
            raise GridTooSmall(f"need at least one time step, got {self.n_t}")
        if not self.q_min < 0 < self.q_max:
            raise GridTooSmall(f"need q_min < 0 < q_max, got [{self.q_min}, {self.q_max}]")

    @property
    def h(self) -> float:
        return (self.s_max - self.s_min) / (self.n_s + 1)

    @property
    def n_q(self) -> int:
        return self.q_max - self.q_min + 1

    def s_nodes(self) -> np.ndarray:
        return self.s_min + self.h * np.arange(self.n_s + 2)

    def t_nodes(self, horizon_t: float) -> np.ndarray:
        return horizon_t * np.arange(self.n_t + 1) / self.n_t

    def q_nodes(self) -> np.ndarray:
        return np.arange(self.q_min, self.q_max + 1)

    def dt(self, horizon_t: float) -> float:
        return horizon_t / self.n_t

    def cfl_ratio(self, params: ModelParams) -> float:
        return params.sigma**2 * self.dt(params.horizon_t) / self.h**2

    def with_n_t(self, n_t: int) -> "Grid":
        return Grid(self.s_min, self.s_max, self.n_s, n_t, self.q_min, self.q_max)

    @classmethod
    def for_params(
        cls, params: ModelParams, s_min: float, s_max: float, n_s: int,
        q_min: int = -5, q_max: int = 5, coupled: bool = True,
    ) -> "Grid":
        """Grid with the smallest n_t that passes the stability checks."""
        g = cls(s_min, s_max, n_s, 1, q_min, q_max)
        return g.with_n_t(required_n_t(params, g, coupled=coupled))


def reaction_ratio(params: ModelParams, grid: Grid) -> float:
    """Largest explicit-step factor of the inventory coupling.

    Each side's fill term has derivative at most ``kappa A/(kappa+gamma)`` in
    theta(q) when offsets are clamped at zero.
    """
    rate = params.kappa * params.big_a / (params.kappa + params.gamma)
    return 2.0 * rate * grid.dt(params.horizon_t)


def required_n_t(params: ModelParams, grid: Grid, coupled: bool = True) -> int:
    n_t = max(1, math.ceil(params.sigma**2 * params.horizon_t / (CFL_LIMIT * grid.h**2)))
    if coupled and params.big_a > 0:
        rate = params.kappa * params.big_a / (params.kappa + params.gamma)
        n_t = max(n_t, math.ceil(2.0 * rate * params.horizon_t / REACTION_LIMIT))
    # ceil of a rounded quotient can land one short
    while True:
        g = grid.with_n_t(n_t)
        if g.cfl_ratio(params) <= CFL_LIMIT and (
            not coupled or reaction_ratio(params, g) <= REACTION_LIMIT
        ):
            return n_t
        n_t += 1


def _check_stability(params: ModelParams, grid: Grid, coupled: bool) -> tuple[float, float]:
    cfl = grid.cfl_ratio(params)
    react = reaction_ratio(params, grid) if coupled else 0.0
    if cfl > CFL_LIMIT or react > REACTION_LIMIT:
        need = required_n_t(params, grid, coupled=coupled)
        raise CFLViolation(
            f"unstable explicit step: sigma^2 dt/h^2 = {cfl:.6g} (limit {CFL_LIMIT}), "
            f"fill coupling ratio = {react:.6g} (limit {REACTION_LIMIT}); "
            f"need n_t >= {need}",
            required_n_t=need,
        )
    return cfl, react


@dataclass(frozen=True)
class SolveReport:
    sup_error_vs_closed_form: Optional[float]
    steps: int
    cfl_ratio: float
    reaction_ratio: float
    wall_time: float
    clamp_events: int = 0
    roundoff_allowance: Optional[float] = None
    notes: tuple = SOLVER_NOTES


def roundoff_allowance(exact: np.ndarray, n_t: int) -> float:
    """Loose bound on accumulated rounding: 16 eps max|theta| per step."""
    return 16.0 * EPS * float(np.max(np.abs(exact))) * (n_t + 1)


def _extrapolate_edges(v: np.ndarray) -> None:
    v[..., 0] = 2.0 * v[..., 1] - v[..., 2]
    v[..., -1] = 2.0 * v[..., -2] - v[..., -3]


def _d1(v: np.ndarray, h: float) -> np.ndarray:
    return (v[..., 2:] - v[..., :-2]) / (2.0 * h)


def _d2(v: np.ndarray, h: float) -> np.ndarray:
    return (v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2]) / h**2


def theta_closed_form(params: ModelParams, k: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Order-k expansion coefficient on the (t, s) mesh."""
    tau = params.horizon_t - np.asarray(t)[:, None]
    s = np.asarray(s)[None, :]
    if k == 0:
        return 2.0 * params.big_a / (params.kappa + params.gamma) * tau + 0.0 * s
    if k == 1:
        return s + 0.0 * tau
    if k == 2:
        return -params.gamma * params.sigma**2 * tau + 0.0 * s
    raise ValueError(f"order k must be 0, 1 or 2, got {k!r}")


def frozen_theta(params: ModelParams, q, s, t):
    """theta of the no-fill model: q s - gamma sigma^2 q^2 (T-t) / 2."""
    return q * s - 0.5 * params.gamma * params.sigma**2 * q**2 * (params.horizon_t - t)


def solve_theta_k(
    params: ModelParams, grid: Grid, k: int, closed_form_lower: bool = True,
) -> tuple[np.ndarray, SolveReport]:
    """Solve the order-k linear problem of the expansion in q.

    Returns the field as an array indexed ``[time index, price index]`` and a
    report whose sup error is measured against the closed form.

    The lower-order coefficients enter only through their s-derivatives. With
    ``closed_form_lower`` they are taken from the closed forms (0 and 1);
    otherwise the lower orders are solved on the same grid first.
    """
    if k not in (0, 1, 2):
        raise ValueError(f"order k must be 0, 1 or 2, got {k!r}")
    cfl, _ = _check_stability(params, grid, coupled=False)
    start = time.perf_counter()
    T, g, sig2 = params.horizon_t, params.gamma, params.sigma**2
    s = grid.s_nodes()
    t = grid.t_nodes(T)
    dt, h = grid.dt(T), grid.h

    lower0 = lower1 = None
    if k >= 1 and not closed_form_lower:
        lower0, _ = solve_theta_k(params, grid, 0, closed_form_lower=True)
    if k == 2 and not closed_form_lower:
        lower1, _ = solve_theta_k(params, grid, 1, closed_form_lower=False)

    def d_lower(field, n, slope):
        if field is None:
            return slope
        return _d1(field[n], h)

    out = np.empty((grid.n_t + 1, grid.n_s + 2))
    out[-1] = s if k == 1 else 0.0
    source0 = 2.0 * params.big_a / (params.kappa + g)
    for n in range(grid.n_t, 0, -1):
        cur = out[n]
        d1, d2 = _d1(cur, h), _d2(cur, h)
        rhs = 0.5 * sig2 * d2
        if k == 0:
            rhs = rhs - 0.5 * g * sig2 * d1**2 + source0
        elif k == 1:
            rhs = rhs - g * sig2 * d_lower(lower0, n, 0.0) * d1
        else:
            rhs = (
                rhs
                - g * sig2 * d_lower(lower1, n, 1.0) ** 2
                - g * sig2 * d_lower(lower0, n, 0.0) * d1
            )
        nxt = out[n - 1]
        nxt[1:-1] = cur[1:-1] + dt * rhs
        _extrapolate_edges(nxt)

    exact = theta_closed_form(params, k, s, t)
    err = float(np.max(np.abs(out - exact)))
    report = SolveReport(
        sup_error_vs_closed_form=err,
        roundoff_allowance=roundoff_allowance(exact, grid.n_t),
        steps=grid.n_t,
        cfl_ratio=cfl,
        reaction_ratio=0.0,
        wall_time=time.perf_counter() - start,
        notes=SOLVER_NOTES[0:1] + SOLVER_NOTES[2:3],
    )
    return out, report


@dataclass(frozen=True)
class ThetaField:
    """Solution theta(s, q, t) on a grid; ``values[q - q_min, n, j]``."""

    values: np.ndarray
    grid: Grid
    params: ModelParams
    clamp: bool = True

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def s(self) -> np.ndarray:
        return self.grid.s_nodes()

    @property
    def t(self) -> np.ndarray:
        return self.grid.t_nodes(self.params.horizon_t)

    def row(self, q: int) -> np.ndarray:
        return self.values[q - self.grid.q_min]

    def interpolate(self, q, s, t: float) -> np.ndarray:
        """Bilinear interpolation in (s, t) of theta at integer inventories q.

        ``q`` and ``s`` broadcast together; the caller guarantees they are on
        the grid.
        """
        g = self.grid
        q = np.asarray(q)
        s = np.asarray(s, dtype=float)
        x = (s - g.s_min) / g.h
        j = np.clip(np.floor(x).astype(int), 0, g.n_s)
        ws = x - j
        y = t / self.grid.dt(self.params.horizon_t)
        n = min(max(int(math.floor(y)), 0), g.n_t - 1)
        wt = y - n
        iq = q - g.q_min
        v = self.values
        lo = (1.0 - ws) * v[iq, n, j] + ws * v[iq, n, j + 1]
        hi = (1.0 - ws) * v[iq, n + 1, j] + ws * v[iq, n + 1, j + 1]
        return (1.0 - wt) * lo + wt * hi

    def frozen_closed_form(self) -> np.ndarray:
        q = self.grid.q_nodes()[:, None, None]
        s = self.s[None, None, :]
        t = self.t[None, :, None]
        return frozen_theta(self.params, q, s, t)

    def frozen_error(self) -> float:
        """Sup distance to the no-fill closed form (meaningful when A = 0)."""
        return float(np.max(np.abs(self.values - self.frozen_closed_form())))

    def truncation_gap(self) -> float:
        """Sup distance between the q = 0 row and theta0 = 2A/(kappa+gamma)(T-t)."""
        closed = theta_closed_form(self.params, 0, self.s, self.t)
        return float(np.max(np.abs(self.row(0) - closed)))


def _fill_terms(params: ModelParams, s: np.ndarray, r: np.ndarray, side: str, clamp: bool):
    """Maximised fill term for one side and the count of clamped nodes.

    Unconstrained the optimum gives A/(kappa+gamma) exp(-kappa delta*). With
    clamping a negative delta* is replaced by 0 and the Hamiltonian
    (A/gamma) exp(-kappa delta)(1 - exp(...)) is evaluated there instead.
    """
    g, kap, big_a = params.gamma, params.kappa, params.big_a
    c = params.log_term
    if side == "bid":
        delta = (s - r) + c
        at_zero = -np.expm1(g * (s - r))
    else:
        delta = (r - s) + c
        at_zero = -np.expm1(g * (r - s))
    term = big_a / (kap + g) * np.exp(-kap * delta)
    if not clamp:
        return term, 0
    neg = delta < 0
    n_clamped = int(np.count_nonzero(neg))
    if n_clamped:
        term = np.where(neg, big_a / g * at_zero, term)
    return term, n_clamped


def solve_full_hjb(
    params: ModelParams, grid: Grid, clamp: bool = True,
) -> tuple[ThetaField, SolveReport]:
    """Backward explicit solve of the coupled nonlinear system for theta(s, q, t)."""
    if grid.q_max - grid.q_min < 2:
        raise GridTooSmall("need q_max - q_min >= 2")
    cfl, react = _check_stability(params, grid, coupled=True)
    start = time.perf_counter()
    T, g, sig2 = params.horizon_t, params.gamma, params.sigma**2
    h, dt = grid.h, grid.dt(T)
    s = grid.s_nodes()
    s_in = s[1:-1]
    qs = grid.q_nodes().astype(float)

    values = np.empty((grid.n_q, grid.n_t + 1, grid.n_s + 2))
    values[:, -1, :] = qs[:, None] * s[None, :]
    clamp_events = 0
    for n in range(grid.n_t, 0, -1):
        cur = values[:, n, :]
        inner = cur[:, 1:-1]
        d1 = _d1(cur, h)
        rhs = 0.5 * sig2 * _d2(cur, h) - 0.5 * g * sig2 * d1**2
        if params.big_a > 0:
            # rows 0..n_q-2 can buy (q+1 exists); rows 1..n_q-1 can sell
            bid, nb = _fill_terms(params, s_in, inner[1:] - inner[:-1], "bid", clamp)
            ask, na = _fill_terms(params, s_in, inner[1:] - inner[:-1], "ask", clamp)
            rhs[:-1] += bid
            rhs[1:] += ask
            clamp_events += nb + na
        nxt = values[:, n - 1, :]
        nxt[:, 1:-1] = inner + dt * rhs
        _extrapolate_edges(nxt)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteField(f"non-finite theta after step {grid.n_t - n + 1}", step=grid.n_t - n + 1)

    fld = ThetaField(values=values, grid=grid, params=params, clamp=clamp)
    err = allow = None
    if params.big_a == 0:
        err = fld.frozen_error()
        allow = roundoff_allowance(fld.frozen_closed_form(), grid.n_t)
    report = SolveReport(
        sup_error_vs_closed_form=err,
        roundoff_allowance=allow,
        steps=grid.n_t,
        cfl_ratio=cfl,
        reaction_ratio=react,
        wall_time=time.perf_counter() - start,
        clamp_events=clamp_events,
    )
    return fld, report


def extract_quotes(fld: ThetaField, s: float, q: int, t: float) -> Quote:
    """Optimal quotes implied by a solved field at (s, q, t)."""
    g = fld.grid
    if not (g.s_min <= s <= g.s_max):
        raise OutOfGrid(f"s={s!r} outside [{g.s_min}, {g.s_max}]")
    if not (0.0 <= t <= fld.params.horizon_t):
        raise OutOfGrid(f"t={t!r} outside [0, {fld.params.horizon_t}]")
    if not (g.q_min < q < g.q_max):
        raise OutOfGrid(f"q={q!r} needs both neighbours inside ({g.q_min}, {g.q_max})")
    lo, mid, hi = (float(v) for v in fld.interpolate(np.array([q - 1, q, q + 1]), s, t))
    c = fld.params.log_term
    return _make_quote(s, (s - (hi - mid)) + c, ((mid - lo) - s) + c, fld.clamp)


def quotes_array(fld: ThetaField, s: np.ndarray, q: np.ndarray, t: float):
    """Vectorised raw offsets for the simulator.

    Returns ``(delta_b, delta_a, inside)``. A side whose neighbour inventory
    is off the grid gets an infinite offset (order withdrawn). ``inside`` is
    False where s or q is off the grid; offsets there are NaN.
    """
    g = fld.grid
    s = np.asarray(s, dtype=float)
    q = np.asarray(q)
    inside = (s >= g.s_min) & (s <= g.s_max) & (q >= g.q_min) & (q <= g.q_max)
    s_c = np.where(inside, s, g.s_min)
    q_c = np.where(inside, q, 0)
    mid = fld.interpolate(q_c, s_c, t)
    up = fld.interpolate(np.minimum(q_c + 1, g.q_max), s_c, t)
    dn = fld.interpolate(np.maximum(q_c - 1, g.q_min), s_c, t)
    c = fld.params.log_term
    delta_b = np.where(q_c < g.q_max, (s_c - (up - mid)) + c, np.inf)
    delta_a = np.where(q_c > g.q_min, ((mid - dn) - s_c) + c, np.inf)
    delta_b = np.where(inside, delta_b, np.nan)
    delta_a = np.where(inside, delta_a, np.nan)
    return delta_b, delta_a, inside


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)

    COLUMNS = ("err_theta0", "err_theta1", "err_theta2", "err_full_frozen")

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def non_increasing(self, name: str, strict: bool = False) -> bool:
        """Errors never grow from one level to the next.

        Unless ``strict``, growth within the next level's round-off allowance
        is ignored: these schemes are exact on the closed forms, so what is
        left is rounding, which accumulates with the step count.
        """
        for a, b in zip(self.rows, self.rows[1:]):
            slack = 0.0 if strict else b[f"allow_{name}"]
            if b[name] > a[name] + slack:
                return False
        return True

    def orders(self, name: str) -> list:
        """Observed orders log(e_i/e_{i+1}) / log(h_i/h_{i+1}); None where undefined."""
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            ea, eb = a[name], b[name]
            if ea > 0 and eb > 0:
                out.append(math.log(ea / eb) / math.log(a["h"] / b["h"]))
            else:
                out.append(None)
        return out


def refine(grid: Grid, level: int) -> Grid:
    """Level-l grid: n_s multiplied by 2^l, same window and q range."""
    return Grid(grid.s_min, grid.s_max, grid.n_s * 2**level, grid.n_t, grid.q_min, grid.q_max)


def convergence_study(params: ModelParams, base_grid: Grid, levels: int) -> ConvergenceTable:
    """Sup errors of the linear solves and of the no-fill full solve per level.

    Each level doubles ``n_s`` and picks the smallest stable ``n_t``, so the
    time step shrinks like h^2.
    """
    if levels < 2:
        raise InvalidConfig(f"convergence study needs levels >= 2, got {levels}")
    frozen = params.replace(big_a=0.0)
    table = ConvergenceTable()
    for level in range(levels):
        g = refine(base_grid, level)
        g = g.with_n_t(required_n_t(params, g, coupled=False))
        row = {"level": level, "n_s": g.n_s, "n_t": g.n_t, "h": g.h, "dt": g.dt(params.horizon_t)}
        for k in (0, 1, 2):
            _, rep = solve_theta_k(params, g, k)
            row[f"err_theta{k}"] = rep.sup_error_vs_closed_form
            row[f"allow_err_theta{k}"] = rep.roundoff_allowance
        _, rep = solve_full_hjb(frozen, g)
        row["err_full_frozen"] = rep.sup_error_vs_closed_form
        row["allow_err_full_frozen"] = rep.roundoff_allowance
        table.rows.append(row)
    return table


def write_field_csv(fld: ThetaField, path, t_stride: int = 1) -> Path:
    """Dump ``s,q,t,theta`` rows, every ``t_stride``-th time level plus T."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s, t = fld.s, fld.t
    idx = list(range(0, len(t), max(1, t_stride)))
    if idx[-1] != len(t) - 1:
        idx.append(len(t) - 1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "q", "t", "theta"])
        for q in fld.grid.q_nodes():
            row = fld.row(int(q))
            for n in idx:
                for j in range(len(s)):
                    w.writerow([f"{s[j]:.9g}", int(q), f"{t[n]:.9g}", f"{row[n, j]:.9g}"])
    return path
