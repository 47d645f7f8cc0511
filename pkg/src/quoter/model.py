"""Closed-form analytics for the exponential-utility market maker.

Mid-price is a driftless Brownian motion ``dS = sigma dW``, fills arrive at
rate ``A exp(-kappa delta)`` and the agent maximises ``E[-exp(-gamma W_T)]``.
Everything here is a pure function of its arguments.

Conventions: ``delta_b = s - p_b`` and ``delta_a = p_a - s``; ``tau = T - t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DivergentHorizon,
    InvalidParams,
    InvalidTime,
    NegativeOffset,
    NonpositiveLogArgument,
    ValueOverflow,
)

_MAX_EXP = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class ModelParams:
    """Model parameters.

    Attributes:
        sigma: mid-price volatility per sqrt(time).
        gamma: CARA risk aversion (1/currency).
        big_a: fill intensity at zero offset (fills/time); 0 switches
            order flow off.
        kappa: exponential decay of the intensity in the offset (1/currency).
        horizon_t: terminal time T.
        discount_w: discount rate of the stationary utility; only the
            stationary operations need it.
    """

    sigma: float
    gamma: float
    big_a: float
    kappa: float
    horizon_t: float
    discount_w: Optional[float] = None

    def __post_init__(self):
        for name in ("sigma", "gamma", "big_a", "kappa", "horizon_t"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise InvalidParams(f"{name} must be a finite number, got {value!r}")
            # A = 0 is the no-fill (frozen inventory) model used as an oracle
            if value < 0 or (value == 0 and name != "big_a"):
                raise InvalidParams(f"{name} must be positive, got {value!r}")
        w = self.discount_w
        if w is not None and not (math.isfinite(w) and w > 0):
            raise InvalidParams(f"discount_w must be positive when given, got {w!r}")

    def replace(self, **changes) -> "ModelParams":
        fields = dict(
            sigma=self.sigma, gamma=self.gamma, big_a=self.big_a, kappa=self.kappa,
            horizon_t=self.horizon_t, discount_w=self.discount_w,
        )
        fields.update(changes)
        return ModelParams(**fields)

    @property
    def log_term(self) -> float:
        """(1/gamma) ln(1 + gamma/kappa), the per-side spread floor."""
        return math.log1p(self.gamma / self.kappa) / self.gamma


@dataclass(frozen=True)
class MarketState:
    s: float
    t: float
    q: int
    x: float = 0.0


@dataclass(frozen=True)
class Quote:
    delta_b: float
    delta_a: float
    p_b: float
    p_a: float
    clamped_b: bool = False
    clamped_a: bool = False

    @property
    def spread(self) -> float:
        return self.delta_a + self.delta_b


@dataclass(frozen=True)
class ReservationPair:
    r_a: float
    r_b: float

    @property
    def r_mid(self) -> float:
        return 0.5 * (self.r_a + self.r_b)


@dataclass(frozen=True)
class ThetaCoeffs:
    theta0: float
    theta1: float
    theta2: float


def _tau(params: ModelParams, t: float) -> float:
    if not (0.0 <= t <= params.horizon_t):
        raise InvalidTime(f"t={t!r} outside [0, {params.horizon_t}]")
    return params.horizon_t - t


def frozen_value(params: ModelParams, st: MarketState) -> float:
    """Expected terminal utility when the inventory is held to T without trading."""
    tau = _tau(params, st.t)
    g = params.gamma
    exponent = -g * st.x - g * st.q * st.s + 0.5 * g**2 * st.q**2 * params.sigma**2 * tau
    if exponent > _MAX_EXP:
        raise ValueOverflow(f"frozen value exponent {exponent:.6g} overflows double precision")
    return -math.exp(exponent)


def reservation_prices(params: ModelParams, st: MarketState) -> ReservationPair:
    """Indifference prices for selling (r_a) and buying (r_b) one share."""
    half_var = 0.5 * params.gamma * params.sigma**2 * _tau(params, st.t)
    return ReservationPair(
        r_a=st.s + (1 - 2 * st.q) * half_var,
        r_b=st.s + (-1 - 2 * st.q) * half_var,
    )


def _require_w(params: ModelParams) -> float:
    if params.discount_w is None:
        raise InvalidParams("discount_w is required for stationary operations")
    return params.discount_w


def _stationary_denominator(params: ModelParams, q: int) -> float:
    """2w - gamma^2 q^2 sigma^2; positive iff the discounted integral converges."""
    w = _require_w(params)
    denom = 2.0 * w - params.gamma**2 * q**2 * params.sigma**2
    if not denom > 0:
        raise DivergentHorizon(
            f"w={w!r} must exceed gamma^2 sigma^2 q^2 / 2 = "
            f"{0.5 * params.gamma**2 * params.sigma**2 * q**2:.9g} for q={q}"
        )
    return denom


def stationary_value(params: ModelParams, st: MarketState) -> float:
    """Discounted infinite-horizon utility of holding q shares forever."""
    denom = _stationary_denominator(params, st.q)
    g = params.gamma
    exponent = -g * st.x - g * st.q * st.s
    if exponent > _MAX_EXP:
        raise ValueOverflow(f"stationary value exponent {exponent:.6g} overflows")
    return -2.0 * math.exp(exponent) / denom


def stationary_reservation(params: ModelParams, s: float, q: int) -> ReservationPair:
    """Reservation prices that leave the stationary utility unchanged.

    r_b = s + (1/gamma) ln(1 + (-1-2q) g^2 s^2 / D_q) and
    r_a = s - (1/gamma) ln(1 + (2q-1) g^2 s^2 / D_q), with
    D_q = 2w - gamma^2 q^2 sigma^2. The ask is the exact solution of
    v(x + r_a, q-1) = v(x, q); writing it as s + (1/gamma) ln(1 + (1-2q)...)
    agrees only to first order in gamma^2 sigma^2 / D_q.
    """
    denom = _stationary_denominator(params, q)
    g, sig2 = params.gamma, params.sigma**2
    arg_a = 1.0 + (2 * q - 1) * g**2 * sig2 / denom
    arg_b = 1.0 + (-1 - 2 * q) * g**2 * sig2 / denom
    for side, arg, q_after in (("ask", arg_a, q - 1), ("bid", arg_b, q + 1)):
        if not arg > 0:
            raise NonpositiveLogArgument(
                f"{side} log argument {arg:.9g} <= 0: inventory {q_after} after the "
                f"trade violates w > gamma^2 sigma^2 q^2 / 2"
            )
    return ReservationPair(r_a=s - math.log(arg_a) / g, r_b=s + math.log(arg_b) / g)


def intensity(params: ModelParams, delta: float) -> float:
    if delta < 0:
        raise NegativeOffset(f"offset must be >= 0, got {delta!r}")
    return params.big_a * math.exp(-params.kappa * delta)


def theta_coeffs(params: ModelParams, s: float, t: float) -> ThetaCoeffs:
    tau = _tau(params, t)
    return ThetaCoeffs(
        theta0=2.0 * params.big_a / (params.kappa + params.gamma) * tau,
        theta1=s,
        theta2=-params.gamma * params.sigma**2 * tau,
    )


def asymptotic_reservation(params: ModelParams, st: MarketState) -> ReservationPair:
    """Reservation prices from the second-order expansion of theta in q."""
    c = theta_coeffs(params, st.s, st.t)
    return ReservationPair(
        r_a=c.theta1 + 0.5 * c.theta2 * (2 * st.q - 1),
        r_b=c.theta1 + 0.5 * c.theta2 * (2 * st.q + 1),
    )


def indifference_mid(params: ModelParams, st: MarketState) -> float:
    """Centre of the quotes, s - gamma sigma^2 (T - t) q."""
    c = theta_coeffs(params, st.s, st.t)
    return c.theta1 + c.theta2 * st.q


def optimal_spread(params: ModelParams, t: float) -> float:
    tau = _tau(params, t)
    return params.gamma * params.sigma**2 * tau + 2.0 * params.log_term


def _make_quote(s: float, delta_b: float, delta_a: float, clamp: bool) -> Quote:
    clamped_b = clamp and delta_b < 0
    clamped_a = clamp and delta_a < 0
    if clamped_b:
        delta_b = 0.0
    if clamped_a:
        delta_a = 0.0
    return Quote(
        delta_b=delta_b, delta_a=delta_a, p_b=s - delta_b, p_a=s + delta_a,
        clamped_b=clamped_b, clamped_a=clamped_a,
    )


def offsets_from_reservation(params: ModelParams, pair: ReservationPair, s: float) -> Quote:
    """First-order-condition offsets for exponential intensity; never clamped."""
    c = params.log_term
    return _make_quote(s, (s - pair.r_b) + c, (pair.r_a - s) + c, clamp=False)


def optimal_offsets(params: ModelParams, st: MarketState, clamp: bool = True) -> Quote:
    """Asymptotic optimal quotes.

    With ``clamp`` set, a negative offset is raised to zero and flagged, since
    quotes are only allowed on their own side of the mid.
    """
    raw = offsets_from_reservation(params, asymptotic_reservation(params, st), st.s)
    return _make_quote(st.s, raw.delta_b, raw.delta_a, clamp)


def asymptotic_offsets_array(params: ModelParams, q, t: float):
    """Vectorised raw (delta_b, delta_a) for arrays of inventories at time t."""
    tau = _tau(params, t)
    half = 0.5 * params.gamma * params.sigma**2 * tau
    q = np.asarray(q, dtype=float)
    c = params.log_term
    return half * (2 * q + 1) + c, half * (1 - 2 * q) + c
