"""Inventory-aware bid/ask quoting: closed forms, a Bellman solver, a Monte
Carlo simulator and independent numerical oracles."""

from .errors import (
    BracketMiss, CFLViolation, DivergentHorizon, GridTooSmall, InvalidConfig,
    InvalidParams, InvalidTime, NegativeOffset, NonFiniteField,
    NonpositiveLogArgument, OutOfGrid, QuoterError, ValueOverflow,
)
from .model import (
    MarketState, ModelParams, Quote, ReservationPair, ThetaCoeffs,
    asymptotic_reservation, frozen_value, indifference_mid, intensity,
    optimal_offsets, optimal_spread, reservation_prices, stationary_reservation,
    stationary_value, theta_coeffs,
)
from .hjb import Grid, SolveReport, ThetaField, convergence_study, solve_full_hjb, solve_theta_k
from .sim import (
    AsymptoticInventory, FrozenReservation, GridPolicy, PathConfig, Symmetric,
    estimate_utility, simulate_batch, simulate_path,
)

__version__ = "0.1.0"
