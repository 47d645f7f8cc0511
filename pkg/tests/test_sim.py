import csv
import math

import numpy as np
import pytest

from quoter import hjb, model, sim
from quoter.errors import InvalidConfig
from quoter.model import MarketState, ModelParams

BASE = ModelParams(sigma=2.0, gamma=0.1, big_a=140.0, kappa=1.5, horizon_t=1.0)
FROZEN = BASE.replace(big_a=0.0)


def cfg(**kw):
    base = dict(n_paths=2000, dt=1e-3, seed=11)
    base.update(kw)
    return sim.PathConfig(**base)


# -- configuration ----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(n_paths=0), dict(dt=0.0), dict(q_cap=0),
                                dict(q0=5, q_cap=3), dict(fill_rule="poisson"), dict(seed=-1)])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        sim.PathConfig(**kw)


def test_step_count_must_divide_horizon():
    assert sim.PathConfig(dt=0.01).n_steps(1.0) == 100
    with pytest.raises(InvalidConfig):
        sim.PathConfig(dt=0.3).n_steps(1.0)


def test_symmetric_rejects_negative_half_spread():
    with pytest.raises(InvalidConfig):
        sim.Symmetric(half_spread=-0.1)


# -- degenerate dynamics ----------------------------------------------------------------


def test_zero_intensity_never_fills():
    stats, rec = sim.simulate_batch(FROZEN, sim.AsymptoticInventory(), cfg(n_paths=300, x0=5.0, q0=2))
    assert np.all(rec.x_T == 5.0)
    assert np.all(rec.q_T == 2)
    assert np.all(rec.n_buys == 0) and np.all(rec.n_sells == 0)
    assert stats.buys_mean == 0.0


def test_zero_intensity_flat_inventory_utility_is_deterministic():
    stats, rec = sim.simulate_batch(FROZEN, sim.Symmetric(0.5), cfg(n_paths=50, x0=3.0))
    assert np.all(rec.utility == -math.exp(-0.1 * 3.0))
    assert stats.utility_se == 0.0 and stats.pnl_std == 0.0


def test_frozen_utility_matches_closed_form():
    p = FROZEN
    mean, se = sim.estimate_utility(p, sim.AsymptoticInventory(), cfg(n_paths=10_000, q0=1))
    exact = model.frozen_value(p, MarketState(s=100.0, t=0.0, q=1, x=0.0))
    assert abs(mean - exact) <= 3 * se


# -- determinism ----------------------------------------------------------------------


def test_batch_is_deterministic_and_path_consistent(monkeypatch):
    c = cfg(n_paths=700)
    monkeypatch.setenv("QUOTER_THREADS", "4")
    _, a = sim.simulate_batch(BASE, sim.AsymptoticInventory(), c)
    monkeypatch.setenv("QUOTER_THREADS", "1")
    _, b = sim.simulate_batch(BASE, sim.AsymptoticInventory(), c)
    for name in sim.PathRecords.__dataclass_fields__:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    one = sim.simulate_path(BASE, sim.AsymptoticInventory(), c, path_index=600)
    assert one == a[600]


def test_seed_changes_paths():
    _, a = sim.simulate_batch(BASE, sim.Symmetric(0.8), cfg(n_paths=20, seed=1))
    _, b = sim.simulate_batch(BASE, sim.Symmetric(0.8), cfg(n_paths=20, seed=2))
    assert not np.array_equal(a.s_T, b.s_T)


# -- accounting -----------------------------------------------------------------------


def test_cash_equals_trade_ledger():
    trace = sim.FillTrace()
    c = cfg(x0=10.0, q0=-1)
    res = sim.simulate_path(BASE, sim.AsymptoticInventory(), c, path_index=3, trace=trace)
    assert res.n_buys == len(trace.bid_prices) and res.n_sells == len(trace.ask_prices)
    cash = 10.0 - math.fsum(trace.bid_prices) + math.fsum(trace.ask_prices)
    assert res.x_T == pytest.approx(cash, abs=1e-9)
    assert res.q_T == -1 + res.n_buys - res.n_sells == trace.inventory[-1]
    assert res.pnl == pytest.approx(res.x_T + res.q_T * res.s_T - (10.0 - 100.0), abs=1e-9)


def test_inventory_cap_respected():
    trace = sim.FillTrace()
    sim.simulate_path(BASE, sim.Symmetric(0.0), cfg(q_cap=2), path_index=0, trace=trace)
    assert max(abs(v) for v in trace.inventory) <= 2
    _, rec = sim.simulate_batch(BASE, sim.Symmetric(0.0), cfg(n_paths=500, q_cap=2))
    assert np.all(np.abs(rec.q_T) <= 2)


def test_long_inventory_is_worked_down():
    _, rec = sim.simulate_batch(BASE, sim.AsymptoticInventory(), cfg(n_paths=200, q0=4))
    assert rec.n_sells.mean() > rec.n_buys.mean() + 2


# -- statistics ------------------------------------------------------------------------


def test_single_path_has_zero_spread_stats():
    stats, _ = sim.simulate_batch(BASE, sim.AsymptoticInventory(), cfg(n_paths=1))
    assert stats.pnl_std == 0.0 and stats.pnl_se == 0.0 and stats.n_paths == 1


def test_constant_intensity_fill_count():
    # zero offsets give a constant rate A on each side
    c = cfg(n_paths=10_000)
    stats, rec = sim.simulate_batch(BASE, sim.Symmetric(0.0), c)
    for mean, se in ((stats.buys_mean, stats.buys_se), (stats.sells_mean, stats.sells_se)):
        assert abs(mean - 140.0) <= 3 * se


def test_exponential_rule_has_first_order_bias():
    c = cfg(n_paths=3000, fill_rule="exponential")
    stats, _ = sim.simulate_batch(BASE, sim.Symmetric(0.0), c)
    expected = 1000 * -math.expm1(-0.14)
    assert abs(stats.buys_mean - expected) <= 4 * stats.buys_se
    assert stats.buys_mean < 135


def test_symmetric_inventory_centred():
    stats, _ = sim.simulate_batch(BASE, sim.Symmetric(0.7), cfg(n_paths=10_000))
    assert abs(stats.q_mean) <= 3 * stats.q_se


def test_inventory_strategy_reduces_inventory_risk():
    c = cfg(n_paths=4000)
    sym = sim.matched_symmetric(BASE, c)
    assert sym.half_spread == pytest.approx(
        0.5 * (BASE.gamma * BASE.sigma**2 * 0.5 + 2 * BASE.log_term), rel=1e-3)
    st_a, rec_a = sim.simulate_batch(BASE, sim.AsymptoticInventory(), c)
    st_s, rec_s = sim.simulate_batch(BASE, sym, c)
    assert st_a.q_std < st_s.q_std
    cmp = sim.paired_comparison(rec_a, rec_s)
    assert cmp["abs_q_diff"] + 3 * cmp["abs_q_diff_se"] < 0
    assert cmp["utility_diff"] >= -3 * cmp["utility_diff_se"]


def test_frozen_reservation_matches_asymptotic_quotes():
    q = np.arange(-5, 6)
    s = np.full(q.shape, 100.0)
    fb, fa = sim.FrozenReservation().offsets(BASE, s, q, 0.3)
    ab, aa = sim.AsymptoticInventory().offsets(BASE, s, q, 0.3)
    assert np.allclose(fb, ab, atol=1e-12) and np.allclose(fa, aa, atol=1e-12)


def test_grid_policy_runs_and_counts_escapes():
    g = hjb.Grid.for_params(BASE, 97, 103, 30, q_min=-6, q_max=6)
    fld, _ = hjb.solve_full_hjb(BASE, g)
    stats, rec = sim.simulate_batch(BASE, sim.GridPolicy(fld), cfg(n_paths=400))
    assert np.all(np.abs(rec.q_T) <= 6)
    assert stats.grid_escapes > 0


def test_grid_policy_rejects_foreign_field():
    g = hjb.Grid.for_params(FROZEN, 50, 150, 20)
    fld, _ = hjb.solve_full_hjb(FROZEN, g)
    with pytest.raises(InvalidConfig):
        sim.simulate_batch(BASE, sim.GridPolicy(fld), cfg(n_paths=2))


# -- CSV ---------------------------------------------------------------------------------


def test_csv_outputs(tmp_path):
    stats, rec = sim.simulate_batch(BASE, sim.AsymptoticInventory(), cfg(n_paths=5))
    p = sim.write_paths_csv(rec, tmp_path / "paths.csv")
    rows = list(csv.reader(p.open()))
    assert rows[0] == sim.PATH_HEADER and len(rows) == 6
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
    s = sim.write_summary_csv({"asymptotic": stats}, tmp_path / "summary.csv")
    rows = list(csv.reader(s.open()))
    assert rows[0] == sim.SUMMARY_HEADER and rows[1][0] == "asymptotic"
