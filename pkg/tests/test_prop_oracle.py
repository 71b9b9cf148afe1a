import math

import pytest

from evil_lab import prop_oracle as P
from evil_lab.errors import AcceptanceError, ConfigError


def small(**kw):
    return P.PropositionConfig(**{"trials": 20_000, "chunk": 5_000, **kw})


def test_common_bound_closed_form():
    c = P.PropositionConfig(m_var=200)
    # 2 exp(-2 (p^2 - 1)^2 M_var) at p = 0.9, from an independent high-precision evaluation
    assert P.analytic_bounds(c, "common", 0.9) == pytest.approx(1.07106956055863e-6, rel=1e-10)


def test_regularized_bound_closed_form():
    c = P.PropositionConfig(m_inv=10, m_var=90, q_e=0.5)
    gap = 0.5 * 10 / 90 * 0.8 - 1
    assert P.analytic_bounds(c, "regularized", 0.8) == 2 * math.exp(-2 * gap * gap * 90)


def test_bound_at_zero_agreement():
    assert P.analytic_bounds(P.PropositionConfig(m_var=50), "common", 0.0) == pytest.approx(2 * math.exp(-100))


def test_unknown_strategy():
    with pytest.raises(ConfigError):
        P.analytic_bounds(P.PropositionConfig(), "greedy", 0.5)


def test_common_rates():
    r = P.simulate_common_strategy(small(), 0.8)
    assert abs(r.inv_rate - 0.5) < 0.01 and abs(r.var_rate - 0.4) < 0.01
    assert r.inv_init_pvalue > 1e-3


def test_regularized_rates():
    r = P.simulate_domain_regularized(small(), 0.8)
    assert abs(r.inv_rate - 0.75) < 0.01
    # budget argument: q M_inv / (2 M_var)
    assert abs(r.var_rate - 0.5 * 10 / 180) < 0.005
    assert not r.budget_clamped


def test_budget_clamp_flag():
    c = small(m_inv=200, m_var=10, trials=1000, chunk=1000, q_e=0.5)
    assert c.regularized_var_rate > 1
    assert P.simulate_domain_regularized(c, 0.7).budget_clamped


def test_deterministic_and_chunk_keyed():
    a = P.simulate_common_strategy(small(), 0.7)
    b = P.simulate_common_strategy(small(), 0.7)
    assert a == b


def test_estimate_error_extremes():
    c = small()
    err, _, full, _ = P.estimate_error(0.0, 0.0, c, 0.9)
    assert err == 1.0 and full == 1.0
    err, _, full, _ = P.estimate_error(1.0, 1.0, c, 1.0)
    assert err == 0.0 and full == 0.0


def test_sweep_csv_and_direction():
    table = P.sweep_and_compare(small(p_grid=(0.6, 0.9)), check=False)
    lines = table.to_csv().splitlines()
    assert len(lines) == 5 and lines[0].startswith("strategy,p_e")


def test_sweep_raises_on_violation(monkeypatch):
    monkeypatch.setattr(P, "analytic_bounds", lambda *a: 1e-9)
    with pytest.raises(AcceptanceError, match="violation"):
        P.sweep_and_compare(small(p_grid=(0.9,)))


def test_config_validation():
    with pytest.raises(ConfigError):
        P.PropositionConfig(trials=10)
    with pytest.raises(ConfigError):
        P.PropositionConfig(p_grid=(1.5,))
