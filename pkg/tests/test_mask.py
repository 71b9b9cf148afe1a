import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evil_lab import mask as M
from evil_lab.errors import ConfigError, ContractError, IngestionError


def cfg(**kw):
    return M.SparsityConfig(**{"r": 0.5, **kw})


def test_magnitude_init_oracle():
    m = M.init_by_weight_magnitude([0.9, -0.5, 0.1, 0.0], cfg())
    assert m.bits.tolist() == [1, 1, 0, 0]


def test_connection_sensitivity_oracle():
    m = M.init_by_connection_sensitivity([2.0, 1.0], [0.1, 0.5], cfg())
    assert m.bits.tolist() == [0, 1]


def test_fisher_needs_gradients():
    with pytest.raises(ContractError):
        M.init_mask("fisher", np.ones(4), cfg())


def test_unknown_strategy():
    with pytest.raises(ConfigError):
        M.init_mask("snip", np.ones(4), cfg())


def test_random_init_deterministic():
    a = M.init_random(np.ones(100), cfg(r=0.6), seed=3)
    b = M.init_random(np.ones(100), cfg(r=0.6), seed=3)
    assert a == b and a.kept == 40


def test_exchange_hand_trace():
    mask = M.Mask([1, 1, 0, 0])
    out = M.exchange(mask, [0.5, 0.1, 9.0, 9.0], [9.0, 9.0, 0.2, 0.9], 1)
    assert out.bits.tolist() == [1, 0, 1, 0]


def test_full_swap_is_complement():
    bits = np.array([1, 0, 1, 1, 0, 0], dtype=np.uint8)
    rng = np.random.default_rng(0)
    out = M.exchange(M.Mask(bits), rng.random(6), rng.random(6), 3)
    assert out.bits.tolist() == (1 - bits).tolist()


def test_exchange_ties_go_to_lower_index():
    out = M.exchange(M.Mask([1, 1, 1, 0, 0, 0]), np.zeros(6), np.zeros(6), 1)
    assert out.bits.tolist() == [0, 1, 1, 1, 0, 0]


def test_exchange_too_large():
    with pytest.raises(ContractError):
        M.exchange(M.Mask([1, 0, 0]), np.ones(3), np.ones(3), 2)


def test_anneal_endpoints():
    assert M.anneal_fraction(0, 0.2, 5000) == pytest.approx(0.2, abs=1e-12)
    assert M.anneal_fraction(5000, 0.2, 5000) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        M.anneal_fraction(5001, 0.2, 5000)


def test_exchange_count_floor():
    mask = M.Mask([1] * 10 + [0] * 10)
    # S(0) = alpha, k = floor(10 * 0.25)
    assert M.exchange_count(mask, 0, cfg(alpha=0.25, t_total=100, t_pre=0)) == 2


def test_exchange_count_capped_by_pruned_side():
    mask = M.Mask([1] * 9 + [0])
    assert M.exchange_count(mask, 0, cfg(alpha=0.9, t_total=100, t_pre=0)) == 1


@given(st.integers(0, 2**31), st.integers(2, 80), st.floats(0.05, 0.95), st.floats(0.0, 0.99),
       st.integers(0, 100))
def test_update_mask_preserves_cardinality_and_partition(seed, n, r, alpha, t):
    rng = np.random.default_rng(seed)
    c = M.SparsityConfig(r=r, alpha=alpha, delta_t=1, t_total=100, t_pre=0)
    mask = M.init_random(np.zeros(n), c, seed=seed)
    out = M.update_mask(mask, rng.normal(size=n), rng.normal(size=n), t, c)
    assert out.kept == mask.kept
    inv, var = set(out.inv_indices()), set(out.var_indices())
    assert not inv & var and len(inv | var) == n


@given(st.integers(0, 2**31), st.integers(2, 50))
def test_apply_and_variant_view_split_theta(seed, n):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=n)
    mask = M.init_random(theta, cfg(), seed=seed)
    assert np.array_equal(M.apply_to_params(mask, theta) + M.variant_view(mask, theta), theta)


def test_config_validation():
    with pytest.raises(ConfigError, match=r"\(0, 1\)"):
        M.SparsityConfig(r=1.5)
    with pytest.raises(ConfigError):
        M.SparsityConfig(t_pre=5000, t_total=5000)


def test_mask_is_immutable():
    m = M.Mask([1, 0])
    with pytest.raises(AttributeError):
        m.bits = None
    with pytest.raises(ValueError):
        m.bits[0] = 0


@given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
def test_serialization_round_trip(bits):
    layers = (("w0", 0, len(bits)),)
    m = M.Mask(bits, layers)
    assert M.mask_from_bytes(M.mask_to_bytes(m)) == m


def test_serialization_errors_name_offset():
    blob = M.mask_to_bytes(M.Mask([1, 0, 1, 1]))
    with pytest.raises(IngestionError, match="magic"):
        M.mask_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(IngestionError, match="offset"):
        M.mask_from_bytes(blob[:-3])


def test_keep_count_clamps():
    assert M.keep_count(10, 0.99) == 1
    assert M.keep_count(10, 0.0001) == 9
    assert math.isclose(M.init_by_weight_magnitude(np.arange(1.0, 11.0), cfg(r=0.6)).sparsity, 0.6)
