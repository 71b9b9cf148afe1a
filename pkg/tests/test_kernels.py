"""The numba and numpy kernel paths must agree exactly."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evil_lab import _kernels as K

needs_numba = pytest.mark.skipif(not K.USING_NUMBA, reason="numba path not active")


@needs_numba
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 30))
def test_count_nonpositive_paths_agree(seed, n, m):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, (n, m), dtype=np.uint8)
    signs = np.where(rng.random((n, m)) < 0.6, 1, -1).astype(np.int8)
    assert K._nb_count(bits, signs) == K.np_count_nonpositive(bits, signs)


@needs_numba
@given(st.integers(0, 2**31), st.integers(1, 20), st.integers(1, 40))
def test_budget_fill_paths_agree_including_ties(seed, n, m):
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 3, (n, m)).astype(np.float64)  # many ties
    budget = rng.integers(0, m + 1, n).astype(np.int64)
    a = K.np_budget_fill(keys, budget)
    b = K._nb_fill(keys, budget)
    assert np.array_equal(a, b)
    assert np.array_equal(a.sum(axis=1), budget)


@given(st.lists(st.integers(0, 1), max_size=60))
def test_rle_round_trip(bits):
    bits = np.array(bits, dtype=np.uint8)
    runs = K.rle_encode(bits)
    assert np.array_equal(runs, K.np_rle_encode(bits))
    first = int(bits[0]) if bits.size else 0
    assert np.array_equal(K.rle_decode(first, runs, bits.size), bits)


@needs_numba
@given(st.integers(0, 2**31), st.booleans())
def test_adam_update_paths_agree(seed, use_active):
    rng = np.random.default_rng(seed)
    p, g, m = (rng.normal(size=50) for _ in range(3))
    v = np.abs(rng.normal(size=50))
    active = rng.random(50) < 0.5 if use_active else None
    args = (0.01, 0.9, 0.999, 0.1, 0.001, 1e-8)
    a = K.np_adam_update(p, g, m, v, active, *args)
    b = K.adam_update(p, g, m, v, active, *args)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-15, atol=0)


def test_env_flag_disables_jit():
    env = dict(os.environ, EVIL_LAB_JIT="0")
    out = subprocess.run([sys.executable, "-c", "from evil_lab import _kernels as K; print(K.USING_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
