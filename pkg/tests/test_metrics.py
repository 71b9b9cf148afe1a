import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evil_lab.errors import ContractError
from evil_lab.metrics import gradient_variance, gradient_variance_report, hvp, lanczos, lanczos_spectrum, sharpness


def quad(diag):
    d = np.asarray(diag, dtype=np.float64)
    return lambda th: d * th


def test_hvp_quadratic():
    hv = hvp(quad([2.0, 3.0]), np.array([0.3, -0.2]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(hv, [2.0, 0.0], atol=1e-6)


def test_hvp_zero_direction():
    with pytest.raises(ContractError):
        hvp(quad([1.0]), np.zeros(1), np.zeros(1))


def test_lanczos_recovers_diagonal_spectrum():
    diag = np.zeros(100)
    diag[:5] = [5, 4, 3, 2, 1]
    rep = lanczos_spectrum(quad(diag), np.zeros(100), k=5, iterations=30, seed=0)
    np.testing.assert_allclose(rep.eigenvalues, [5, 4, 3, 2, 1], atol=1e-6)
    assert rep.ratio == pytest.approx(5.0, abs=1e-3)


def test_lanczos_breakdown_flag():
    # rank-2 operator: the Krylov space is exhausted after three vectors
    _, _, broke = lanczos(lambda v: np.diag([2.0, 1.0, 0, 0, 0, 0]) @ v, 6, 6, seed=1)
    assert broke


def test_lanczos_needs_k_ge_5():
    with pytest.raises(ContractError):
        lanczos_spectrum(quad([1.0] * 10), np.zeros(10), k=3)


def test_gradient_variance_identical_domains_is_zero():
    g = np.arange(6.0)
    assert gradient_variance([g, g, g]) == 0.0


def test_gradient_variance_population_convention():
    # per-coordinate variance of (0, 2) is 1, of (1, 1) is 0
    assert gradient_variance([np.array([0.0, 1.0]), np.array([2.0, 1.0])], [0]) == 1.0
    rep = gradient_variance_report([np.array([0.0, 1.0]), np.array([2.0, 1.0])], np.array([1, 0]))
    assert (rep.v_inv, rep.v_var) == (1.0, 0.0)


def test_gradient_variance_needs_two_domains():
    with pytest.raises(ContractError):
        gradient_variance([np.zeros(3)])


def test_sharpness_quadratic():
    def lg(p):
        return float(0.5 * p["t"] @ p["t"]), {"t": p["t"].copy()}

    assert sharpness(lg, {"t": np.array([1.0])}, None, 0.1).sharpness == pytest.approx(0.105)


@given(st.integers(0, 2**31), st.integers(1, 8))
def test_sharpness_nonnegative_on_convex(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.random(n) + 0.1

    def lg(p):
        return float(0.5 * np.sum(a * p["t"] ** 2)), {"t": a * p["t"]}

    assert sharpness(lg, {"t": rng.normal(size=n)}, None, 0.01).sharpness >= 0
