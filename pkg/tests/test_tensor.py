import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evil_lab import tensor as T
from evil_lab.errors import ContractError, DimensionError
from evil_lab.tensor import Tape, Tensor


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return out


def test_matmul_matches_hand_and_loop_oracle():
    a, b = [[1, 2], [3, 4]], [[1, 1], [1, 1]]
    got = T.matmul(a, b).data
    assert got.tolist() == [[3, 3], [7, 7]]
    assert got.tolist() == naive_matmul(a, b)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError, match=r"\(2, 3\) @ \(2, 2\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_tensor_is_read_only_and_does_not_lock_caller_array():
    src = np.arange(3.0)
    t = Tensor(src)
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    src[0] = 7.0  # caller keeps a writable array
    assert src[0] == 7.0


def test_cross_entropy_oracle():
    # independent high-precision value of -log(e^3 / (e + e^2 + e^3))
    loss = T.softmax_cross_entropy(np.array([[1.0, 2.0, 3.0]]), np.array([2]))
    assert loss.item() == pytest.approx(0.407605964444380304, abs=1e-12)


def test_cross_entropy_is_stable_for_large_logits():
    loss = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([1])).item()
    assert loss == pytest.approx(1000.0)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_gradient_of_non_scalar_rejected():
    with Tape() as tape:
        x = tape.watch(Tensor(np.ones(3)))
        y = T.mul(x, 2.0)
    with pytest.raises(ContractError, match="scalar"):
        tape.gradient(y, {"x": x})


def test_tape_consumed_once():
    with Tape() as tape:
        x = tape.watch(Tensor(2.0))
        y = T.square(x)
    assert tape.gradient(y, {"x": x})["x"] == pytest.approx(4.0)
    with pytest.raises(ContractError, match="consumed"):
        tape.gradient(y, {"x": x})


def test_fan_out_accumulates():
    with Tape() as tape:
        x = tape.watch(Tensor(3.0))
        y = T.add(T.mul(x, x), T.mul(x, 2.0))
    assert tape.gradient(y, {"x": x})["x"] == pytest.approx(8.0)


def test_unused_parameter_gets_zero_gradient():
    with Tape() as tape:
        x = tape.watch(Tensor(np.ones(2)))
        z = tape.watch(Tensor(np.ones(4)))
        y = T.sum(x)
    g = tape.gradient(y, {"x": x, "z": z})
    assert np.array_equal(g["z"], np.zeros(4))


def test_relu_subgradient_at_zero_is_zero():
    with Tape() as tape:
        x = tape.watch(Tensor(np.array([-1.0, 0.0, 2.0])))
        y = T.sum(T.relu(x))
    assert tape.gradient(y, {"x": x})["x"].tolist() == [0.0, 0.0, 1.0]


def _mlp_loss(flat, x, y, shapes, tape=None):
    fl = tape.watch(Tensor(flat)) if tape is not None else Tensor(flat)
    pos, parts = 0, []
    for shape in shapes:
        parts.append(T.segment(fl, pos, shape))
        pos += int(np.prod(shape))
    w1, b1, w2, b2 = parts
    h = T.relu(T.add(T.matmul(x, w1), b1))
    return fl, T.softmax_cross_entropy(T.add(T.matmul(h, w2), b2), y)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 12), st.integers(2, 4))
def test_mlp_gradient_matches_finite_differences(seed, d, width, c):
    rng = np.random.default_rng(seed)
    shapes = [(d, width), (width,), (width, c), (c,)]
    flat = rng.normal(size=sum(int(np.prod(s)) for s in shapes))
    x = rng.normal(size=(7, d))
    y = rng.integers(0, c, 7)
    with Tape() as tape:
        fl, loss = _mlp_loss(flat, x, y, shapes, tape)
    g = tape.gradient(loss, {"f": fl})["f"]
    num = T.numerical_gradient(lambda v: _mlp_loss(v, x, y, shapes)[1].item(), flat, 1e-5)
    scale = max(np.max(np.abs(num)), 1e-8)
    assert np.max(np.abs(g - num)) / scale < 1e-6


@given(st.integers(1, 5), st.integers(1, 5))
def test_broadcast_add_gradient_shapes(n, m):
    with Tape() as tape:
        a = tape.watch(Tensor(np.ones((n, m))))
        b = tape.watch(Tensor(np.ones(m)))
        y = T.sum(T.add(a, b))
    g = tape.gradient(y, {"a": a, "b": b})
    assert g["a"].shape == (n, m)
    assert np.array_equal(g["b"], np.full(m, float(n)))


def test_split_rows_gradient_scatters_back():
    with Tape() as tape:
        a = tape.watch(Tensor(np.arange(6.0).reshape(3, 2)))
        top, rest = T.split_rows(a, [1, 2])
        y = T.add(T.sum(top), T.mul(T.sum(rest), 3.0))
    g = tape.gradient(y, {"a": a})["a"]
    assert g.tolist() == [[1, 1], [3, 3], [3, 3]]


def test_segment_out_of_range():
    with pytest.raises(DimensionError):
        T.segment(Tensor(np.zeros(5)), 3, (2, 2))
