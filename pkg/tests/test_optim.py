import numpy as np
import pytest

from pulsar_pd.autodiff import NumericError, ShapeError, Tensor
from pulsar_pd.optim import AdamState, adam_step


def params(value=0.0, shape=(3,)):
    return {"w": Tensor(np.full(shape, value), requires_grad=True)}


def test_first_step_moves_by_lr():
    p = params()
    st = AdamState(p, lr=0.001)
    adam_step(p, {"w": np.ones(3)}, st)
    np.testing.assert_allclose(p["w"].data, -0.001, rtol=1e-6)
    assert st.step == 1


def test_zero_gradient_leaves_params():
    p = params(1.5)
    st = AdamState(p, lr=0.1)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(3)}, st)
    np.testing.assert_array_equal(p["w"].data, 1.5)


def test_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3) for _ in range(5)]
    runs = []
    for _ in range(2):
        p = params()
        st = AdamState(p, lr=0.01)
        for g in grads:
            adam_step(p, {"w": g}, st)
        runs.append((p["w"].data.copy(), st.m["w"].copy(), st.v["w"].copy()))
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


def test_second_step_hand_computed():
    p = params()
    st = AdamState(p, lr=0.01)
    adam_step(p, {"w": np.full(3, 1.0)}, st)
    adam_step(p, {"w": np.full(3, 3.0)}, st)
    m = (0.9 * 0.1 + 0.1 * 3) / (1 - 0.9 ** 2)
    v = (0.999 * 0.001 + 0.001 * 9) / (1 - 0.999 ** 2)
    np.testing.assert_allclose(p["w"].data, -0.01 - 0.01 * m / (np.sqrt(v) + 1e-8))


def test_errors():
    p = params()
    st = AdamState(p)
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(2)}, st)
    with pytest.raises(NumericError):
        adam_step(p, {"w": np.array([0.0, np.nan, 0.0])}, st)
    with pytest.raises(ValueError):
        AdamState(p, lr=0)
    assert st.step == 0
