import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aef import tensor as T
from aef.equilibrium import (EquilibriumState, aggregate_global_loss, compute_weights, ema_update,
                             uniform_weights)
from aef.tensor import ShapeError, Tape

losses = arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 0))


def test_initial_state_is_zero():
    np.testing.assert_array_equal(EquilibriumState(4).l_ema, np.zeros(4))


@pytest.mark.parametrize("prev, loss, expected", [(0.0, -1.0, -0.1), (-1.0, -1.0, -1.0), (-2.0, -1.0, -1.9)])
def test_ema_examples(prev, loss, expected):
    s = ema_update(EquilibriumState(1, beta=0.9, l_ema=[prev]), [loss])
    assert s.l_ema[0] == pytest.approx(expected, abs=1e-15)
    assert s.iteration == 1


def test_ema_rejects_nan_with_index():
    with pytest.raises(FloatingPointError, match="index 2"):
        ema_update(EquilibriumState(3), [-1.0, -1.0, float("nan")])


def test_ema_length_mismatch():
    with pytest.raises(ShapeError):
        ema_update(EquilibriumState(3), [-1.0])


@given(losses, st.floats(0, 0.99))
def test_ema_stays_nonpositive(ls, beta):
    s = ema_update(EquilibriumState(len(ls), beta=beta), ls)
    assert (s.l_ema <= 0).all()


@given(arrays(np.float64, 4, elements=st.floats(-3, 0)), arrays(np.float64, 4, elements=st.floats(-3, 0)),
       st.floats(0, 0.99))
def test_ema_contraction(start, fixed, beta):
    s = ema_update(EquilibriumState(4, beta=beta, l_ema=start), fixed)
    np.testing.assert_allclose(np.abs(s.l_ema - fixed), beta * np.abs(start - fixed), atol=1e-12)


def test_equal_losses_give_uniform_weights():
    np.testing.assert_allclose(compute_weights(np.full(5, -0.3), 0.1), 0.2, atol=1e-15)


def test_worked_weight_value():
    w = compute_weights([-0.5, -0.5, -0.5, -0.1], 0.1)
    assert w[3] == pytest.approx(np.exp(-1) / (np.exp(-1) + 3 * np.exp(-5)), abs=1e-12)
    assert w[3] == pytest.approx(0.948, abs=1e-3)


def test_large_temperature_is_uniform():
    np.testing.assert_allclose(compute_weights([-2.0, -0.1, -1.0, 0.0], 1e6), 0.25, atol=1e-6)


def test_small_temperature_is_argmax():
    l = np.array([-0.4, -0.05, -0.3, -0.2])
    np.testing.assert_array_equal(compute_weights(l, 1e-6), np.eye(4)[np.argmax(l)])


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_nonpositive_temperature(t):
    with pytest.raises(ValueError):
        compute_weights([0.0, -1.0], t)


@given(losses, st.floats(1e-3, 100))
def test_weights_form_a_distribution(l, t):
    w = compute_weights(l, t)
    assert (w >= 0).all()
    assert abs(w.sum() - 1) <= 1e-12


@given(losses, st.floats(1e-2, 10))
def test_weights_monotone_in_loss(l, t):
    w = compute_weights(l, t)
    for a in range(len(l)):
        for b in range(len(l)):
            if l[a] > l[b]:
                assert w[a] >= w[b]
                if (l[a] - l[b]) / t > 1e-9:
                    assert w[a] > w[b] or w[b] == 0.0


def test_aggregate_examples(rng):
    ls = [T.Tensor(v) for v in (-1.0, -2.0, -3.0, -6.0)]
    assert float(aggregate_global_loss(uniform_weights(4), ls).data) == pytest.approx(-3.0)
    assert float(aggregate_global_loss([0, 0, 1, 0], ls).data) == -3.0
    w, v = rng.dirichlet(np.ones(4)), rng.normal(size=4)
    assert abs(float(aggregate_global_loss(w, v).data) - w @ v) <= 1e-12
    with pytest.raises(ShapeError):
        aggregate_global_loss([0.5, 0.5], ls)


def test_weights_are_detached(rng):
    """Weights computed from taped losses act as constants: no softmax derivative term."""
    x0 = rng.normal(size=6)
    targets = [rng.normal(size=6) for _ in range(3)]
    with Tape() as tape:
        x = tape.watch(x0.copy())
        ls = [-T.norm(x - t) for t in targets]
        w = compute_weights([float(v.data) for v in ls], 0.1)
        loss = aggregate_global_loss(w, ls)
    g = tape.gradient(loss, [x])[0]
    parts = [-(x0 - t) / np.linalg.norm(x0 - t) for t in targets]
    np.testing.assert_allclose(g, sum(wi * p for wi, p in zip(w, parts)), atol=1e-14)


def test_state_validation():
    with pytest.raises(ValueError):
        EquilibriumState(2, beta=1.0)
    with pytest.raises(ValueError):
        EquilibriumState(2, temperature=0.0)
