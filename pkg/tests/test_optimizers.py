import numpy as np
import pytest

from app.exceptions import TensorShapeError
from app.optimizers import Adam, Adamax, OptimizerState, adam_step, adamax_step
from modules.optimizers import OPTIMIZERS


def test_adamaxFirstStep():
    w = [np.array([1.0])]
    state = OptimizerState(w, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7)
    adamax_step(state, w, [np.array([2.0])])
    assert state.t == 1
    assert state.m[0][0] == pytest.approx(0.2)
    assert state.v[0][0] == pytest.approx(2.0)
    assert w[0][0] == pytest.approx(0.999, abs=1e-9)


def test_adamaxZeroGradientKeepsWeights():
    w = [np.array([0.5, -1.5])]
    optimizer = Adamax(w)
    optimizer.step(w, [np.zeros(2)])
    assert w[0].tolist() == [0.5, -1.5]


def test_adamaxFirstStepIgnoresGradientScale():
    updates = []
    for scale in (1.0, 10.0, 1000.0):
        w = [np.zeros(3)]
        Adamax(w).step(w, [scale * np.array([0.5, -2.0, 3.0])])
        updates.append(w[0].copy())
    assert np.allclose(updates[0], updates[1], atol=1e-9)
    assert np.allclose(updates[0], updates[2], atol=1e-9)


def test_adamaxInfinityNormStaysNonNegative():
    w = [np.zeros(4)]
    optimizer = Adamax(w)
    rng = np.random.default_rng(0)
    for _ in range(5):
        optimizer.step(w, [rng.normal(size=4)])
        assert np.all(optimizer.state.v[0] >= 0)
    assert optimizer.state.t == 5


def test_adamFirstStepMagnitudeIsLearningRate():
    w = [np.zeros(4)]
    Adam(w, lr=0.001).step(w, [np.array([0.3, -5.0, 12.0, -0.01])])
    assert np.allclose(np.abs(w[0]), 0.001, atol=1e-6)
    assert np.array_equal(np.sign(w[0]), [-1, 1, -1, 1])


def test_adamZeroGradientKeepsWeights():
    w = [np.array([2.0])]
    state = OptimizerState(w, 0.001, 0.9, 0.999, 1e-7)
    adam_step(state, w, [np.zeros(1)])
    assert w[0][0] == 2.0


def test_adamEqualHistoriesEqualUpdates():
    w = [np.array([1.0, 1.0])]
    optimizer = Adam(w)
    for g in (0.4, -0.2, 0.7):
        optimizer.step(w, [np.array([g, g])])
    assert w[0][0] == w[0][1]


def test_shapeMismatchRejected():
    w = [np.zeros(3)]
    with pytest.raises(TensorShapeError):
        Adamax(w).step(w, [np.zeros(4)])
    with pytest.raises(TensorShapeError):
        Adam(w).step(w, [])


def test_optimizerRegistry():
    for name, (cls, defaults, _) in OPTIMIZERS.items():
        w = [np.ones(2)]
        cls(w, lr=0.01, **defaults).step(w, [np.ones(2)])
        assert np.all(w[0] < 1.0), name
