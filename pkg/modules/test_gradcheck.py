import numpy as np
import pytest

from modules.gradcheck import LOSS_KINDS, check_configuration, near_kink, relative_error, run_gradcheck_suite
from modules.nn_core import DenseLayer, DenseNet


def test_relative_error_uses_a_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_near_kink_detects_small_pre_activations():
    net = DenseNet([
        DenseLayer(weight=[[1.0]], bias=[0.0], activation="relu"),
        DenseLayer(weight=[[1.0]], bias=[0.0], activation="identity"),
    ])
    assert near_kink(net, np.array([[1e-5]]))
    assert not near_kink(net, np.array([[0.5]]))


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_every_loss_kind_passes(kind):
    for index in range(5):
        result = check_configuration(index, kind, seed=17)
        assert result.passed, f"{kind} config {index}: max relative error {result.max_error:.2e}"


def test_suite_of_two_hundred_configurations():
    frame = run_gradcheck_suite(n_configs=200, seed=0)
    assert len(frame) == 200
    assert set(frame["kind"]) == set(LOSS_KINDS)
    assert frame["passed"].all()
