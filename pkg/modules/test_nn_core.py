import numpy as np
import pytest

from modules.errors import ShapeError, StateError
from modules.gradcheck import gradcheck_net
from modules.nn_core import (
    DenseLayer,
    DenseNet,
    GradientSet,
    Optimizer,
    apply_update,
    backward,
    build_dense_net,
    clone_net,
    deserialize_params,
    forward,
    load_checkpoint,
    params_checksum,
    save_checkpoint,
    serialize_params,
)


def test_forward_identity_layer_is_affine():
    net = DenseNet([DenseLayer(weight=[[1.0, 2.0], [0.0, -1.0]], bias=[0.5, 0.0], activation="identity")])
    out = forward(net, [[1.0, 1.0], [2.0, 0.0]])
    np.testing.assert_array_equal(out, [[3.5, -1.0], [2.5, 0.0]])


def test_forward_single_vector_keeps_vector_shape(rng):
    net = build_dense_net(3, [4], 2, rng)
    assert forward(net, np.ones(3)).shape == (2,)


def test_relu_hidden_layer_clamps_negatives():
    net = DenseNet([
        DenseLayer(weight=[[1.0], [-1.0]], bias=[0.0, 0.0], activation="relu"),
        DenseLayer(weight=[[1.0, 1.0]], bias=[0.0], activation="identity"),
    ])
    np.testing.assert_array_equal(forward(net, [[2.0], [-3.0]]), [[2.0], [3.0]])


def test_relu_layer_hand_example():
    net = DenseNet([DenseLayer(weight=[[1.0, 1.0], [1.0, -1.0]], bias=[0.0, 0.0], activation="relu")])
    np.testing.assert_array_equal(forward(net, [2.0, 3.0]), [5.0, 0.0])


def _naive_forward(net, batch):
    rows = []
    for x in batch:
        a = list(x)
        for layer in net.layers:
            out = []
            for j in range(layer.out_dim):
                z = layer.bias[j]
                for i in range(layer.in_dim):
                    z += layer.weight[j, i] * a[i]
                out.append(max(z, 0.0) if layer.activation == "relu" else z)
            a = out
        rows.append(a)
    return np.array(rows)


def test_forward_matches_per_neuron_loop(rng):
    net = build_dense_net(5, [7, 6], 4, rng)
    for layer in net.layers:
        layer.bias[...] = rng.standard_normal(layer.bias.shape)
    batch = rng.standard_normal((6, 5))
    np.testing.assert_allclose(forward(net, batch), _naive_forward(net, batch), rtol=1e-12, atol=1e-12)


def test_backward_is_linear_in_upstream(rng):
    net = build_dense_net(4, [6, 5], 3, rng)
    forward(net, rng.standard_normal((5, 4)))
    u1, u2 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    g1, x1 = backward(net, u1)
    g2, x2 = backward(net, u2)
    g12, x12 = backward(net, u1 + u2)
    np.testing.assert_allclose(g12.flatten(), g1.flatten() + g2.flatten(), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(x12, x1 + x2, rtol=1e-12, atol=1e-12)


def test_zero_upstream_gives_zero_gradients(rng):
    net = build_dense_net(3, [4], 2, rng)
    forward(net, rng.standard_normal((2, 3)))
    grads, input_grad = backward(net, np.zeros((2, 2)))
    assert not grads.flatten().any()
    assert not input_grad.any()


def test_incompatible_layers_are_rejected():
    with pytest.raises(ShapeError):
        DenseNet([
            DenseLayer(weight=np.zeros((3, 2)), bias=np.zeros(3)),
            DenseLayer(weight=np.zeros((1, 4)), bias=np.zeros(1)),
        ])


def test_wrong_batch_width_is_a_shape_error(rng):
    net = build_dense_net(3, [], 2, rng)
    with pytest.raises(ShapeError):
        forward(net, np.ones((2, 4)))


def test_backward_before_forward_is_a_state_error(rng):
    net = build_dense_net(3, [4], 2, rng)
    with pytest.raises(StateError):
        backward(net, np.ones((1, 2)))


def test_backward_row_mismatch_is_a_state_error(rng):
    net = build_dense_net(3, [4], 2, rng)
    forward(net, np.ones((5, 3)))
    with pytest.raises(StateError):
        backward(net, np.ones((4, 2)))


def test_backward_matches_finite_differences(rng):
    net = build_dense_net(4, [6, 5], 3, rng)
    batch = rng.standard_normal((7, 4))
    upstream = rng.standard_normal((7, 3))
    assert gradcheck_net(net, batch, upstream) < 1e-4


def test_input_gradient_of_linear_net_is_weight():
    weight = np.array([[1.0, -2.0, 0.5]])
    net = DenseNet([DenseLayer(weight=weight, bias=[0.0], activation="identity")])
    forward(net, np.zeros((2, 3)))
    _, input_grad = backward(net, np.ones((2, 1)))
    np.testing.assert_array_equal(input_grad, np.vstack([weight, weight]))


def test_build_is_deterministic_per_seed():
    a = build_dense_net(5, [7], 3, np.random.default_rng(3))
    b = build_dense_net(5, [7], 3, np.random.default_rng(3))
    assert params_checksum(a) == params_checksum(b)
    assert a.layers[0].activation == "relu"
    assert a.layers[-1].activation == "identity"
    np.testing.assert_array_equal(a.layers[0].bias, np.zeros(7))


def test_serialize_layout_is_weight_then_bias_per_layer(rng):
    net = build_dense_net(2, [3], 1, rng)
    vec = serialize_params(net)
    assert vec.size == net.num_params == 2 * 3 + 3 + 3 * 1 + 1
    np.testing.assert_array_equal(vec[:6], net.layers[0].weight.ravel())
    np.testing.assert_array_equal(vec[6:9], net.layers[0].bias)


def test_deserialize_rejects_wrong_length(rng):
    net = build_dense_net(2, [3], 1, rng)
    with pytest.raises(ShapeError):
        deserialize_params(net, np.zeros(net.num_params + 1))


def test_clone_is_independent(rng):
    net = build_dense_net(2, [3], 2, rng)
    copy = clone_net(net)
    copy.layers[0].weight[0, 0] += 1.0
    assert params_checksum(copy) != params_checksum(net)


def test_sgd_step_moves_against_the_gradient():
    net = DenseNet([DenseLayer(weight=[[1.0]], bias=[0.0], activation="identity")])
    forward(net, [[2.0]])
    grads, _ = backward(net, [[1.0]])
    apply_update(net, grads, Optimizer(kind="sgd", learning_rate=0.1))
    np.testing.assert_allclose(net.layers[0].weight, [[0.8]])
    np.testing.assert_allclose(net.layers[0].bias, [-0.1])


def test_momentum_accumulates_velocity():
    net = DenseNet([DenseLayer(weight=[[0.0]], bias=[0.0], activation="identity")])
    opt = Optimizer(kind="sgd_momentum", learning_rate=1.0, momentum=0.5)
    for _ in range(2):
        forward(net, [[1.0]])
        grads, _ = backward(net, [[1.0]])
        apply_update(net, grads, opt)
    # steps of 1 and 1.5
    np.testing.assert_allclose(net.layers[0].weight, [[-2.5]])
    assert opt.step_count == 2


def test_adam_first_step_has_learning_rate_magnitude():
    net = DenseNet([DenseLayer(weight=[[0.0, 0.0]], bias=[0.0], activation="identity")])
    forward(net, [[3.0, -0.01]])
    grads, _ = backward(net, [[1.0]])
    apply_update(net, grads, Optimizer(kind="adam", learning_rate=0.01))
    np.testing.assert_allclose(net.layers[0].weight, [[-0.01, 0.01]], rtol=1e-5)


def test_optimizer_state_must_match_network(rng):
    opt = Optimizer(kind="adam")
    a = build_dense_net(2, [3], 2, rng)
    forward(a, np.ones((1, 2)))
    apply_update(a, backward(a, np.ones((1, 2)))[0], opt)
    b = build_dense_net(2, [4], 2, rng)
    forward(b, np.ones((1, 2)))
    with pytest.raises(ShapeError):
        apply_update(b, backward(b, np.ones((1, 2)))[0], opt)


def test_checkpoint_restores_parameters_and_architecture(tmp_path, rng):
    net = build_dense_net(4, [5, 3], 2, rng)
    path = save_checkpoint(net, tmp_path / "net.dnet")
    assert path.read_bytes()[:4] == b"DNET"
    restored = load_checkpoint(path)
    assert restored.architecture() == net.architecture()
    assert params_checksum(restored) == params_checksum(net)


def test_non_finite_step_leaves_network_and_optimizer_untouched():
    net = DenseNet([DenseLayer(weight=[[1.0]], bias=[2.0], activation="identity")])
    opt = Optimizer(kind="sgd_momentum", learning_rate=0.1)
    grads = GradientSet(weights=[np.array([[1.0]])], biases=[np.array([np.inf])])
    with pytest.raises(StateError):
        apply_update(net, grads, opt)
    np.testing.assert_array_equal(net.layers[0].weight, [[1.0]])
    np.testing.assert_array_equal(net.layers[0].bias, [2.0])
    assert opt.step_count == 0
    assert opt.state is None
