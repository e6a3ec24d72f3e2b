"""Network forward/backward, noise masks, EMA, optimizers, checkpoints."""

import numpy as np
import pytest

from gridssl.numkit import Rng, ShapeError, finite_diff_grad, softmax_rows
from gridssl.neural import (
    DenseLayer,
    Network,
    NoiseMasks,
    Optimizer,
    backward,
    backward_latent,
    build_network,
    clone_network,
    dropconnect_mask,
    dropout_mask,
    ema_update,
    forward,
    load_checkpoint,
    optimizer_step,
    param_vector,
    save_checkpoint,
)


def small_net(seed=3, widths=(5, 8, 6, 3), head="softmax"):
    acts = ["relu"] * (len(widths) - 2) + ["identity"]
    return build_network(list(widths), acts, head, Rng(seed, tag=50))


def net_with_params(net, layer, name, value):
    out = clone_network(net)
    if name == "w":
        out.layers[layer].weights = value
    else:
        out.layers[layer].bias = value
    return out


class TestForward:
    def test_zero_net_softmax_uniform(self):
        layers = [DenseLayer(np.zeros((4, 3)), np.zeros((1, 3)), "identity")]
        net = Network(layers, output_head="softmax")
        out = forward(net, Rng(1).gaussian(6, 4)).output
        assert np.max(np.abs(out - 1.0 / 3.0)) < 1e-15

    def test_single_identity_layer_passthrough(self):
        net = Network([DenseLayer(np.eye(4), np.zeros((1, 4)), "identity")])
        x = Rng(2).gaussian(5, 4)
        assert np.array_equal(forward(net, x).output, x)

    def test_matches_straight_line_reimplementation(self):
        net = small_net()
        x = Rng(9).gaussian(4, 5)
        # independent duplicate of the forward pass
        h = x
        for layer in net.layers:
            z = h @ layer.weights + layer.bias
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        expected = softmax_rows(h)
        got = forward(net, x)
        assert np.array_equal(got.output, expected)
        assert got.latent.shape == (4, 6)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(small_net(), np.zeros((2, 7)))

    def test_repeat_calls_identical(self):
        net = small_net()
        x = Rng(4).gaussian(3, 5)
        a = forward(net, x)
        b = forward(net, x)
        assert np.array_equal(a.output, b.output)
        masks = NoiseMasks(
            dropout=[dropout_mask(Rng(5), (3, 8), 0.3), dropout_mask(Rng(6), (3, 6), 0.3)],
            dropconnect=dropconnect_mask(Rng(7), (5, 8), 0.2),
        )
        assert np.array_equal(forward(net, x, masks).output, forward(net, x, masks).output)


def ce_loss(net, x, labels):
    probs = forward(net, x).output
    return float(-np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300)).mean())


class TestBackward:
    def test_gradcheck_all_layers(self):
        net = small_net()
        x = Rng(21).gaussian(4, 5)
        labels = np.array([0, 1, 2, 0])
        trace = forward(net, x)
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), labels] = 1.0
        grads = backward(net, trace, (trace.output - onehot) / 4.0)
        for k in range(len(net.layers)):
            for name, analytic in (("w", grads.weights[k]), ("b", grads.biases[k])):
                at = net.layers[k].weights if name == "w" else net.layers[k].bias
                fd = finite_diff_grad(lambda v: ce_loss(net_with_params(net, k, name, v), x, labels), at, 1e-6)
                denom = np.maximum(np.abs(fd), 1e-7)
                assert np.max(np.abs(fd - analytic) / denom) < 1e-5

    def test_input_gradient(self):
        net = small_net()
        x = Rng(22).gaussian(4, 5)
        labels = np.array([2, 1, 0, 1])
        trace = forward(net, x)
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), labels] = 1.0
        grads = backward(net, trace, (trace.output - onehot) / 4.0)
        fd = finite_diff_grad(lambda v: ce_loss(net, v, labels), x, 1e-6)
        assert np.max(np.abs(fd - grads.input_grad) / np.maximum(np.abs(fd), 1e-7)) < 1e-5

    def test_zero_grad_out_gives_zero_grads(self):
        net = small_net()
        trace = forward(net, Rng(23).gaussian(4, 5))
        grads = backward(net, trace, np.zeros((4, 3)))
        assert all(np.all(g == 0.0) for g in grads.weights)
        assert all(np.all(g == 0.0) for g in grads.biases)
        assert np.all(grads.input_grad == 0.0)

    def test_identity_layer_sum_loss(self):
        # L = sum(output) for one identity layer: dL/dW = sum over batch of inputs
        net = Network([DenseLayer(np.zeros((3, 2)), np.zeros((1, 2)), "identity")])
        x = Rng(24).gaussian(5, 3)
        trace = forward(net, x)
        grads = backward(net, trace, np.ones((5, 2)))
        expected = np.repeat(x.sum(axis=0)[:, None], 2, axis=1)
        assert np.max(np.abs(grads.weights[0] - expected)) < 1e-12

    def test_backward_latent_matches_finite_diff(self):
        net = small_net()
        x = Rng(25).gaussian(4, 5)

        def latent_loss(candidate):
            return float((forward(candidate, x).latent ** 2).sum())

        trace = forward(net, x)
        grads = backward_latent(net, trace, 2.0 * trace.latent)
        assert grads.weights[-1] is None  # output layer untouched
        for k in range(len(net.layers) - 1):
            fd = finite_diff_grad(
                lambda v: latent_loss(net_with_params(net, k, "w", v)), net.layers[k].weights, 1e-6
            )
            assert np.max(np.abs(fd - grads.weights[k]) / np.maximum(np.abs(fd), 1e-7)) < 1e-5

    def test_gradcheck_with_masks(self):
        net = small_net(head="identity")
        x = Rng(26).gaussian(4, 5)
        masks = NoiseMasks(
            dropout=[dropout_mask(Rng(27), (4, 8), 0.25), dropout_mask(Rng(28), (4, 6), 0.25)],
            dropconnect=dropconnect_mask(Rng(29), (5, 8), 0.25),
        )

        def masked_loss(candidate):
            return float((forward(candidate, x, masks).output ** 2).sum())

        trace = forward(net, x, masks)
        grads = backward(net, trace, 2.0 * trace.output)
        for k in range(len(net.layers)):
            fd = finite_diff_grad(
                lambda v: masked_loss(net_with_params(net, k, "w", v)), net.layers[k].weights, 1e-6
            )
            assert np.max(np.abs(fd - grads.weights[k]) / np.maximum(np.abs(fd), 1e-7)) < 1e-5


class TestMasks:
    def test_no_drop_all_ones(self):
        assert np.array_equal(dropout_mask(Rng(1), (3, 3), 0.0), np.ones((3, 3)))

    def test_inverted_scale_entries(self):
        m = dropout_mask(Rng(2), (2, 2), 0.5)
        assert set(np.unique(m)).issubset({0.0, 2.0})

    def test_expectation_identity(self):
        rng = Rng(3)
        x = np.full((1, 50), 1.7)
        acc = 0.0
        n = 10_000
        for _ in range(n):
            acc += (x * dropout_mask(rng, x.shape, 0.3)).mean()
        assert abs(acc / n - 1.7) / 1.7 < 0.01

    def test_inference_mode_is_identity(self):
        net = small_net()
        x = Rng(30).gaussian(4, 5)
        assert np.array_equal(forward(net, x).output, forward(net, x, masks=None).output)

    def test_p_drop_range(self):
        with pytest.raises(ValueError):
            dropout_mask(Rng(1), (2, 2), 1.0)


class TestEma:
    def test_beta_one_keeps_secondary(self):
        a, b = small_net(1), small_net(2)
        out = ema_update(a, b, 1.0)
        assert np.array_equal(param_vector(out), param_vector(a))

    def test_beta_zero_copies_primary(self):
        a, b = small_net(1), small_net(2)
        out = ema_update(a, b, 0.0)
        assert np.array_equal(param_vector(out), param_vector(b))

    def test_arithmetic(self):
        a = Network([DenseLayer(np.ones((2, 2)), np.ones((1, 2)), "identity")])
        b = Network([DenseLayer(np.zeros((2, 2)), np.zeros((1, 2)), "identity")])
        out = ema_update(a, b, 0.99)
        assert np.allclose(param_vector(out), 0.99, atol=1e-15)

    def test_architecture_mismatch(self):
        with pytest.raises(ShapeError):
            ema_update(small_net(1), small_net(2, widths=(5, 9, 6, 3)), 0.5)

    def test_fixed_point_geometric_convergence(self):
        secondary, primary = small_net(1), small_net(2)
        beta = 0.8
        dist = [np.linalg.norm(param_vector(secondary) - param_vector(primary))]
        for _ in range(10):
            secondary = ema_update(secondary, primary, beta)
            dist.append(np.linalg.norm(param_vector(secondary) - param_vector(primary)))
        ratios = [d1 / d0 for d0, d1 in zip(dist, dist[1:])]
        assert all(abs(r - beta) < 1e-9 for r in ratios)

    def test_param_count_identical_across_builds(self):
        assert small_net(1).param_count() == small_net(99).param_count()


class TestOptimizer:
    def test_plain_sgd(self):
        net = Network([DenseLayer(np.ones((1, 1)), np.zeros((1, 1)), "identity")])
        opt = Optimizer(kind="sgd_momentum", learning_rate=0.1, momentum=0.0)
        grads = backward(net, forward(net, np.ones((1, 1))), np.ones((1, 1)))
        out = optimizer_step(opt, net, grads)
        assert abs(out.layers[0].weights[0, 0] - 0.9) < 1e-15

    def test_adam_first_step_magnitude(self):
        net = Network([DenseLayer(np.ones((1, 1)), np.zeros((1, 1)), "identity")])
        opt = Optimizer(kind="adam", learning_rate=1e-3)
        grads = backward(net, forward(net, np.ones((1, 1))), np.ones((1, 1)))
        out = optimizer_step(opt, net, grads)
        # bias-corrected first step: m_hat = v_hat = g -> step = lr * g/(|g|+eps)
        assert abs((1.0 - out.layers[0].weights[0, 0]) - 1e-3) < 1e-9

    def test_zero_grads_leave_params(self):
        net = small_net()
        opt = Optimizer(kind="sgd_momentum", learning_rate=0.5, momentum=0.9)
        trace = forward(net, Rng(31).gaussian(2, 5))
        grads = backward(net, trace, np.zeros((2, 3)))
        out = optimizer_step(opt, net, grads)
        assert np.array_equal(param_vector(out), param_vector(net))

    def test_none_grads_skip_layer(self):
        net = small_net()
        trace = forward(net, Rng(32).gaussian(2, 5))
        grads = backward_latent(net, trace, np.ones_like(trace.latent))
        out = optimizer_step(opt=Optimizer(kind="adam", learning_rate=0.1), net=net, grads=grads)
        assert np.array_equal(out.layers[-1].weights, net.layers[-1].weights)
        assert not np.array_equal(out.layers[0].weights, net.layers[0].weights)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        nets = {"primary": small_net(1), "enc": small_net(2, widths=(6, 4, 5, 2), head="identity")}
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, nets)
        loaded = load_checkpoint(path)
        assert list(loaded) == ["primary", "enc"]
        for name in nets:
            assert loaded[name].output_head == nets[name].output_head
            assert param_vector(loaded[name]).tobytes() == param_vector(nets[name]).tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)
