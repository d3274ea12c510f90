"""Network composition: conv/pool primitives, T-step forward, gradient reach."""

import numpy as np
import pytest

from spikekit import tensor as T
from spikekit.errors import ConfigError, ContractError, DimensionError
from spikekit.network import (SpikingNetwork, avgpool, conv2d, conv2d_forward,
                              avgpool2d, flatten, linear, mlp_spec)
from spikekit.neurons import NeuronParams, NeuronState, step
from spikekit.tensor import Tape, Tensor
from .test_tensor import finite_diff


def neuron(**kw):
    kw.setdefault("k_tau", 0.5)
    kw.setdefault("reset_mode", "adaptive")
    return NeuronParams(**kw)


class TestConv2d:
    def test_one_by_one_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = conv2d_forward(x, w, b)
        np.testing.assert_allclose(out.data, x.data)

    def test_all_ones_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d_forward(x, w, b)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_output_extent_formula(self):
        x = Tensor(np.zeros((1, 2, 9, 7)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        b = Tensor(np.zeros(4))
        out = conv2d_forward(x, w, b, stride=2, padding=1)
        assert out.shape == (1, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_matches_direct_correlation(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d_forward(Tensor(x), Tensor(w), Tensor(b), stride=1,
                             padding=0).data
        expected = np.zeros_like(out)
        for n in range(2):
            for co in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = x[n, :, i:i + 3, j:j + 3]
                        expected[n, co, i, j] = (patch * w[co]).sum() + b[co]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d_forward(Tensor(np.zeros((1, 1, 2, 2))),
                           Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_gradients_vs_finite_differences(self, stride, padding):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(-1, 1, (2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        coeff = Tensor(rng.normal(size=(1,)))

        def f():
            out = conv2d_forward(x, w, b, stride=stride, padding=padding)
            return T.tsum(T.mul(T.tanh(out), T.scale(out, 0.3)))

        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        fd_x, fd_w, fd_b = finite_diff(f, [x, w, b])
        np.testing.assert_allclose(x.grad, fd_x, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(w.grad, fd_w, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(b.grad, fd_b, rtol=1e-4, atol=1e-8)


class TestAvgPool:
    def test_mean_value(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = avgpool2d(x, 2)
        np.testing.assert_allclose(out.data[0, 0],
                                   [[2.5, 4.5], [10.5, 12.5]])

    def test_divisibility(self):
        with pytest.raises(DimensionError):
            avgpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)

    def test_gradient(self):
        x = Tensor(np.random.default_rng(3).normal(size=(1, 2, 4, 4)),
                   requires_grad=True)

        def f():
            return T.tsum(T.mul(avgpool2d(x, 2), avgpool2d(x, 2)))

        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        (fd,) = finite_diff(f, [x])
        np.testing.assert_allclose(x.grad, fd, rtol=1e-4, atol=1e-9)


def reference_forward(net, frames):
    """Naive time-major evaluation used as an oracle for the scheduler."""
    tsteps = len(frames)
    batch = frames[0].shape[0]
    states = {}
    logits = []
    for layer in net.layers:
        if layer.neuron is not None:
            shape = (batch,) + layer.out_shape
            states[layer.index] = NeuronState.zeros(shape)
    for t in range(tsteps):
        cur = Tensor(frames[t])
        for layer in net.layers:
            cur = layer.apply(cur)
            if layer.neuron is not None:
                states[layer.index], trace = step(states[layer.index], cur,
                                                  layer.neuron)
                cur = trace.s
        logits.append(cur.data.copy())
    return np.stack(logits)


class TestForwardTimesteps:
    def test_single_readout_is_affine(self):
        net = SpikingNetwork([linear(4, 3)], input_shape=(4,), seed=0)
        x = np.random.default_rng(4).normal(size=(5, 4))
        out = net.forward_timesteps([Tensor(x)])
        expected = x @ net.layers[0].w.data + net.layers[0].b.data
        assert out.logits_per_step.shape == (1, 5, 3)
        np.testing.assert_allclose(out.logits_per_step.data[0], expected)

    def test_zero_input_logits_equal_bias(self):
        net = SpikingNetwork(
            [linear(6, 8, neuron=neuron(beta=0.0, reset_mode="hard")),
             linear(8, 3)],
            input_shape=(6,), seed=1)
        net.layers[1].b.data = np.array([0.5, -1.0, 2.0])
        frame = Tensor(np.zeros((2, 6)))
        out = net.forward_timesteps([frame] * 3)
        for layer_spikes in out.spikes_per_layer:
            assert layer_spikes.data.sum() == 0.0
        for t in range(3):
            np.testing.assert_allclose(out.logits_per_step.data[t],
                                       [[0.5, -1.0, 2.0]] * 2)

    def test_mlp_shapes_and_binary_spikes(self):
        net = SpikingNetwork(mlp_spec(neuron(), in_features=784, hidden=256),
                             input_shape=(1, 28, 28), seed=2)
        rng = np.random.default_rng(5)
        frame = Tensor(rng.uniform(0, 1, (3, 1, 28, 28)))
        out = net.forward_timesteps([frame] * 4)
        assert out.logits_per_step.shape == (4, 3, 10)
        assert len(out.spikes_per_layer) == 1
        spikes = out.spikes_per_layer[0].data
        assert spikes.shape == (4, 3, 256)
        assert set(np.unique(spikes)) <= {0.0, 1.0}

    @pytest.mark.parametrize("mode", ["hard", "soft", "adaptive"])
    def test_matches_time_major_reference(self, mode):
        """Layer-major scheduling must equal the naive per-step evaluation."""
        rng = np.random.default_rng(6)
        net = SpikingNetwork(
            [conv2d(1, 3, kernel=3, neuron=neuron(reset_mode=mode, beta=0.3)),
             avgpool(2),
             flatten(),
             linear(3 * 3 * 3, 5, neuron=neuron(reset_mode=mode, beta=0.3)),
             linear(5, 2)],
            input_shape=(1, 8, 8), seed=3)
        frames = [rng.uniform(-1, 1, (2, 1, 8, 8)) for _ in range(4)]
        out = net.forward_timesteps([Tensor(f) for f in frames])
        expected = reference_forward(net, frames)
        np.testing.assert_allclose(out.logits_per_step.data, expected,
                                   atol=1e-12)

    def test_shared_frame_matches_distinct_copies(self):
        """Direct coding reuses one tensor per step; must equal plain replay."""
        rng = np.random.default_rng(7)
        net = SpikingNetwork(mlp_spec(neuron(beta=0.2), in_features=36,
                                      hidden=12, classes=3),
                             input_shape=(1, 6, 6), seed=4)
        frame = rng.uniform(0, 1, (3, 1, 6, 6))
        shared = net.forward_timesteps([Tensor(frame)] * 4)
        distinct = net.forward_timesteps([Tensor(frame.copy())
                                          for _ in range(4)])
        np.testing.assert_allclose(shared.logits_per_step.data,
                                   distinct.logits_per_step.data, atol=1e-12)

    def test_state_isolation_between_calls(self):
        net = SpikingNetwork(mlp_spec(neuron(), in_features=16, hidden=8,
                                      classes=2),
                             input_shape=(16,), seed=5)
        frame = Tensor(np.random.default_rng(8).uniform(0, 1, (2, 16)))
        first = net.forward_timesteps([frame] * 3)
        second = net.forward_timesteps([frame] * 3)
        np.testing.assert_array_equal(first.logits_per_step.data,
                                      second.logits_per_step.data)

    def test_batch_permutation_equivariance(self):
        net = SpikingNetwork(mlp_spec(neuron(beta=0.4), in_features=10,
                                      hidden=6, classes=2),
                             input_shape=(10,), seed=6)
        rng = np.random.default_rng(9)
        x = rng.uniform(0, 1, (5, 10))
        perm = rng.permutation(5)
        out = net.forward_timesteps([Tensor(x)] * 3)
        out_perm = net.forward_timesteps([Tensor(x[perm])] * 3)
        np.testing.assert_allclose(out.logits_per_step.data[:, perm],
                                   out_perm.logits_per_step.data, atol=1e-12)

    def test_gradients_reach_all_parameters(self):
        net = SpikingNetwork(
            [conv2d(1, 2, kernel=3, neuron=neuron(alpha=0.5, beta=0.1)),
             flatten(),
             linear(2 * 4 * 4, 3)],
            input_shape=(1, 6, 6), seed=7)
        frame = Tensor(np.random.default_rng(10).uniform(0.5, 2.0, (4, 1, 6, 6)))
        with Tape() as tape:
            out = net.forward_timesteps([frame] * 4)
            loss = T.tmean(out.logits_per_step)
        tape.backward(loss)
        for name, tensor, _ in net.parameters():
            assert tensor.grad is not None, f"no gradient for {name}"
            assert np.any(tensor.grad != 0.0), f"zero gradient for {name}"

    def test_extent_error_names_layer(self):
        with pytest.raises(DimensionError, match="layer 1"):
            SpikingNetwork([flatten(), linear(100, 10, neuron=neuron()),
                            linear(10, 2)],
                           input_shape=(1, 6, 6), seed=0)

    def test_readout_rule_enforced(self):
        with pytest.raises(ConfigError):
            SpikingNetwork([linear(4, 2, neuron=neuron())], input_shape=(4,))
        with pytest.raises(ConfigError):
            SpikingNetwork([linear(4, 4), linear(4, 2)], input_shape=(4,))

    def test_empty_steps_rejected(self):
        net = SpikingNetwork([linear(4, 2)], input_shape=(4,))
        with pytest.raises(ContractError):
            net.forward_timesteps([])

    def test_input_shape_mismatch(self):
        net = SpikingNetwork([linear(4, 2)], input_shape=(4,))
        with pytest.raises(DimensionError):
            net.forward_timesteps([Tensor(np.zeros((2, 5)))])
