"""Neuron kernels: hand-derived step values, reset postconditions, oracle."""

import math

import numpy as np
import pytest

from spikekit import tensor as T
from spikekit.errors import ContractError, DimensionError, ParameterError
from spikekit.neurons import (NeuronParams, NeuronState, adaptive_threshold,
                              arlif_step, lif_step_hard, lif_step_soft,
                              r_decay, soft_reset_closed_form, spike_feedback,
                              unroll)
from spikekit.tensor import Tape, Tensor


def sigma(x):
    return 1.0 / (1.0 + math.exp(-x))


def state(u, r=0.0):
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return NeuronState(u=Tensor(u), r=Tensor(np.full_like(u, r)))


class TestHardReset:
    def test_spike_resets_to_zero(self):
        p = NeuronParams(k_tau=0.5, reset_mode="hard")
        st, tr = lif_step_hard(state(0.6), Tensor([[0.8]]), p)
        assert tr.h.item() == pytest.approx(1.1)
        assert tr.s.item() == 1.0
        assert st.u.item() == 0.0

    def test_subthreshold_keeps_potential(self):
        p = NeuronParams(k_tau=0.5, reset_mode="hard")
        st, tr = lif_step_hard(state(0.6), Tensor([[0.2]]), p)
        assert tr.h.item() == pytest.approx(0.5)
        assert tr.s.item() == 0.0
        assert st.u.item() == pytest.approx(0.5)

    def test_resting_state_fixed_point(self):
        p = NeuronParams(k_tau=0.5, reset_mode="hard")
        st, tr = lif_step_hard(state(0.0), Tensor([[0.0]]), p)
        assert tr.s.item() == 0.0
        assert st.u.item() == 0.0

    def test_postcondition_randomized(self):
        rng = np.random.default_rng(5)
        p = NeuronParams(k_tau=0.7, reset_mode="hard")
        u = rng.uniform(-2, 2, (50, 40))
        x = rng.uniform(-2, 2, (50, 40))
        st, tr = lif_step_hard(state(u), Tensor(x), p)
        fired = tr.s.data == 1.0
        np.testing.assert_array_equal(st.u.data[fired], 0.0)
        np.testing.assert_array_equal(st.u.data[~fired], tr.h.data[~fired])

    def test_shape_mismatch(self):
        p = NeuronParams(reset_mode="hard")
        with pytest.raises(DimensionError):
            lif_step_hard(state(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), p)


class TestSoftReset:
    def test_subtracts_rho(self):
        p = NeuronParams(k_tau=0.5, reset_mode="soft", v_th_base=1.0, rho=1.0)
        st, tr = lif_step_soft(state(0.0), Tensor([[1.1]]), p)
        assert tr.s.item() == 1.0
        assert st.u.item() == pytest.approx(0.1)

    def test_keeps_suprathreshold_residue(self):
        p = NeuronParams(k_tau=0.5, reset_mode="soft")
        st, tr = lif_step_soft(state(0.0), Tensor([[2.5]]), p)
        assert st.u.item() == pytest.approx(1.5)

    def test_no_spike_no_reset(self):
        p = NeuronParams(k_tau=0.5, reset_mode="soft")
        st, tr = lif_step_soft(state(0.0), Tensor([[0.9]]), p)
        assert tr.s.item() == 0.0
        assert st.u.item() == pytest.approx(0.9)

    def test_postcondition_exact(self):
        rng = np.random.default_rng(6)
        p = NeuronParams(k_tau=0.3, reset_mode="soft", rho=0.8)
        u = rng.uniform(-2, 2, (50, 40))
        x = rng.uniform(-2, 2, (50, 40))
        st, tr = lif_step_soft(state(u), Tensor(x), p)
        np.testing.assert_array_equal(st.u.data, tr.h.data - 0.8 * tr.s.data)


class TestRDecay:
    def test_zero_fixed_point(self):
        out = r_decay(Tensor([[0.0]]), Tensor([[3.7]]), 1.0)
        assert out.item() == 0.0

    def test_positive_branch(self):
        out = r_decay(Tensor([[1.0]]), Tensor([[2.0]]), 1.0)
        assert out.item() == pytest.approx(sigma(2.0), abs=1e-12)

    def test_negative_branch(self):
        out = r_decay(Tensor([[-0.5]]), Tensor([[0.0]]), 1.0)
        assert out.item() == pytest.approx(-0.25)

    def test_contraction(self):
        rng = np.random.default_rng(8)
        r = rng.uniform(-3, 3, 500)
        x = rng.uniform(-3, 3, 500)
        for alpha in (0.0, 0.3, 1.0):
            out = r_decay(Tensor(r), Tensor(x), alpha)
            assert np.all(np.abs(out.data) <= np.abs(r))

    def test_zero_takes_nonnegative_branch(self):
        # Observable through the gradient: d out/d r equals the selected
        # factor, sigmoid(alpha*x) for r >= 0.
        r = Tensor([[0.0]], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(r_decay(r, Tensor([[2.0]]), 1.0))
        tape.backward(loss)
        assert r.grad[0, 0] == pytest.approx(sigma(2.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        r = Tensor(rng.uniform(0.1, 2, (3, 4)), requires_grad=True)
        x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        alpha = Tensor(0.7, requires_grad=True)

        def f():
            return T.tsum(r_decay(r, x, alpha))

        from spikekit.tensor import grad_check
        report = grad_check(f, {"r": r, "x": x, "alpha": alpha}, eps=1e-5)
        for res in report.values():
            assert res.max_rel_dev < 1e-4


class TestSpikeFeedback:
    def test_spiking_accumulates(self):
        out = spike_feedback(Tensor([[sigma(2.0)]]), Tensor([[1.0]]),
                             Tensor([[2.0]]))
        assert out.item() == pytest.approx(2 * sigma(2.0), abs=1e-12)

    def test_silent_subtracts(self):
        out = spike_feedback(Tensor([[0.0]]), Tensor([[0.0]]), Tensor([[0.0]]))
        assert out.item() == pytest.approx(-0.5)

    def test_silent_hand_value(self):
        out = spike_feedback(Tensor([[0.5]]), Tensor([[0.0]]), Tensor([[1.0]]))
        assert out.item() == pytest.approx(0.5 - sigma(1.0), abs=1e-12)

    def test_nonbinary_spikes_rejected(self):
        with pytest.raises(ContractError):
            spike_feedback(Tensor([[0.0]]), Tensor([[0.5]]), Tensor([[0.0]]))


class TestAdaptiveThreshold:
    def test_beta_zero_disables(self):
        out = adaptive_threshold(Tensor(np.linspace(-2, 2, 7)), 0.0)
        np.testing.assert_array_equal(out.data, np.ones(7))

    def test_tanh_zero_point(self):
        out = adaptive_threshold(Tensor([[0.0]]), 0.5)
        assert out.item() == pytest.approx(1.0)

    def test_hand_value(self):
        out = adaptive_threshold(Tensor([[1.0]]), 1.0)
        assert out.item() == pytest.approx(1.0 + math.tanh(1.0), abs=1e-12)

    def test_fixed_returns_one(self):
        out = adaptive_threshold(Tensor([[5.0]]), 1.0, threshold_fixed=True)
        assert out.item() == 1.0

    def test_bound(self):
        rng = np.random.default_rng(10)
        for beta in (-1.0, -0.4, 0.4, 1.0):
            out = adaptive_threshold(Tensor(rng.uniform(-5, 5, 200)), beta)
            assert np.all(out.data >= 1 - abs(beta) - 1e-12)
            assert np.all(out.data <= 1 + abs(beta) + 1e-12)


class TestAdaptiveStep:
    def params(self, variant="eq8", **kw):
        kw.setdefault("alpha", 1.0)
        kw.setdefault("beta", 0.0)
        return NeuronParams(k_tau=0.5, reset_mode="adaptive",
                            adaptive_variant=variant, **kw)

    def test_hand_sequence_first_step(self):
        st, tr = arlif_step(state(0.0), Tensor([[2.0]]), self.params())
        assert tr.h.item() == pytest.approx(2.0)
        assert tr.v_th_t.item() == pytest.approx(1.0)
        assert tr.s.item() == 1.0
        assert tr.v_r.item() == pytest.approx(sigma(2.0), abs=1e-12)
        assert st.u.item() == pytest.approx(2.0 - (sigma(2.0) + 1.0), abs=1e-12)
        assert st.r.item() == pytest.approx(sigma(2.0), abs=1e-12)

    def test_hand_sequence_second_step(self):
        st, _ = arlif_step(state(0.0), Tensor([[2.0]]), self.params())
        st2, tr2 = arlif_step(st, Tensor([[0.0]]), self.params())
        h2 = 0.5 * (2.0 - (sigma(2.0) + 1.0))
        assert tr2.h.item() == pytest.approx(h2, abs=1e-12)
        assert tr2.s.item() == 0.0
        r_dec = 0.5 * sigma(2.0)
        v_r = r_dec - 0.5
        assert tr2.v_r.item() == pytest.approx(v_r, abs=1e-12)
        # non-spiking neurons still adjust: the reset applies unconditionally
        assert st2.u.item() == pytest.approx(h2 - (v_r + 1.0), abs=1e-12)
        assert st2.u.item() == pytest.approx(-sigma(2.0), abs=1e-12)

    def test_eq6_variant_first_step(self):
        st, tr = arlif_step(state(0.0), Tensor([[2.0]]), self.params("eq6"))
        v_r = sigma(2.0)
        expected_reset = 1.0 + sigma(v_r)
        assert st.u.item() == pytest.approx(2.0 - expected_reset, abs=1e-12)
        assert st.r.item() == pytest.approx(v_r, abs=1e-12)

    def test_eq6_reset_bound(self):
        rng = np.random.default_rng(12)
        p = self.params("eq6", beta=0.3)
        st = state(rng.uniform(-1, 1, (20, 30)), r=0.0)
        x = Tensor(rng.uniform(-2, 2, (20, 30)))
        st2, tr = arlif_step(st, x, p)
        reset_amount = tr.h.data - st2.u.data
        assert np.all(reset_amount > tr.v_th_t.data)
        assert np.all(reset_amount < tr.v_th_t.data + 1.0)

    def test_eq8_postcondition_independent_recompute(self):
        rng = np.random.default_rng(13)
        p = NeuronParams(k_tau=0.6, alpha=0.4, beta=0.25,
                         reset_mode="adaptive")
        u = rng.uniform(-2, 2, (40, 25))
        r = rng.uniform(-1.5, 1.5, (40, 25))
        x = rng.uniform(-2, 2, (40, 25))
        st = NeuronState(u=Tensor(u), r=Tensor(r))
        st2, tr = arlif_step(st, Tensor(x), p)
        # independent numpy recompute of every piece
        h = 0.6 * u + x
        v_th = 1.0 + 0.25 * np.tanh(x)
        s = (h - v_th > 0).astype(float)
        gate = 1 / (1 + np.exp(-0.4 * x))
        r_dec = np.where(r >= 0, gate * r, (1 - gate) * r)
        v_r = r_dec + (2 * s - 1) / (1 + np.exp(-x))
        np.testing.assert_allclose(tr.s.data, s)
        np.testing.assert_allclose(st2.u.data, h - (v_r + v_th), atol=1e-12)
        np.testing.assert_allclose(st2.r.data, v_r, atol=1e-12)

    def test_alpha_fixed_uses_unit_gate(self):
        p = self.params(alpha_fixed=True)
        p.alpha.data[...] = 0.2  # must be ignored
        st = NeuronState(u=Tensor([[0.0]]), r=Tensor([[1.0]]))
        st2, _ = arlif_step(st, Tensor([[2.0]]), p)
        assert st2.r.item() == pytest.approx(sigma(2.0) + sigma(2.0), abs=1e-12)

    def test_spikes_binary_every_mode(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.uniform(-3, 3, (10, 20)))
        for mode in ("hard", "soft", "adaptive"):
            p = NeuronParams(reset_mode=mode, beta=0.5)
            st, tr = (lif_step_hard if mode == "hard"
                      else lif_step_soft if mode == "soft"
                      else arlif_step)(state(np.zeros((10, 20))), x, p)
            assert set(np.unique(tr.s.data)) <= {0.0, 1.0}

    def test_gradients_reach_alpha_and_beta(self):
        p = NeuronParams(k_tau=0.5, alpha=0.6, beta=0.3, reset_mode="adaptive")
        st = NeuronState(u=Tensor([[0.3]]), r=Tensor([[0.7]]))
        with Tape() as tape:
            st2, tr = arlif_step(st, Tensor([[1.2]]), p)
            loss = T.tsum(st2.u)
        tape.backward(loss)
        assert p.alpha.grad is not None and abs(p.alpha.grad) > 0
        assert p.beta.grad is not None and abs(p.beta.grad) > 0

    def test_detach_reset_blocks_reset_path(self):
        base = dict(k_tau=0.5, alpha=0.6, beta=0.0, reset_mode="soft")
        grads = {}
        for detach in (False, True):
            p = NeuronParams(detach_reset=detach, **base)
            x = Tensor([[1.2]], requires_grad=True)  # inside surrogate window
            st = NeuronState.zeros((1, 1))
            with Tape() as tape:
                st2, _ = lif_step_soft(st, x, p)
                loss = T.tsum(st2.u)
            tape.backward(loss)
            grads[detach] = float(x.grad[0, 0])
        assert grads[True] == pytest.approx(1.0)       # du/dx only
        assert grads[False] == pytest.approx(1.0 - 1.0)  # minus rho/a window


class TestParamsValidation:
    def test_k_tau_range(self):
        with pytest.raises(ParameterError):
            NeuronParams(k_tau=1.0)

    def test_alpha_range(self):
        with pytest.raises(ParameterError):
            NeuronParams(alpha=1.5)

    def test_beta_range(self):
        with pytest.raises(ParameterError):
            NeuronParams(beta=-1.5)

    def test_rho_positive(self):
        with pytest.raises(ParameterError):
            NeuronParams(rho=0.0)

    def test_mode_names(self):
        with pytest.raises(ParameterError):
            NeuronParams(reset_mode="bounce")


class TestUnroll:
    def test_subthreshold_converges_to_geometric_limit(self):
        p = NeuronParams(k_tau=0.5, reset_mode="hard")
        steps = [Tensor(np.full((1, 1), 0.4))] * 30
        spikes, traces = unroll(steps, p)
        assert spikes.data.sum() == 0.0
        # u approaches I/(1 - k_tau) = 0.8 from below
        final_u = traces[-1].h.item()
        assert final_u == pytest.approx(0.8, abs=1e-6)

    def test_zero_input_resting(self):
        for mode in ("hard", "soft", "adaptive"):
            p = NeuronParams(reset_mode=mode, beta=0.0)
            spikes, traces = unroll([Tensor(np.zeros((2, 3)))] * 4, p)
            assert spikes.data.sum() == 0.0
            if mode != "adaptive":
                assert traces[-1].h.data.sum() == 0.0

    def test_soft_matches_oracle_hand_case(self):
        p = NeuronParams(k_tau=0.5, reset_mode="soft", v_th_base=1.0, rho=1.0)
        spikes, _ = unroll([Tensor([[2.0]]), Tensor([[0.0]])], p)
        np.testing.assert_array_equal(spikes.data[:, 0, 0], [1.0, 0.0])
        assert soft_reset_closed_form([2.0, 0.0], 1.0, 0.5) == [1, 0]

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            unroll([], NeuronParams())

    def test_tensor_input_form(self):
        p = NeuronParams(k_tau=0.5, reset_mode="hard")
        spikes, _ = unroll(Tensor(np.zeros((3, 2, 2))), p)
        assert spikes.shape == (3, 2, 2)


class TestClosedFormOracle:
    def test_hand_case_margin(self):
        # second step: 0 + 0.5*2 - 1*(1 + 0.5*1) = -0.5 < 0 -> silent
        assert soft_reset_closed_form([2.0, 0.0], 1.0, 0.5) == [1, 0]

    def test_all_zero(self):
        assert soft_reset_closed_form([0.0] * 6, 1.0, 0.9) == [0] * 6

    def test_matches_simulation_randomized(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            tsteps = int(rng.integers(1, 9))
            k_tau = float(rng.choice([0.25, 0.5, 0.9]))
            xs = rng.uniform(-2, 2, tsteps)
            expected = soft_reset_closed_form(xs, 1.0, k_tau)
            p = NeuronParams(k_tau=k_tau, reset_mode="soft", v_th_base=1.0,
                             rho=1.0)
            spikes, _ = unroll([Tensor([[x]]) for x in xs], p)
            assert [int(v) for v in spikes.data[:, 0, 0]] == expected

    def test_matches_simulation_for_other_thresholds(self):
        # the equivalence needs rho = v_th, not v_th = 1
        rng = np.random.default_rng(22)
        for v_th in (0.5, 1.0, 1.5):
            for _ in range(50):
                tsteps = int(rng.integers(1, 9))
                k_tau = float(rng.choice([0.25, 0.5, 0.9]))
                xs = rng.uniform(-2, 2, tsteps)
                expected = soft_reset_closed_form(xs, v_th, k_tau)
                p = NeuronParams(k_tau=k_tau, reset_mode="soft",
                                 v_th_base=v_th, rho=v_th)
                spikes, _ = unroll([Tensor([[x]]) for x in xs], p)
                assert [int(v) for v in spikes.data[:, 0, 0]] == expected

    def test_nonfinite_rejected(self):
        with pytest.raises(ParameterError):
            soft_reset_closed_form([float("nan")], 1.0, 0.5)
