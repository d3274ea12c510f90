"""Spiking neuron kernels: leaky integrate-and-fire with three reset modes.

All step functions share the same leak-and-integrate front end,

    h[t] = k_tau * u[t-1] + i[t],        s[t] = Heaviside(h[t] - V_th),

and differ in how the membrane is reset after the firing decision:

* hard reset zeroes the membrane of every spiking neuron,
* soft reset subtracts a fixed amount rho from spiking neurons,
* adaptive reset subtracts an input/output-driven reset voltage from every
  neuron, built from an accumulator r that decays with input-dependent
  strength and collects spike-gated feedback of sigmoid(i).

Spikes are exact {0,1} values; gradients cross the firing discontinuity
through a rectangular surrogate of width ``a`` (see tensor.spike_surrogate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from . import tensor as T
from .tensor import Tensor

RESET_MODES = ("hard", "soft", "adaptive")
ADAPTIVE_VARIANTS = ("eq8", "eq6")


def _scalar_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(float(value), requires_grad=requires_grad)


@dataclass
class NeuronParams:
    """Per-layer neuron constants and learnables.

    ``alpha`` (decay-gate strength, in [0,1]) and ``beta`` (threshold
    modulation, in [-1,1]) are scalar tensors so they can be trained;
    the remaining fields are plain constants. ``alpha_fixed`` pins the
    decay gate to sigmoid(i) (i.e. alpha = 1) and ``threshold_fixed``
    pins the firing threshold to 1, reproducing the ablation modes.
    """

    k_tau: float = 0.5
    v_th_base: float = 1.0
    rho: Optional[float] = None  # defaults to v_th_base
    alpha: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    beta: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    a: float = 1.0
    reset_mode: str = "adaptive"
    adaptive_variant: str = "eq8"
    alpha_fixed: bool = False
    threshold_fixed: bool = False
    detach_reset: bool = False

    def __post_init__(self):
        if not 0.0 < self.k_tau < 1.0:
            raise ParameterError(f"k_tau must lie in (0,1), got {self.k_tau}")
        if self.rho is None:
            self.rho = self.v_th_base
        if self.rho <= 0:
            raise ParameterError(f"rho must be positive, got {self.rho}")
        if self.a <= 0:
            raise ParameterError(f"surrogate width a must be positive, got {self.a}")
        if self.reset_mode not in RESET_MODES:
            raise ParameterError(f"unknown reset_mode {self.reset_mode!r}")
        if self.adaptive_variant not in ADAPTIVE_VARIANTS:
            raise ParameterError(
                f"unknown adaptive_variant {self.adaptive_variant!r}"
            )
        self.alpha = _scalar_tensor(self.alpha, requires_grad=True)
        self.beta = _scalar_tensor(self.beta, requires_grad=True)
        if not 0.0 <= float(self.alpha.data) <= 1.0:
            raise ParameterError(f"alpha must lie in [0,1], got {self.alpha.data}")
        if not -1.0 <= float(self.beta.data) <= 1.0:
            raise ParameterError(f"beta must lie in [-1,1], got {self.beta.data}")

    def copy(self) -> "NeuronParams":
        """Independent copy with fresh learnable tensors."""
        return NeuronParams(
            k_tau=self.k_tau,
            v_th_base=self.v_th_base,
            rho=self.rho,
            alpha=Tensor(self.alpha.data.copy(), requires_grad=True),
            beta=Tensor(self.beta.data.copy(), requires_grad=True),
            a=self.a,
            reset_mode=self.reset_mode,
            adaptive_variant=self.adaptive_variant,
            alpha_fixed=self.alpha_fixed,
            threshold_fixed=self.threshold_fixed,
            detach_reset=self.detach_reset,
        )


@dataclass
class NeuronState:
    """Carried per-(sample, neuron) state: membrane u and reset accumulator r."""

    u: Tensor
    r: Tensor

    @staticmethod
    def zeros(shape) -> "NeuronState":
        return NeuronState(u=T.zeros(shape), r=T.zeros(shape))


@dataclass
class StepTrace:
    """Observables of one step: integrated potential, spikes, threshold, reset."""

    h: Tensor
    s: Tensor
    v_th_t: Tensor
    v_r: Optional[Tensor] = None


@dataclass
class _InputFeatures:
    """Input-derived subexpressions shared by the adaptive-reset pieces.

    Under direct encoding the same input tensor feeds every timestep, so
    unroll computes these once per distinct input and reuses the graph.
    """

    sig: Tensor                 # sigmoid(i)
    tanh_i: Optional[Tensor]    # tanh(i), only when the threshold adapts
    gate: Tensor                # sigmoid(alpha_eff * i)
    v_th: Tensor                # 1 + beta * tanh(i), or the fixed constant 1
    gate_complement: Optional[np.ndarray] = None  # 1 - gate, shared buffer


def _features(inp: Tensor, params: NeuronParams) -> _InputFeatures:
    sig = T.sigmoid(inp)
    tanh_i = None if params.threshold_fixed else T.tanh(inp)
    gate = sig if params.alpha_fixed else T.sigmoid(T.mul(params.alpha, inp))
    v_th = adaptive_threshold(inp, params.beta, params.threshold_fixed,
                              tanh_i=tanh_i)
    return _InputFeatures(sig=sig, tanh_i=tanh_i, gate=gate, v_th=v_th,
                          gate_complement=1.0 - gate.data)


def _check_shapes(state: NeuronState, inp: Tensor) -> None:
    if state.u.shape != inp.shape:
        raise DimensionError(
            f"input shape {inp.shape} does not match state shape {state.u.shape}"
        )


# -- adaptive-reset building blocks -------------------------------------


def _decay_select(r_prev: Tensor, gate: Tensor) -> Tensor:
    """out = gate*r  where r >= 0,  (1-gate)*r  where r < 0 (one tape record)."""
    nonneg = r_prev.data >= 0
    factor = np.where(nonneg, gate.data, 1.0 - gate.data)
    out = Tensor(factor * r_prev.data, r_prev.requires_grad or gate.requires_grad)

    def rule(g):
        gr = g * factor if r_prev.requires_grad else None
        gg = None
        if gate.requires_grad:
            gg = g * r_prev.data
            np.negative(gg, out=gg, where=~nonneg)
        return gr, gg

    return T._record(out, (r_prev, gate), rule)


def r_decay(r_prev: Tensor, inp: Tensor, alpha, gate: Optional[Tensor] = None) -> Tensor:
    """Input-gated contraction of the reset accumulator.

    Positive accumulators shrink by sigmoid(alpha*i), negative ones by
    1 - sigmoid(alpha*i); r = 0 follows the nonnegative branch. Both
    factors lie in (0,1), so |out| <= |r_prev| elementwise.
    """
    r_prev, inp = T._wrap(r_prev), T._wrap(inp)
    if r_prev.shape != inp.shape:
        raise DimensionError(
            f"r_decay shapes differ: r {r_prev.shape} vs input {inp.shape}"
        )
    if gate is None:
        gate = T.sigmoid(T.mul(_scalar_tensor(alpha), inp))
    return _decay_select(r_prev, gate)


def _feedback(r: Tensor, s: Tensor, sig: Tensor) -> Tensor:
    """out = r + (2s - 1) * sig, with gradients to all three (one record)."""
    gated = s.data * sig.data
    value = r.data - sig.data
    value += gated
    value += gated
    out = Tensor(value, r.requires_grad or s.requires_grad
                 or sig.requires_grad)

    def rule(g):
        gr = g if r.requires_grad else None
        gs = None
        if s.requires_grad:
            gs = g * sig.data
            gs += gs
        gsig = None
        if sig.requires_grad:
            gsig = g * s.data
            gsig += gsig
            gsig -= g
        return gr, gs, gsig

    return T._record(out, (r, s, sig), rule)


def _decay_feedback(r_prev: Tensor, gate: Tensor, s: Tensor, sig: Tensor,
                    gate_complement: Optional[np.ndarray] = None) -> Tensor:
    """Fused accumulator update as one tape record:

    v_r = (gate if r >= 0 else 1-gate) * r + (2s - 1) * sig
    """
    nonneg = r_prev.data >= 0
    comp = gate_complement if gate_complement is not None else 1.0 - gate.data
    factor = np.where(nonneg, gate.data, comp)
    value = factor * r_prev.data
    gated = s.data * sig.data
    value -= sig.data
    value += gated
    value += gated
    out = Tensor(value, r_prev.requires_grad or gate.requires_grad
                 or s.requires_grad or sig.requires_grad)

    def rule(g):
        gr = g * factor if r_prev.requires_grad else None
        gg = None
        if gate.requires_grad:
            gg = g * r_prev.data
            np.negative(gg, out=gg, where=~nonneg)
        gs = None
        if s.requires_grad:
            gs = g * sig.data
            gs += gs
        gsig = None
        if sig.requires_grad:
            gsig = g * s.data
            gsig += gsig
            gsig -= g
        return gr, gg, gs, gsig

    return T._record(out, (r_prev, gate, s, sig), rule)


def spike_feedback(r: Tensor, s: Tensor, inp: Tensor,
                   sig: Optional[Tensor] = None) -> Tensor:
    """Accumulate spike-gated input feedback: r + (2s - 1) * sigmoid(i).

    Spiking neurons add sigmoid(i); silent neurons subtract it.
    """
    r, s, inp = T._wrap(r), T._wrap(s), T._wrap(inp)
    if not (r.shape == s.shape == inp.shape):
        raise DimensionError(
            f"spike_feedback shapes differ: {r.shape}, {s.shape}, {inp.shape}"
        )
    if not np.all((s.data == 0.0) | (s.data == 1.0)):
        raise ContractError("spike_feedback requires s to be exactly 0/1 valued")
    if sig is None:
        sig = T.sigmoid(inp)
    return _feedback(r, s, sig)


def adaptive_threshold(inp: Tensor, beta, threshold_fixed: bool = False,
                       tanh_i: Optional[Tensor] = None) -> Tensor:
    """Input-modulated firing threshold 1 + beta * tanh(i) (or fixed 1)."""
    if threshold_fixed:
        return Tensor(1.0)
    inp = T._wrap(inp)
    if tanh_i is None:
        tanh_i = T.tanh(inp)
    return T.add_const(T.mul(_scalar_tensor(beta), tanh_i), 1.0)


# -- step kernels --------------------------------------------------------


def _integrate(state: NeuronState, inp: Tensor, params: NeuronParams) -> Tensor:
    """h = k_tau * u_prev + i as a single tape record."""
    u, k = state.u, params.k_tau
    value = u.data * k
    value += inp.data
    out = Tensor(value, u.requires_grad or inp.requires_grad)

    def rule(g):
        gu = g * k if u.requires_grad else None
        gi = g if inp.requires_grad else None
        return gu, gi

    return T._record(out, (u, inp), rule)


def _reset_subtract(h: Tensor, v_r: Tensor, v_th: Tensor) -> Tensor:
    """u_next = h - v_r - v_th as a single tape record."""
    value = h.data - v_r.data
    value -= v_th.data
    out = Tensor(value, h.requires_grad or v_r.requires_grad
                 or v_th.requires_grad)

    def rule(g):
        gh = g if h.requires_grad else None
        gvr = -g if v_r.requires_grad else None
        gvth = T._reduce_to(-g, v_th.shape) if v_th.requires_grad else None
        return gh, gvr, gvth

    return T._record(out, (h, v_r, v_th), rule)


def lif_step_hard(state: NeuronState, inp: Tensor,
                  params: NeuronParams) -> tuple[NeuronState, StepTrace]:
    """One LIF step with hard reset: spiking neurons restart from zero."""
    inp = T._wrap(inp)
    _check_shapes(state, inp)
    h = _integrate(state, inp, params)
    v_th = Tensor(params.v_th_base)
    s = T.spike_surrogate(h, v_th, params.a)
    s_reset = s.detach() if params.detach_reset else s
    u_next = T.mul(h, T.sub(1.0, s_reset))
    return (NeuronState(u=u_next, r=state.r),
            StepTrace(h=h, s=s, v_th_t=v_th))


def lif_step_soft(state: NeuronState, inp: Tensor,
                  params: NeuronParams) -> tuple[NeuronState, StepTrace]:
    """One LIF step with soft reset: subtract rho, keeping supra-threshold residue."""
    inp = T._wrap(inp)
    _check_shapes(state, inp)
    h = _integrate(state, inp, params)
    v_th = Tensor(params.v_th_base)
    s = T.spike_surrogate(h, v_th, params.a)
    s_reset = s.detach() if params.detach_reset else s
    u_next = T.sub(h, T.scale(s_reset, params.rho))
    return (NeuronState(u=u_next, r=state.r),
            StepTrace(h=h, s=s, v_th_t=v_th))


def arlif_step(state: NeuronState, inp: Tensor, params: NeuronParams,
               features: Optional[_InputFeatures] = None
               ) -> tuple[NeuronState, StepTrace]:
    """One adaptive-reset LIF step.

    The accumulator decays with input-gated strength, collects spike
    feedback, and the result v_r sets the reset. The default variant
    subtracts (v_r + V_th[t]) from h unconditionally; the ``eq6`` variant
    subtracts V_th[t] + sigmoid(v_r) instead. Either way the carried
    accumulator is the raw post-feedback v_r.
    """
    inp = T._wrap(inp)
    _check_shapes(state, inp)
    if features is None:
        features = _features(inp, params)
    h = _integrate(state, inp, params)
    v_th_t = features.v_th
    s = T.spike_surrogate(h, v_th_t, params.a)
    s_reset = s.detach() if params.detach_reset else s
    v_r = _decay_feedback(state.r, features.gate, s_reset, features.sig,
                          features.gate_complement)
    if params.adaptive_variant == "eq8":
        u_next = _reset_subtract(h, v_r, v_th_t)
    else:
        u_next = T.sub(h, T.add(v_th_t, T.sigmoid(v_r)))
    return (NeuronState(u=u_next, r=v_r),
            StepTrace(h=h, s=s, v_th_t=v_th_t, v_r=v_r))


def step(state: NeuronState, inp: Tensor, params: NeuronParams,
         features: Optional[_InputFeatures] = None
         ) -> tuple[NeuronState, StepTrace]:
    """Dispatch one step according to params.reset_mode."""
    if params.reset_mode == "hard":
        return lif_step_hard(state, inp, params)
    if params.reset_mode == "soft":
        return lif_step_soft(state, inp, params)
    return arlif_step(state, inp, params, features=features)


def unroll(inputs: Union[Tensor, Sequence[Tensor]], params: NeuronParams
           ) -> tuple[Tensor, list[StepTrace]]:
    """Run the configured step over T timesteps from a zero state.

    ``inputs`` is either a [T, batch, ...] tensor or a list of T per-step
    tensors (which may all be the same object, e.g. under direct coding;
    input-derived subexpressions are then computed once and shared).
    Returns spikes stacked [T, ...] plus the per-step traces.
    """
    if isinstance(inputs, Tensor):
        if inputs.shape[0] == 0:
            raise ContractError("unroll requires T >= 1")
        steps = [T.index0(inputs, t) for t in range(inputs.shape[0])]
    else:
        steps = [T._wrap(x) for x in inputs]
        if not steps:
            raise ContractError("unroll requires T >= 1")
    state = NeuronState.zeros(steps[0].shape)
    needs_features = params.reset_mode == "adaptive"
    cache: dict[int, _InputFeatures] = {}
    traces: list[StepTrace] = []
    for x in steps:
        feats = None
        if needs_features:
            feats = cache.get(id(x))
            if feats is None:
                feats = _features(x, params)
                cache[id(x)] = feats
        state, trace = step(state, x, params, features=feats)
        traces.append(trace)
    spikes = T.stack([tr.s for tr in traces])
    return spikes, traces


# -- closed-form spike oracle (soft reset) --------------------------------


def soft_reset_closed_form(inputs: Sequence[float], v_th: float,
                           k_tau: float) -> list[int]:
    """Soft-reset spike train from accumulated inputs and outputs alone.

    Each spike decision uses only decayed sums of past inputs and past
    spikes, never the membrane potential:

        s[t] = Heaviside( sum_j k^j x[t-j] - v_th * (1 + sum_{j>=1} k^j s[t-j]) )

    With rho = v_th this reproduces the simulated soft-reset train exactly.
    """
    xs = [float(x) for x in inputs]
    if not all(math.isfinite(x) for x in xs):
        raise ParameterError("closed-form oracle requires finite inputs")
    spikes: list[int] = []
    for t in range(len(xs)):
        acc_in = 0.0
        for j in range(t + 1):
            acc_in += k_tau ** j * xs[t - j]
        acc_out = 0.0
        for j in range(1, t + 1):
            acc_out += k_tau ** j * spikes[t - j]
        spikes.append(1 if acc_in - v_th * (1.0 + acc_out) > 0.0 else 0)
    return spikes
