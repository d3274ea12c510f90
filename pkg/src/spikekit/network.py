"""Feed-forward spiking networks evaluated over T timesteps.

Layers are linear / conv2d / avgpool / flatten; any linear or conv layer
except the final one carries neuron dynamics and emits spikes, while the
final linear layer is a non-spiking readout producing logits per step.

Because the connectivity is strictly feed-forward, the time loop runs
layer-major: each stateless layer processes all T steps in one batched
call (a single matrix product over the merged [T*batch] axis), and only
the neuron recurrences iterate over time. Under direct coding the first
layer's input is the same tensor at every step, so its output and the
input-derived neuron subexpressions are computed once and shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor
from .neurons import NeuronParams, StepTrace, _features, step, unroll

LAYER_KINDS = ("linear", "conv2d", "avgpool", "flatten")


@dataclass
class LayerSpec:
    """Declarative layer description; ``neuron`` is absent for the readout,
    pooling and flatten layers."""

    kind: str
    dims: dict = field(default_factory=dict)
    neuron: Optional[NeuronParams] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("avgpool", "flatten") and self.neuron is not None:
            raise ConfigError(f"{self.kind} layers cannot carry neuron dynamics")


def linear(in_features: int, out_features: int,
           neuron: Optional[NeuronParams] = None) -> LayerSpec:
    return LayerSpec("linear", {"in": in_features, "out": out_features}, neuron)


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1,
           padding: int = 0, neuron: Optional[NeuronParams] = None) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        {"in": in_channels, "out": out_channels, "kernel": kernel,
         "stride": stride, "padding": padding},
        neuron,
    )


def avgpool(kernel: int) -> LayerSpec:
    return LayerSpec("avgpool", {"kernel": kernel})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass
class NetworkOutput:
    """Per-step logits plus every spiking layer's stacked spike train."""

    logits_per_step: Tensor                  # [T, batch, classes]
    spikes_per_layer: list[Tensor]           # each [T, batch, ...]
    traces_per_layer: list[list[StepTrace]]


# -- recorded layer primitives -------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out = x @ w + b (bias broadcast over rows) as one tape record."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"affine expects [n,{w.shape[0]}] input, got {x.shape}"
        )
    out = Tensor(x.data @ w.data + b.data,
                 x.requires_grad or w.requires_grad or b.requires_grad)

    def rule(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return T._record(out, (x, w, b), rule)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, c, kh, kw),
        (s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    return windows.reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                   padding: int = 0) -> Tensor:
    """Cross-correlate [n,C,H,W] input with [Cout,C,kh,kw] weights.

    Output extent is floor((H + 2p - k)/stride) + 1 per spatial axis.
    Implemented as im2col plus one matrix product; the input gradient is
    assembled by k*k strided slice-adds (a col2im without scatter).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input/weights, got {x.shape} and {w.shape}"
        )
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise DimensionError(f"conv2d channels differ: input {c}, weights {cin}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)  # [n*oh*ow, cin*kh*kw]
    wmat = w.data.reshape(cout, cin * kh * kw)
    y = cols @ wmat.T
    y += b.data
    y = np.ascontiguousarray(
        y.reshape(n, oh * ow, cout).transpose(0, 2, 1)
    ).reshape(n, cout, oh, ow)
    out = Tensor(y, x.requires_grad or w.requires_grad or b.requires_grad)

    def rule(g):
        # one dgemm each for the weight and input gradients
        gt = np.ascontiguousarray(
            g.reshape(n, cout, oh * ow).transpose(1, 0, 2)
        ).reshape(cout, n * oh * ow)
        gw = (gt @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gt.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            # channel-major scratch keeps every (ky, kx) slab contiguous
            dcol = (wmat.T @ gt).reshape(cin, kh, kw, n, oh, ow)
            dxp = np.zeros((cin, n, hp, wp))
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, :, ky:ky + stride * oh:stride,
                        kx:kx + stride * ow:stride] += dcol[:, ky, kx]
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            gx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
        return gx, gw, gb

    return T._record(out, (x, w, b), rule)


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; extents must divide by the kernel."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    k = kernel
    if h % k or w % k:
        raise DimensionError(
            f"avgpool kernel {k} does not divide input extents {h}x{w}"
        )
    oh, ow = h // k, w // k
    y = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))
    out = Tensor(y, x.requires_grad)

    def rule(g):
        expanded = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (n, c, oh, k, ow, k)
        )
        return (expanded.reshape(n, c, h, w),)

    return T._record(out, (x,), rule)


# -- concrete layers -------------------------------------------------------


class _Layer:
    """Weights plus optional neuron dynamics for one LayerSpec."""

    def __init__(self, index: int, spec: LayerSpec, in_shape: tuple[int, ...],
                 rng: np.random.Generator, init_gain: float = 3.0):
        self.index = index
        self.spec = spec
        self.neuron = spec.neuron.copy() if spec.neuron is not None else None
        self.w: Optional[Tensor] = None
        self.b: Optional[Tensor] = None
        kind, dims = spec.kind, spec.dims
        if kind == "linear":
            if len(in_shape) != 1:
                raise DimensionError(
                    f"layer {index} (linear): expects flat input, got {in_shape}"
                )
            if in_shape[0] != dims["in"]:
                raise DimensionError(
                    f"layer {index} (linear): input extent {in_shape[0]} "
                    f"!= declared {dims['in']}"
                )
            bound = init_gain / np.sqrt(dims["in"])
            self.w = Tensor(rng.uniform(-bound, bound, (dims["in"], dims["out"])),
                            requires_grad=True)
            self.b = Tensor(np.zeros(dims["out"]), requires_grad=True)
            self.out_shape = (dims["out"],)
        elif kind == "conv2d":
            if len(in_shape) != 3:
                raise DimensionError(
                    f"layer {index} (conv2d): expects [C,H,W] input, got {in_shape}"
                )
            c, h, w = in_shape
            if c != dims["in"]:
                raise DimensionError(
                    f"layer {index} (conv2d): input channels {c} "
                    f"!= declared {dims['in']}"
                )
            k, s, p = dims["kernel"], dims["stride"], dims["padding"]
            oh = (h + 2 * p - k) // s + 1
            ow = (w + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise DimensionError(
                    f"layer {index} (conv2d): kernel {k} does not fit "
                    f"input {h}x{w} with padding {p}"
                )
            fan_in = dims["in"] * k * k
            bound = init_gain / np.sqrt(fan_in)
            self.w = Tensor(
                rng.uniform(-bound, bound, (dims["out"], dims["in"], k, k)),
                requires_grad=True,
            )
            self.b = Tensor(np.zeros(dims["out"]), requires_grad=True)
            self.out_shape = (dims["out"], oh, ow)
        elif kind == "avgpool":
            if len(in_shape) != 3:
                raise DimensionError(
                    f"layer {index} (avgpool): expects [C,H,W] input, got {in_shape}"
                )
            c, h, w = in_shape
            k = dims["kernel"]
            if h % k or w % k:
                raise DimensionError(
                    f"layer {index} (avgpool): kernel {k} does not divide {h}x{w}"
                )
            self.out_shape = (c, h // k, w // k)
        else:  # flatten
            self.out_shape = (int(np.prod(in_shape)),)
        self.in_shape = in_shape

    def apply(self, x: Tensor) -> Tensor:
        kind, dims = self.spec.kind, self.spec.dims
        if kind == "linear":
            return affine(x, self.w, self.b)
        if kind == "conv2d":
            return conv2d_forward(x, self.w, self.b, dims["stride"],
                                  dims["padding"])
        if kind == "avgpool":
            return avgpool2d(x, dims["kernel"])
        return x.reshape((x.shape[0],) + self.out_shape)


class SpikingNetwork:
    """A stack of LayerSpecs with shared-seed weight initialization.

    The final layer must be a linear readout without neuron dynamics;
    every other linear/conv layer must carry them. Weights start uniform
    in +-init_gain/sqrt(fan_in); the default gain is calibrated so layers
    fire at useful rates against the unit threshold (too small an init
    leaves every membrane far below threshold, outside the surrogate
    window, and the network cannot learn).
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int],
                 seed: int = 0, init_gain: float = 3.0):
        specs = list(specs)
        if not specs:
            raise ConfigError("network needs at least one layer")
        last = specs[-1]
        if last.kind != "linear" or last.neuron is not None:
            raise ConfigError(
                "final layer must be a linear readout without neuron dynamics"
            )
        for i, spec in enumerate(specs[:-1]):
            if spec.kind in ("linear", "conv2d") and spec.neuron is None:
                raise ConfigError(
                    f"layer {i} ({spec.kind}) before the readout needs neuron "
                    "dynamics"
                )
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.layers: list[_Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(specs):
            layer = _Layer(i, spec, shape, rng, init_gain=init_gain)
            self.layers.append(layer)
            shape = layer.out_shape
        if len(shape) != 1:
            raise ConfigError(f"readout output must be flat, got {shape}")
        self.num_classes = shape[0]

    # -- parameters -----------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor, Optional[tuple[float, float]]]]:
        """(name, tensor, clamp-range) triples for every trainable value."""
        out = []
        for layer in self.layers:
            prefix = f"layer{layer.index}"
            if layer.w is not None:
                out.append((f"{prefix}.w", layer.w, None))
                out.append((f"{prefix}.b", layer.b, None))
            n = layer.neuron
            if n is not None and n.reset_mode == "adaptive":
                if not n.alpha_fixed:
                    out.append((f"{prefix}.alpha", n.alpha, (0.0, 1.0)))
                if not n.threshold_fixed:
                    out.append((f"{prefix}.beta", n.beta, (-1.0, 1.0)))
        return out

    def spiking_layers(self) -> list[_Layer]:
        return [l for l in self.layers if l.neuron is not None]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for layer in self.layers:
            prefix = f"layer{layer.index}"
            if layer.w is not None:
                state[f"{prefix}.w"] = layer.w.data.copy()
                state[f"{prefix}.b"] = layer.b.data.copy()
            if layer.neuron is not None:
                state[f"{prefix}.alpha"] = layer.neuron.alpha.data.copy()
                state[f"{prefix}.beta"] = layer.neuron.beta.data.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            prefix = f"layer{layer.index}"
            if layer.w is not None:
                layer.w.data = np.asarray(state[f"{prefix}.w"], dtype=np.float64)
                layer.b.data = np.asarray(state[f"{prefix}.b"], dtype=np.float64)
            if layer.neuron is not None:
                layer.neuron.alpha.data = np.asarray(
                    state[f"{prefix}.alpha"], dtype=np.float64)
                layer.neuron.beta.data = np.asarray(
                    state[f"{prefix}.beta"], dtype=np.float64)

    # -- forward ----------------------------------------------------------

    def forward_timesteps(
        self, encoded: Union[Tensor, np.ndarray, Sequence[Tensor]]
    ) -> NetworkOutput:
        """Run T timesteps and collect per-step logits and layer spike trains.

        ``encoded`` is a [T, batch, ...] tensor or a list of T per-step
        tensors; passing the same tensor object for every step (direct
        coding) lets shared subexpressions be computed once. Neuron state
        is created fresh per call.
        """
        steps = self._as_steps(encoded)
        tsteps = len(steps)
        batch = steps[0].shape[0]
        for x in steps:
            if x.shape[1:] != self.input_shape:
                raise DimensionError(
                    f"encoded input shape {x.shape[1:]} != network input "
                    f"shape {self.input_shape}"
                )

        shared: Optional[Tensor] = steps[0] if all(x is steps[0] for x in steps) \
            else None
        stacked: Optional[Tensor] = None
        if shared is None:
            stacked = T.stack(steps)

        spikes_per_layer: list[Tensor] = []
        traces_per_layer: list[list[StepTrace]] = []
        for layer in self.layers:
            if shared is not None:
                shared = layer.apply(shared)
                current = shared
            else:
                flat = stacked.reshape((tsteps * batch,) + stacked.shape[2:])
                out = layer.apply(flat)
                stacked = out.reshape((tsteps, batch) + out.shape[1:])
                current = stacked
            if layer.neuron is None:
                continue
            if shared is not None:
                per_step = [current] * tsteps
            else:
                per_step = [T.index0(current, t) for t in range(tsteps)]
            spikes, traces = unroll(per_step, layer.neuron)
            spikes_per_layer.append(spikes)
            traces_per_layer.append(traces)
            shared, stacked = None, spikes

        if shared is not None:
            logits = T.stack([shared] * tsteps)
        else:
            logits = stacked
        return NetworkOutput(
            logits_per_step=logits,
            spikes_per_layer=spikes_per_layer,
            traces_per_layer=traces_per_layer,
        )

    @staticmethod
    def _as_steps(encoded) -> list[Tensor]:
        if isinstance(encoded, (Tensor, np.ndarray)):
            tensor = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
            if tensor.ndim < 2 or tensor.shape[0] < 1:
                raise ContractError(
                    f"encoded input must be [T, batch, ...], got {tensor.shape}"
                )
            return [T.index0(tensor, t) for t in range(tensor.shape[0])]
        steps = list(encoded)
        if not steps:
            raise ContractError("forward_timesteps requires T >= 1")
        return steps


def mlp_spec(neuron: NeuronParams, in_features: int = 784,
             hidden: int = 256, classes: int = 10) -> list[LayerSpec]:
    """Reference desk-scale MLP: in -> hidden (spiking) -> classes."""
    return [
        flatten(),
        linear(in_features, hidden, neuron=neuron),
        linear(hidden, classes),
    ]


def conv_small_spec(neuron: NeuronParams, in_channels: int = 1,
                    classes: int = 10) -> list[LayerSpec]:
    """Reference small conv net: 5x5 conv 16ch, pool, 5x5 conv 32ch, pool, fc."""
    return [
        conv2d(in_channels, 16, kernel=5, neuron=neuron),
        avgpool(2),
        conv2d(16, 32, kernel=5, neuron=neuron.copy()),
        avgpool(2),
        flatten(),
        linear(512, classes),
    ]
