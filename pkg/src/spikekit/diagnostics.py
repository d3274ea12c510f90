"""Firing-rate statistics, synaptic-operation counting and energy estimates.

Synaptic work is split by the nature of a layer's input values:

* exact {0,1} spike inputs need only additions: ACs = (incoming spikes)
  x (synapses each spike fans out to), counted border-exactly for convs;
* the analog frame feeding the first layer under direct coding is charged
  as dense multiply-accumulates (MACs = every synapse, every step);
* fractional sparse inputs (e.g. average-pooled spike maps) are charged
  one MAC per nonzero input element per outgoing synapse.

FLOPs report the dense equivalent of the whole network (2 ops per synapse
per step, spike sparsity ignored). Energy uses 4.6 pJ per MAC and 0.9 pJ
per AC, which reproduces published MAC/AC -> microjoule operating points
to their printed precision (see ENERGY_FIT_POINTS).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .network import SpikingNetwork, _im2col
from .tensor import Tensor

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

# (macs_m, acs_m, energy_uj) reference points the coefficients were fit to.
ENERGY_FIT_POINTS = (
    (1.77, 95.65, 94.22),
    (1.77, 96.72, 95.19),
    (763.08, 209.56, 3698.80),
    (428.09, 57.35, 2020.84),
    (1078.11, 23.71, 4980.63),
)


@dataclass
class RateProfile:
    """Firing rates aggregated per layer and per (layer, timestep)."""

    per_layer: list[float]
    per_layer_t: list[list[float]]

    def overall(self) -> float:
        return float(np.mean(self.per_layer)) if self.per_layer else 0.0


@dataclass
class EnergyReport:
    params_m: float
    flops_m: float
    macs_m: float
    acs_m: float
    energy_uj: float

    def to_dict(self) -> dict:
        return {
            "params_m": self.params_m,
            "flops_m": self.flops_m,
            "macs_m": self.macs_m,
            "acs_m": self.acs_m,
            "energy_uj": self.energy_uj,
        }

    CSV_HEADER = "params_m,flops_m,macs_m,acs_m,energy_uj"

    def to_csv_row(self) -> str:
        return (f"{self.params_m:.6g},{self.flops_m:.6g},{self.macs_m:.6g},"
                f"{self.acs_m:.6g},{self.energy_uj:.6g}")


@dataclass
class OpCounts:
    flops: float
    macs: float
    acs: float


def _as_arrays(spikes_per_layer) -> list[np.ndarray]:
    return [s.data if isinstance(s, Tensor) else np.asarray(s)
            for s in spikes_per_layer]


def firing_rates(spikes_per_layer) -> RateProfile:
    """Spike count over element count, per layer and per (layer, t)."""
    arrays = _as_arrays(spikes_per_layer)
    per_layer = []
    per_layer_t = []
    for spikes in arrays:
        if not np.all((spikes == 0.0) | (spikes == 1.0)):
            raise ContractError("firing_rates requires exact {0,1} spike tensors")
        per_layer.append(float(spikes.mean()))
        per_layer_t.append([float(spikes[t].mean()) for t in range(spikes.shape[0])])
    return RateProfile(per_layer=per_layer, per_layer_t=per_layer_t)


def energy(macs_m: float, acs_m: float) -> float:
    """Microjoules for the given operation counts (in millions)."""
    return E_MAC_PJ * macs_m + E_AC_PJ * acs_m


def energy_model_self_test(tolerance_uj: float = 0.05) -> list[dict]:
    """Recompute every reference operating point with the fitted coefficients."""
    rows = []
    for macs_m, acs_m, expected in ENERGY_FIT_POINTS:
        got = energy(macs_m, acs_m)
        rows.append({
            "macs_m": macs_m,
            "acs_m": acs_m,
            "expected_uj": expected,
            "computed_uj": got,
            "ok": abs(got - expected) <= tolerance_uj,
        })
    return rows


def parameter_count(net: SpikingNetwork) -> int:
    return sum(int(t.size) for _, t, _ in net.parameters())


def _is_binary(values: np.ndarray) -> bool:
    return bool(np.all((values == 0.0) | (values == 1.0)))


def count_ops(net: SpikingNetwork, spikes_per_layer, encoded_steps) -> OpCounts:
    """Count FLOPs / MACs / ACs for one forward pass over a batch.

    ``encoded_steps`` is the list of per-step input arrays [batch, ...];
    ``spikes_per_layer`` the recorded [T, batch, ...] spike trains. Counts
    are raw totals for the batch; divide by the sample count to report
    per-sample numbers.
    """
    arrays = _as_arrays(spikes_per_layer)
    steps = [s.data if isinstance(s, Tensor) else np.asarray(s)
             for s in encoded_steps]
    current = np.stack(steps)  # [T, B, ...]
    tsteps, batch = current.shape[0], current.shape[1]
    flops = 0.0
    macs = 0.0
    acs = 0.0
    spike_index = 0
    for layer in net.layers:
        kind = layer.spec.kind
        if kind == "flatten":
            current = current.reshape(tsteps, batch, -1)
            continue
        if kind == "avgpool":
            k = layer.spec.dims["kernel"]
            t_, b_, c, h, w = current.shape
            current = current.reshape(t_, b_, c, h // k, k, w // k, k) \
                .mean(axis=(4, 6))
            continue
        if current.shape[2:] != layer.in_shape:
            raise DimensionError(
                f"layer {layer.index}: input shape {current.shape[2:]} "
                f"does not match {layer.in_shape}"
            )
        if kind == "linear":
            out_features = layer.spec.dims["out"]
            dense = current[0, 0].size * out_features * tsteps * batch
            flops += 2.0 * dense
            if _is_binary(current):
                acs += float(current.sum()) * out_features
            elif spike_index == 0:
                macs += dense  # analog encoded input: charge every synapse
            else:
                macs += float(np.count_nonzero(current)) * out_features
        else:  # conv2d
            dims = layer.spec.dims
            cout, k = dims["out"], dims["kernel"]
            stride, padding = dims["stride"], dims["padding"]
            flat = current.reshape((tsteps * batch,) + current.shape[2:])
            xp = np.pad(flat, ((0, 0), (0, 0), (padding, padding),
                               (padding, padding))) if padding else flat
            if _is_binary(current):
                cols, _, _ = _im2col(xp, k, k, stride)
                acs += float(cols.sum()) * cout
                oh_ow = cols.shape[0] // (tsteps * batch)
                dense = oh_ow * cols.shape[1] * cout * tsteps * batch
            else:
                cols, _, _ = _im2col((xp != 0).astype(np.float64), k, k, stride)
                oh_ow = cols.shape[0] // (tsteps * batch)
                dense = oh_ow * cols.shape[1] * cout * tsteps * batch
                if spike_index == 0:
                    macs += dense
                else:
                    macs += float(cols.sum()) * cout
            flops += 2.0 * dense
        if layer.neuron is not None:
            current = arrays[spike_index]
            spike_index += 1
        else:
            current = None  # readout is last; nothing consumes its output
    return OpCounts(flops=flops, macs=macs, acs=acs)


def track_params(net: SpikingNetwork) -> list[tuple[int, float, float]]:
    """Ordered (layer index, alpha, beta) snapshot of adaptive layers."""
    out = []
    for layer in net.layers:
        n = layer.neuron
        if n is not None and n.reset_mode == "adaptive":
            out.append((layer.index, float(n.alpha.data), float(n.beta.data)))
    return out


def energy_report(net: SpikingNetwork, ops_per_sample: dict) -> EnergyReport:
    """Assemble the standard per-sample report from raw per-sample counts."""
    macs_m = ops_per_sample["macs"] / 1e6
    acs_m = ops_per_sample["acs"] / 1e6
    return EnergyReport(
        params_m=parameter_count(net) / 1e6,
        flops_m=ops_per_sample["flops"] / 1e6,
        macs_m=macs_m,
        acs_m=acs_m,
        energy_uj=energy(macs_m, acs_m),
    )
