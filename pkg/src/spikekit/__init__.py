"""spikekit: desk-scale spiking neural network training kit.

Leaky integrate-and-fire neurons with hard, soft and adaptive reset,
trained by backpropagation through time with a rectangular surrogate
gradient, plus synaptic-operation counting and energy estimation.
"""

from .tensor import Tape, Tensor, grad_check, spike_surrogate
from .neurons import (
    NeuronParams,
    NeuronState,
    StepTrace,
    adaptive_threshold,
    arlif_step,
    lif_step_hard,
    lif_step_soft,
    r_decay,
    soft_reset_closed_form,
    spike_feedback,
    unroll,
)
from .network import (
    LayerSpec,
    NetworkOutput,
    SpikingNetwork,
    avgpool,
    conv2d,
    conv_small_spec,
    flatten,
    linear,
    mlp_spec,
)
from .training import LossConfig, OptimizerConfig, RunLog, tet_loss, train
from .data import Dataset, encode_direct, encode_poisson, load_idx, synth_events
from .diagnostics import EnergyReport, RateProfile, energy, firing_rates

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "grad_check", "spike_surrogate",
    "NeuronParams", "NeuronState", "StepTrace", "adaptive_threshold",
    "arlif_step", "lif_step_hard", "lif_step_soft", "r_decay",
    "soft_reset_closed_form", "spike_feedback", "unroll",
    "LayerSpec", "NetworkOutput", "SpikingNetwork", "avgpool", "conv2d",
    "conv_small_spec", "flatten", "linear", "mlp_spec",
    "LossConfig", "OptimizerConfig", "RunLog", "tet_loss", "train",
    "Dataset", "encode_direct", "encode_poisson", "load_idx", "synth_events",
    "EnergyReport", "RateProfile", "energy", "firing_rates",
]
