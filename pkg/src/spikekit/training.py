"""Loss construction, optimizers with range clamping, and the epoch loop.

The loss mixes a per-step cross-entropy term with a per-step MSE term:

    loss = lam * mean_t CE(O(t), y) + (1 - lam) * mean_t MSE(O(t), target)

where the MSE target is either a constant (regularizer form) or the label
one-hot. After every optimizer step the neuron learnables are clamped back
to their ranges: alpha into [0,1], beta into [-1,1].

Training is single-threaded and bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, ParameterError
from . import tensor as T
from .tensor import Tape, Tensor
from .data import Dataset, encode_poisson
from .network import SpikingNetwork
from . import diagnostics


@dataclass
class LossConfig:
    lambda_mix: float = 0.9
    phi_mode: str = "constant"   # or "one_hot"
    phi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ParameterError(
                f"lambda must lie in [0,1], got {self.lambda_mix}"
            )
        if self.phi_mode not in ("constant", "one_hot"):
            raise ParameterError(f"unknown phi_mode {self.phi_mode!r}")


@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"   # or "adam"
    learning_rate: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )
        if self.kind not in ("sgd_momentum", "adam"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def tet_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mixed per-step cross-entropy / MSE loss over [T, batch, classes] logits."""
    tsteps, batch, classes = logits.shape
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(
            f"labels must lie in [0,{classes}), got range "
            f"[{labels.min()},{labels.max()}]"
        )
    lam = cfg.lambda_mix
    terms = []
    if lam > 0.0:
        hot = np.broadcast_to(one_hot(labels, classes), logits.shape)
        picked = T.mul(T.log_softmax(logits), Tensor(hot.copy()))
        ce = T.scale(T.tsum(picked), -1.0 / (tsteps * batch))
        terms.append(T.scale(ce, lam))
    if lam < 1.0:
        if cfg.phi_mode == "constant":
            diff = T.add_const(logits, -cfg.phi)
        else:
            hot = np.broadcast_to(one_hot(labels, classes), logits.shape)
            diff = T.sub(logits, Tensor(hot.copy()))
        mse = T.scale(T.tsum(T.mul(diff, diff)), 1.0 / logits.size)
        terms.append(T.scale(mse, 1.0 - lam))
    loss = terms[0]
    for extra in terms[1:]:
        loss = T.add(loss, extra)
    return loss


# -- optimizers -------------------------------------------------------------


class Optimizer:
    """Shared plumbing: finite-gradient guard and post-step clamping."""

    def __init__(self, params: Sequence[tuple[str, Tensor, Optional[tuple]]],
                 cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg

    def zero_grad(self) -> None:
        for _, tensor, _ in self.params:
            tensor.grad = None

    def step(self) -> None:
        for name, tensor, clamp in self.params:
            grad = tensor.grad
            if grad is None:
                grad = np.zeros_like(tensor.data)
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
            self._update(name, tensor, grad)
            if clamp is not None:
                np.clip(tensor.data, clamp[0], clamp[1], out=tensor.data)

    def _update(self, name: str, tensor: Tensor, grad: np.ndarray) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    def __init__(self, params, cfg: OptimizerConfig):
        super().__init__(params, cfg)
        self._velocity = {name: np.zeros_like(t.data) for name, t, _ in self.params}

    def _update(self, name, tensor, grad):
        cfg = self.cfg
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * tensor.data
        buf = self._velocity[name]
        buf *= cfg.momentum
        buf += grad
        tensor.data -= cfg.learning_rate * buf


class Adam(Optimizer):
    def __init__(self, params, cfg: OptimizerConfig):
        super().__init__(params, cfg)
        self._m = {name: np.zeros_like(t.data) for name, t, _ in self.params}
        self._v = {name: np.zeros_like(t.data) for name, t, _ in self.params}
        self._t = 0

    def step(self):
        self._t += 1
        super().step()

    def _update(self, name, tensor, grad):
        cfg = self.cfg
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * tensor.data
        m, v = self._m[name], self._v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1 - cfg.beta2) * grad * grad
        m_hat = m / (1 - cfg.beta1 ** self._t)
        v_hat = v / (1 - cfg.beta2 ** self._t)
        tensor.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def make_optimizer(net: SpikingNetwork, cfg: OptimizerConfig) -> Optimizer:
    cls = SGDMomentum if cfg.kind == "sgd_momentum" else Adam
    return cls(net.parameters(), cfg)


def optimizer_step(optimizer: Optimizer) -> None:
    """Apply one update from the gradients currently held by the parameters."""
    optimizer.step()


# -- batch providers --------------------------------------------------------


class DirectBatches:
    """Constant-current coding: one shared tensor per batch, reused at each step."""

    def __init__(self, dataset: Dataset, timesteps: int):
        self.dataset = dataset
        self.timesteps = timesteps
        self.labels = dataset.labels
        self.n = len(dataset)

    def batch(self, indices: np.ndarray, epoch: int = 0) -> list[Tensor]:
        frame = Tensor(self.dataset.images[indices])
        return [frame] * self.timesteps


class PoissonBatches:
    """Bernoulli rate coding, seeded per (seed, epoch, first index)."""

    def __init__(self, dataset: Dataset, timesteps: int, seed: int):
        self.dataset = dataset
        self.timesteps = timesteps
        self.seed = seed
        self.labels = dataset.labels
        self.n = len(dataset)

    def batch(self, indices: np.ndarray, epoch: int = 0) -> list[Tensor]:
        # epoch -1 marks evaluation passes; shift into the non-negative range
        seed = [self.seed, epoch + 1, int(indices[0])]
        frames = encode_poisson(self.dataset.images[indices], self.timesteps,
                                seed=seed)
        return [Tensor(frames[t]) for t in range(self.timesteps)]


class EventBatches:
    """Pre-encoded spatiotemporal data of shape [T, N, ...]."""

    def __init__(self, events: np.ndarray, labels: np.ndarray):
        if events.shape[1] != labels.shape[0]:
            raise DataError(
                f"event count {events.shape[1]} != label count {labels.shape[0]}"
            )
        self.events = events
        self.labels = np.asarray(labels, dtype=np.int64)
        self.timesteps = events.shape[0]
        self.n = labels.shape[0]

    def batch(self, indices: np.ndarray, epoch: int = 0) -> list[Tensor]:
        return [Tensor(self.events[t, indices]) for t in range(self.timesteps)]


def make_provider(dataset: Dataset, timesteps: int, encoder: str, seed: int):
    if encoder == "direct":
        return DirectBatches(dataset, timesteps)
    if encoder == "poisson":
        return PoissonBatches(dataset, timesteps, seed)
    raise ConfigError(f"unknown encoder {encoder!r}")


# -- evaluation and the epoch loop ------------------------------------------


def evaluate(net: SpikingNetwork, provider, batch_size: int = 256,
             limit: Optional[int] = None, collect_rates: bool = False,
             collect_ops: bool = False):
    """Forward the whole (or first ``limit``) samples without recording.

    Returns a dict with accuracy and, when requested, per-layer firing
    rates and per-sample operation counts.
    """
    n = provider.n if limit is None else min(limit, provider.n)
    if n == 0:
        raise DataError("evaluation dataset is empty")
    correct = 0
    rate_sums = None
    rate_counts = None
    ops_total = np.zeros(3)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        steps = provider.batch(idx, epoch=-1)
        out = net.forward_timesteps(steps)
        mean_logits = out.logits_per_step.data.mean(axis=0)
        pred = mean_logits.argmax(axis=1)
        correct += int((pred == provider.labels[idx]).sum())
        if collect_rates:
            if rate_sums is None:
                rate_sums = [0.0] * len(out.spikes_per_layer)
                rate_counts = [0] * len(out.spikes_per_layer)
            for i, spikes in enumerate(out.spikes_per_layer):
                rate_sums[i] += float(spikes.data.sum())
                rate_counts[i] += spikes.data.size
        if collect_ops:
            counts = diagnostics.count_ops(
                net, out.spikes_per_layer, [s.data for s in steps]
            )
            ops_total += np.array([counts.flops, counts.macs, counts.acs])
    result = {"accuracy": correct / n, "count": n}
    if collect_rates and rate_sums is not None:
        result["rates"] = [s / c for s, c in zip(rate_sums, rate_counts)]
    if collect_ops:
        result["ops_per_sample"] = {
            "flops": float(ops_total[0] / n),
            "macs": float(ops_total[1] / n),
            "acs": float(ops_total[2] / n),
        }
    return result


@dataclass
class RunLog:
    """Everything a training run reports, JSON-serializable and deterministic."""

    config: dict
    initial_test_acc: Optional[float] = None
    epochs: list = field(default_factory=list)
    final_test_acc: Optional[float] = None
    final_rates: Optional[list] = None
    ops_per_sample: Optional[dict] = None
    energy_uj_per_sample: Optional[float] = None
    params_m: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "initial_test_acc": self.initial_test_acc,
            "epochs": self.epochs,
            "final_test_acc": self.final_test_acc,
            "final_rates": self.final_rates,
            "ops_per_sample": self.ops_per_sample,
            "energy_uj_per_sample": self.energy_uj_per_sample,
            "params_m": self.params_m,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def train(net: SpikingNetwork, train_provider, test_provider,
          loss_cfg: LossConfig, opt_cfg: OptimizerConfig, seed: int = 0,
          eval_subset: Optional[int] = None, stop_at_test_acc: Optional[float] = None,
          step_callback=None, verbose: bool = False) -> RunLog:
    """Run the epoch loop and collect the RunLog.

    Per epoch: shuffled mini-batches, one optimizer step each (with alpha/
    beta clamping), then a test evaluation recording accuracy, per-layer
    firing rates and the per-layer learnable snapshots. ``eval_subset``
    caps the per-epoch test pass; the final evaluation always uses the
    full test set and adds operation counts and the energy estimate.
    ``stop_at_test_acc`` ends the loop early once the per-epoch test
    accuracy reaches the target. A non-finite loss aborts with the
    epoch/batch index.
    """
    if train_provider.n == 0:
        raise DataError("training dataset is empty")
    optimizer = make_optimizer(net, opt_cfg)
    runlog = RunLog(config={
        "loss": {"lambda": loss_cfg.lambda_mix, "phi_mode": loss_cfg.phi_mode,
                 "phi": loss_cfg.phi},
        "optimizer": {"kind": opt_cfg.kind, "learning_rate": opt_cfg.learning_rate,
                      "momentum": opt_cfg.momentum,
                      "weight_decay": opt_cfg.weight_decay,
                      "epochs": opt_cfg.epochs, "batch_size": opt_cfg.batch_size},
        "seed": seed,
        "timesteps": train_provider.timesteps,
    })
    runlog.initial_test_acc = evaluate(net, test_provider,
                                       limit=eval_subset)["accuracy"]

    for epoch in range(opt_cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(train_provider.n)
        epoch_loss = 0.0
        epoch_correct = 0
        for batch_index, start in enumerate(
                range(0, train_provider.n, opt_cfg.batch_size)):
            idx = np.sort(order[start:start + opt_cfg.batch_size])
            steps = train_provider.batch(idx, epoch=epoch)
            labels = train_provider.labels[idx]
            optimizer.zero_grad()
            with Tape() as tape:
                out = net.forward_timesteps(steps)
                loss = tet_loss(out.logits_per_step, labels, loss_cfg)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}"
                )
            tape.backward(loss)
            optimizer.step()
            epoch_loss += loss_value * idx.size
            pred = out.logits_per_step.data.mean(axis=0).argmax(axis=1)
            epoch_correct += int((pred == labels).sum())
            if step_callback is not None:
                step_callback(net, epoch, batch_index)
        test = evaluate(net, test_provider, limit=eval_subset,
                        collect_rates=True)
        snapshot = diagnostics.track_params(net)
        entry = {
            "epoch": epoch + 1,
            "train_loss": epoch_loss / train_provider.n,
            "train_acc": epoch_correct / train_provider.n,
            "test_acc": test["accuracy"],
            "rates": test.get("rates", []),
            "alpha": [a for _, a, _ in snapshot],
            "beta": [b for _, _, b in snapshot],
        }
        runlog.epochs.append(entry)
        if verbose:
            print(f"epoch {epoch + 1}/{opt_cfg.epochs}: "
                  f"train_loss={entry['train_loss']:.4f} "
                  f"train_acc={entry['train_acc']:.4f} "
                  f"test_acc={entry['test_acc']:.4f}", flush=True)
        if stop_at_test_acc is not None and test["accuracy"] >= stop_at_test_acc:
            break

    final = evaluate(net, test_provider, collect_rates=True, collect_ops=True)
    runlog.final_test_acc = final["accuracy"]
    runlog.final_rates = final.get("rates")
    ops = final["ops_per_sample"]
    runlog.ops_per_sample = {
        "flops_m": ops["flops"] / 1e6,
        "macs_m": ops["macs"] / 1e6,
        "acs_m": ops["acs"] / 1e6,
    }
    runlog.energy_uj_per_sample = diagnostics.energy(
        runlog.ops_per_sample["macs_m"], runlog.ops_per_sample["acs_m"]
    )
    runlog.params_m = diagnostics.parameter_count(net) / 1e6
    return runlog
