"""Command-line entry point.

Verbs: train, ablate, oracle-check, energy, eval, fetch-data.
Exit codes: 0 success, 1 property/check failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, SpikekitError
from . import data as data_mod
from . import diagnostics
from . import network as net_mod
from .neurons import NeuronParams, soft_reset_closed_form, unroll
from .training import (LossConfig, OptimizerConfig, evaluate, make_provider,
                       train)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

TRAIN_OUTPUTS = ("runlog.json", "metrics.csv", "params_track.csv",
                 "rates.csv", "energy.json", "energy.csv", "model.npz")


@dataclass
class RunConfig:
    seed: int
    timesteps: int
    out_dir: str
    dataset: dict
    encoder: str
    network: dict
    neuron: dict
    loss: LossConfig
    optimizer: OptimizerConfig
    eval_subset: Optional[int]
    stop_at_test_acc: Optional[float]


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
        )
    timesteps = raw.get("timesteps", 4)
    _require(isinstance(timesteps, int) and timesteps >= 1,
             f"timesteps must be an integer >= 1, got {timesteps!r}")
    dataset = raw.get("dataset", {})
    kind = dataset.get("kind")
    _require(kind in ("idx", "synth_events"),
             f"dataset.kind must be 'idx' or 'synth_events', got {kind!r}")
    if kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            p = dataset.get(key)
            _require(isinstance(p, str), f"dataset.{key} missing")
            _require(os.path.exists(p), f"dataset.{key}: file not found: {p}")
    else:
        _require(dataset.get("pattern") in ("two_class_rates", "moving_bar"),
                 f"dataset.pattern invalid: {dataset.get('pattern')!r}")
    encoder = raw.get("encoder", "direct")
    _require(encoder in ("direct", "poisson"),
             f"encoder must be 'direct' or 'poisson', got {encoder!r}")
    loss_raw = raw.get("loss", {})
    opt_raw = raw.get("optimizer", {})
    try:
        loss_cfg = LossConfig(
            lambda_mix=loss_raw.get("lambda", 0.9),
            phi_mode=loss_raw.get("phi_mode", "constant"),
            phi=loss_raw.get("phi", 1.0),
        )
        opt_cfg = OptimizerConfig(
            kind=opt_raw.get("kind", "sgd_momentum"),
            learning_rate=opt_raw.get("learning_rate", 0.1),
            momentum=opt_raw.get("momentum", 0.9),
            weight_decay=opt_raw.get("weight_decay", 5e-4),
            epochs=opt_raw.get("epochs", 10),
            batch_size=opt_raw.get("batch_size", 128),
        )
    except SpikekitError as exc:
        raise ConfigError(str(exc))
    eval_subset = raw.get("eval_subset")
    _require(eval_subset is None or (isinstance(eval_subset, int)
                                     and eval_subset >= 1),
             f"eval_subset must be null or >= 1, got {eval_subset!r}")
    stop_at = raw.get("stop_at_test_acc")
    _require(stop_at is None or (isinstance(stop_at, (int, float))
                                 and 0.0 < stop_at <= 1.0),
             f"stop_at_test_acc must be null or in (0,1], got {stop_at!r}")
    return RunConfig(
        seed=raw.get("seed", 0),
        timesteps=timesteps,
        out_dir=raw.get("out_dir", "runs/out"),
        dataset=dataset,
        encoder=encoder,
        network=raw.get("network", {"preset": "mlp"}),
        neuron=raw.get("neuron", {}),
        loss=loss_cfg,
        optimizer=opt_cfg,
        eval_subset=eval_subset,
        stop_at_test_acc=stop_at,
    )


def neuron_from_config(cfg: dict, **overrides) -> NeuronParams:
    merged = dict(cfg)
    merged.update(overrides)
    return NeuronParams(
        k_tau=merged.get("k_tau", 0.5),
        v_th_base=merged.get("v_th_base", 1.0),
        rho=merged.get("rho"),
        alpha=merged.get("alpha0", 1.0),
        beta=merged.get("beta0", 0.0),
        a=merged.get("a", 1.0),
        reset_mode=merged.get("reset_mode", "adaptive"),
        adaptive_variant=merged.get("adaptive_variant", "eq8"),
        alpha_fixed=merged.get("alpha_fixed", False),
        threshold_fixed=merged.get("threshold_fixed", False),
        detach_reset=merged.get("detach_reset", False),
    )


def _load_datasets(cfg: RunConfig):
    ds = cfg.dataset
    if ds["kind"] == "idx":
        train_set = data_mod.load_idx(ds["train_images"], ds["train_labels"])
        test_set = data_mod.load_idx(ds["test_images"], ds["test_labels"])
        if ds.get("limit_train"):
            train_set = train_set.subset(int(ds["limit_train"]))
        if ds.get("limit_test"):
            test_set = test_set.subset(int(ds["limit_test"]))
        train_provider = make_provider(train_set, cfg.timesteps, cfg.encoder,
                                       cfg.seed)
        test_provider = make_provider(test_set, cfg.timesteps, cfg.encoder,
                                      cfg.seed + 1)
        input_shape = train_set.images.shape[1:]
        classes = max(train_set.class_count, test_set.class_count)
    else:
        from .training import EventBatches
        h = ds.get("height", 8)
        w = ds.get("width", 8)
        events, labels = data_mod.synth_events(
            ds["pattern"], ds.get("n_train", 512), cfg.timesteps,
            seed=cfg.seed, height=h, width=w)
        train_provider = EventBatches(events, labels)
        events_t, labels_t = data_mod.synth_events(
            ds["pattern"], ds.get("n_test", 256), cfg.timesteps,
            seed=cfg.seed + 1, height=h, width=w)
        test_provider = EventBatches(events_t, labels_t)
        input_shape = events.shape[2:]
        classes = 2
    return train_provider, test_provider, input_shape, classes


def build_network(cfg: RunConfig, input_shape, classes: int,
                  **neuron_overrides) -> net_mod.SpikingNetwork:
    neuron = neuron_from_config(cfg.neuron, **neuron_overrides)
    spec = cfg.network
    preset = spec.get("preset")
    if preset == "mlp":
        in_features = int(np.prod(input_shape))
        layers = net_mod.mlp_spec(neuron, in_features,
                                  spec.get("hidden", 256), classes)
    elif preset == "conv_small":
        layers = net_mod.conv_small_spec(neuron, input_shape[0], classes)
    elif "layers" in spec:
        layers = []
        for entry in spec["layers"]:
            kind = entry.get("kind")
            spiking = entry.get("spiking", False)
            n = neuron_from_config(cfg.neuron, **neuron_overrides) if spiking \
                else None
            if kind == "linear":
                layers.append(net_mod.linear(entry["in"], entry["out"], n))
            elif kind == "conv2d":
                layers.append(net_mod.conv2d(
                    entry["in"], entry["out"], entry["kernel"],
                    entry.get("stride", 1), entry.get("padding", 0), n))
            elif kind == "avgpool":
                layers.append(net_mod.avgpool(entry["kernel"]))
            elif kind == "flatten":
                layers.append(net_mod.flatten())
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
    else:
        raise ConfigError(
            f"network needs a preset ('mlp', 'conv_small') or a layers list, "
            f"got {spec!r}"
        )
    return net_mod.SpikingNetwork(layers, input_shape, seed=cfg.seed,
                                  init_gain=spec.get("init_gain", 3.0))


# -- output writing ----------------------------------------------------------


def _check_overwrites(out_dir: str, names, force: bool) -> None:
    existing = [n for n in names if os.path.exists(os.path.join(out_dir, n))]
    if existing and not force:
        raise ConfigError(
            f"output files already exist in {out_dir}: {', '.join(existing)} "
            f"(pass --force to overwrite)"
        )


def _write_outputs(out_dir: str, runlog, net) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "runlog.json"), "w") as fh:
        fh.write(runlog.to_json())

    snapshot = diagnostics.track_params(net)
    spiking_indices = [layer.index for layer in net.spiking_layers()]
    n_layers = len(spiking_indices)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        alpha_cols = [f"alpha_{i}" for i, _, _ in snapshot]
        beta_cols = [f"beta_{i}" for i, _, _ in snapshot]
        rate_cols = [f"rate_{i}" for i in spiking_indices]
        fh.write(",".join(["epoch", "split", "loss", "acc"]
                          + alpha_cols + beta_cols + rate_cols) + "\n")
        for entry in runlog.epochs:
            alphas = [f"{a}" for a in entry["alpha"]]
            betas = [f"{b}" for b in entry["beta"]]
            rates = [f"{r}" for r in entry["rates"]]
            fh.write(",".join([str(entry["epoch"]), "train",
                               f"{entry['train_loss']}",
                               f"{entry['train_acc']}"]
                              + alphas + betas + [""] * n_layers) + "\n")
            fh.write(",".join([str(entry["epoch"]), "test", "",
                               f"{entry['test_acc']}"]
                              + alphas + betas + rates) + "\n")

    with open(os.path.join(out_dir, "params_track.csv"), "w") as fh:
        fh.write("epoch,layer,alpha,beta\n")
        for entry in runlog.epochs:
            for (layer_idx, _, _), a, b in zip(snapshot, entry["alpha"],
                                               entry["beta"]):
                fh.write(f"{entry['epoch']},{layer_idx},{a},{b}\n")

    with open(os.path.join(out_dir, "rates.csv"), "w") as fh:
        fh.write("epoch,layer,rate\n")
        for entry in runlog.epochs:
            for i, r in enumerate(entry["rates"]):
                fh.write(f"{entry['epoch']},{i},{r}\n")
        if runlog.final_rates:
            for i, r in enumerate(runlog.final_rates):
                fh.write(f"final,{i},{r}\n")

    ops = runlog.ops_per_sample or {"flops_m": 0.0, "macs_m": 0.0, "acs_m": 0.0}
    report = diagnostics.EnergyReport(
        params_m=runlog.params_m or 0.0,
        flops_m=ops["flops_m"],
        macs_m=ops["macs_m"],
        acs_m=ops["acs_m"],
        energy_uj=runlog.energy_uj_per_sample or 0.0,
    )
    with open(os.path.join(out_dir, "energy.json"), "w") as fh:
        json.dump({
            "normalization": "per test sample",
            "coefficients_pj": {"mac": diagnostics.E_MAC_PJ,
                                "ac": diagnostics.E_AC_PJ},
            "report": report.to_dict(),
        }, fh, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "energy.csv"), "w") as fh:
        fh.write(report.CSV_HEADER + "\n")
        fh.write(report.to_csv_row() + "\n")

    np.savez(os.path.join(out_dir, "model.npz"), **net.state_dict())


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.out_dir
    _check_overwrites(out_dir, TRAIN_OUTPUTS, args.force)
    train_provider, test_provider, input_shape, classes = _load_datasets(cfg)
    net = build_network(cfg, input_shape, classes)
    runlog = train(net, train_provider, test_provider, cfg.loss, cfg.optimizer,
                   seed=cfg.seed, eval_subset=cfg.eval_subset,
                   stop_at_test_acc=cfg.stop_at_test_acc, verbose=True)
    _write_outputs(out_dir, runlog, net)
    print(f"final test accuracy: {runlog.final_test_acc:.4f}")
    print(f"outputs written to {out_dir}")
    return EXIT_OK


ABLATION_MODES = (
    ("hard", {"reset_mode": "hard"}),
    ("soft", {"reset_mode": "soft"}),
    ("alpha=1", {"reset_mode": "adaptive", "alpha_fixed": True}),
    ("vth=1", {"reset_mode": "adaptive", "threshold_fixed": True}),
    ("both", {"reset_mode": "adaptive", "alpha_fixed": True,
              "threshold_fixed": True}),
    ("learnable", {"reset_mode": "adaptive"}),
)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.out_dir
    _check_overwrites(out_dir, ("ablation.csv",), args.force)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for mode, overrides in ABLATION_MODES:
        train_provider, test_provider, input_shape, classes = _load_datasets(cfg)
        net = build_network(cfg, input_shape, classes, **overrides)
        runlog = train(net, train_provider, test_provider, cfg.loss,
                       cfg.optimizer, seed=cfg.seed,
                       eval_subset=cfg.eval_subset)
        mean_rate = float(np.mean(runlog.final_rates)) if runlog.final_rates \
            else 0.0
        rows.append((mode, runlog.final_test_acc, mean_rate,
                     runlog.energy_uj_per_sample))
        mode_dir = os.path.join(out_dir, mode.replace("=", ""))
        os.makedirs(mode_dir, exist_ok=True)
        with open(os.path.join(mode_dir, "runlog.json"), "w") as fh:
            fh.write(runlog.to_json())
        print(f"{mode}: acc={runlog.final_test_acc:.4f} "
              f"rate={mean_rate:.4f} energy={runlog.energy_uj_per_sample:.4f}",
              flush=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("mode,test_acc,mean_firing_rate,energy_uj\n")
        for mode, acc, rate, uj in rows:
            fh.write(f"{mode},{acc},{rate},{uj}\n")
    print(f"ablation grid written to {os.path.join(out_dir, 'ablation.csv')}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    if args.trials < 1:
        print("oracle-check: --trials must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.max_t < 1:
        print("oracle-check: --max-t must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    k_choices = (0.25, 0.5, 0.9)
    v_th = 1.0
    failures = 0
    for trial in range(args.trials):
        tsteps = int(rng.integers(1, args.max_t + 1))
        k_tau = float(rng.choice(k_choices))
        xs = rng.uniform(-2.0, 2.0, size=tsteps)
        expected = soft_reset_closed_form(xs, v_th=v_th, k_tau=k_tau)
        sim_k = k_tau + args.corrupt_decay
        params = NeuronParams(k_tau=sim_k, v_th_base=v_th, rho=v_th,
                              reset_mode="soft")
        spikes, _ = unroll([np.array([[x]]) for x in xs], params)
        simulated = [int(spikes.data[t, 0, 0]) for t in range(tsteps)]
        if simulated != expected:
            failures += 1
            if failures == 1:
                print(f"mismatch on trial {trial}: k_tau={k_tau} "
                      f"inputs={xs.tolist()}", file=sys.stderr)
                print(f"  simulated  : {simulated}", file=sys.stderr)
                print(f"  closed form: {expected}", file=sys.stderr)
    print(f"oracle-check: {args.trials - failures}/{args.trials} trials passed")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


def cmd_energy(args) -> int:
    self_test = diagnostics.energy_model_self_test()
    print("coefficient self-test (4.6 pJ/MAC + 0.9 pJ/AC):")
    all_ok = True
    for row in self_test:
        status = "ok" if row["ok"] else "MISMATCH"
        all_ok = all_ok and row["ok"]
        print(f"  macs={row['macs_m']:.2f}M acs={row['acs_m']:.2f}M -> "
              f"{row['computed_uj']:.2f} uJ (reference {row['expected_uj']:.2f}) "
              f"{status}")
    if args.pairs:
        stream = sys.stdin if args.pairs == "-" else open(args.pairs)
        try:
            for line in stream:
                line = line.strip().replace(",", " ")
                if not line:
                    continue
                macs_m, acs_m = (float(tok) for tok in line.split()[:2])
                print(f"{macs_m} {acs_m} -> {diagnostics.energy(macs_m, acs_m):.4f} uJ")
        finally:
            if stream is not sys.stdin:
                stream.close()
    if args.runlog:
        try:
            with open(args.runlog) as fh:
                runlog = json.load(fh)
        except FileNotFoundError:
            print(f"energy: runlog not found: {args.runlog}", file=sys.stderr)
            return EXIT_USAGE
        ops = runlog.get("ops_per_sample")
        if not ops:
            print(f"energy: {args.runlog} holds no recorded operation counts",
                  file=sys.stderr)
            return EXIT_USAGE
        uj = diagnostics.energy(ops["macs_m"], ops["acs_m"])
        report = {
            "params_m": runlog.get("params_m"),
            "flops_m": ops["flops_m"],
            "macs_m": ops["macs_m"],
            "acs_m": ops["acs_m"],
            "energy_uj": uj,
        }
        print(json.dumps(report, sort_keys=True, indent=2))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            path = os.path.join(args.out, "energy.json")
            if os.path.exists(path) and not args.force:
                print(f"energy: {path} exists (pass --force)", file=sys.stderr)
                return EXIT_USAGE
            with open(path, "w") as fh:
                json.dump(report, fh, sort_keys=True, indent=2)
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    _, test_provider, input_shape, classes = _load_datasets(cfg)
    net = build_network(cfg, input_shape, classes)
    if args.model:
        if not os.path.exists(args.model):
            print(f"eval: model file not found: {args.model}", file=sys.stderr)
            return EXIT_USAGE
        with np.load(args.model) as blob:
            net.load_state_dict({k: blob[k] for k in blob.files})
    result = evaluate(net, test_provider, collect_rates=True, collect_ops=True)
    ops = result["ops_per_sample"]
    report = diagnostics.energy_report(net, ops)
    print(f"test accuracy: {result['accuracy']:.4f}")
    print(f"per-layer firing rates: {[round(r, 4) for r in result['rates']]}")
    print(f"energy: {report.energy_uj:.4f} uJ/sample "
          f"(macs={report.macs_m:.4f}M acs={report.acs_m:.4f}M)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump({"accuracy": result["accuracy"],
                       "rates": result["rates"],
                       "energy": report.to_dict()}, fh, sort_keys=True,
                      indent=2)
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    paths = data_mod.fetch_mnist(args.dir)
    for key, path in sorted(paths.items()):
        print(f"{key}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikekit",
        description="Desk-scale spiking network training kit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a network from a config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="run the six-mode reset ablation")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--out", default=None)
    p_ablate.add_argument("--seed", type=int, default=None)
    p_ablate.add_argument("--force", action="store_true")
    p_ablate.set_defaults(func=cmd_ablate)

    p_oracle = sub.add_parser(
        "oracle-check",
        help="randomized equivalence of simulated vs closed-form soft-reset spikes",
    )
    p_oracle.add_argument("--trials", type=int, default=1000)
    p_oracle.add_argument("--max-t", type=int, default=8)
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.add_argument("--corrupt-decay", type=float, default=0.0,
                          help="perturb the simulated decay constant (test hook)")
    p_oracle.set_defaults(func=cmd_oracle_check)

    p_energy = sub.add_parser("energy", help="energy model report and self-test")
    p_energy.add_argument("--runlog", default=None)
    p_energy.add_argument("--pairs", default=None,
                          help="file of 'macs_m acs_m' lines, or - for stdin")
    p_energy.add_argument("--out", default=None)
    p_energy.add_argument("--force", action="store_true")
    p_energy.set_defaults(func=cmd_energy)

    p_eval = sub.add_parser("eval", help="evaluate a saved model on the test set")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--model", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_fetch = sub.add_parser("fetch-data", help="download MNIST IDX files")
    p_fetch.add_argument("--dir", default="data/mnist")
    p_fetch.set_defaults(func=cmd_fetch_data)

    return parser


def main(argv=None) -> int:
    from .perf import configure_allocator
    configure_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"spikekit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpikekitError as exc:
        print(f"spikekit: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
