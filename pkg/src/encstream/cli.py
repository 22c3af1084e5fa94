"""``encstream`` command-line front end.

Each subcommand writes a JSON result (seed included) into ``--out`` and prints
a short human-readable summary. Given the same inputs and ``--seed`` every
artifact is byte-identical across runs.

Exit codes:
  0  success
  2  usage error
  3  unreadable or malformed input (network, dataset, codebooks, hwconfig)
  4  design exceeds the platform constraints
  5  training diverged
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .accel_sim import simulate_pipeline
from .bitwidth import (BitwidthConfig, CodebookFactory, capture_activations, encoding_for,
                       memory_footprint, two_phase_customize)
from .codebook import CodebookError
from .datasets import DatasetError, load_dataset
from .hw_compiler import (PLATFORMS, CompileError, ExceedsPlatformConstraints, NetworkParseError,
                          compile_network, emit_hw_config, load_hw_config)
from .model_io import Model, load_model, load_network, save_model, write_json
from .tensor_nn import accuracy, init_params
from .training import DivergenceError, Encoding, encoded_accuracy, fine_tune

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("encstream")


class UsageError(Exception):
    pass


# --- helpers ------------------------------------------------------------------

def parse_bits(text: str | None, n: int, what: str) -> tuple[int | None, ...] | None:
    """``"3"`` -> every site at 3 bits, ``"3,4,float"`` -> per site."""
    if text is None:
        return None
    parts = [p.strip().lower() for p in text.split(",")]
    try:
        vals = tuple(None if p in ("float", "none", "fp") else int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--{what}: expected integers or 'float', got {text!r}") from None
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise UsageError(f"--{what}: network has {n} sites, got {len(vals)} values")
    if any(v is not None and v < 1 for v in vals):
        raise UsageError(f"--{what}: bitwidths must be >= 1")
    return vals


def split(data, val_size: int, seed: int):
    x, y = data
    n = len(y)
    if n < 2:
        raise UsageError("dataset needs at least 2 samples")
    k = max(1, min(val_size, n // 2))
    perm = np.random.default_rng(seed).permutation(n)
    val, train = perm[:k], perm[k:]
    return (x[train], y[train]), (x[val], y[val])


def _data(args):
    if not args.data:
        raise UsageError("--data is required")
    return load_dataset(args.data, args.format, args.labels)


def _acc(model: Model, val) -> float:
    if model.encoding is None:
        return accuracy(model.net, model.params, val)
    return encoded_accuracy(model.net, model.params, model.encoding, val)


def _epoch_logger(losses):
    def cb(epoch, loss):
        losses.append(loss)
        log.info("epoch %d: loss %.4f", epoch, loss)
    return cb


def _summary(title: str, rows: dict) -> str:
    lines = [title]
    width = max(len(k) for k in rows)
    for k, v in rows.items():
        lines.append(f"  {k:<{width}}  {v}")
    return "\n".join(lines)


# --- commands -----------------------------------------------------------------

def cmd_train(args):
    net, params = load_network(args.model, require_weights=False)
    params = params or init_params(net, args.seed)
    train, val = split(_data(args), args.val_size, args.seed)
    losses: list[float] = []
    res = fine_tune(net, params, None, train, args.epochs, args.lr or 0.05, args.batch, args.seed,
                    on_epoch=_epoch_logger(losses))
    model = Model(net, res.params)
    acc = _acc(model, val)
    save_model(args.out, model)
    doc = {"command": "train", "seed": args.seed, "epochs": args.epochs, "lr": args.lr or 0.05,
           "epoch_losses": losses, "val_acc": acc, "val_size": len(val[1])}
    write_json(Path(args.out) / "train.json", doc)
    return doc, _summary("trained float model", {"epochs": args.epochs, "final loss": f"{losses[-1]:.4f}",
                                                  "val accuracy": f"{acc:.4f}", "seed": args.seed})


def cmd_encode(args):
    model = load_model(args.model)
    net, params = model.net, model.params
    x, y = _data(args)
    n_act, n_w = len(net.activation_sites()), len(net.weight_layers())
    act = parse_bits(args.act_bits, n_act, "act-bits")
    wb = parse_bits(args.weight_bits, n_w, "weight-bits")
    if act is None and wb is None:
        raise UsageError("encode needs --act-bits and/or --weight-bits")
    cfg = BitwidthConfig(act or (None,) * n_act, wb or (None,) * n_w)
    samples = capture_activations(net, params, x, None, args.n_samples, args.seed)
    enc = encoding_for(CodebookFactory(net, params, "activations", args.seed, samples), Encoding(), cfg)
    enc = encoding_for(CodebookFactory(net, params, "weights", args.seed), enc, cfg)
    before = memory_footprint(net, BitwidthConfig.uniform(net, None, None))
    after = memory_footprint(net, cfg)
    _, val = split((x, y), args.val_size, args.seed)
    out = Model(net, params, enc, cfg, {"seed": args.seed, "command": "encode"})
    acc_float = accuracy(net, params, val)
    acc = _acc(out, val)
    save_model(args.out, out)
    doc = {"command": "encode", "seed": args.seed, "config": cfg.to_dict(),
           "memory_before_bits": before, "memory_after_bits": after,
           "val_acc_float": acc_float, "val_acc_encoded": acc}
    write_json(Path(args.out) / "encode.json", doc)
    return doc, _summary("encoded model", {
        "activation bits": list(cfg.act_bits), "weight bits": list(cfg.weight_bits),
        "memory before": f"{before} bits", "memory after": f"{after} bits ({after / before:.3f}x)",
        "val accuracy": f"{acc_float:.4f} float -> {acc:.4f} encoded", "seed": args.seed})


def cmd_finetune(args):
    model = load_model(args.model)
    if model.encoding is None:
        raise UsageError(f"{args.model} is not an encoded model; run 'encode' first")
    train, val = split(_data(args), args.val_size, args.seed)
    before = _acc(model, val)
    losses: list[float] = []
    res = fine_tune(model.net, model.params, model.encoding, train, args.epochs, args.lr or 0.01,
                    args.batch, args.seed, on_epoch=_epoch_logger(losses))
    out = Model(model.net, res.params, res.encoding, model.config,
                {"seed": args.seed, "command": "finetune"})
    after = _acc(out, val)
    save_model(args.out, out)
    doc = {"command": "finetune", "seed": args.seed, "epochs": args.epochs, "lr": args.lr or 0.01,
           "epoch_losses": losses, "val_acc_before": before, "val_acc_after": after}
    write_json(Path(args.out) / "finetune.json", doc)
    return doc, _summary("fine-tuned encoded model", {
        "epochs": args.epochs, "val accuracy": f"{before:.4f} -> {after:.4f}", "seed": args.seed})


def cmd_customize(args):
    model = load_model(args.model)
    if args.acc_floor is None:
        raise UsageError("customize needs --acc-floor")
    train, val = split(_data(args), args.val_size, args.seed)
    wfloor = args.acc_floor if args.weight_floor is None else args.weight_floor
    res = two_phase_customize(model.net, model.params, train, val, args.acc_floor, wfloor,
                              init_act_bits=args.init_act_bits, init_conv_bits=args.init_conv_bits,
                              init_fc_bits=args.init_fc_bits, epochs=args.epochs, lr=args.lr or 0.01,
                              batch=args.batch, seed=args.seed, val_size=None, n_samples=args.n_samples)
    out_dir = Path(args.out)
    out = Model(model.net, res.params, res.encoding, res.weight_config,
                {"seed": args.seed, "command": "customize"})
    save_model(out_dir, out)
    (out_dir / "trajectory_activations.csv").write_text(res.act_trajectory.to_csv())
    (out_dir / "trajectory_weights.csv").write_text(res.weight_trajectory.to_csv())
    acc = _acc(out, val)
    mem = memory_footprint(model.net, res.weight_config)
    doc = {"command": "customize", "seed": args.seed, "acc_floor": args.acc_floor,
           "weight_floor": wfloor, "act_config": res.act_config.to_dict(),
           "final_config": res.weight_config.to_dict(), "memory_bits": mem,
           "act_selected_step": res.act_selected, "weight_selected_step": res.weight_selected,
           "act_diagnostic": res.act_trajectory.diagnostic,
           "weight_diagnostic": res.weight_trajectory.diagnostic, "val_acc": acc}
    write_json(out_dir / "customize.json", doc)
    return doc, _summary("customized bitwidths", {
        "activation bits": list(res.weight_config.act_bits),
        "weight bits": list(res.weight_config.weight_bits),
        "memory": f"{mem} bits", "val accuracy": f"{acc:.4f}", "seed": args.seed})


def cmd_compile(args):
    model = load_model(args.model)
    hw = compile_network(model.net, model.params, model.encoding, args.platform, model.config,
                         args.fixed_act_bits, args.clock, args.seed)
    emit_hw_config(hw, args.out)
    cyc = hw.stage_cycles()
    res = json.loads((Path(args.out) / "hwconfig.json").read_text())["resources"]
    doc = {"command": "compile", "seed": args.seed, "platform": hw.platform.name,
           "folding": [{"stage": s.name, "pe": s.pe, "simd": s.simd} for s in hw.stages],
           "stage_cycles": cyc, "initiation_interval": max(cyc), "latency_cycles": sum(cyc),
           "throughput_fps": hw.clock_mhz * 1e6 / max(cyc),
           "bram": res["bram"], "dsp": res["dsp"], "ff_proxy": res["ff"], "lut_proxy": res["lut"]}
    write_json(Path(args.out) / "compile.json", doc)
    p = hw.platform
    return doc, _summary(f"compiled for {p.name}", {
        "stages": ", ".join(f"{s.name}(PE={s.pe},SIMD={s.simd})" for s in hw.stages),
        "II": f"{max(cyc)} cycles", "throughput": f"{doc['throughput_fps']:.1f} frames/s",
        "BRAM": f"{res['bram']} / {p.bram}", "DSP": f"{res['dsp']} / {p.dsp}", "seed": args.seed})


def cmd_simulate(args):
    hw = load_hw_config(args.model)
    if args.data:
        x, y = _data(args)
        frames, labels = x[:args.frames], y[:args.frames]
    else:
        rng = np.random.default_rng(args.seed)
        frames = rng.random((args.frames,) + tuple(hw.input_shape), dtype=np.float32)
        labels = None
    rep = simulate_pipeline(hw, frames)
    rep.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = rep.to_dict()
    doc["command"] = "simulate"
    if labels is not None:
        doc["accuracy"] = float(np.mean(np.argmax(rep.logits, axis=1) == labels))
    write_json(out / "simreport.json", doc)
    (out / "breakdown.csv").write_text(rep.breakdown_csv())
    rows = {"frames": rep.frames, "latency": f"{rep.latency_cycles} cycles",
            "II": f"{rep.initiation_interval} cycles", "makespan": f"{rep.makespan_cycles} cycles",
            "throughput": f"{rep.throughput_fps:.1f} frames/s at {rep.clock_mhz} MHz"}
    if "accuracy" in doc:
        rows["accuracy"] = f"{doc['accuracy']:.4f}"
    rows["seed"] = args.seed
    return doc, _summary("simulation", rows)


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "finetune": cmd_finetune,
            "customize": cmd_customize, "compile": cmd_compile, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encstream",
        description="Encode, fine-tune, customize, compile and simulate streaming DNN accelerators.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes: 0 ok, 2 usage, 3 bad input, 4 exceeds platform constraints, 5 diverged")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train a float model (small networks only)"),
                        ("encode", "build codebooks and encode a float model"),
                        ("finetune", "fine-tune codebooks and float parameters of an encoded model"),
                        ("customize", "two-phase greedy bitwidth search with fine-tuning"),
                        ("compile", "lower an (encoded) model to a hardware configuration"),
                        ("simulate", "run a hardware configuration on frames")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", required=True, help="model directory, network.json, or hwconfig dir")
        p.add_argument("--out", required=name != "simulate",
                       help="output directory (simulate defaults to <model>/sim)")
        p.add_argument("--data", help="dataset file (IDX images or CSV)")
        p.add_argument("--labels", help="IDX labels file (inferred from the images name if omitted)")
        p.add_argument("--format", default="auto", choices=("auto", "idx", "csv"))
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--val-size", type=int, default=1000)
        p.add_argument("--epochs", type=float, default=10)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--n-samples", type=int, default=10,
                       help="samples used to build activation codebooks")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "encode":
            p.add_argument("--act-bits", help="bits per activation site, e.g. 3 or 3,4")
            p.add_argument("--weight-bits", help="bits per CONV/FC layer, e.g. 4 or 6,6,4 or float")
        if name == "customize":
            p.add_argument("--acc-floor", type=float, help="accuracy floor for the activation phase")
            p.add_argument("--weight-floor", type=float, help="weight phase floor (default: --acc-floor)")
            p.add_argument("--init-act-bits", type=int, default=5)
            p.add_argument("--init-conv-bits", type=int, default=6)
            p.add_argument("--init-fc-bits", type=int, default=4)
        if name == "compile":
            p.add_argument("--platform", default="VCU108",
                           help=f"one of {', '.join(sorted(v.name for v in PLATFORMS.values()))}")
            p.add_argument("--fixed-act-bits", type=int, default=None,
                           help="replace activation codebooks by fixed-point words of this width")
            p.add_argument("--clock", type=float, default=152.0, help="clock in MHz")
        if name == "simulate":
            p.add_argument("--frames", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate" and args.out is None:
        args.out = str(Path(args.model) / "sim")
    try:
        _, summary = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"encstream {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ExceedsPlatformConstraints as e:
        print(f"encstream {args.command}: Exceeds Platform Constraints: {e}", file=sys.stderr)
        print(json.dumps(e.breakdown, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as e:
        print(f"encstream {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NetworkParseError, DatasetError, CodebookError, CompileError, OSError,
            json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"encstream {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PARSE
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
