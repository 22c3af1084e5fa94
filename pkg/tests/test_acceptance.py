"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import time
from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from encstream.accel_sim import Stream, mpu_execute, mvau_cycles, pipeline_schedule, simulate_pipeline
from encstream.bitwidth import (BitwidthConfig, CodebookFactory, capture_activations, customize,
                                encoding_for)
from encstream.codebook import Codebook, encode_array, kmeans, quantization_mse, uniform_grid
from encstream.hw_compiler import (ExceedsPlatformConstraints, compile_network, divisors,
                                   estimate_resources, get_platform, lower, stage_resources)
from encstream.tensor_nn import LayerSpec as L, NetworkSpec, accuracy, init_params
from encstream.training import (Encoding, codebook_gradient, encoded_accuracy, encoded_backward_input,
                                encoded_infer, fine_tune, train_float)

from conftest import encode_network, exhaustive_choice, mlp, random_conv_net
from test_hw_compiler import fc_stage


def verdict(capsys, number, title, checks, detail):
    """Print one line for the criterion, then fail with the names of the broken checks."""
    failed = [name for name, ok in checks.items() if not ok]
    with capsys.disabled():
        print(f"\n[{'FAIL' if failed else 'PASS'}] criterion {number}: {title} | {detail}"
              + (f" | failed: {', '.join(failed)}" if failed else ""))
    assert not failed, f"criterion {number} failed: {failed} ({detail})"


def test_criterion_1_kmeans_beats_uniform_grid(capsys):
    t0 = time.perf_counter()
    x = np.random.default_rng(7).standard_normal(10_000)
    km = quantization_mse(x, kmeans(x, 4))
    grid = quantization_mse(x, uniform_grid(x, 4))
    dt = time.perf_counter() - t0
    verdict(capsys, 1, "K=4 k-means MSE < 0.5 x uniform-grid MSE",
            {"mse ratio < 0.5": km < 0.5 * grid, "runtime < 5 s": dt < 5.0},
            f"kmeans {km:.4f} vs grid {grid:.4f} (ratio {km / grid:.3f}), {dt:.2f} s")


def test_criterion_2_gradient_rules(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    h = 1e-4
    # surrogate: clip(y, c_min, c_max); interior = differentiable, i.e. not within h of a bound
    points = []
    while len(points) < 1000:
        cb = Codebook(np.sort(rng.uniform(-3, 3, int(rng.integers(2, 17)))).astype(np.float32))
        lo, hi = float(cb.values[0]), float(cb.values[-1])
        y = rng.uniform(lo - 1, hi + 1)
        if abs(y - lo) > 2 * h and abs(y - hi) > 2 * h:
            points.append((y, cb))
    worst = 0.0
    for y, cb in points:
        lo, hi = float(cb.values[0]), float(cb.values[-1])
        g = rng.normal()
        fd = g * (np.clip(y + h, lo, hi) - np.clip(y - h, lo, hi)) / (2 * h)
        got = encoded_backward_input(np.array([g]), np.array([y]), cb)[0]
        worst = max(worst, abs(got - fd))
    # conservation, checked in exact rational arithmetic
    conserved = 0
    for _ in range(1000):
        k = int(rng.integers(1, 17))
        values = np.unique(rng.normal(size=k).astype(np.float32))
        if rng.random() < 0.5:
            values = np.unique(np.concatenate([[0.0], np.abs(values)])).astype(np.float32)
        cb = Codebook(values, zero_anchored=bool(values[0] == 0))
        n = int(rng.integers(1, 200))
        ystar = rng.choice(cb.values, size=n)
        g = (rng.normal(size=n) * 10.0 ** rng.integers(-3, 3)).astype(np.float32)
        grad_c = codebook_gradient(g, ystar, cb)
        lhs = sum((Fraction(float(v)) for v in grad_c), Fraction(0))
        rhs = sum((Fraction(float(v)) for v in g), Fraction(0))
        conserved += lhs == rhs
    dt = time.perf_counter() - t0
    verdict(capsys, 2, "surrogate gradient matches finite differences, codebook gradient conserves",
            {"FD within 1e-5 at 1000 points": worst <= 1e-5,
             "exact conservation on 1000 cases": conserved == 1000, "runtime < 5 s": dt < 5.0},
            f"max |FD - analytic| {worst:.2e}, conserved {conserved}/1000, {dt:.2f} s")


def test_criterion_3_mnist_recovery(mnist, capsys):
    x, y = mnist
    train, test = (x[:2000], y[:2000]), (x[2000:3000], y[2000:3000])
    t0 = time.perf_counter()
    net = mlp([64, 10], 784)
    params = train_float(net, init_params(net, 0), train, 30, lr=0.05).params
    float_acc = accuracy(net, params, test)
    cfg = BitwidthConfig((3,), (4, 4))
    # activations first: encode at 3 bits and fine-tune for 10 epochs
    samples = capture_activations(net, params, train[0], None, 10, 42)
    enc = encoding_for(CodebookFactory(net, params, "activations", 42, samples), Encoding(), cfg)
    acc_act = encoded_accuracy(net, params, enc, test)
    ft1 = fine_tune(net, params, enc, train, 10, lr=0.01)
    acc_ft1 = encoded_accuracy(net, ft1.params, ft1.encoding, test)
    # then weights: 4-bit codebooks on top, another 10 epochs
    enc = encoding_for(CodebookFactory(net, ft1.params, "weights", 42), ft1.encoding, cfg)
    acc_both = encoded_accuracy(net, ft1.params, enc, test)
    ft2 = fine_tune(net, ft1.params, enc, train, 10, lr=0.01)
    final = encoded_accuracy(net, ft2.params, ft2.encoding, test)
    dt = time.perf_counter() - t0
    bits_ok = (all(c.size <= 8 for c in ft2.encoding.act.values())
               and all(e.codebook.size <= 16 for e in ft2.encoding.weights.values())
               and set(ft2.encoding.weights) == set(net.weight_layers()))
    verdict(capsys, 3, "3-bit act / 4-bit weight MLP recovers within 1.5 pp of float after 10+10 epochs",
            {"within 1.5 pp": final >= float_acc - 0.015, "3/4-bit codebooks": bits_ok,
             "runtime < 3 min": dt < 180},
            f"float {float_acc:.3f}, encoded {acc_act:.3f} -> {acc_ft1:.3f}"
            f" (act), {acc_both:.3f} -> {final:.3f} (act+weights), {dt:.1f} s")


def test_criterion_4_bitwidth_search(mnist, capsys):
    x, y = mnist
    train, val = (x[:4000], y[:4000]), (x[4000:4200], y[4000:4200])
    t_start = time.perf_counter()
    net = mlp([32, 16, 10], 784)
    init = BitwidthConfig((None, None), (4, 4, 4))
    # the machine's speed drifts, so training and search runs alternate and each
    # side keeps its fastest of five
    train_times, trajs = [], []
    for _ in range(5):
        t0 = time.perf_counter()
        params = train_float(net, init_params(net, 0), train, 20, lr=0.05).params
        train_times.append(time.perf_counter() - t0)
        float_acc = accuracy(net, params, val)
        trajs.append(customize(net, params, None, init, val, float_acc - 0.1, "weights", val_size=None))
    traj = trajs[0]
    search = min(t.seconds for t in trajs)
    matches, rewards_ok, decreasing = [], [], []
    for a, b in zip(traj.steps, traj.steps[1:]):
        r, pos, bits, _ = exhaustive_choice(net, params, Encoding(), a.config, "weights", val)
        matches.append((b.pos, b.bits) == (pos, bits))
        rewards_ok.append(b.reward == pytest.approx(r, rel=1e-12))
        decreasing.append(b.memory_bits < a.memory_bits)
    same = all(t.steps == traj.steps for t in trajs)
    training = min(train_times)
    dt = time.perf_counter() - t_start
    verdict(capsys, 4, "greedy search matches exhaustive argmax, memory strictly decreases, cheap vs training",
            {"at least 3 iterations": len(traj.steps) >= 4, "argmax every iteration": all(matches),
             "rewards agree": all(rewards_ok), "memory strictly decreasing": all(decreasing),
             "search < 10% of training": search < 0.1 * training,
             "deterministic": same, "runtime < 2 min": dt < 120},
            f"{len(traj.steps) - 1} iterations, bits {traj.steps[-1].config.weight_bits}, "
            f"search {search * 1000:.0f} ms vs training {training * 1000:.0f} ms "
            f"({100 * search / training:.1f}%), {dt:.1f} s")


def _maxpool_reference(vals, window, stride):
    view = np.lib.stride_tricks.sliding_window_view(vals, (window, window), axis=(2, 3))
    return view[:, :, ::stride, ::stride].max(axis=(-2, -1))


def test_criterion_5_mpu_on_encoded_words(capsys):
    rng = np.random.default_rng(5)
    ok = 0
    for _ in range(10_000):
        k = int(rng.integers(1, 17))
        values = np.unique(rng.normal(0, 2, k).astype(np.float32))
        if rng.random() < 0.5:
            values = np.unique(np.concatenate([[0.0], np.abs(values)])).astype(np.float32)
        cb = Codebook(values)
        window = int(rng.integers(2, 4))
        stride = window if rng.random() < 0.7 else 1
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(window, 7)), int(rng.integers(window, 7))
        frames = int(rng.integers(1, 3))
        idx = encode_array(rng.normal(0, 2, (frames, c, h, w)), cb)
        out = mpu_execute(Stream.from_fmap(idx, cb.bitwidth, True, codebook=cb), window, stride)
        ok += np.array_equal(out.decoded(), _maxpool_reference(cb.values[idx], window, stride))
    verdict(capsys, 5, "decode(max of indices) == max of decoded values",
            {"10000 streams exact": ok == 10_000}, f"{ok}/10000 streams exact")


def test_criterion_6_simulator_bit_exact(capsys):
    results = []
    for trial in range(5):
        rng = np.random.default_rng(600 + trial)
        net, params = random_conv_net(rng, bn=True)
        calib = rng.random((10,) + net.input_shape).astype(np.float32)
        enc = encode_network(net, params, calib, act_k=int(rng.choice([4, 8, 16])),
                             weight_k=int(rng.choice([4, 16])), seed=trial)
        hw = compile_network(net, params, enc, str(rng.choice(["VCU108", "ZC702", "XC7S50"])))
        frames = rng.random((20,) + net.input_shape).astype(np.float32)
        got = simulate_pipeline(hw, frames).logits
        ref = encoded_infer(net, params, enc, frames, sequential=True)
        kinds = {l.kind.value for l in net.layers}
        results.append(np.array_equal(got, ref) and got.dtype == ref.dtype
                       and {"CONV", "FC", "MAXPOOL", "BATCHNORM"} <= kinds)
    verdict(capsys, 6, "simulated logits equal the software encoded reference bit for bit",
            {"5 nets x 20 frames": all(results)}, f"{sum(results)}/5 networks bit-exact on 20 frames")


def test_criterion_7_pipeline_makespan(capsys):
    rows = []
    for trial in range(3):
        rng = np.random.default_rng(700 + trial)
        net, params = random_conv_net(rng)
        calib = rng.random((10,) + net.input_shape).astype(np.float32)
        enc = encode_network(net, params, calib, seed=trial)
        hw = compile_network(net, params, enc, str(rng.choice(["ZC702", "XC7S50"])))
        c = hw.stage_cycles()
        frames = rng.random((8,) + net.input_shape).astype(np.float32)
        for f in range(1, 9):
            measured = simulate_pipeline(hw, frames[:f]).makespan_cycles
            independent = max(end for _, end in pipeline_schedule(c, f)[-1])
            rows.append(measured == independent == sum(c) + (f - 1) * max(c))
    verdict(capsys, 7, "makespan(F) == sum C + (F-1) max C",
            {"3 configs x F=1..8": all(rows) and len(rows) == 24}, f"{sum(rows)}/24 exact")


def test_criterion_8_feasibility_cliff(capsys):
    # two full-resolution 32-channel feature maps dominate on-chip storage
    net = NetworkSpec((L.conv(32, 3, 1, 1, name="conv1"), L.relu(), L.conv(32, 3, 1, 1, name="conv2"),
                       L.relu(), L.maxpool(4), L.fc(10, name="fc")), (1, 64, 64), 10)
    params = init_params(net, 0)
    calib = np.random.default_rng(8).random((4,) + net.input_shape).astype(np.float32)
    enc = encode_network(net, params, calib, act_k=8, weight_k=16)
    small = get_platform("XC7S50")
    enc_stages = lower(net, params, enc)
    fix_stages = lower(net, params, enc, fixed_act_bits=8)
    enc_est, fix_est = estimate_resources(enc_stages, small), estimate_resources(fix_stages, small)
    ratios = [Fraction(a.buffer_bits, b.buffer_bits)
              for a, b in zip(enc_est.stages, fix_est.stages) if b.buffer_bits]
    try:
        hw = compile_network(net, params, enc, small)
        fits = estimate_resources(hw).fits
    except ExceedsPlatformConstraints:
        fits = False
    try:
        compile_network(net, params, enc, small, fixed_act_bits=8)
        overflow = False
    except ExceedsPlatformConstraints as e:
        overflow = e.breakdown["bram"] > small.bram
    verdict(capsys, 8, "3-bit encoded design fits a small BRAM budget, 8-bit fixed-point does not",
            {"encoded compiles": fits, "fixed raises ExceedsPlatformConstraints": overflow,
             "buffer ratio exactly 3/8 per layer": len(ratios) == 3 and all(r == Fraction(3, 8) for r in ratios)},
            f"{small.name} BRAM {small.bram}: encoded {enc_est.bram}, fixed {fix_est.bram}, "
            f"buffer ratios {[str(r) for r in ratios]}")


def test_criterion_9_folding_arithmetic(capsys):
    pairs = list(product(divisors(64), divisors(128)))
    bad = []
    for pe, simd in pairs:
        st_ = fc_stage(64, 128)
        st_.pe, st_.simd = pe, simd
        vdp = (64 // pe) * (128 // simd)
        if not (mvau_cycles(64, 128, pe, simd, in_encoded=False).vdp == vdp
                and st_.cycles() == vdp and stage_resources(st_).dsp == pe * simd):
            bad.append((pe, simd))
    verdict(capsys, 9, "VDP = (64/PE)(128/SIMD) and DSP = PE*SIMD on every divisor pair",
            {"all divisor pairs": not bad and len(pairs) == 56}, f"{len(pairs) - len(bad)}/{len(pairs)} pairs")
