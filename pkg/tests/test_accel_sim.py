import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encstream.accel_sim import (CycleTriple, Stream, closed_form_makespan, makespan, mpu_execute,
                                 mvau_cycles, mvau_execute, pipeline_schedule, simulate_pipeline,
                                 swu_reorder)
from encstream.codebook import Codebook, encode_array, index_bits
from encstream.hw_compiler import compile_network, lower
from encstream.tensor_nn import LayerSpec as L, NetworkSpec, im2col, init_params
from encstream.training import encoded_infer

from conftest import encode_network, random_conv_net


def test_swu_examples():
    x = np.arange(9).reshape(1, 3, 3)
    w = swu_reorder(x, 2)
    assert w.shape == (4, 4) and w[0].tolist() == [0, 1, 3, 4]
    assert swu_reorder(x, 3).tolist() == [list(range(9))]
    x4 = np.arange(16).reshape(1, 4, 4)
    w = swu_reorder(x4, 2, stride=2)
    assert w.shape == (4, 4) and sorted(w.ravel().tolist()) == list(range(16))


def test_swu_agrees_with_im2col():
    rng = np.random.default_rng(0)
    for k, s, p in [(3, 1, 1), (2, 2, 0), (3, 2, 1), (1, 1, 0)]:
        x = rng.normal(size=(2, 3, 7, 6))
        assert np.array_equal(swu_reorder(x, k, s, p), im2col(x, (k, k), s, p))


def test_swu_pads_with_given_word():
    w = swu_reorder(np.full((1, 1, 1), 5), 3, 1, 1, pad_word=2)
    assert w.tolist() == [[2, 2, 2, 2, 5, 2, 2, 2, 2]]


def test_mvau_cycle_examples():
    assert mvau_cycles(64, 128, 8, 16, in_encoded=False).vdp == 64
    assert mvau_cycles(64, 128, 64, 128, in_encoded=False).vdp == 1
    t = mvau_cycles(64, 128, 8, 16, in_encoded=True, out_codebook_size=8)
    assert t == CycleTriple(8, 64, 8 * 3) and t.beat == 64
    assert mvau_cycles(64, 128, 8, 16, in_encoded=True, out_codebook_size=5).oe == 8 * index_bits(5)


def test_mpu_examples():
    cb = Codebook([0, 0.1, 0.5, 0.9])
    s = Stream(np.array([[1, 3, 2, 0]]), 2, True, (1, 2, 2), codebook=cb)
    out = mpu_execute(s, 2)
    assert out.words.tolist() == [[3]] and out.encoded
    const = Stream(np.full((1, 16), 2), 2, True, (1, 4, 4), codebook=cb)
    assert (mpu_execute(const, 2).words == 2).all()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False, width=32), min_size=1, max_size=16, unique=True),
       st.lists(st.integers(0, 15), min_size=4, max_size=4))
def test_mpu_decode_commutes(vals, picks):
    cb = Codebook(sorted(vals))
    idx = np.array([p % cb.size for p in picks])
    assert cb.values[idx.max()] == cb.values[idx].max()
    y = cb.values[idx] + np.float32(0.01)
    assert encode_array(np.array([y.max()]), cb)[0] == encode_array(y, cb).max()


def test_pipeline_examples():
    assert makespan([100, 300, 200], 1) == 600
    assert makespan([100, 300, 200], 4) == 1500
    assert 152e6 / 300 == pytest.approx(506_666.67, abs=0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=1, max_size=8), st.integers(1, 12))
def test_pipeline_algebra(cycles, frames):
    assert makespan(cycles, frames) == closed_form_makespan(cycles, frames)
    if frames >= 2:
        assert makespan(cycles, frames) - makespan(cycles, frames - 1) == max(cycles)
    sched = pipeline_schedule(cycles, frames)
    for l, row in enumerate(sched):
        for f, (start, end) in enumerate(row):
            assert end - start == cycles[l]
            if l:
                assert start >= sched[l - 1][f][1]
            if f:
                assert start >= row[f - 1][1]


def test_fc_16x32_three_bit_bit_exact():
    net = NetworkSpec((L.fc(16, name="fc1"), L.relu(), L.fc(32, name="fc2"), L.encode(),
                       L.fc(4, name="out")), (32,), 4)
    p = init_params(net, 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 32)).astype(np.float32)
    enc = encode_network(net, p, x, act_k=8, weight_k=8)
    hw = compile_network(net, p, enc, "ZC702")
    rep = simulate_pipeline(hw, x)
    assert np.array_equal(rep.logits, encoded_infer(net, p, enc, x, sequential=True))


def test_report_fields_and_determinism():
    rng = np.random.default_rng(3)
    net, params = random_conv_net(rng)
    x = rng.random((6,) + net.input_shape).astype(np.float32)
    enc = encode_network(net, params, x, act_k=8, weight_k=8)
    hw = compile_network(net, params, enc, "XC7S50")
    a, b = simulate_pipeline(hw, x), simulate_pipeline(hw, x)
    assert a.to_json() == b.to_json()
    c = a.stage_cycles
    assert a.latency_cycles == sum(c) and a.initiation_interval == max(c)
    assert a.makespan_cycles == closed_form_makespan(c, 6)
    assert a.throughput_fps == pytest.approx(152e6 / max(c))
    assert a.breakdown_csv().splitlines()[0] == "layer,ID,VDP,OE"
    for s, st_ in zip(a.stages, hw.stages):
        if s.kind == "MVAU":
            k = st_.act_codebook.size if st_.out_format == "encoded" else None
            t = mvau_cycles(st_.rows, st_.in_fold, st_.pe, st_.simd, st_.in_format == "encoded", k)
            assert (s.id_cycles, s.vdp_cycles, s.oe_cycles) == (s.windows * t.id, s.windows * t.vdp,
                                                                s.windows * t.oe)
            assert s.decode_overlapped and 0 < s.vdp_share <= 1
    # MPU stages use no DSP
    assert all(r["dsp"] == 0 for r, s in zip(a.resources["stages"], a.stages) if s.kind == "MPU")


def test_stream_word_counts_match_outputs():
    rng = np.random.default_rng(5)
    net, params = random_conv_net(rng)
    x = rng.random((2,) + net.input_shape).astype(np.float32)
    enc = encode_network(net, params, x)
    hw = compile_network(net, params, enc, "VCU108")
    rep = simulate_pipeline(hw, x)
    for s, st_ in zip(rep.stages, hw.stages):
        assert s.out_words == int(np.prod(st_.out_shape))


def test_buffer_bits_scale_with_word_width():
    rng = np.random.default_rng(6)
    net, params = random_conv_net(rng)
    x = rng.random((10,) + net.input_shape).astype(np.float32)
    enc = encode_network(net, params, x, act_k=8)
    encd = lower(net, params, enc)
    fixed = lower(net, params, enc, fixed_act_bits=8)
    for a, b in zip(encd, fixed):
        assert a.buffer_words == b.buffer_words
        if a.out_format == "encoded":
            assert a.buffer_words * a.out_bits * 8 == b.buffer_words * b.out_bits * 3
