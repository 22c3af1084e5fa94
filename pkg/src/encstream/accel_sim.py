"""Functional and cycle-level model of the streaming accelerator.

Each stage is either an MVAU (decode -> multiply-accumulate -> bias / batch
norm -> encode) serving one CONV or FC layer, or an MPU doing max-pooling on
the incoming words. Every inter-stage buffer holds one full feature map, so
frames pipeline at stage granularity.

Cycle model, per MVAU window (one output vector):

* VDP = (rows / PE) * (in_fold / SIMD), one MAC per PE lane per cycle
* ID  = in_fold / SIMD when the input is encoded (one decode per SIMD beat),
  overlapped with VDP
* OE  = (rows / PE) * ceil(log2 K) for a binary-search encoder over K entries

A stage costs ``windows * max(ID, VDP, OE)`` cycles per frame. An MPU reads one
input pixel (all channels) per cycle. Window generation in the SWU is free.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .codebook import Codebook, encode_array, index_bits
from .tensor_nn import DTYPE, conv_out_size

if TYPE_CHECKING:
    from .hw_compiler import HardwareConfig, StageConfig

PIPELINE_MODEL = "layer-granularity frame pipeline; SWU window generation costs 0 cycles"


class DivisibilityError(ValueError):
    pass


# --- streams ------------------------------------------------------------------

@dataclass
class Stream:
    """Words for a batch of frames, ``(frames, n_words)`` in emit order.

    ``layout`` says how the words map back onto ``frame_shape``: ``"CHW"`` is
    plain row-major, ``"HWC"`` is pixel-major with channels innermost (what an
    MVAU emits, one output vector per window).
    """

    words: np.ndarray
    bits: int
    encoded: bool
    frame_shape: tuple[int, ...]
    layout: str = "CHW"
    codebook: Codebook | None = None
    producer: int = -1
    consumer: int = -1

    def __post_init__(self):
        n = int(np.prod(self.frame_shape))
        if self.words.ndim != 2 or self.words.shape[1] != n:
            raise ValueError(f"stream carries {self.words.shape} words, frame needs {n}")

    @property
    def frames(self) -> int:
        return self.words.shape[0]

    def to_fmap(self) -> np.ndarray:
        f = self.frames
        if self.layout == "CHW" or len(self.frame_shape) != 3:
            return self.words.reshape((f,) + self.frame_shape)
        c, h, w = self.frame_shape
        return self.words.reshape(f, h, w, c).transpose(0, 3, 1, 2)

    def decoded(self) -> np.ndarray:
        fm = self.to_fmap()
        return self.codebook.values[fm] if self.encoded else fm

    @classmethod
    def from_fmap(cls, fmap: np.ndarray, bits: int, encoded: bool, layout: str = "CHW",
                  codebook: Codebook | None = None, producer=-1, consumer=-1) -> "Stream":
        f = fmap.shape[0]
        arr = fmap.transpose(0, 2, 3, 1) if layout == "HWC" and fmap.ndim == 4 else fmap
        return cls(np.ascontiguousarray(arr).reshape(f, -1), bits, encoded, tuple(fmap.shape[1:]),
                   layout, codebook, producer, consumer)


# --- cycle model --------------------------------------------------------------

@dataclass(frozen=True)
class CycleTriple:
    id: int
    vdp: int
    oe: int

    @property
    def beat(self) -> int:
        return max(self.id, self.vdp, self.oe)


def check_folding(rows: int, in_fold: int, pe: int, simd: int) -> None:
    if pe < 1 or simd < 1 or rows % pe or in_fold % simd:
        raise DivisibilityError(f"PE={pe} must divide {rows} rows and SIMD={simd} must divide "
                                f"input fold {in_fold}")


def mvau_cycles(rows: int, in_fold: int, pe: int, simd: int, in_encoded: bool = True,
                out_codebook_size: int | None = None) -> CycleTriple:
    """ID / VDP / OE cycles for one output vector."""
    check_folding(rows, in_fold, pe, simd)
    nf, sf = rows // pe, in_fold // simd
    oe = nf * index_bits(out_codebook_size) if out_codebook_size else 0
    return CycleTriple(sf if in_encoded else 0, nf * sf, oe)


def mpu_cycles(in_shape: tuple[int, ...]) -> int:
    return int(in_shape[1] * in_shape[2])


def pipeline_schedule(stage_cycles: Sequence[int], frames: int) -> list[list[tuple[int, int]]]:
    """(start, end) per stage and frame: a stage takes frame f once the previous
    stage has produced it and the stage itself has finished frame f - 1."""
    sched: list[list[tuple[int, int]]] = []
    prev = [0] * frames
    for c in stage_cycles:
        row, busy = [], 0
        for f in range(frames):
            start = max(prev[f], busy)
            busy = start + int(c)
            row.append((start, busy))
        sched.append(row)
        prev = [end for _, end in row]
    return sched


def makespan(stage_cycles: Sequence[int], frames: int) -> int:
    if frames < 1:
        return 0
    return pipeline_schedule(stage_cycles, frames)[-1][-1][1]


def closed_form_makespan(stage_cycles: Sequence[int], frames: int) -> int:
    return int(sum(stage_cycles)) + (frames - 1) * int(max(stage_cycles))


# --- engines ------------------------------------------------------------------

def swu_reorder(fmap: np.ndarray, kernel, stride: int = 1, padding: int = 0,
                pad_word=0) -> np.ndarray:
    """Convolution windows of ``(C, H, W)`` (or a batch of them).

    Returns ``(n_windows, C*kh*kw)`` (or ``(frames, n_windows, C*kh*kw)``);
    windows in row-major output order, each one channel-major then row-major.
    Use :func:`simd_chunks` to split windows into SIMD beats.
    """
    single = fmap.ndim == 3
    x = fmap[None] if single else fmap
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    f, c, h, w = x.shape
    oh, ow = conv_out_size(h, kh, stride, padding), conv_out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kernel} does not fit padded input {(c, h, w)}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_word)
    out = np.empty((f, oh * ow, c * kh * kw), dtype=x.dtype)
    k = 0
    for r in range(oh):
        for q in range(ow):
            win = x[:, :, r * stride:r * stride + kh, q * stride:q * stride + kw]
            out[:, k] = win.reshape(f, -1)
            k += 1
    return out[0] if single else out


def simd_chunks(windows: np.ndarray, simd: int) -> np.ndarray:
    if windows.shape[-1] % simd:
        raise DivisibilityError(f"SIMD={simd} does not divide window length {windows.shape[-1]}")
    return windows.reshape(windows.shape[:-1] + (windows.shape[-1] // simd, simd))


def mpu_execute(stream: Stream, window: int, stride: int | None = None) -> Stream:
    """Max-pool on the words themselves; encoded words stay encoded."""
    stride = stride or window
    fm = stream.to_fmap()
    f, c, h, w = fm.shape
    oh, ow = conv_out_size(h, window, stride, 0), conv_out_size(w, window, stride, 0)
    out = np.empty((f, c, oh, ow), dtype=fm.dtype)
    for r in range(oh):
        for q in range(ow):
            win = fm[:, :, r * stride:r * stride + window, q * stride:q * stride + window]
            out[:, :, r, q] = win.max(axis=(2, 3))
    return Stream.from_fmap(out, stream.bits, stream.encoded, "HWC", stream.codebook,
                            stream.producer + 1)


@dataclass
class MvauResult:
    stream: Stream
    cycles: CycleTriple
    windows: int
    beats: int


def _decoded_weights(stage: "StageConfig") -> np.ndarray:
    if stage.weight_codebook is not None:
        return stage.weight_codebook.values[stage.weight_indices]
    return stage.weight_values


def mvau_execute(stream: Stream, stage: "StageConfig") -> MvauResult:
    """Run one MVAU over every frame in ``stream``.

    Input words are decoded SIMD lanes at a time (through the SWU for CONV),
    each PE accumulates lane products in lane order, then bias, batch norm and
    the output encoder (or ReLU / pass-through) are applied per output.
    """
    check_folding(stage.rows, stage.in_fold, stage.pe, stage.simd)
    if stream.encoded != (stage.in_format == "encoded"):
        raise ValueError(f"{stage.name}: stream encoding does not match stage input format")
    fm = stream.to_fmap()
    f = fm.shape[0]
    if stage.op == "CONV":
        pad_word = stage.pad_word()
        windows = swu_reorder(fm, stage.kernel, stage.stride, stage.padding, pad_word)
    else:
        windows = fm.reshape(f, 1, -1)
    n_win = windows.shape[1]
    beats = simd_chunks(windows.reshape(f * n_win, stage.in_fold), stage.simd)
    w = _decoded_weights(stage)
    acc = np.zeros((f * n_win, stage.rows), dtype=DTYPE)
    for sf in range(beats.shape[1]):
        lanes = beats[:, sf, :]
        x = stream.codebook.values[lanes] if stream.encoded else lanes.astype(DTYPE, copy=False)
        base = sf * stage.simd
        # PE folds are independent accumulators; all of them are stepped per lane
        for lane in range(stage.simd):
            acc += x[:, lane:lane + 1] * w[:, base + lane]
    out = acc + stage.bias
    if stage.alpha is not None:
        out = stage.alpha * out + stage.beta
    if stage.out_format == "encoded":
        words = encode_array(out, stage.act_codebook)
        encoded, cb = True, stage.act_codebook
    else:
        words = np.maximum(out, 0) if stage.relu else out
        encoded, cb = False, None
    k = stage.act_codebook.size if stage.out_format == "encoded" else None
    cyc = mvau_cycles(stage.rows, stage.in_fold, stage.pe, stage.simd,
                      stage.in_format == "encoded", k)
    if stage.op == "CONV":
        c_out, oh, ow = stage.out_shape
        fmap = words.reshape(f, oh, ow, c_out).transpose(0, 3, 1, 2)
        out_stream = Stream.from_fmap(fmap, stage.out_bits, encoded, "HWC", cb)
    else:
        out_stream = Stream(words.reshape(f, -1), stage.out_bits, encoded, tuple(stage.out_shape),
                            "CHW", cb)
    return MvauResult(out_stream, cyc, n_win, beats.shape[1])


# --- whole pipeline -----------------------------------------------------------

@dataclass
class StageReport:
    name: str
    kind: str
    layers: list[int]
    pe: int
    simd: int
    windows: int
    id_per_window: int
    vdp_per_window: int
    oe_per_window: int
    id_cycles: int
    vdp_cycles: int
    oe_cycles: int
    cycles: int
    decode_overlapped: bool
    vdp_share: float
    out_words: int
    out_bits: int


@dataclass
class SimReport:
    stages: list[StageReport]
    frames: int
    latency_cycles: int
    initiation_interval: int
    makespan_cycles: int
    throughput_fps: float
    clock_mhz: float
    resources: dict
    logits: np.ndarray
    schedule: list[list[tuple[int, int]]]
    offchip: list[dict]
    seed: int | None = None
    model: str = PIPELINE_MODEL

    @property
    def stage_cycles(self) -> list[int]:
        return [s.cycles for s in self.stages]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "seed": self.seed,
            "frames": self.frames,
            "clock_mhz": self.clock_mhz,
            "latency_cycles": self.latency_cycles,
            "initiation_interval": self.initiation_interval,
            "makespan_cycles": self.makespan_cycles,
            "throughput_fps": self.throughput_fps,
            "resources": self.resources,
            "offchip": self.offchip,
            "stages": [asdict(s) for s in self.stages],
            "logits": [[float(v) for v in row] for row in self.logits],
            "predictions": [int(v) for v in np.argmax(self.logits, axis=1)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def breakdown_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "ID", "VDP", "OE"])
        for s in self.stages:
            w.writerow([s.name, s.id_cycles, s.vdp_cycles, s.oe_cycles])
        return buf.getvalue()


def input_stream(hwcfg: "HardwareConfig", frames: np.ndarray) -> Stream:
    x = np.asarray(frames, dtype=DTYPE)
    shape = tuple(hwcfg.input_shape)
    if x.shape == shape:
        x = x[None]
    x = x.reshape((x.shape[0],) + shape)
    return Stream(x.reshape(x.shape[0], -1), 32, False, shape, "CHW", None, -1, 0)


def simulate_pipeline(hwcfg: "HardwareConfig", frames: np.ndarray) -> SimReport:
    """Push ``frames`` through every stage and time them with the pipeline model."""
    from .hw_compiler import estimate_resources

    stream = input_stream(hwcfg, frames)
    n_frames = stream.frames
    offchip = [{"direction": "in", "stage": 0, "words_per_frame": int(stream.words.shape[1]),
                "bits": 32}]
    reports = []
    for idx, st in enumerate(hwcfg.stages):
        stream.consumer = idx
        if st.kind == "MPU":
            out = mpu_execute(stream, st.window, st.stride)
            c = mpu_cycles(st.in_shape)
            rep = StageReport(st.name, st.kind, list(st.layers), 1, 1, 1, 0, 0, 0, 0, 0, 0, c,
                              True, 0.0, int(out.words.shape[1]), out.bits)
        else:
            res = mvau_execute(stream, st)
            out, cyc = res.stream, res.cycles
            c = res.windows * cyc.beat
            vdp = res.windows * cyc.vdp
            rep = StageReport(st.name, st.kind, list(st.layers), st.pe, st.simd, res.windows,
                              cyc.id, cyc.vdp, cyc.oe, res.windows * cyc.id, vdp, res.windows * cyc.oe,
                              c, cyc.id <= cyc.vdp,
                              vdp / max(1, res.windows * (cyc.id + cyc.vdp + cyc.oe)),
                              int(out.words.shape[1]), out.bits)
        out.producer = idx
        reports.append(rep)
        stream = out
    logits = stream.decoded().reshape(n_frames, -1).astype(DTYPE)
    offchip.append({"direction": "out", "stage": len(hwcfg.stages) - 1,
                    "words_per_frame": int(stream.words.shape[1]), "bits": stream.bits})
    cycles = [r.cycles for r in reports]
    sched = pipeline_schedule(cycles, n_frames)
    ii = max(cycles)
    return SimReport(
        stages=reports,
        frames=n_frames,
        latency_cycles=int(sum(cycles)),
        initiation_interval=int(ii),
        makespan_cycles=sched[-1][-1][1],
        throughput_fps=hwcfg.clock_mhz * 1e6 / ii,
        clock_mhz=hwcfg.clock_mhz,
        resources=estimate_resources(hwcfg).to_dict(),
        logits=logits,
        schedule=sched,
        offchip=offchip,
        seed=hwcfg.seed,
    )
