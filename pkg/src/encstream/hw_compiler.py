"""Lower a trained (encoded) network onto streaming accelerator stages.

Layer pattern ``(CONV|FC) [BATCHNORM] [RELU|ENCODE]`` becomes one MVAU stage and
``MAXPOOL`` becomes one MPU stage. PE/SIMD folding is then chosen per stage to
minimize the initiation interval within a platform's BRAM and DSP budgets.

On-disk artifacts (see :func:`emit_hw_config`):

* ``hwconfig.json``: stage geometry, folding, formats, bias / batch-norm constants
* ``codebooks.cdx``: every codebook in stage order (weights first, then encoder)
* ``weights.bin``: per MVAU stage, one row per output; encoded rows hold
  ``in_fold`` indices packed LSB-first at the stage's weight bitwidth and
  padded to a whole byte, full-precision rows hold little-endian float32.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .bitwidth import BitwidthConfig
from .codebook import Codebook, CodebookEntry, EncodedTensor, ROLE_ACTIVATIONS, ROLE_WEIGHTS, \
    index_bits, load_codebooks, save_codebooks
from .accel_sim import check_folding, mpu_cycles, mvau_cycles
from .tensor_nn import DTYPE, LayerKind, LayerSpec, NetworkSpec, ShapeError, check_params
from .training import Encoding

HWCONFIG_FORMAT = "encstream-hwconfig/1"
NETWORK_FORMAT = "encstream-network/1"
DEFAULT_CLOCK_MHZ = 152.0
BRAM_BITS = 18432
FLOAT_BITS = 32
CODEBOOK_WORD_BITS = 32
DEFAULT_FIXED_BITS = 8

# linear FF/LUT proxies; only BRAM and DSP gate feasibility
FF_PER_LANE, FF_PER_PE = 64, 32
LUT_PER_LANE, LUT_PER_PE = 48, 24


class CompileError(ValueError):
    """The network cannot be lowered onto MVAU/MPU stages."""


class NetworkParseError(ValueError):
    """A network description is malformed."""


class ExceedsPlatformConstraints(RuntimeError):
    """No folding fits the platform; ``breakdown`` holds the minimal design's usage."""

    def __init__(self, msg: str, breakdown: dict):
        super().__init__(msg)
        self.breakdown = breakdown


# --- platforms ----------------------------------------------------------------

@dataclass(frozen=True)
class PlatformBudget:
    name: str
    bram: int
    dsp: int
    ff: int
    lut: int
    bram_bits: int = BRAM_BITS

    def to_dict(self) -> dict:
        return {"name": self.name, "bram": self.bram, "dsp": self.dsp, "ff": self.ff,
                "lut": self.lut, "bram_bits": self.bram_bits}

    @classmethod
    def from_dict(cls, d) -> "PlatformBudget":
        return cls(d["name"], int(d["bram"]), int(d["dsp"]), int(d["ff"]), int(d["lut"]),
                   int(d.get("bram_bits", BRAM_BITS)))


PLATFORMS: dict[str, PlatformBudget] = {}


def register_platform(p: PlatformBudget) -> None:
    PLATFORMS[p.name.lower()] = p


for _p in (PlatformBudget("VCU108", 3456, 768, 1075200, 537600),
           PlatformBudget("ZC702", 280, 220, 106400, 53200),
           PlatformBudget("XC7S50", 120, 150, 65200, 32600)):
    register_platform(_p)


def get_platform(name: str | PlatformBudget) -> PlatformBudget:
    if isinstance(name, PlatformBudget):
        return name
    try:
        return PLATFORMS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown platform {name!r}; known: {sorted(p.name for p in PLATFORMS.values())}") from None


# --- stage description --------------------------------------------------------

@dataclass(eq=False)
class StageConfig:
    """One hardware stage. ``kind`` is ``"MVAU"`` or ``"MPU"``.

    Formats are ``"raw"`` (float32 frames from off-chip), ``"encoded"`` (codebook
    indices), ``"fixed"`` (fixed-point words, no codebook) or ``"float"``.
    """

    name: str
    kind: str
    op: str
    layers: tuple[int, ...]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    in_format: str
    in_bits: int
    out_format: str
    out_bits: int
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: int = 0
    window: int | None = None
    rows: int = 0
    in_fold: int = 0
    windows: int = 1
    pe: int = 1
    simd: int = 1
    relu: bool = False
    weight_bits: int | None = None
    weight_codebook: Codebook | None = None
    weight_indices: np.ndarray | None = None
    weight_values: np.ndarray | None = None
    in_codebook: Codebook | None = None
    act_codebook: Codebook | None = None
    bias: np.ndarray | None = None
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    onchip_output: bool = True

    @property
    def buffer_words(self) -> int:
        return int(np.prod(self.out_shape)) if self.onchip_output else 0

    def pad_word(self):
        if self.in_format != "encoded":
            return 0
        v = self.in_codebook.values
        hit = np.flatnonzero(v == 0)
        if hit.size == 0:
            raise CompileError(f"{self.name}: zero padding over encoded input needs a codebook "
                               f"entry equal to 0, got {v.tolist()}")
        return int(hit[0])

    def cycles(self, pe=None, simd=None) -> int:
        if self.kind == "MPU":
            return mpu_cycles(self.in_shape)
        k = self.act_codebook.size if self.out_format == "encoded" else None
        t = mvau_cycles(self.rows, self.in_fold, pe or self.pe, simd or self.simd,
                        self.in_format == "encoded", k)
        return self.windows * t.beat

    def meta(self) -> dict:
        """JSON-safe description (no arrays, no codebook values)."""
        return {
            "name": self.name, "kind": self.kind, "op": self.op, "layers": list(self.layers),
            "in_shape": list(self.in_shape), "out_shape": list(self.out_shape),
            "in_format": self.in_format, "in_bits": self.in_bits,
            "out_format": self.out_format, "out_bits": self.out_bits,
            "kernel": list(self.kernel) if self.kernel else None, "stride": self.stride,
            "padding": self.padding, "window": self.window, "rows": self.rows,
            "in_fold": self.in_fold, "windows": self.windows, "pe": self.pe, "simd": self.simd,
            "relu": self.relu, "weight_bits": self.weight_bits, "onchip_output": self.onchip_output,
        }

    def __eq__(self, other):
        if not isinstance(other, StageConfig) or self.meta() != other.meta():
            return False
        for a in ("weight_codebook", "in_codebook", "act_codebook"):
            if getattr(self, a) != getattr(other, a):
                return False
        for a in ("weight_indices", "weight_values", "bias", "alpha", "beta"):
            x, y = getattr(self, a), getattr(other, a)
            if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
                return False
        return True


@dataclass(eq=False)
class HardwareConfig:
    stages: list[StageConfig]
    platform: PlatformBudget
    input_shape: tuple[int, ...]
    num_classes: int
    clock_mhz: float = DEFAULT_CLOCK_MHZ
    seed: int | None = None
    fixed_act_bits: int | None = None

    def __eq__(self, other):
        return (isinstance(other, HardwareConfig) and self.platform == other.platform
                and tuple(self.input_shape) == tuple(other.input_shape)
                and self.num_classes == other.num_classes and self.clock_mhz == other.clock_mhz
                and self.seed == other.seed and self.fixed_act_bits == other.fixed_act_bits
                and len(self.stages) == len(other.stages)
                and all(a == b for a, b in zip(self.stages, other.stages)))

    def stage_cycles(self) -> list[int]:
        return [s.cycles() for s in self.stages]


# --- lowering -----------------------------------------------------------------

def _stage_name(net: NetworkSpec, i: int) -> str:
    layer = net.layers[i]
    return layer.name or f"{layer.kind.value.lower()}{i}"


def _group_layers(net: NetworkSpec) -> list[tuple[int, int | None, int | None]]:
    """(main, batchnorm, activation) index triples in network order."""
    groups, i, n = [], 0, len(net.layers)
    while i < n:
        kind = net.layers[i].kind
        if kind is LayerKind.MAXPOOL:
            groups.append((i, None, None))
            i += 1
            continue
        if kind not in (LayerKind.CONV, LayerKind.FC):
            raise CompileError(f"{net.describe(i)} must follow a CONV or FC layer to be lowered")
        bn = act = None
        j = i + 1
        if j < n and net.layers[j].kind is LayerKind.BATCHNORM:
            bn, j = j, j + 1
        if j < n and net.layers[j].kind in (LayerKind.RELU, LayerKind.ENCODE):
            act, j = j, j + 1
        groups.append((i, bn, act))
        i = j
    if not groups:
        raise CompileError("network has no layers")
    return groups


def lower(net: NetworkSpec, params, encoding: Encoding | None = None,
          config: BitwidthConfig | None = None, fixed_act_bits: int | None = None) -> list[StageConfig]:
    """Map layers to MVAU/MPU stages with PE = SIMD = 1.

    ``config`` gives the stored bitwidths; without it each codebook's own index
    width is used. ``fixed_act_bits`` replaces every activation codebook by
    fixed-point words of that width (no encoder or decoder).
    """
    check_params(net, params)
    enc = encoding or Encoding()
    if config is not None:
        config.check(net)
    sites = net.activation_sites()
    wlayers = net.weight_layers()
    stages: list[StageConfig] = []
    fmt, bits, cb = "raw", FLOAT_BITS, None
    for main, bn, act in _group_layers(net):
        layer = net.layers[main]
        in_shape, last = net.in_shape(main), max(x for x in (main, bn, act) if x is not None)
        out_shape = net.out_shape(last)
        name = _stage_name(net, main)
        if layer.kind is LayerKind.MAXPOOL:
            stages.append(StageConfig(name, "MPU", "MAXPOOL", (main,), in_shape, out_shape,
                                      fmt, bits, fmt, bits, window=layer.window,
                                      stride=layer.stride, act_codebook=cb, in_codebook=cb))
            continue
        p = params[main]
        w = np.asarray(p["W"], dtype=DTYPE)
        rows = w.shape[0]
        st = StageConfig(name, "MVAU", layer.kind.value, tuple(x for x in (main, bn, act) if x is not None),
                         in_shape, out_shape, fmt, bits, "float", FLOAT_BITS,
                         rows=rows, in_fold=int(np.prod(w.shape[1:])),
                         bias=np.asarray(p["b"], dtype=DTYPE).copy(), in_codebook=cb)
        if layer.kind is LayerKind.CONV:
            st.kernel, st.stride, st.padding = layer.kernel, layer.stride, layer.padding
            st.windows = int(out_shape[1] * out_shape[2])
        if bn is not None:
            st.alpha = np.asarray(params[bn]["alpha"], dtype=DTYPE).copy()
            st.beta = np.asarray(params[bn]["beta"], dtype=DTYPE).copy()
        w_enc: EncodedTensor | None = enc.weights.get(main)
        if w_enc is not None:
            wb = config.weight_bits[wlayers.index(main)] if config is not None else None
            wb = wb if wb is not None else max(1, w_enc.codebook.bitwidth)
            if w_enc.codebook.size > 2 ** wb:
                raise CompileError(f"{net.describe(main)}: {w_enc.codebook.size} weight codebook "
                                   f"entries do not fit {wb} bits")
            st.weight_bits = wb
            st.weight_codebook = w_enc.codebook
            st.weight_indices = np.asarray(w_enc.indices).reshape(rows, -1).astype(np.int64)
        else:
            st.weight_values = w.reshape(rows, -1).copy()
        relu = act is not None and net.layers[act].kind is LayerKind.RELU
        act_cb = enc.act.get(act) if act is not None else None
        if fixed_act_bits is not None and act is not None:
            st.out_format, st.out_bits, st.relu = "fixed", fixed_act_bits, relu
        elif act_cb is not None:
            ab = config.act_bits[sites.index(act)] if config is not None else None
            ab = ab if ab is not None else max(1, act_cb.bitwidth)
            if act_cb.size > 2 ** ab:
                raise CompileError(f"{net.describe(act)}: {act_cb.size} activation codebook "
                                   f"entries do not fit {ab} bits")
            st.out_format, st.out_bits, st.act_codebook = "encoded", ab, act_cb
        else:
            st.relu = relu
        stages.append(st)
        fmt, bits = st.out_format, st.out_bits
        cb = st.act_codebook
    stages[-1].onchip_output = False
    return stages


# --- resources ----------------------------------------------------------------

@dataclass
class StageResources:
    name: str
    weight_bits: int
    weight_codebook_bits: int
    codebook_bits: int
    buffer_bits: int
    bram: int
    dsp: int
    ff: int
    lut: int

    @property
    def total_bits(self) -> int:
        return self.weight_bits + self.weight_codebook_bits + self.codebook_bits + self.buffer_bits


@dataclass
class ResourceEstimate:
    stages: list[StageResources]
    platform: PlatformBudget | None = None

    @property
    def bram(self) -> int:
        return sum(s.bram for s in self.stages)

    @property
    def dsp(self) -> int:
        return sum(s.dsp for s in self.stages)

    @property
    def ff(self) -> int:
        return sum(s.ff for s in self.stages)

    @property
    def lut(self) -> int:
        return sum(s.lut for s in self.stages)

    @property
    def buffer_bits(self) -> int:
        return sum(s.buffer_bits for s in self.stages)

    def violations(self, platform: PlatformBudget | None = None) -> list[str]:
        p = platform or self.platform
        out = []
        if self.bram > p.bram:
            out.append(f"BRAM {self.bram} > {p.bram}")
        if self.dsp > p.dsp:
            out.append(f"DSP {self.dsp} > {p.dsp}")
        return out

    def fits(self, platform: PlatformBudget | None = None) -> bool:
        return not self.violations(platform)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"bram": self.bram, "dsp": self.dsp, "ff": self.ff, "lut": self.lut,
                             "buffer_bits": self.buffer_bits,
                             "stages": [{**vars(s), "total_bits": s.total_bits} for s in self.stages]}
        if self.platform is not None:
            d["platform"] = self.platform.to_dict()
            d["fits"] = self.fits()
        return d


def stage_resources(st: StageConfig, pe: int | None = None, simd: int | None = None,
                    bram_bits: int = BRAM_BITS) -> StageResources:
    pe = st.pe if pe is None else pe
    simd = st.simd if simd is None else simd
    buf = st.buffer_words * st.out_bits
    if st.kind == "MPU":
        return StageResources(st.name, 0, 0, 0, buf, math.ceil(buf / bram_bits), 0, 0, 0)
    n_w = st.rows * st.in_fold
    if st.weight_codebook is not None:
        wbits, wcb = n_w * st.weight_bits, st.weight_codebook.size * CODEBOOK_WORD_BITS * pe
    else:
        wbits, wcb = n_w * FLOAT_BITS, 0
    cbits = 0
    if st.out_format == "encoded":
        cbits += st.act_codebook.size * CODEBOOK_WORD_BITS
    if st.in_format == "encoded":
        cbits += st.in_codebook.size * CODEBOOK_WORD_BITS
    total = wbits + wcb + cbits + buf
    wb = st.weight_bits or FLOAT_BITS
    return StageResources(st.name, wbits, wcb, cbits, buf, math.ceil(total / bram_bits), pe * simd,
                          FF_PER_LANE * pe * simd + FF_PER_PE * pe,
                          LUT_PER_LANE * pe * simd + LUT_PER_PE * pe * wb)


def estimate_resources(hw: HardwareConfig | Sequence[StageConfig],
                       platform: PlatformBudget | None = None) -> ResourceEstimate:
    if isinstance(hw, HardwareConfig):
        stages, platform = hw.stages, platform or hw.platform
    else:
        stages = list(hw)
    bits = platform.bram_bits if platform else BRAM_BITS
    return ResourceEstimate([stage_resources(s, bram_bits=bits) for s in stages], platform)


# --- folding allocation -------------------------------------------------------

def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


@dataclass(frozen=True)
class FoldOption:
    pe: int
    simd: int
    cycles: int
    dsp: int
    bram: int


@dataclass
class Allocation:
    folding: list[tuple[int, int]]
    stage_cycles: list[int]
    dsp: int
    bram: int

    @property
    def initiation_interval(self) -> int:
        return max(self.stage_cycles)

    @property
    def latency(self) -> int:
        return sum(self.stage_cycles)


def fold_options(st: StageConfig, platform: PlatformBudget) -> list[FoldOption]:
    if st.kind == "MPU":
        r = stage_resources(st, 1, 1, platform.bram_bits)
        return [FoldOption(1, 1, st.cycles(), 0, r.bram)]
    out = []
    for pe in divisors(st.rows):
        for simd in divisors(st.in_fold):
            r = stage_resources(st, pe, simd, platform.bram_bits)
            out.append(FoldOption(pe, simd, st.cycles(pe, simd), r.dsp, r.bram))
    return out


def _best_under(options: list[list[FoldOption]], t: int, platform: PlatformBudget):
    """Cheapest choice with every stage at most ``t`` cycles, or None.

    Dynamic program over total DSP; for each DSP total keep the lexicographic
    minimum of (BRAM, latency), which addition preserves, so the result is exact.
    """
    cap = platform.dsp
    big = 1 + sum(max(o.cycles for o in opts) for opts in options)
    inf = np.iinfo(np.int64).max
    dp = np.full(cap + 1, inf, dtype=np.int64)
    dp[0] = 0
    choices = []
    for opts in options:
        cand = [o for o in opts if o.cycles <= t and o.dsp <= cap]
        if not cand:
            return None
        new = np.full(cap + 1, inf, dtype=np.int64)
        pick = np.full(cap + 1, -1, dtype=np.int64)
        for j, o in enumerate(cand):
            key = o.bram * big + o.cycles
            src = dp[:cap + 1 - o.dsp]
            val = np.where(src == inf, inf, src + key)
            dst = new[o.dsp:]
            better = val < dst
            dst[better] = val[better]
            pick[o.dsp:][better] = j
        dp = new
        choices.append((cand, pick))
    ok = [(d, int(dp[d])) for d in range(cap + 1) if dp[d] != inf and dp[d] // big <= platform.bram]
    if not ok:
        return None
    d = ok[0][0]
    chosen = []
    for cand, pick in reversed(choices):
        o = cand[int(pick[d])]
        chosen.append(o)
        d -= o.dsp
    return chosen[::-1]


def allocate_parallelism(stages: Sequence[StageConfig], platform: PlatformBudget | str) -> Allocation:
    """Exact PE/SIMD choice minimizing the initiation interval.

    Ties are broken by fewest DSPs, then fewest BRAMs, then lowest latency.
    PE must divide the stage's rows and SIMD its input fold.
    """
    platform = get_platform(platform)
    options = [fold_options(st, platform) for st in stages]
    targets = sorted({o.cycles for opts in options for o in opts})
    lo_bound = max(min(o.cycles for o in opts) for opts in options)
    targets = [t for t in targets if t >= lo_bound]
    best = _best_under(options, targets[-1], platform)
    if best is None:
        minimal = [stage_resources(st, 1, 1, platform.bram_bits) for st in stages]
        est = ResourceEstimate(minimal, platform)
        raise ExceedsPlatformConstraints(
            f"even the smallest folding needs BRAM {est.bram} / DSP {est.dsp}; "
            f"{platform.name} has BRAM {platform.bram} / DSP {platform.dsp}", est.to_dict())
    lo, hi = 0, len(targets) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        got = _best_under(options, targets[mid], platform)
        if got is None:
            lo = mid + 1
        else:
            hi, best = mid, got
    best = _best_under(options, targets[lo], platform)
    return Allocation([(o.pe, o.simd) for o in best], [o.cycles for o in best],
                      sum(o.dsp for o in best), sum(o.bram for o in best))


def compile_network(net: NetworkSpec, params, encoding: Encoding | None = None,
                    platform: PlatformBudget | str = "VCU108", config: BitwidthConfig | None = None,
                    fixed_act_bits: int | None = None, clock_mhz: float = DEFAULT_CLOCK_MHZ,
                    seed: int | None = None) -> HardwareConfig:
    """Lower, fold and budget-check a network; raises ExceedsPlatformConstraints."""
    platform = get_platform(platform)
    stages = lower(net, params, encoding, config, fixed_act_bits)
    alloc = allocate_parallelism(stages, platform)
    stages = [replace(st, pe=pe, simd=simd) for st, (pe, simd) in zip(stages, alloc.folding)]
    return HardwareConfig(stages, platform, tuple(net.input_shape), net.num_classes, clock_mhz,
                          seed, fixed_act_bits)


# --- weights.bin / hwconfig.json ---------------------------------------------

def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    """Rows of indices, LSB-first at ``bits`` each, every row padded to a byte."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[None]
    if idx.size and (idx.min() < 0 or idx.max() >= 2 ** bits):
        raise ValueError(f"indices out of range for {bits} bits")
    rows, n = idx.shape
    b = (idx[..., None] >> np.arange(bits)) & 1
    b = b.reshape(rows, n * bits).astype(np.uint8)
    pad = (-b.shape[1]) % 8
    if pad:
        b = np.concatenate([b, np.zeros((rows, pad), dtype=np.uint8)], axis=1)
    return np.packbits(b, axis=1, bitorder="little").tobytes()


def unpack_indices(data: bytes, rows: int, n: int, bits: int) -> np.ndarray:
    row_bytes = math.ceil(n * bits / 8)
    if len(data) != rows * row_bytes:
        raise ValueError(f"expected {rows * row_bytes} bytes of packed indices, got {len(data)}")
    b = np.unpackbits(np.frombuffer(data, dtype=np.uint8).reshape(rows, row_bytes), axis=1,
                      bitorder="little")[:, :n * bits].reshape(rows, n, bits).astype(np.int64)
    return (b << np.arange(bits)).sum(axis=2)


def _floats(a):
    return None if a is None else [float(v) for v in a]


def hw_config_dict(hw: HardwareConfig) -> tuple[dict, list[CodebookEntry], bytes]:
    entries: list[CodebookEntry] = []
    blobs, offset = [], 0
    stages = []
    # an MPU passes its input codebook through; the downstream decoder reuses that entry
    cb_index: dict[int, int] = {}
    for st in hw.stages:
        d = st.meta()
        d["weight_codebook"] = d["act_codebook"] = d["in_codebook"] = None
        if st.in_codebook is not None:
            d["in_codebook"] = cb_index[id(st.in_codebook)]
        if st.kind == "MVAU":
            if st.weight_codebook is not None:
                d["weight_codebook"] = len(entries)
                entries.append(CodebookEntry(ROLE_WEIGHTS, st.weight_codebook))
                blob = pack_indices(st.weight_indices, st.weight_bits)
                d["weights"] = {"encoding": "packed", "offset": offset, "nbytes": len(blob),
                                "row_bytes": math.ceil(st.in_fold * st.weight_bits / 8)}
            else:
                blob = np.asarray(st.weight_values, dtype="<f4").tobytes()
                d["weights"] = {"encoding": "f32", "offset": offset, "nbytes": len(blob),
                                "row_bytes": st.in_fold * 4}
            blobs.append(blob)
            offset += len(blob)
            if st.act_codebook is not None:
                d["act_codebook"] = len(entries)
                cb_index[id(st.act_codebook)] = len(entries)
                entries.append(CodebookEntry(ROLE_ACTIVATIONS, st.act_codebook))
            d["bias"], d["alpha"], d["beta"] = _floats(st.bias), _floats(st.alpha), _floats(st.beta)
        stages.append(d)
    doc = {
        "format": HWCONFIG_FORMAT,
        "platform": hw.platform.to_dict(),
        "clock_mhz": hw.clock_mhz,
        "seed": hw.seed,
        "input_shape": list(hw.input_shape),
        "num_classes": hw.num_classes,
        "fixed_act_bits": hw.fixed_act_bits,
        "stages": stages,
        "resources": estimate_resources(hw).to_dict(),
        "stage_cycles": hw.stage_cycles(),
    }
    return doc, entries, b"".join(blobs)


def emit_hw_config(hw: HardwareConfig, out_dir) -> dict[str, Path]:
    """Write hwconfig.json, codebooks.cdx and weights.bin after re-checking the budget."""
    for st in hw.stages:
        if st.kind == "MVAU":
            check_folding(st.rows, st.in_fold, st.pe, st.simd)
    est = estimate_resources(hw)
    if not est.fits():
        raise ExceedsPlatformConstraints(f"refusing to emit: {', '.join(est.violations())} on "
                                         f"{hw.platform.name}", est.to_dict())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc, entries, blob = hw_config_dict(hw)
    paths = {"hwconfig": out / "hwconfig.json", "codebooks": out / "codebooks.cdx",
             "weights": out / "weights.bin"}
    paths["hwconfig"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    save_codebooks(paths["codebooks"], entries)
    paths["weights"].write_bytes(blob)
    return paths


def _arr(v):
    return None if v is None else np.asarray(v, dtype=DTYPE)


def load_hw_config(in_dir) -> HardwareConfig:
    d = Path(in_dir)
    doc = json.loads((d / "hwconfig.json").read_text())
    if doc.get("format") != HWCONFIG_FORMAT:
        raise ValueError(f"{d / 'hwconfig.json'}: unsupported format {doc.get('format')!r}")
    cbs = [e.codebook for e in load_codebooks(d / "codebooks.cdx")]
    blob = (d / "weights.bin").read_bytes()
    stages = []
    for s in doc["stages"]:
        def cb(key):
            return None if s.get(key) is None else cbs[s[key]]
        st = StageConfig(
            s["name"], s["kind"], s["op"], tuple(s["layers"]), tuple(s["in_shape"]),
            tuple(s["out_shape"]), s["in_format"], s["in_bits"], s["out_format"], s["out_bits"],
            kernel=tuple(s["kernel"]) if s["kernel"] else None, stride=s["stride"],
            padding=s["padding"], window=s["window"], rows=s["rows"], in_fold=s["in_fold"],
            windows=s["windows"], pe=s["pe"], simd=s["simd"], relu=s["relu"],
            weight_bits=s["weight_bits"], in_codebook=cb("in_codebook"),
            act_codebook=cb("act_codebook"), onchip_output=s["onchip_output"])
        if st.kind == "MPU":
            st.act_codebook = st.in_codebook
        else:
            w = s["weights"]
            raw = blob[w["offset"]:w["offset"] + w["nbytes"]]
            if len(raw) != w["nbytes"]:
                raise ValueError(f"weights.bin truncated: stage {st.name} expects {w['nbytes']} "
                                 f"bytes at offset {w['offset']}, file has {len(blob)}")
            if w["encoding"] == "packed":
                st.weight_codebook = cb("weight_codebook")
                st.weight_indices = unpack_indices(raw, st.rows, st.in_fold, st.weight_bits)
            else:
                st.weight_values = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(st.rows, st.in_fold)
            st.bias, st.alpha, st.beta = _arr(s["bias"]), _arr(s["alpha"]), _arr(s["beta"])
        stages.append(st)
    return HardwareConfig(stages, PlatformBudget.from_dict(doc["platform"]), tuple(doc["input_shape"]),
                          doc["num_classes"], doc["clock_mhz"], doc["seed"], doc["fixed_act_bits"])


# --- network description (JSON) ----------------------------------------------

def _layer_to_dict(layer: LayerSpec) -> dict:
    d: dict[str, Any] = {"kind": layer.kind.value}
    if layer.name:
        d["name"] = layer.name
    if layer.kind is LayerKind.CONV:
        d.update(out_channels=layer.out_channels, kernel=list(layer.kernel), stride=layer.stride,
                 padding=layer.padding)
    elif layer.kind is LayerKind.FC:
        d["out_features"] = layer.out_features
    elif layer.kind is LayerKind.MAXPOOL:
        d.update(window=layer.window, stride=layer.stride)
    return d


def dump_network(net: NetworkSpec, params=None) -> str:
    """JSON text for ``net``; weights are written as nested lists when given."""
    layers = []
    for i, layer in enumerate(net.layers):
        d = _layer_to_dict(layer)
        if params is not None and params[i]:
            d["weights"] = {k: np.asarray(v).tolist() for k, v in sorted(params[i].items())}
        layers.append(d)
    doc = {"format": NETWORK_FORMAT, "input_shape": list(net.input_shape),
           "num_classes": net.num_classes, "layers": layers}
    return json.dumps(doc, indent=1) + "\n"


def _field(d: Mapping, key: str, where: str, kind=int, default=...):
    if key not in d:
        if default is ...:
            raise NetworkParseError(f"{where}: missing field '{key}'")
        return default
    v = d[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise NetworkParseError(f"{where}: field '{key}' must be an integer, got {v!r}")
    return v


def _parse_layer(d, i: int) -> LayerSpec:
    where = f"layers[{i}]"
    if not isinstance(d, dict):
        raise NetworkParseError(f"{where}: expected an object, got {type(d).__name__}")
    kind_s = d.get("kind")
    try:
        kind = LayerKind(str(kind_s).upper())
    except ValueError:
        raise NetworkParseError(f"{where}: unknown layer kind {kind_s!r}") from None
    name = d.get("name")
    where = f"{where} ({kind.value}{' ' + repr(name) if name else ''})"
    if kind is LayerKind.CONV:
        k = d.get("kernel")
        if k is None:
            raise NetworkParseError(f"{where}: missing field 'kernel'")
        k = tuple(k) if isinstance(k, list) else (k, k)
        return LayerSpec.conv(_field(d, "out_channels", where), k, _field(d, "stride", where, default=1),
                              _field(d, "padding", where, default=0), name)
    if kind is LayerKind.FC:
        return LayerSpec.fc(_field(d, "out_features", where), name)
    if kind is LayerKind.MAXPOOL:
        return LayerSpec.maxpool(_field(d, "window", where), _field(d, "stride", where, default=None), name)
    return {LayerKind.BATCHNORM: LayerSpec.batchnorm, LayerKind.RELU: LayerSpec.relu,
            LayerKind.ENCODE: LayerSpec.encode}[kind](name)


def parse_network(text: str, require_weights: bool = True):
    """Parse :func:`dump_network` output into ``(NetworkSpec, params)``.

    ``params`` is None when no layer carries weights and ``require_weights`` is
    False. Optional ``in_features`` (FC) and ``in_channels`` (CONV) fields are
    checked against the inferred input shape.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise NetworkParseError(f"line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise NetworkParseError("top level must be an object")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in doc:
            raise NetworkParseError(f"missing top-level field '{key}'")
    raw = doc["layers"]
    if not isinstance(raw, list) or not raw:
        raise NetworkParseError("field 'layers' must be a non-empty list")
    layers = [_parse_layer(d, i) for i, d in enumerate(raw)]
    try:
        net = NetworkSpec(tuple(layers), tuple(doc["input_shape"]), int(doc["num_classes"]))
    except (ShapeError, ValueError, TypeError) as e:
        raise NetworkParseError(str(e)) from None
    for i, d in enumerate(raw):
        in_shape = net.in_shape(i)
        for key, got in (("in_features", int(np.prod(in_shape))), ("in_channels", in_shape[0])):
            if key in d and d[key] != got:
                raise NetworkParseError(f"{net.describe(i)}: declares {key}={d[key]} but its input "
                                        f"provides {got} (input shape {in_shape})")
    has_w = [("weights" in d) for d in raw]
    if not any(has_w) and not require_weights:
        return net, None
    params = []
    for i, (d, layer) in enumerate(zip(raw, layers)):
        shapes = layer.param_shapes(net.in_shape(i))
        if not shapes:
            params.append({})
            continue
        w = d.get("weights")
        if w is None:
            raise NetworkParseError(f"{net.describe(i)}: missing field 'weights'")
        p = {}
        for key, shape in shapes.items():
            if key not in w:
                raise NetworkParseError(f"{net.describe(i)}: weights missing '{key}'")
            try:
                arr = np.asarray(w[key], dtype=DTYPE)
            except (ValueError, TypeError):
                raise NetworkParseError(f"{net.describe(i)}: weights '{key}' is not a numeric array") from None
            if arr.shape != tuple(shape):
                raise NetworkParseError(f"{net.describe(i)}: weights '{key}' has shape {arr.shape}, "
                                        f"expected {tuple(shape)}")
            p[key] = arr
        params.append(p)
    return net, params
