"""Greedy per-layer bitwidth search driven by memory-saved / accuracy-lost reward."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .codebook import activation_codebook_from_values, collect_activations, encode_weights, subsample
from .tensor_nn import LayerKind, NetworkSpec
from .training import Encoding, TrainResult, encoded_accuracy, fine_tune

log = logging.getLogger(__name__)

CODEBOOK_WORD_BITS = 32
FLOAT_BITS = 32
EPS = 1e-4
DEFAULT_ACT_BITS = 5
DEFAULT_CONV_BITS = 6
DEFAULT_FC_BITS = 4


@dataclass(frozen=True)
class BitwidthConfig:
    """Bits per activation site and per weight layer; ``None`` means full precision."""

    act_bits: tuple[int | None, ...]
    weight_bits: tuple[int | None, ...]

    def __post_init__(self):
        object.__setattr__(self, "act_bits", tuple(self.act_bits))
        object.__setattr__(self, "weight_bits", tuple(self.weight_bits))
        for b in self.act_bits + self.weight_bits:
            if b is not None and (int(b) != b or b < 1):
                raise ValueError(f"bitwidths must be integers >= 1, got {b}")

    def check(self, net: NetworkSpec) -> None:
        if len(self.act_bits) != len(net.activation_sites()):
            raise ValueError(f"expected {len(net.activation_sites())} activation bitwidths, "
                             f"got {len(self.act_bits)}")
        if len(self.weight_bits) != len(net.weight_layers()):
            raise ValueError(f"expected {len(net.weight_layers())} weight bitwidths, "
                             f"got {len(self.weight_bits)}")

    def bits(self, mode: str) -> tuple[int | None, ...]:
        return self.act_bits if mode == "activations" else self.weight_bits

    def with_bits(self, mode: str, pos: int, b: int | None) -> "BitwidthConfig":
        bits = list(self.bits(mode))
        bits[pos] = b
        if mode == "activations":
            return replace(self, act_bits=tuple(bits))
        return replace(self, weight_bits=tuple(bits))

    @classmethod
    def uniform(cls, net: NetworkSpec, act: int | None, weight: int | None) -> "BitwidthConfig":
        return cls((act,) * len(net.activation_sites()), (weight,) * len(net.weight_layers()))

    @classmethod
    def defaults(cls, net: NetworkSpec, act: int | None = DEFAULT_ACT_BITS,
                 conv: int | None = DEFAULT_CONV_BITS,
                 fc: int | None = DEFAULT_FC_BITS) -> "BitwidthConfig":
        wb = tuple(conv if net.layers[i].kind is LayerKind.CONV else fc for i in net.weight_layers())
        return cls((act,) * len(net.activation_sites()), wb)

    def to_dict(self) -> dict:
        return {"act_bits": list(self.act_bits), "weight_bits": list(self.weight_bits)}

    @classmethod
    def from_dict(cls, d) -> "BitwidthConfig":
        return cls(tuple(d["act_bits"]), tuple(d["weight_bits"]))


def buffer_elements(net: NetworkSpec, layer: int) -> int:
    """Streaming buffer depth after ``layer``: one full output feature map."""
    return int(np.prod(net.out_shape(layer)))


def weight_memory(n_weights: int, bits: int | None) -> int:
    if bits is None:
        return n_weights * FLOAT_BITS
    return n_weights * bits + (2 ** bits) * CODEBOOK_WORD_BITS


def activation_memory(n_elements: int, bits: int | None) -> int:
    if bits is None:
        return n_elements * FLOAT_BITS
    return n_elements * bits + (2 ** bits) * CODEBOOK_WORD_BITS


def memory_footprint(net: NetworkSpec, config: BitwidthConfig) -> int:
    """Total bits for weights (indices + codebook) and activation buffers.

    Biases and batch-norm constants are not counted.
    """
    config.check(net)
    total = 0
    for i, b in zip(net.weight_layers(), config.weight_bits):
        total += weight_memory(int(np.prod(net.layers[i].param_shapes(net.in_shape(i))["W"])), b)
    for i, b in zip(net.activation_sites(), config.act_bits):
        total += activation_memory(buffer_elements(net, i), b)
    return total


# --- search -------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryStep:
    config: BitwidthConfig
    memory_bits: int
    val_acc: float
    pos: int | None = None
    layer: int | None = None
    bits: int | None = None
    delta_mem: int | None = None
    delta_acc: float | None = None
    reward: float | None = None


@dataclass
class Candidate:
    pos: int
    layer: int
    bits: int
    config: BitwidthConfig
    memory_bits: int
    val_acc: float
    delta_mem: int
    delta_acc: float
    reward: float


@dataclass
class SearchTrajectory:
    mode: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    candidates: list[list[Candidate]] = field(default_factory=list)
    encodings: list[Encoding] = field(default_factory=list)
    diagnostic: str = ""
    seconds: float = 0.0

    def __len__(self):
        return len(self.steps)

    def heatmap(self) -> np.ndarray:
        """Bits per (site, iteration); full-precision entries are 0."""
        return np.array([[b or 0 for b in s.config.bits(self.mode)] for s in self.steps]).T

    def select(self, acc_floor: float) -> int:
        """Index of the lowest-memory step whose accuracy is at least ``acc_floor``."""
        ok = [k for k, s in enumerate(self.steps) if s.val_acc >= acc_floor]
        if not ok:
            raise ValueError(f"no configuration reaches accuracy {acc_floor}")
        return ok[-1]

    def write_csv(self, f) -> None:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "layer", "new_bits", "delta_mem_bits", "delta_acc", "reward",
                    "total_mem_bits", "val_acc"])
        for k, s in enumerate(self.steps):
            w.writerow([k, "" if s.layer is None else s.layer, "" if s.bits is None else s.bits,
                        "" if s.delta_mem is None else s.delta_mem,
                        "" if s.delta_acc is None else repr(s.delta_acc),
                        "" if s.reward is None else repr(s.reward), s.memory_bits, repr(s.val_acc)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def reward(delta_mem: float, delta_acc: float, eps: float = EPS) -> float:
    return delta_mem / max(delta_acc, eps)


class CodebookFactory:
    """Builds (and caches) the layer codebook for a given bitwidth.

    Weight codebooks are re-fit on the float weights; activation codebooks are
    re-clustered from activation samples captured once.
    """

    def __init__(self, net: NetworkSpec, params, mode: str, seed: int = 42,
                 act_samples: dict[int, np.ndarray] | None = None):
        self.net, self.params, self.mode, self.seed = net, params, mode, seed
        self.act_samples = act_samples or {}
        self._cache: dict[tuple[int, int], object] = {}

    def sites(self) -> list[int]:
        return self.net.activation_sites() if self.mode == "activations" else self.net.weight_layers()

    def build(self, layer: int, bits: int):
        key = (layer, bits)
        if key not in self._cache:
            if self.mode == "weights":
                self._cache[key] = encode_weights(self.params[layer]["W"], 2 ** bits, self.seed)[1]
            else:
                a = self.act_samples[layer]
                zero = self.net.layers[layer].kind is LayerKind.RELU
                self._cache[key] = activation_codebook_from_values(a, 2 ** bits, self.seed, zero)
        return self._cache[key]


def capture_activations(net, params, samples, encoding: Encoding | None = None,
                        n_samples: int | None = 10, seed: int = 42) -> dict[int, np.ndarray]:
    """Activation samples at every site over a subsampled batch (float forward of other sites)."""
    from .training import decoded_params
    enc = encoding or Encoding()
    batch = subsample(samples, n_samples, seed)
    p = decoded_params(params, Encoding({}, enc.weights))
    return {i: collect_activations(net, p, batch, i) for i in net.activation_sites()}


def _apply(enc: Encoding, mode: str, layer: int, item) -> Encoding:
    if mode == "activations":
        act = dict(enc.act)
        if item is None:
            act.pop(layer, None)
        else:
            act[layer] = item
        return enc.replace(act=act)
    w = dict(enc.weights)
    if item is None:
        w.pop(layer, None)
    else:
        w[layer] = item
    return enc.replace(weights=w)


def encoding_for(factory: CodebookFactory, base: Encoding, config: BitwidthConfig) -> Encoding:
    enc = base
    for pos, layer in enumerate(factory.sites()):
        b = config.bits(factory.mode)[pos]
        enc = _apply(enc, factory.mode, layer, None if b is None else factory.build(layer, b))
    return enc


def customize(net: NetworkSpec, params, encoding: Encoding | None, init_config: BitwidthConfig,
              val_set, acc_threshold: float, mode: str, seed: int = 42, val_size: int | None = 1000,
              act_samples: dict[int, np.ndarray] | None = None, train_samples=None,
              delta_reference: str = "current", eps: float = EPS,
              evaluate: Callable[[Encoding], float] | None = None) -> SearchTrajectory:
    """Iteratively lower one layer's bitwidth, picking the best ΔM / max(ΔA, eps) each step.

    Layers of the other mode keep the codebooks in ``encoding``; layers of this
    mode are (re)built from ``init_config``. Stops when the best candidate
    falls below ``acc_threshold`` or every layer is at 1 bit. No retraining
    happens inside the loop.
    """
    if mode not in ("activations", "weights"):
        raise ValueError(f"mode must be 'activations' or 'weights', got {mode!r}")
    if delta_reference not in ("current", "initial"):
        raise ValueError("delta_reference must be 'current' or 'initial'")
    init_config.check(net)
    t0 = time.perf_counter()
    base = encoding or Encoding()
    if mode == "activations" and act_samples is None:
        if train_samples is None:
            raise ValueError("activation search needs act_samples or train_samples")
        act_samples = capture_activations(net, params, train_samples, base, seed=seed)
    factory = CodebookFactory(net, params, mode, seed, act_samples)
    if evaluate is None:
        n_val = None if val_size is None else min(val_size, len(val_set[1]))

        def evaluate(enc):
            return encoded_accuracy(net, params, enc, val_set, n_val)

    config = init_config
    enc = encoding_for(factory, base, config)
    acc = evaluate(enc)
    mem = memory_footprint(net, config)
    traj = SearchTrajectory(mode)
    if acc < acc_threshold:
        traj.diagnostic = (f"initial accuracy {acc:.4f} is already below the threshold "
                           f"{acc_threshold:.4f}; nothing to search")
        log.warning(traj.diagnostic)
        traj.seconds = time.perf_counter() - t0
        return traj
    traj.steps.append(TrajectoryStep(config, mem, acc))
    traj.encodings.append(enc)
    ref_acc = acc
    sites = factory.sites()
    while True:
        cands: list[Candidate] = []
        for pos, layer in enumerate(sites):
            cur = config.bits(mode)[pos]
            if cur is None:
                continue
            for b in range(1, cur):
                cfg = config.with_bits(mode, pos, b)
                cand_enc = _apply(enc, mode, layer, factory.build(layer, b))
                cacc = evaluate(cand_enc)
                cmem = memory_footprint(net, cfg)
                dm = mem - cmem
                da = (acc if delta_reference == "current" else ref_acc) - cacc
                cands.append(Candidate(pos, layer, b, cfg, cmem, cacc, dm, da, reward(dm, da, eps)))
        traj.candidates.append(cands)
        if not cands:
            traj.diagnostic = "every layer is at 1 bit"
            break
        best = cands[0]
        for c in cands[1:]:
            if c.reward > best.reward:
                best = c
        if best.val_acc < acc_threshold:
            traj.diagnostic = (f"best candidate (layer {best.layer} -> {best.bits} bits) reaches "
                               f"{best.val_acc:.4f} < threshold {acc_threshold:.4f}")
            break
        config, mem, acc = best.config, best.memory_bits, best.val_acc
        enc = _apply(enc, mode, best.layer, factory.build(best.layer, best.bits))
        traj.steps.append(TrajectoryStep(config, mem, acc, best.pos, best.layer, best.bits,
                                         best.delta_mem, best.delta_acc, best.reward))
        traj.encodings.append(enc)
        log.info("%s step %d: layer %d -> %d bits, mem %d, acc %.4f", mode, len(traj.steps) - 1,
                 best.layer, best.bits, mem, acc)
    traj.seconds = time.perf_counter() - t0
    return traj


# --- two-phase flow -----------------------------------------------------------

@dataclass
class TwoPhaseResult:
    act_config: BitwidthConfig
    weight_config: BitwidthConfig
    params: list
    encoding: Encoding
    act_trajectory: SearchTrajectory
    weight_trajectory: SearchTrajectory
    act_selected: int
    weight_selected: int
    finetune: list[TrainResult]


def two_phase_customize(net: NetworkSpec, params, train_set, val_set, act_floor: float,
                        weight_floor: float, act_threshold: float | None = None,
                        weight_threshold: float | None = None, init_act_bits: int = DEFAULT_ACT_BITS,
                        init_conv_bits: int = DEFAULT_CONV_BITS, init_fc_bits: int = DEFAULT_FC_BITS,
                        epochs: float = 10, lr: float = 0.01, batch: int = 32, seed: int = 42,
                        val_size: int | None = 1000, n_samples: int | None = 10) -> TwoPhaseResult:
    """Activations first (weights in float), fine-tune, then weights with activations frozen.

    Each phase runs :func:`customize` down to its threshold (defaults to the
    floor), keeps the lowest-memory step whose validation accuracy is at least
    the floor, and fine-tunes from there.
    """
    act_threshold = act_floor if act_threshold is None else act_threshold
    weight_threshold = weight_floor if weight_threshold is None else weight_threshold
    sites = net.activation_sites()
    cfg0 = BitwidthConfig((init_act_bits,) * len(sites), (None,) * len(net.weight_layers()))
    samples = capture_activations(net, params, train_set[0], None, n_samples, seed)
    act_traj = customize(net, params, Encoding(), cfg0, val_set, act_threshold, "activations",
                         seed, val_size, act_samples=samples)
    if not act_traj.steps:
        raise ValueError(act_traj.diagnostic)
    k_act = act_traj.select(act_floor)
    enc = act_traj.encodings[k_act]
    ft1 = fine_tune(net, params, enc, train_set, epochs, lr, batch, seed)
    act_config = act_traj.steps[k_act].config

    wcfg0 = BitwidthConfig.defaults(net, None, init_conv_bits, init_fc_bits)
    wcfg0 = BitwidthConfig(act_config.act_bits, wcfg0.weight_bits)
    w_traj = customize(net, ft1.params, ft1.encoding, wcfg0, val_set, weight_threshold, "weights",
                       seed, val_size)
    if not w_traj.steps:
        raise ValueError(w_traj.diagnostic)
    k_w = w_traj.select(weight_floor)
    ft2 = fine_tune(net, ft1.params, w_traj.encodings[k_w], train_set, epochs, lr, batch, seed)
    return TwoPhaseResult(act_config, w_traj.steps[k_w].config, ft2.params, ft2.encoding,
                          act_traj, w_traj, k_act, k_w, [ft1, ft2])
