"""Codebooks: 1-D K-means, nearest-entry encoding, and the ``CDX1`` binary format."""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tensor_nn import DTYPE, LayerKind, NetworkSpec, forward

MAX_ITER = 300
ROLE_WEIGHTS = 0
ROLE_ACTIVATIONS = 1
MAGIC = b"CDX1"


class CodebookError(ValueError):
    pass


class AllZeroActivations(UserWarning):
    """Activation samples had no nonzero entries; the codebook degenerates to [0]."""


@dataclass(frozen=True, eq=False)
class Codebook:
    values: np.ndarray
    zero_anchored: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=DTYPE).reshape(-1)
        if v.size < 1:
            raise CodebookError("codebook needs at least one entry")
        if not np.all(np.isfinite(v)):
            raise CodebookError("codebook values must be finite")
        if np.any(np.diff(v) <= 0):
            raise CodebookError(f"codebook values must be strictly increasing: {v}")
        if self.zero_anchored and v[0] != 0:
            raise CodebookError("zero-anchored codebook must start with exactly 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def bitwidth(self) -> int:
        return index_bits(self.size)

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return (isinstance(other, Codebook) and self.zero_anchored == other.zero_anchored
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"Codebook({self.values.tolist()}, zero_anchored={self.zero_anchored})"

    def replace_values(self, values) -> "Codebook":
        return Codebook(values, self.zero_anchored)


def index_bits(k: int) -> int:
    """ceil(log2 k); a single-entry codebook needs no index bits."""
    return int(math.ceil(math.log2(k))) if k > 1 else 0


@dataclass(frozen=True, eq=False)
class EncodedTensor:
    indices: np.ndarray
    codebook: Codebook
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if not np.issubdtype(idx.dtype, np.integer):
            raise CodebookError("indices must be integers")
        shape = tuple(self.shape) or idx.shape
        idx = idx.reshape(shape)
        if idx.size and (idx.min() < 0 or idx.max() >= self.codebook.size):
            raise CodebookError(f"index outside [0, {self.codebook.size})")
        object.__setattr__(self, "indices", idx.astype(np.int64, copy=False))
        object.__setattr__(self, "shape", shape)

    def with_codebook(self, codebook: Codebook) -> "EncodedTensor":
        if codebook.size != self.codebook.size:
            raise CodebookError("replacement codebook must keep the entry count")
        return EncodedTensor(self.indices, codebook, self.shape)


# --- K-means ------------------------------------------------------------------

@dataclass
class KMeansResult:
    codebook: Codebook
    sse_history: list[float]
    iterations: int
    converged: bool


def _two_diff(a, b):
    """``a - b`` as an unevaluated sum ``s + e`` that is exact (Knuth's TwoSum)."""
    s = a - b
    bb = s - a
    return s, (a - (s - bb)) + (-b - bb)


def _closer_to_lo(y, lo, hi):
    """Exact ``y - lo <= hi - y`` for float64 arrays.

    Rounding is monotone, so the rounded differences decide unless they tie;
    only the ties need their exact error terms.
    """
    with np.errstate(invalid="ignore"):
        s1, s2 = y - lo, hi - y
        out = s1 < s2
        tie = s1 == s2
        if tie.any():
            y, lo, hi = (np.broadcast_to(v, tie.shape)[tie] for v in (y, lo, hi))
            (t1, e1), (t2, e2) = _two_diff(y, lo), _two_diff(hi, y)
            out[tie] = (t1 < t2) | ((t1 == t2) & (e1 <= e2))
    return out


def _boundaries(x_sorted: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Cluster edges for sorted data: cluster k is ``x[edges[k]:edges[k+1]]``.

    Points closer to the lower of two centers, or equidistant, go to the lower one.
    That test is monotone in ``x``, so each cut is found by bisecting at the
    midpoint and then nudged past any points where rounding of the midpoint
    disagrees with the exact comparison.
    """
    lo_c, hi_c = centers[:-1], centers[1:]
    lo = np.searchsorted(x_sorted, lo_c, side="left")
    hi = np.searchsorted(x_sorted, hi_c, side="left")
    cuts = np.clip(np.searchsorted(x_sorted, lo_c + (hi_c - lo_c) / 2, side="right"), lo, hi)
    n = x_sorted.size
    while True:
        left = x_sorted[np.maximum(cuts - 1, 0)]
        right = x_sorted[np.minimum(cuts, n - 1)]
        down = (cuts > lo) & ~_closer_to_lo(left, lo_c, hi_c)
        up = (cuts < hi) & _closer_to_lo(right, lo_c, hi_c)
        if not (down.any() or up.any()):
            break
        cuts = cuts - down + up
    return np.concatenate([[0], cuts, [n]])


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.size)]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        pick = min(pick, x.size - 1)
        centers.append(x[pick])
        d2 = np.minimum(d2, (x - x[pick]) ** 2)
    return np.unique(np.asarray(centers, dtype=np.float64))


def _sse(x_sorted: np.ndarray, centers: np.ndarray) -> float:
    d = x_sorted - np.repeat(centers, np.diff(_boundaries(x_sorted, centers)))
    return float(d @ d)


def _lloyd(x, prefix, centers, max_iter, track_sse):
    history = []
    edges = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_edges = _boundaries(x, centers)
        counts = np.diff(new_edges)
        if track_sse:
            d = x - np.repeat(centers, counts)
            history.append(float(d @ d))
        if edges is not None and np.array_equal(new_edges, edges):
            converged = True
            break
        keep = counts > 0
        starts, ends = new_edges[:-1][keep], new_edges[1:][keep]
        means = (prefix[ends] - prefix[starts]) / counts[keep]
        # prefix differences can cancel; a mean never leaves its own cluster's range
        means = np.clip(means, x[starts], x[ends - 1])
        # 1-D clusters are contiguous, so means stay ordered; collapse exact ties
        centers = means if np.all(means[1:] > means[:-1]) else np.unique(means)
        # a dropped or merged cluster renumbers edges; skip the fixpoint test once
        edges = new_edges if centers.size == counts.size else None
    return centers, history, it, converged


def kmeans_fit(values, k: int, seed: int = 0, max_iter: int = MAX_ITER,
               track_sse: bool = True) -> KMeansResult:
    """Lloyd's algorithm on scalars with k-means++ seeding.

    Empty clusters are dropped as they appear, so the result may have fewer
    than ``k`` entries. ``sse_history[t]`` is the within-cluster squared error
    of the assignment made in iteration ``t`` against the centers it was
    scored with. ``track_sse=False`` skips that O(n) bookkeeping and leaves
    the history empty; the clustering itself is unchanged.

    Lloyd's algorithm only finds a local optimum. If the one reached from the
    k-means++ seeds quantizes worse than the uniform grid over [min, max],
    the fit is redone from the grid levels, so the result never loses to the
    grid.
    """
    if k < 1:
        raise CodebookError(f"K must be >= 1, got {k}")
    x = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise CodebookError("cannot cluster an empty value set")
    if not np.all(np.isfinite(x)):
        raise CodebookError("values must be finite")
    rng = np.random.default_rng(seed)
    prefix = np.concatenate([[0.0], np.cumsum(x)])
    centers, history, it, converged = _lloyd(x, prefix, _kmeanspp(x, k, rng), max_iter, track_sse)
    if k > 1 and x[0] < x[-1]:
        grid = np.unique(np.linspace(x[0], x[-1], k))
        if _sse(x, grid) < _sse(x, centers):
            centers, history, it, converged = _lloyd(x, prefix, grid, max_iter, track_sse)
    cb = _to_codebook(centers)
    return KMeansResult(cb, history, it, converged)


def _to_codebook(centers: np.ndarray, zero_anchored=False) -> Codebook:
    return Codebook(np.unique(centers.astype(DTYPE)), zero_anchored)


def kmeans(values, k: int, seed: int = 0) -> Codebook:
    return kmeans_fit(values, k, seed, track_sse=False).codebook


def uniform_grid(values, k: int) -> Codebook:
    """k evenly spaced levels spanning [min, max] of ``values`` (fixed-point analog)."""
    x = np.asarray(values, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if k == 1 or lo == hi:
        return Codebook([lo])
    return Codebook(np.linspace(lo, hi, k))


def quantization_mse(values, codebook: Codebook) -> float:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    return float(np.mean((x - codebook.values[encode_array(x, codebook)].astype(np.float64)) ** 2))


# --- encode / decode ----------------------------------------------------------

def encode_array(y, codebook) -> np.ndarray:
    """argmin_k |y - c[k]| elementwise; exact midpoint ties go to the lower index."""
    c = np.asarray(codebook.values if isinstance(codebook, Codebook) else codebook)
    y = np.asarray(y)
    c64 = c.astype(np.float64)
    y64 = y.astype(np.float64)
    hi = np.clip(np.searchsorted(c64, y64, side="left"), 0, c64.size - 1)
    lo = np.maximum(hi - 1, 0)
    # at or beyond either end, and on exact hits, no distance is needed
    take_lo = (y64 <= c64[lo]) | ((y64 < c64[hi]) & _closer_to_lo(y64, c64[lo], c64[hi]))
    return np.where(take_lo, lo, hi).astype(np.int64)


def encode(y: float, codebook: Codebook) -> int:
    return int(encode_array(np.asarray([y]), codebook)[0])


def decode(idx: int, codebook: Codebook) -> float:
    idx = int(idx)
    if not 0 <= idx < codebook.size:
        raise CodebookError(f"index {idx} outside codebook of size {codebook.size}")
    return codebook.values[idx]


def decode_tensor(enc: EncodedTensor) -> np.ndarray:
    return enc.codebook.values[enc.indices].reshape(enc.shape)


def encode_tensor(x: np.ndarray, codebook: Codebook) -> EncodedTensor:
    x = np.asarray(x)
    return EncodedTensor(encode_array(x, codebook).reshape(x.shape), codebook, x.shape)


def encode_weights(w: np.ndarray, k: int, seed: int = 0) -> tuple[Codebook, EncodedTensor]:
    """Per-layer weight sharing: one codebook for every element of ``w``."""
    w = np.asarray(w)
    if w.size == 0:
        raise CodebookError("cannot encode an empty weight tensor")
    cb = kmeans(w, k, seed)
    return cb, encode_tensor(w, cb)


# --- activation codebooks -----------------------------------------------------

def collect_activations(net: NetworkSpec, params, samples: np.ndarray, layer: int,
                        overrides=None) -> np.ndarray:
    """Flattened output of ``layer`` over every sample and spatial position."""
    record = forward(net, params, samples, overrides)
    out = record.inputs[layer + 1] if layer + 1 < len(net.layers) else record.output
    return np.asarray(out).reshape(-1)


def subsample(samples: np.ndarray, n: int | None, seed: int) -> np.ndarray:
    if n is None or len(samples) <= n:
        return samples
    rng = np.random.default_rng(seed)
    return samples[np.sort(rng.choice(len(samples), size=n, replace=False))]


def activation_codebook_from_values(a: np.ndarray, k: int, seed: int = 0,
                                    zero_anchored: bool = True) -> Codebook:
    """Cluster the nonzero activations into K-1 centers and prepend 0."""
    if k < 1:
        raise CodebookError(f"K must be >= 1, got {k}")
    a = np.asarray(a).reshape(-1)
    if not zero_anchored:
        return kmeans(a, k, seed)
    nz = a[a != 0]
    if nz.size == 0 or k == 1:
        if nz.size == 0:
            warnings.warn("activations are all zero; codebook is [0]", AllZeroActivations,
                          stacklevel=2)
        return Codebook([0.0], zero_anchored=True)
    if np.any(nz < 0):
        raise CodebookError("zero-anchored codebooks need non-negative (post-ReLU) activations")
    centers = kmeans(nz, k - 1, seed).values
    return Codebook(np.concatenate([[0.0], centers]), zero_anchored=True)


def build_activation_codebook(samples: np.ndarray, net: NetworkSpec, params, layer: int, k: int,
                              seed: int = 0, n_samples: int | None = 10,
                              overrides=None) -> Codebook:
    """Activation codebook for the RELU at ``layer`` from a subsampled batch."""
    if len(samples) == 0:
        raise CodebookError("need at least one sample")
    kind = net.layers[layer].kind
    if kind is not LayerKind.RELU:
        raise CodebookError(f"{net.describe(layer)} is not a RELU layer")
    batch = subsample(samples, n_samples, seed)
    a = collect_activations(net, params, batch, layer, overrides)
    return activation_codebook_from_values(a, k, seed)


# --- binary format ------------------------------------------------------------

@dataclass(frozen=True)
class CodebookEntry:
    role: int
    codebook: Codebook


def write_codebooks(f: BinaryIO, entries: Sequence[CodebookEntry]) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<H", len(entries)))
    for e in entries:
        v = e.codebook.values
        f.write(struct.pack("<BBH", e.role, e.codebook.bitwidth, v.size))
        f.write(v.astype("<f4").tobytes())


def read_codebooks(f: BinaryIO) -> list[CodebookEntry]:
    def take(n):
        b = f.read(n)
        if len(b) != n:
            raise CodebookError(f"truncated codebook file: expected {n} bytes, got {len(b)}")
        return b

    if take(4) != MAGIC:
        raise CodebookError("bad codebook magic (expected 'CDX1')")
    (count,) = struct.unpack("<H", take(2))
    entries = []
    for _ in range(count):
        role, bits, k = struct.unpack("<BBH", take(4))
        if role not in (ROLE_WEIGHTS, ROLE_ACTIVATIONS):
            raise CodebookError(f"unknown codebook role {role}")
        values = np.frombuffer(take(4 * k), dtype="<f4").astype(DTYPE)
        cb = Codebook(values, zero_anchored=role == ROLE_ACTIVATIONS and values[0] == 0)
        if cb.bitwidth != bits:
            raise CodebookError(f"codebook declares {bits} bits but has {k} entries")
        entries.append(CodebookEntry(role, cb))
    return entries


def save_codebooks(path, entries: Iterable[CodebookEntry]) -> None:
    with open(path, "wb") as f:
        write_codebooks(f, list(entries))


def load_codebooks(path) -> list[CodebookEntry]:
    with open(path, "rb") as f:
        return read_codebooks(f)
