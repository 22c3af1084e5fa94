"""Training rules for encoded networks and the SGD fine-tuning loop.

Forward passes snap activations to their nearest codebook entry. Backward
passes treat the snap as a clipped identity on ``(c[1], c[K])`` and route the
upstream gradient of each snapped value to the codebook entry it landed on.
Encoded weights share one value per cluster, so a codebook entry receives the
sum of the gradients of every weight assigned to it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .codebook import Codebook, CodebookError, EncodedTensor, decode_tensor, encode_array
from .tensor_nn import (DTYPE, ForwardRecord, LayerKind, NetworkSpec, backprop, forward,
                        softmax_cross_entropy)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class CodebookOrderError(RuntimeError):
    """An SGD step broke the ascending order of a codebook."""


@dataclass(frozen=True)
class Encoding:
    """Activation codebooks keyed by RELU/ENCODE layer index, encoded weights by CONV/FC index."""

    act: Mapping[int, Codebook] = field(default_factory=dict)
    weights: Mapping[int, EncodedTensor] = field(default_factory=dict)

    def replace(self, act=None, weights=None) -> "Encoding":
        return Encoding(dict(self.act if act is None else act),
                        dict(self.weights if weights is None else weights))


@dataclass
class EncodingGrads:
    grad_input: np.ndarray
    grad_codebook: np.ndarray


# --- elementwise rules --------------------------------------------------------

def encoded_forward(y: np.ndarray, cb: Codebook) -> np.ndarray:
    """Replace every element by its nearest codebook value."""
    y = np.asarray(y)
    return cb.values[encode_array(y, cb)].reshape(y.shape)


def encoded_backward_input(grad_out: np.ndarray, y: np.ndarray, cb: Codebook) -> np.ndarray:
    """Pass ``grad_out`` where ``c[1] < y < c[K]`` (strict), zero elsewhere."""
    grad_out, y = np.asarray(grad_out), np.asarray(y)
    if grad_out.shape != y.shape:
        raise ValueError(f"gradient shape {grad_out.shape} != activation shape {y.shape}")
    inside = (y > cb.values[0]) & (y < cb.values[-1])
    return np.where(inside, grad_out, np.zeros((), dtype=grad_out.dtype))


def codebook_gradient(grad_out: np.ndarray, y_star: np.ndarray, cb: Codebook) -> np.ndarray:
    """Sum of upstream gradients over the elements snapped to each entry.

    Accumulates in float64. ``y_star`` must hold codebook values; membership is
    judged at codebook precision, so float64 literals such as 0.2 match the
    float32 entry they round to.
    """
    grad_out, y_star = np.asarray(grad_out), np.asarray(y_star)
    if grad_out.shape != y_star.shape:
        raise ValueError(f"gradient shape {grad_out.shape} != activation shape {y_star.shape}")
    v = cb.values
    flat = y_star.reshape(-1).astype(v.dtype)
    idx = np.clip(np.searchsorted(v, flat), 0, v.size - 1)
    hit = v[idx] == flat
    if not hit.all():
        bad = flat[~hit][0]
        raise CodebookError(f"value {bad!r} is not a codebook entry; was y* produced by encoded_forward?")
    return np.bincount(idx, weights=grad_out.reshape(-1).astype(np.float64), minlength=v.size)


def encoding_grads(grad_out, y, cb) -> EncodingGrads:
    return EncodingGrads(encoded_backward_input(grad_out, y, cb),
                         codebook_gradient(grad_out, encoded_forward(y, cb), cb))


def weight_codebook_gradient(grad_w: np.ndarray, w_enc: EncodedTensor) -> np.ndarray:
    grad_w = np.asarray(grad_w)
    if grad_w.shape != tuple(w_enc.shape):
        raise ValueError(f"gradient shape {grad_w.shape} != encoded weight shape {w_enc.shape}")
    return np.bincount(w_enc.indices.reshape(-1), weights=grad_w.reshape(-1).astype(np.float64),
                       minlength=w_enc.codebook.size)


# --- wiring into tensor_nn ----------------------------------------------------

@dataclass(frozen=True)
class EncodedActivation:
    """Layer override realizing ReLU-by-encoding (or plain encoding for ENCODE layers)."""

    codebook: Codebook

    def forward(self, x):
        return encoded_forward(x, self.codebook)

    def backward(self, grad_out, x):
        return encoded_backward_input(grad_out, x, self.codebook)


def encoding_overrides(net: NetworkSpec, enc: Encoding) -> dict[int, EncodedActivation]:
    out = {}
    for i, cb in enc.act.items():
        if net.layers[i].kind not in (LayerKind.RELU, LayerKind.ENCODE):
            raise ValueError(f"{net.describe(i)} cannot carry an activation codebook")
        if net.layers[i].kind is LayerKind.RELU and not cb.zero_anchored:
            raise ValueError(f"{net.describe(i)}: RELU sites need a zero-anchored codebook")
        out[i] = EncodedActivation(cb)
    return out


def decoded_params(params, enc: Encoding) -> list[dict[str, np.ndarray]]:
    out = [dict(p) for p in params]
    for i, w_enc in enc.weights.items():
        w = decode_tensor(w_enc)
        if w.shape != np.shape(params[i]["W"]):
            raise ValueError(f"encoded weights for layer {i} have shape {w.shape}")
        out[i]["W"] = w.astype(params[i]["W"].dtype, copy=False)
    return out


def encoded_forward_record(net, params, enc: Encoding, x, sequential=False) -> ForwardRecord:
    return forward(net, decoded_params(params, enc), x, encoding_overrides(net, enc), sequential)


def encoded_infer(net, params, enc: Encoding, x, sequential=False) -> np.ndarray:
    """Logits of the encoded network; ``sequential`` fixes the accumulation order."""
    single = np.shape(x) == net.input_shape
    out = encoded_forward_record(net, params, enc, x, sequential).output
    return out[0] if single else out


def encoded_accuracy(net, params, enc: Encoding, dataset, n=None, batch=1000) -> float:
    from .tensor_nn import accuracy
    return accuracy(net, decoded_params(params, enc), dataset, n,
                    overrides=encoding_overrides(net, enc), batch=batch)


def layer_output(record: ForwardRecord, i: int) -> np.ndarray:
    if i + 1 < len(record.inputs):
        return record.inputs[i + 1]
    return record.output.reshape((-1,) + record.net.out_shape(i))


# --- fine-tuning --------------------------------------------------------------

@dataclass
class TrainResult:
    params: list[dict[str, np.ndarray]]
    encoding: Encoding
    losses: list[float]
    steps: int


def _step_codebook(cb: Codebook, grad: np.ndarray, lr: float, where: str,
                   online: bool = False) -> Codebook:
    if cb.zero_anchored:
        grad = grad.copy()
        grad[0] = 0.0
    new = (cb.values.astype(np.float64) - lr * grad).astype(DTYPE)
    if cb.zero_anchored:
        new[0] = 0
    if np.all(np.diff(new) > 0):
        return cb.replace_values(new)
    if not online:
        raise CodebookOrderError(f"{where}: SGD step left codebook unsorted: {new.tolist()}")
    # activation indices are recomputed every pass, so an entry that collapsed
    # onto (or past) its left neighbour can be merged away
    keep = [0]
    for k in range(1, new.size):
        if new[k] > new[keep[-1]]:
            keep.append(k)
    log.warning("%s: merged %d collapsed activation codebook entries", where, new.size - len(keep))
    return cb.replace_values(new[keep])


def fine_tune(net: NetworkSpec, params, encoding: Encoding | None,
              train: tuple[np.ndarray, np.ndarray], epochs: float, lr: float = 0.01,
              batch: int = 32, seed: int = 42, weight_grad: str = "mean",
              on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Plain SGD on cross-entropy for ``floor(epochs * ceil(n / batch))`` minibatches.

    Encoded layers update only their codebook entries (assignments stay fixed);
    every other parameter is updated directly. The zero entry of a zero-anchored
    codebook is never moved. With an empty encoding this is ordinary training.

    ``weight_grad`` picks the step applied to weight-codebook entries: ``"mean"``
    divides each cluster's pooled gradient by the cluster size, ``"sum"`` uses
    the pooled gradient itself (the exact derivative, but its scale grows with
    the cluster population).
    """
    if weight_grad not in ("mean", "sum"):
        raise ValueError(f"weight_grad must be 'mean' or 'sum', got {weight_grad!r}")
    enc = encoding or Encoding()
    x, y = train
    y = np.asarray(y)
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    params = [{k: np.array(v, copy=True) for k, v in p.items()} for p in params]
    act = dict(enc.act)
    wts = dict(enc.weights)
    steps_per_epoch = math.ceil(n / batch)
    total = int(math.floor(epochs * steps_per_epoch))
    counts = {i: np.maximum(np.bincount(e.indices.reshape(-1), minlength=e.codebook.size), 1)
              for i, e in wts.items()}
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    perm = None
    epoch_loss = 0.0
    for step in range(total):
        j = step % steps_per_epoch
        if j == 0:
            perm = rng.permutation(n)
            epoch_loss = 0.0
        idx = perm[j * batch:(j + 1) * batch]
        cur = Encoding(act, wts)
        eff = decoded_params(params, cur)
        rec = forward(net, eff, x[idx], encoding_overrides(net, cur))
        loss, g = softmax_cross_entropy(rec.output, y[idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step} (epoch {step / steps_per_epoch:.2f}); "
                                  f"try a smaller learning rate than {lr}")
        losses.append(loss)
        epoch_loss += loss
        grads = backprop(net, eff, rec, g.astype(rec.output.dtype))
        for i, pg in enumerate(grads.params):
            for key, gv in pg.items():
                if key == "W" and i in wts:
                    continue
                params[i][key] -= np.asarray(lr * gv, dtype=params[i][key].dtype)
        for i, w_enc in wts.items():
            gc = weight_codebook_gradient(grads.params[i]["W"], w_enc)
            if weight_grad == "mean":
                gc = gc / counts[i]
            wts[i] = w_enc.with_codebook(_step_codebook(w_enc.codebook, gc, lr, net.describe(i)))
        for i, cb in act.items():
            gc = codebook_gradient(grads.outputs[i], layer_output(rec, i), cb)
            act[i] = _step_codebook(cb, gc, lr, net.describe(i), online=True)
        if j == steps_per_epoch - 1 or step == total - 1:
            mean = epoch_loss / (j + 1)
            log.debug("epoch %d loss %.4f", step // steps_per_epoch, mean)
            if on_epoch:
                on_epoch(step // steps_per_epoch, mean)
    return TrainResult(params, Encoding(act, wts), losses, total)


def train_float(net, params, train, epochs, lr=0.05, batch=32, seed=42) -> TrainResult:
    return fine_tune(net, params, None, train, epochs, lr, batch, seed)
