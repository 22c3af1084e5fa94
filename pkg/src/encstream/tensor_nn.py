"""Minimal forward / reverse-mode engine for the six layer kinds used in this package.

Tensors are plain numpy arrays laid out as ``(N, C, H, W)`` for feature maps and
``(N, F)`` for vectors. Computations follow the dtype of the inputs, so float32
models run in float32 while gradient checks can run the same code in float64.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

DTYPE = np.float32


class LayerKind(str, enum.Enum):
    CONV = "CONV"
    FC = "FC"
    MAXPOOL = "MAXPOOL"
    BATCHNORM = "BATCHNORM"
    RELU = "RELU"
    ENCODE = "ENCODE"


class ShapeError(ValueError):
    """Raised when layer attributes or tensors do not fit together."""


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: int = 0
    out_features: int | None = None
    window: int | None = None
    name: str | None = None

    @classmethod
    def conv(cls, out_channels, kernel, stride=1, padding=0, name=None):
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        return cls(LayerKind.CONV, out_channels=int(out_channels), kernel=tuple(int(k) for k in kernel),
                   stride=int(stride), padding=int(padding), name=name)

    @classmethod
    def fc(cls, out_features, name=None):
        return cls(LayerKind.FC, out_features=int(out_features), name=name)

    @classmethod
    def maxpool(cls, window, stride=None, name=None):
        return cls(LayerKind.MAXPOOL, window=int(window), stride=int(stride or window), name=name)

    @classmethod
    def batchnorm(cls, name=None):
        return cls(LayerKind.BATCHNORM, name=name)

    @classmethod
    def relu(cls, name=None):
        return cls(LayerKind.RELU, name=name)

    @classmethod
    def encode(cls, name=None):
        return cls(LayerKind.ENCODE, name=name)

    @property
    def has_weights(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        k = self.kind
        if k is LayerKind.CONV:
            if len(in_shape) != 3:
                raise ShapeError(f"CONV expects a (C, H, W) input, got {in_shape}")
            if self.stride < 1 or self.padding < 0:
                raise ShapeError("CONV stride must be >= 1 and padding >= 0")
            _, h, w = in_shape
            kh, kw = self.kernel
            oh = conv_out_size(h, kh, self.stride, self.padding)
            ow = conv_out_size(w, kw, self.stride, self.padding)
            if oh < 1 or ow < 1:
                raise ShapeError(f"kernel {self.kernel} does not fit padded input {in_shape}")
            return (self.out_channels, oh, ow)
        if k is LayerKind.FC:
            return (self.out_features,)
        if k is LayerKind.MAXPOOL:
            if len(in_shape) != 3:
                raise ShapeError(f"MAXPOOL expects a (C, H, W) input, got {in_shape}")
            if self.stride < 1:
                raise ShapeError("MAXPOOL stride must be >= 1")
            c, h, w = in_shape
            oh = conv_out_size(h, self.window, self.stride, 0)
            ow = conv_out_size(w, self.window, self.stride, 0)
            if oh < 1 or ow < 1:
                raise ShapeError(f"pool window {self.window} does not fit input {in_shape}")
            return (c, oh, ow)
        return tuple(in_shape)

    def param_shapes(self, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        if self.kind is LayerKind.CONV:
            kh, kw = self.kernel
            return {"W": (self.out_channels, in_shape[0], kh, kw), "b": (self.out_channels,)}
        if self.kind is LayerKind.FC:
            return {"W": (self.out_features, int(np.prod(in_shape))), "b": (self.out_features,)}
        if self.kind is LayerKind.BATCHNORM:
            return {"alpha": (in_shape[0],), "beta": (in_shape[0],)}
        return {}


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.layers:
            raise ShapeError("network has no layers")
        if any(s < 1 for s in self.input_shape):
            raise ShapeError(f"input shape must be positive, got {self.input_shape}")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"{self.describe(i)}: {exc}") from None
        if int(np.prod(shapes[-1])) != self.num_classes:
            raise ShapeError(
                f"{self.describe(len(self.layers) - 1)} produces {int(np.prod(shapes[-1]))} outputs, "
                f"expected {self.num_classes} classes")
        object.__setattr__(self, "shapes", tuple(shapes))

    def describe(self, i: int) -> str:
        layer = self.layers[i]
        label = f" '{layer.name}'" if layer.name else ""
        return f"layer {i} ({layer.kind.value}{label})"

    def in_shape(self, i: int) -> tuple[int, ...]:
        return self.shapes[i]

    def out_shape(self, i: int) -> tuple[int, ...]:
        return self.shapes[i + 1]

    def weight_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_weights]

    def activation_sites(self) -> list[int]:
        """Layers whose output can carry an activation codebook (RELU and ENCODE)."""
        return [i for i, layer in enumerate(self.layers)
                if layer.kind in (LayerKind.RELU, LayerKind.ENCODE)]


class LayerOverride(Protocol):
    """Replacement forward/backward rule for a non-parametric layer."""

    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def backward(self, grad_out: np.ndarray, x: np.ndarray) -> np.ndarray: ...


@dataclass
class ForwardRecord:
    net: NetworkSpec
    inputs: list[np.ndarray]
    output: np.ndarray
    overrides: Mapping[int, LayerOverride]
    aux: list[object]


@dataclass
class Gradients:
    params: list[dict[str, np.ndarray]]
    input: np.ndarray
    outputs: list[np.ndarray]


def init_params(net: NetworkSpec, seed: int = 0, dtype=DTYPE) -> list[dict[str, np.ndarray]]:
    """He-normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    params = []
    for i, layer in enumerate(net.layers):
        shapes = layer.param_shapes(net.in_shape(i))
        p = {}
        if layer.has_weights:
            fan_in = int(np.prod(shapes["W"][1:]))
            p["W"] = (rng.standard_normal(shapes["W"]) * np.sqrt(2.0 / fan_in)).astype(dtype)
            p["b"] = np.zeros(shapes["b"], dtype=dtype)
        elif layer.kind is LayerKind.BATCHNORM:
            p["alpha"] = np.ones(shapes["alpha"], dtype=dtype)
            p["beta"] = np.zeros(shapes["beta"], dtype=dtype)
        params.append(p)
    return params


def check_params(net: NetworkSpec, params: Sequence[Mapping[str, np.ndarray]]) -> None:
    if len(params) != len(net.layers):
        raise ShapeError(f"expected {len(net.layers)} parameter sets, got {len(params)}")
    for i, layer in enumerate(net.layers):
        for key, shape in layer.param_shapes(net.in_shape(i)).items():
            if key not in params[i]:
                raise ShapeError(f"{net.describe(i)}: missing parameter '{key}'")
            if tuple(np.shape(params[i][key])) != shape:
                raise ShapeError(f"{net.describe(i)}: parameter '{key}' has shape "
                                 f"{tuple(np.shape(params[i][key]))}, expected {shape}")


# --- window enumeration -------------------------------------------------------

def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int, padding: int,
           pad_value=0) -> np.ndarray:
    """Lower ``(N, C, H, W)`` into ``(N, OH*OW, C*kh*kw)`` windows.

    Windows are in row-major output order; each window is channel-major, then
    kernel row, then kernel column.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    oh = conv_out_size(h, kh, stride, padding)
    ow = conv_out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_value)
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n, oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, in_shape: tuple[int, int, int, int], kernel, stride, padding):
    n, c, h, w = in_shape
    kh, kw = kernel
    oh = conv_out_size(h, kh, stride, padding)
    ow = conv_out_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def sequential_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w.T`` accumulated one reduction index at a time, in index order.

    Used wherever results must match a folded hardware accumulator bit for bit.
    """
    acc = np.zeros((a.shape[0], w.shape[0]), dtype=np.result_type(a, w))
    for k in range(a.shape[1]):
        acc += a[:, k:k + 1] * w[:, k]
    return acc


# --- layer kernels ------------------------------------------------------------

def _matmul(a, w, sequential):
    return sequential_matmul(a, w) if sequential else a @ w.T


def _forward_layer(layer: LayerSpec, p, x, sequential):
    k = layer.kind
    if k is LayerKind.FC:
        flat = x.reshape(x.shape[0], -1)
        return _matmul(flat, p["W"], sequential) + p["b"], None
    if k is LayerKind.CONV:
        n = x.shape[0]
        cols = im2col(x, layer.kernel, layer.stride, layer.padding)
        w2 = p["W"].reshape(p["W"].shape[0], -1)
        oh = conv_out_size(x.shape[2], layer.kernel[0], layer.stride, layer.padding)
        ow = conv_out_size(x.shape[3], layer.kernel[1], layer.stride, layer.padding)
        y = _matmul(cols.reshape(n * oh * ow, -1), w2, sequential) + p["b"]
        return y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2), cols
    if k is LayerKind.MAXPOOL:
        n, c, h, w = x.shape
        win, s = layer.window, layer.stride
        cols = im2col(x.reshape(n * c, 1, h, w), (win, win), s, 0)
        arg = np.argmax(cols, axis=2)
        y = np.take_along_axis(cols, arg[..., None], axis=2)[..., 0]
        oh, ow = conv_out_size(h, win, s, 0), conv_out_size(w, win, s, 0)
        return y.reshape(n, c, oh, ow), arg
    if k is LayerKind.BATCHNORM:
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return p["alpha"].reshape(shape) * x + p["beta"].reshape(shape), None
    if k is LayerKind.RELU:
        return np.maximum(x, 0), None
    if k is LayerKind.ENCODE:
        # no codebook attached: pass-through
        return x, None
    raise ValueError(f"unknown layer kind {k}")


def _backward_layer(layer: LayerSpec, p, x, aux, g):
    k = layer.kind
    if k is LayerKind.FC:
        flat = x.reshape(x.shape[0], -1)
        grads = {"W": g.T @ flat, "b": g.sum(axis=0)}
        return (g @ p["W"]).reshape(x.shape), grads
    if k is LayerKind.CONV:
        n, out_c = g.shape[0], g.shape[1]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        cols = aux.reshape(g2.shape[0], -1)
        w2 = p["W"].reshape(out_c, -1)
        grads = {"W": (g2.T @ cols).reshape(p["W"].shape), "b": g2.sum(axis=0)}
        gcols = (g2 @ w2).reshape(n, -1, cols.shape[1])
        return col2im(gcols, x.shape, layer.kernel, layer.stride, layer.padding), grads
    if k is LayerKind.MAXPOOL:
        n, c, h, w = x.shape
        win, s = layer.window, layer.stride
        gflat = g.reshape(n * c, -1)
        gcols = np.zeros(gflat.shape + (win * win,), dtype=g.dtype)
        np.put_along_axis(gcols, aux[..., None], gflat[..., None], axis=2)
        return col2im(gcols, (n * c, 1, h, w), (win, win), s, 0).reshape(x.shape), {}
    if k is LayerKind.BATCHNORM:
        axes = (0,) + tuple(range(2, x.ndim))
        shape = (1, -1) + (1,) * (x.ndim - 2)
        grads = {"alpha": (g * x).sum(axis=axes), "beta": g.sum(axis=axes)}
        return g * p["alpha"].reshape(shape), grads
    if k is LayerKind.RELU:
        return g * (x > 0), {}
    if k is LayerKind.ENCODE:
        return g, {}
    raise ValueError(f"unknown layer kind {k}")


# --- public API ---------------------------------------------------------------

def _as_batch(net: NetworkSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] == net.input_shape:
        return x, False
    if x.ndim >= 2 and int(np.prod(x.shape[1:])) == int(np.prod(net.input_shape)):
        return x.reshape((x.shape[0],) + net.input_shape), False
    raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")


def forward(net: NetworkSpec, params, x: np.ndarray,
            overrides: Mapping[int, LayerOverride] | None = None,
            sequential: bool = False) -> ForwardRecord:
    """Run the network on a batch and keep what backprop needs."""
    overrides = dict(overrides or {})
    check_params(net, params)
    x, _ = _as_batch(net, x)
    inputs, aux = [], []
    for i, layer in enumerate(net.layers):
        inputs.append(x)
        if i in overrides:
            if layer.has_weights:
                raise ValueError(f"{net.describe(i)}: overrides apply to non-parametric layers only")
            y, a = overrides[i].forward(x), None
        else:
            y, a = _forward_layer(layer, params[i], x, sequential)
        if y.shape[1:] != net.out_shape(i):
            raise ShapeError(f"{net.describe(i)}: produced {y.shape[1:]}, expected {net.out_shape(i)}")
        aux.append(a)
        x = y
    return ForwardRecord(net, inputs, x.reshape(x.shape[0], -1), overrides, aux)


def infer(net: NetworkSpec, params, x: np.ndarray,
          overrides: Mapping[int, LayerOverride] | None = None,
          sequential: bool = False) -> np.ndarray:
    """Logits for a single sample (``input_shape``) or a batch."""
    _, single = _as_batch(net, x)
    out = forward(net, params, x, overrides, sequential).output
    return out[0] if single else out


def backprop(net: NetworkSpec, params, record: ForwardRecord | None,
             loss_grad: np.ndarray) -> Gradients:
    """Reverse pass over ``record``; ``loss_grad`` is dL/d(logits)."""
    if not isinstance(record, ForwardRecord) or record.net is not net:
        raise ValueError("backprop needs the ForwardRecord produced by forward() on this network")
    g = np.asarray(loss_grad).reshape(record.output.shape)
    n = len(net.layers)
    param_grads: list[dict] = [{} for _ in range(n)]
    out_grads: list[np.ndarray] = [None] * n
    for i in range(n - 1, -1, -1):
        g = g.reshape((g.shape[0],) + net.out_shape(i))
        out_grads[i] = g
        x = record.inputs[i]
        if i in record.overrides:
            g = record.overrides[i].backward(g, x)
        else:
            g, param_grads[i] = _backward_layer(net.layers[i], params[i], x, record.aux[i], g)
    return Gradients(param_grads, g, out_grads)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.log(np.maximum(p[idx, labels], 1e-30)).mean())
    grad = p
    grad[idx, labels] -= 1
    return loss, grad / n


def accuracy(net: NetworkSpec, params, dataset: tuple[np.ndarray, np.ndarray], n: int | None = None,
             overrides: Mapping[int, LayerOverride] | None = None, batch: int = 1000) -> float:
    """Fraction of the first ``n`` samples whose argmax logit equals the label.

    ``np.argmax`` returns the first maximum, which breaks ties toward class 0.
    """
    x, y = dataset
    if len(y) == 0:
        raise ValueError("accuracy() on an empty dataset")
    n = len(y) if n is None else n
    if not 1 <= n <= len(y):
        raise ValueError(f"n={n} outside [1, {len(y)}]")
    correct = 0
    for start in range(0, n, batch):
        stop = min(n, start + batch)
        logits = forward(net, params, x[start:stop], overrides).output
        correct += int((np.argmax(logits, axis=1) == np.asarray(y[start:stop])).sum())
    return correct / n
