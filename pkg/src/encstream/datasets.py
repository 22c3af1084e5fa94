"""Labeled image data from IDX (MNIST-style) or CSV files."""
from __future__ import annotations

import gzip
import re
import struct
from pathlib import Path

import numpy as np

from .tensor_nn import DTYPE

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_TYPES.items()}


class DatasetError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes, where: str = "<bytes>") -> np.ndarray:
    if len(data) < 4:
        raise DatasetError(f"{where}: expected at least 4 header bytes, got {len(data)}")
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise DatasetError(f"{where}: bad IDX magic 0x{data[:4].hex()}")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise DatasetError(f"{where}: expected {head} header bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    dt = np.dtype(IDX_TYPES[code])
    need = head + int(np.prod(dims)) * dt.itemsize
    if len(data) != need:
        raise DatasetError(f"{where}: expected {need} bytes for shape {dims}, got {len(data)}")
    return np.frombuffer(data, dtype=dt, offset=head).reshape(dims).astype(dt.newbyteorder("="))


def load_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path), str(path))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = IDX_CODES.get(arr.dtype)
    if code is None:
        raise DatasetError(f"dtype {arr.dtype} has no IDX type code")
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    body = arr.astype(np.dtype(IDX_TYPES[code])).tobytes()
    data = head + body
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


def infer_labels_path(images: Path) -> Path:
    """``train-images-idx3-ubyte`` -> ``train-labels-idx1-ubyte``."""
    name = images.name
    if "images" not in name:
        raise DatasetError(f"cannot infer a labels file from {images}; pass it explicitly")
    name = re.sub(r"idx\d", "idx1", name.replace("images", "labels"))
    return images.with_name(name)


def _scale(x: np.ndarray) -> np.ndarray:
    x = x.astype(DTYPE)
    if x.size and x.max() > 1:
        x = x / DTYPE(255)
    return x


def load_dataset(path, fmt: str = "auto", labels_path=None) -> tuple[np.ndarray, np.ndarray]:
    """``(features, labels)`` with features in [0, 1] as float32.

    IDX images of shape (N, H, W) become (N, 1, H, W); vectors stay (N, D).
    CSV rows are ``label, feature...``. Integer pixel data is divided by 255.
    """
    path = Path(path)
    if fmt == "auto":
        fmt = "csv" if path.suffix.lower() in (".csv", ".txt") else "idx"
    if fmt == "csv":
        try:
            arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise DatasetError(f"{path}: {e}") from None
        if arr.shape[1] < 2:
            raise DatasetError(f"{path}: rows need a label and at least one feature")
        labels = arr[:, 0]
        if not np.all(labels == np.round(labels)):
            raise DatasetError(f"{path}: labels in column 0 must be integers")
        return _scale(arr[:, 1:]), labels.astype(np.int64)
    if fmt != "idx":
        raise DatasetError(f"unknown dataset format {fmt!r}; use idx or csv")
    x = load_idx(path)
    y = load_idx(Path(labels_path) if labels_path else infer_labels_path(path)).astype(np.int64)
    if y.ndim != 1 or len(y) != len(x):
        raise DatasetError(f"{path}: {len(x)} images but labels have shape {y.shape}")
    if x.ndim == 3:
        x = x[:, None]
    return _scale(x), y
