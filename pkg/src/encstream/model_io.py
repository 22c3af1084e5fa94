"""Model directories shared by the command-line tools.

A float model is a directory holding ``network.json`` (architecture plus
weights). An encoded model adds:

* ``codebooks.cdx``: activation and weight codebooks
* ``weights.bin``: packed weight indices, one byte-padded row per output
* ``encoding.json``: which layer uses which codebook, bitwidths, blob offsets
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitwidth import BitwidthConfig
from .codebook import (CodebookEntry, EncodedTensor, ROLE_ACTIVATIONS, ROLE_WEIGHTS, load_codebooks,
                       save_codebooks)
from .hw_compiler import dump_network, pack_indices, parse_network, unpack_indices
from .tensor_nn import NetworkSpec
from .training import Encoding

ENCODING_FORMAT = "encstream-encoding/1"


@dataclass
class Model:
    net: NetworkSpec
    params: list
    encoding: Encoding | None = None
    config: BitwidthConfig | None = None
    meta: dict | None = None


def write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _network_file(path: Path) -> Path:
    return path / "network.json" if path.is_dir() else path


def load_network(path, require_weights: bool = True):
    return parse_network(_network_file(Path(path)).read_text(), require_weights)


def save_model(out_dir, model: Model) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "network.json").write_text(dump_network(model.net, model.params))
    if model.encoding is None:
        for stale in ("encoding.json", "codebooks.cdx", "weights.bin"):
            (out / stale).unlink(missing_ok=True)
        return out
    enc, cfg = model.encoding, model.config
    sites, wl = model.net.activation_sites(), model.net.weight_layers()
    entries, acts, wts, blobs, offset = [], [], [], [], 0
    for i in sorted(enc.act):
        cb = enc.act[i]
        bits = cfg.act_bits[sites.index(i)] if cfg else cb.bitwidth
        acts.append({"layer": i, "codebook": len(entries), "bits": bits})
        entries.append(CodebookEntry(ROLE_ACTIVATIONS, cb))
    for i in sorted(enc.weights):
        e = enc.weights[i]
        bits = cfg.weight_bits[wl.index(i)] if cfg else max(1, e.codebook.bitwidth)
        rows = e.indices.shape[0]
        blob = pack_indices(e.indices.reshape(rows, -1), bits)
        wts.append({"layer": i, "codebook": len(entries), "bits": bits, "shape": list(e.shape),
                    "offset": offset, "nbytes": len(blob)})
        entries.append(CodebookEntry(ROLE_WEIGHTS, e.codebook))
        blobs.append(blob)
        offset += len(blob)
    save_codebooks(out / "codebooks.cdx", entries)
    (out / "weights.bin").write_bytes(b"".join(blobs))
    doc = {"format": ENCODING_FORMAT, "activations": acts, "weights": wts,
           "config": cfg.to_dict() if cfg else None, "meta": model.meta or {}}
    write_json(out / "encoding.json", doc)
    return out


def load_model(path) -> Model:
    path = Path(path)
    net, params = load_network(path)
    enc_file = path / "encoding.json" if path.is_dir() else path.with_name("encoding.json")
    if not enc_file.exists():
        return Model(net, params)
    doc = json.loads(enc_file.read_text())
    if doc.get("format") != ENCODING_FORMAT:
        raise ValueError(f"{enc_file}: unsupported format {doc.get('format')!r}")
    cbs = [e.codebook for e in load_codebooks(enc_file.with_name("codebooks.cdx"))]
    blob = enc_file.with_name("weights.bin").read_bytes()
    act = {a["layer"]: cbs[a["codebook"]] for a in doc["activations"]}
    wts = {}
    for w in doc["weights"]:
        shape = tuple(w["shape"])
        raw = blob[w["offset"]:w["offset"] + w["nbytes"]]
        if len(raw) != w["nbytes"]:
            raise ValueError(f"weights.bin: layer {w['layer']} expects {w['nbytes']} bytes at offset "
                             f"{w['offset']}, file has {len(blob)}")
        n = math.prod(shape[1:])
        idx = unpack_indices(raw, shape[0], n, w["bits"]).reshape(shape)
        wts[w["layer"]] = EncodedTensor(idx, cbs[w["codebook"]], shape)
    cfg = BitwidthConfig.from_dict(doc["config"]) if doc.get("config") else None
    return Model(net, params, Encoding(act, wts), cfg, doc.get("meta"))
