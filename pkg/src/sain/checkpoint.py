"""Deterministic binary checkpoints.

Layout: 8-byte magic, little-endian u64 header length, canonical JSON header
(sorted keys, no whitespace), raw float64 little-endian array payload in
header-declared order, and a trailing sha256 of everything before it. The
format contains no timestamps and no environment data, so saving the same
state twice yields identical bytes, and save -> load -> save round-trips
byte-exactly. The trailing digest turns silent corruption into a parse error.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, ParseError
from .tensor import AdamState

MAGIC = b"SAINCKP1"


@dataclass
class Checkpoint:
    """Decoded checkpoint: model kind, config/layout dictionaries, named arrays
    (tensors in registry order, then auxiliary stats), optional optimizer
    moments, and free-form metadata (seed, dataset digest, epoch, ...)."""

    kind: str
    config: dict
    layout: dict
    tensors: dict[str, np.ndarray]
    stats: dict[str, np.ndarray] = field(default_factory=dict)
    adam: dict | None = None          # {"beta1","beta2","eps","t":{name:int},
                                      #  "m":{name:arr},"v":{name:arr}}
    meta: dict = field(default_factory=dict)


def _encode(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.tensors.items():
        arrays.append((f"tensor/{name}", arr))
    for name, arr in ckpt.stats.items():
        arrays.append((f"stat/{name}", arr))
    adam_header = None
    if ckpt.adam is not None:
        for name in ckpt.tensors:
            arrays.append((f"adam_m/{name}", ckpt.adam["m"][name]))
            arrays.append((f"adam_v/{name}", ckpt.adam["v"][name]))
        adam_header = {"beta1": ckpt.adam["beta1"], "beta2": ckpt.adam["beta2"],
                       "eps": ckpt.adam["eps"],
                       "t": {k: int(v) for k, v in ckpt.adam["t"].items()}}
    header = {
        "format": 1,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "layout": ckpt.layout,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "adam": adam_header,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = MAGIC + len(head).to_bytes(8, "little") + head + body
    return blob + hashlib.sha256(blob).digest()


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    data = _encode(ckpt)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise IoError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 + 32 or data[:len(MAGIC)] != MAGIC:
        raise ParseError(f"not a checkpoint file: {path}")
    blob, digest = data[:-32], data[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise ParseError(f"checkpoint checksum mismatch: {path}")
    head_len = int.from_bytes(blob[len(MAGIC):len(MAGIC) + 8], "little")
    head_start = len(MAGIC) + 8
    try:
        header = json.loads(blob[head_start:head_start + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"checkpoint header unreadable: {path}: {e}") from e

    body = blob[head_start + head_len:]
    pos = 0
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * 8
        if pos + nbytes > len(body):
            raise ParseError(f"checkpoint payload truncated: {path}")
        arrays[entry["name"]] = np.frombuffer(
            body[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise ParseError(f"checkpoint payload has trailing bytes: {path}")

    tensors = {n[len("tensor/"):]: a for n, a in arrays.items() if n.startswith("tensor/")}
    stats = {n[len("stat/"):]: a for n, a in arrays.items() if n.startswith("stat/")}
    adam = None
    if header.get("adam") is not None:
        ah = header["adam"]
        adam = {"beta1": float(ah["beta1"]), "beta2": float(ah["beta2"]),
                "eps": float(ah["eps"]), "t": {k: int(v) for k, v in ah["t"].items()},
                "m": {n[len("adam_m/"):]: a for n, a in arrays.items()
                      if n.startswith("adam_m/")},
                "v": {n[len("adam_v/"):]: a for n, a in arrays.items()
                      if n.startswith("adam_v/")}}
    return Checkpoint(kind=header["kind"], config=header["config"],
                      layout=header["layout"], tensors=tensors, stats=stats,
                      adam=adam, meta=header.get("meta", {}))


def adam_states_to_header(states: dict[str, AdamState]) -> dict:
    """Flatten per-tensor AdamState objects into the checkpoint representation."""
    any_state = next(iter(states.values()))
    return {"beta1": any_state.beta1, "beta2": any_state.beta2, "eps": any_state.eps,
            "t": {k: s.t for k, s in states.items()},
            "m": {k: s.m for k, s in states.items()},
            "v": {k: s.v for k, s in states.items()}}


def adam_states_from_header(adam: dict) -> dict[str, AdamState]:
    return {k: AdamState(m=adam["m"][k], v=adam["v"][k], t=adam["t"][k],
                         beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"])
            for k in adam["m"]}
