"""Checkpointing: a JSON manifest plus flat little-endian float64 blobs.

Layout of a checkpoint directory::

    manifest.json   names/shapes/offsets, optimizer hyperparameters, extra state
    params.bin      all parameter values, concatenated in manifest order
    adam_m.bin      first moments  (present iff an optimizer state was saved)
    adam_v.bin      second moments

Round-trips are bit-exact; ``load_checkpoint`` verifies blob sizes and sha256
digests recorded in the manifest.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .optim import AdamState
from .tensor import Parameter

FORMAT_VERSION = 1


def _write_blob(path, arrays):
    flat = np.concatenate([a.reshape(-1) for a in arrays]) if arrays else np.zeros(0)
    blob = np.ascontiguousarray(flat, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest(), len(blob)


def _read_blob(path, expect_hash, expect_len):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) != expect_len:
        raise ValueError("checkpoint blob %s has %d bytes, expected %d" % (path, len(blob), expect_len))
    if hashlib.sha256(blob).hexdigest() != expect_hash:
        raise ValueError("checkpoint blob %s failed its integrity check" % path)
    return np.frombuffer(blob, dtype="<f8").astype(np.float64)


def save_checkpoint(path, params, optimizer: AdamState | None = None, extra: dict | None = None):
    """Write parameters (+ optional Adam state and JSON-able extras) under ``path``."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    for p in params:
        if p.name is None:
            raise ValueError("checkpointed parameters must be named")
        entries.append({"name": p.name, "shape": list(p.data.shape), "offset": offset})
        offset += p.data.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "parameters": entries,
        "total_size": offset,
        "extra": extra or {},
        "blobs": {},
    }
    h, n = _write_blob(os.path.join(path, "params.bin"), [p.data for p in params])
    manifest["blobs"]["params"] = {"file": "params.bin", "sha256": h, "bytes": n}

    if optimizer is not None:
        manifest["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
            "step_count": optimizer.step_count,
        }
        names = [p.name for p in params]
        moments_m = [np.asarray(optimizer.m.get(n2, np.zeros(0))) for n2 in names]
        moments_v = [np.asarray(optimizer.v.get(n2, np.zeros(0))) for n2 in names]
        manifest["optimizer"]["moment_sizes"] = [int(a.size) for a in moments_m]
        h, n = _write_blob(os.path.join(path, "adam_m.bin"), moments_m)
        manifest["blobs"]["adam_m"] = {"file": "adam_m.bin", "sha256": h, "bytes": n}
        h, n = _write_blob(os.path.join(path, "adam_v.bin"), moments_v)
        manifest["blobs"]["adam_v"] = {"file": "adam_v.bin", "sha256": h, "bytes": n}

    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_checkpoint(path, params):
    """Restore ``params`` (matched by name) in place.

    Returns ``(optimizer_state_or_None, extra_dict)``.
    """
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format version %r" % manifest["format_version"])
    info = manifest["blobs"]["params"]
    flat = _read_blob(os.path.join(path, info["file"]), info["sha256"], info["bytes"])
    if flat.size != manifest["total_size"]:
        raise ValueError("parameter blob size mismatch")

    by_name = {p.name: p for p in params}
    seen = set()
    for e in manifest["parameters"]:
        p = by_name.get(e["name"])
        if p is None:
            raise KeyError("checkpoint has parameter %r not present in the model" % e["name"])
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = flat[e["offset"]: e["offset"] + n]
        if tuple(p.data.shape) != shape:
            raise ValueError("shape mismatch for %r: checkpoint %r vs model %r"
                             % (e["name"], shape, tuple(p.data.shape)))
        p.data = chunk.reshape(shape).copy()
        seen.add(e["name"])
    missing = set(by_name) - seen
    if missing:
        raise KeyError("checkpoint is missing parameters: %s" % sorted(missing))

    optimizer = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optimizer = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                              weight_decay=o["weight_decay"], step_count=o["step_count"])
        for blob_key, store in (("adam_m", optimizer.m), ("adam_v", optimizer.v)):
            info = manifest["blobs"][blob_key]
            flat = _read_blob(os.path.join(path, info["file"]), info["sha256"], info["bytes"])
            pos = 0
            for e, size in zip(manifest["parameters"], o["moment_sizes"]):
                if size == 0:
                    continue
                shape = tuple(e["shape"])
                store[e["name"]] = flat[pos: pos + size].reshape(shape).copy()
                pos += size
    return optimizer, manifest.get("extra", {})
