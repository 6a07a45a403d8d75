"""Single-file checkpoint format for models and learngene bundles.

Layout: magic, header length, header CRC32, JSON header, raw blob.  The
header carries a tensor table (name, shape, offset, length) and the SHA-256
of the blob; every byte of the file is covered by either the CRC or the
digest, so any single-byte corruption fails loudly.  Tensors are stored as
little-endian 32-bit reals.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

from learngene.inherit import LearngeneBundle, bundle_from_state, bundle_state
from learngene.netgraph import Layer, Model, spec_from_dict, spec_to_dict
from learngene.numcore import Tensor

MAGIC = b"LGCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def _model_state(model):
    tensors = {}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    for name, b in model.named_buffers():
        tensors[name] = b
    manifest = {
        "family": model.family,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "model_role": model.role,
        "provenance": model.provenance,
        "layer_specs": [spec_to_dict(layer.spec) for layer in model.layers],
    }
    return manifest, tensors


def _model_from_state(manifest, tensors):
    layers = []
    for i, sd in enumerate(manifest["layer_specs"]):
        spec = spec_from_dict(sd)
        params, buffers = {}, {}
        prefix = f"layers.{i}."
        for name, arr in tensors.items():
            if not name.startswith(prefix):
                continue
            key = name[len(prefix):]
            if key.startswith("buf."):
                buffers[key[4:]] = arr.copy()
            else:
                params[key] = Tensor(arr.copy(), requires_grad=True)
        layers.append(Layer(spec, params, buffers))
    model = Model(manifest["family"], layers, manifest["num_classes"],
                  tuple(manifest["input_shape"]), role=manifest["model_role"])
    model.provenance = dict(manifest.get("provenance", {}))
    return model


def write_checkpoint(obj, path):
    """Serialize a Model or LearngeneBundle; returns the header dict."""
    if isinstance(obj, Model):
        role, (extra, tensors) = "model", _model_state(obj)
    elif isinstance(obj, LearngeneBundle):
        role, (extra, tensors) = "bundle", bundle_state(obj)
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")

    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "dtype": "f4", "shape": list(arr.shape),
                      "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    header = {
        "version": FORMAT_VERSION,
        "role": role,
        "tensors": table,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_length": len(blob),
        "extra": extra,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(struct.pack("<I", zlib.crc32(payload)))
        fh.write(payload)
        fh.write(blob)
    return header


def _read_header(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated header")
    length, crc = struct.unpack("<II", raw)
    payload = fh.read(length)
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise CheckpointError("header checksum mismatch")
    try:
        header = json.loads(payload)
    except ValueError as e:
        raise CheckpointError(f"unparseable header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('version')!r}")
    return header


def _read_blob(fh, header):
    blob = fh.read(header["blob_length"] + 1)
    if len(blob) != header["blob_length"]:
        raise CheckpointError("blob length mismatch")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError("blob checksum mismatch")
    prev_end = 0
    tensors = {}
    for row in header["tensors"]:
        if row["offset"] != prev_end:
            raise CheckpointError("tensor table offsets are not contiguous")
        prev_end = row["offset"] + row["length"]
        arr = np.frombuffer(blob, dtype="<f4", count=row["length"] // 4,
                            offset=row["offset"])
        tensors[row["name"]] = arr.reshape(row["shape"]).astype(np.float32)
    if prev_end != header["blob_length"]:
        raise CheckpointError("tensor table does not cover the blob")
    return tensors


def read_checkpoint(path):
    """Load a Model or LearngeneBundle; verifies every checksum."""
    try:
        with open(path, "rb") as fh:
            header = _read_header(fh)
            tensors = _read_blob(fh, header)
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if header["role"] == "model":
        return _model_from_state(header["extra"], tensors)
    if header["role"] == "bundle":
        return bundle_from_state(header["extra"], tensors)
    raise CheckpointError(f"unknown checkpoint role {header['role']!r}")


def inspect_checkpoint(path):
    """Header summary without materializing tensors (blob is still verified)."""
    try:
        with open(path, "rb") as fh:
            header = _read_header(fh)
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if len(blob) != header["blob_length"]:
        raise CheckpointError("blob length mismatch")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError("blob checksum mismatch")
    return {
        "role": header["role"],
        "version": header["version"],
        "tensor_count": len(header["tensors"]),
        "total_bytes": header["blob_length"],
        "tensors": [(t["name"], tuple(t["shape"])) for t in header["tensors"]],
        "extra": header["extra"],
    }
