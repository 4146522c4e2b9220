#!/usr/bin/env python3
"""
Model file reader/writer.

Layout: b"ESPEC1\\n", an 8-byte little-endian header length, a JSON header
{"config": {...}, "tensors": [{"name", "shape"}, ...]}, then raw little-endian
float32 data concatenated in manifest order.
"""
import json
import logging
import os
import struct

import numpy as np

from errors import ConfigError, ModelIOError, ShapeError
from toy_transformer import ModelConfig, WeightStore, expected_shapes, weights_from_tensors

logger = logging.getLogger(__name__)

MAGIC = b"ESPEC1\n"


def serialize_model(weights: WeightStore) -> bytes:
    header = {
        "config": weights.config.to_dict(),
        "tensors": [{"name": name, "shape": list(shape)} for name, shape in weights.manifest()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(header_bytes)), header_bytes]
    for _, arr in weights.named_tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_model(data: bytes) -> WeightStore:
    if not data.startswith(MAGIC):
        raise ModelIOError("bad magic: not an ESPEC1 model file")
    offset = len(MAGIC)
    if len(data) < offset + 8:
        raise ModelIOError("truncated header length")
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if len(data) < offset + header_len:
        raise ModelIOError("truncated header")
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        config.validate()
        manifest = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise ModelIOError(f"malformed header: {e}") from e
    offset += header_len
    if manifest != expected_shapes(config):
        raise ModelIOError("tensor manifest does not match the declared config")
    tensors = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if len(data) < offset + nbytes:
            raise ModelIOError(f"truncated tensor data at {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise ModelIOError(f"{len(data) - offset} trailing bytes after tensor data")
    if not all(np.all(np.isfinite(t)) for t in tensors.values()):
        raise ModelIOError("model file contains non-finite weights")
    try:
        return weights_from_tensors(config, tensors)
    except ShapeError as e:
        raise ModelIOError(str(e)) from e


def save_model(weights: WeightStore, path: str):
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(serialize_model(weights))
        logger.info(f"MODEL IO: Saved {weights.config.n_layers}-layer model to {path}")
    except OSError as e:
        raise ModelIOError(f"cannot write model file {path}: {e}") from e


def load_model(path: str) -> WeightStore:
    if not os.path.exists(path):
        raise ModelIOError(f"model file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ModelIOError(f"cannot read model file {path}: {e}") from e
    weights = deserialize_model(data)
    logger.info(f"MODEL IO: Loaded {weights.config.n_layers}-layer model from {path}")
    return weights
