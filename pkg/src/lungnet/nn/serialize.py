"""Binary model files.

Layout (little-endian)::

    magic    4 bytes  b"LNGM"
    version  uint16   FORMAT_VERSION
    n        uint32   length of the graph JSON
    graph    n bytes  UTF-8 JSON: ModelGraph.to_dict() plus "params": [[name, dtype, shape], ...]
    blobs             raw parameter arrays, in the order listed
    digest   32 bytes SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .graph import ModelGraph

MAGIC = b"LNGM"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def dumps_model(g: ModelGraph, extra: dict | None = None) -> bytes:
    entries = []
    blobs = []
    for i, p in enumerate(g.params):
        for k in sorted(p):
            a = np.ascontiguousarray(p[k], dtype=p[k].dtype.newbyteorder("<"))
            entries.append([i, k, a.dtype.str, list(a.shape)])
            blobs.append(a.tobytes())
    desc = g.to_dict()
    desc["params"] = entries
    if extra:
        desc["extra"] = extra
    head = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads_model(data: bytes, expect: ModelGraph | None = None) -> tuple[ModelGraph, dict]:
    if len(data) < 4 + 6 + 32 or data[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFileError("checksum mismatch: model file is corrupted")
    version, n = struct.unpack_from("<HI", body, 4)
    if version != FORMAT_VERSION:
        raise ModelFileError(f"model format version {version}, this build reads {FORMAT_VERSION}")
    desc = json.loads(body[10 : 10 + n].decode("utf-8"))
    g = ModelGraph.from_dict(desc)
    if expect is not None and not g.same_architecture(expect):
        raise ModelFileError("model file architecture does not match the expected graph")
    pos = 10 + n
    for i, k, dt, shape in desc["params"]:
        dtype = np.dtype(dt)
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        a = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos).reshape(shape)
        pos += size
        if k not in g.params[i] or g.params[i][k].shape != tuple(shape):
            raise ModelFileError(f"layer {i} parameter {k}: shape {shape} does not fit the graph")
        g.params[i][k] = a.astype(g.dtype)
    if pos != len(body):
        raise ModelFileError("trailing bytes after parameter blobs")
    return g, desc.get("extra") or {}


def save_model(g: ModelGraph, path, extra: dict | None = None):
    Path(path).write_bytes(dumps_model(g, extra))


def load_model(path, expect: ModelGraph | None = None) -> ModelGraph:
    return loads_model(Path(path).read_bytes(), expect)[0]


def load_model_with_extra(path, expect: ModelGraph | None = None):
    return loads_model(Path(path).read_bytes(), expect)
