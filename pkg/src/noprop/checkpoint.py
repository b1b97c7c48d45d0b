"""The "NPRP" checkpoint file.

Layout::

    b"NPRP" | u32 version | u32 header length | JSON header | tensor payload | u32 crc32

All integers are little-endian.  The header lists every tensor as
(name, dtype, shape, offset, nbytes) relative to the payload start; payload
arrays are raw little-endian bytes.  The crc32 covers everything before it.
Random streams are addressed by name and counter, so the only RNG state to
persist is the training cursor.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib

import numpy as np

from .blocks import BlockConfig
from .bundle import ModelBundle
from .config import make_config
from .embeddings import EmbeddingMatrix, Head
from .errors import ChecksumError, FormatError, TruncatedFileError, VersionError
from .optim import ParamStore
from .schedules import DiscreteSchedule, TrainableGamma

MAGIC = b"NPRP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_SLOTS = ("params", "buffers", "m", "v")


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def encode(bundle: ModelBundle, version: int = VERSION) -> bytes:
    tensors, chunks, offset = [], [], 0

    def put(name, arr):
        nonlocal offset
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    steps = {}
    for sname, store in bundle.stores().items():
        for slot in _SLOTS:
            for pname, arr in getattr(store, slot).items():
                put(f"{sname}|{slot}|{pname}", arr)
        steps[sname] = store.steps
    if bundle.schedule is not None:
        put("schedule|alpha_bar", bundle.schedule.alpha_bar)
    header = {
        "method": bundle.method,
        "config": _jsonable(bundle.config.snapshot()),
        "block_cfg": _jsonable(dataclasses.asdict(bundle.block_cfg)),
        "embedding": bundle.embedding.mode,
        "head": {"kind": bundle.head.kind, "sigma": bundle.head.sigma},
        "trained": bundle.trained,
        "cursor": bundle.cursor,
        "steps": steps,
        "tensors": tensors,
    }
    hraw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, version, len(hraw)) + hraw + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write atomically: a partial file never replaces a good one."""
    data = encode(bundle)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode(data: bytes) -> ModelBundle:
    if len(data) < _PREFIX.size + 4:
        raise TruncatedFileError("checkpoint is too short")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}; this build reads version {VERSION}")
    start = _PREFIX.size + hlen
    if len(data) < start + 4:
        raise TruncatedFileError("checkpoint header is truncated")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if header is not None:
        need = start + sum(t["nbytes"] for t in header["tensors"]) + 4
        if len(data) < need:
            raise TruncatedFileError(f"checkpoint has {len(data)} bytes, expected {need}")
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    if header is None:
        raise FormatError("checkpoint header is not valid JSON")
    return _assemble(header, memoryview(data)[start:len(data) - 4])


def _assemble(header, payload) -> ModelBundle:
    stores: dict[str, ParamStore] = {}
    schedule = None
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        parts = t["name"].split("|")
        if parts[0] == "schedule":
            schedule = DiscreteSchedule(arr)
            continue
        sname, slot, pname = parts
        getattr(stores.setdefault(sname, ParamStore()), slot)[pname] = arr
    for sname, steps in header["steps"].items():
        stores.setdefault(sname, ParamStore()).steps = {k: int(v) for k, v in steps.items()}
    cfg_vals = dict(header["config"])
    cfg_vals["conv_channels"] = tuple(cfg_vals["conv_channels"])
    cfg = make_config(cfg_vals)
    bc = dict(header["block_cfg"])
    bc["input_shape"] = tuple(bc["input_shape"])
    bc["conv_channels"] = tuple(bc["conv_channels"])
    head = Head(header["head"]["kind"], stores.pop("head"), header["head"]["sigma"])
    emb = EmbeddingMatrix(header["embedding"], stores.pop("embed"))
    gamma = TrainableGamma(stores.pop("gamma")) if "gamma" in stores else None
    baseline = stores.pop("baseline", None)
    return ModelBundle(cfg, BlockConfig(**bc), emb, head, stores, schedule, gamma, baseline,
                       bool(header["trained"]), dict(header["cursor"]))


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return decode(fh.read())
