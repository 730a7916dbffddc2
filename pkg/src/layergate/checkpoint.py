"""Binary checkpoint format for model parameters and adapter state.

Layout (all integers little-endian):

    magic   4 bytes  b"ILAC"
    version u32
    meta    u32 length + utf-8 JSON (sorted keys)
    count   u32 tensor count
    tensor  repeated: u16 name length, name utf-8, u8 dtype tag,
            u8 ndim, u32 per dim, raw little-endian row-major payload
    crc32   u32 over every preceding byte

Round-trips are bitwise exact; a single flipped payload byte fails the
checksum. Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .adapters import FFT, LORA, AdapterSet, LoraPair
from .errors import CheckpointError, ChecksumError, TruncatedError, VersionError
from .model import HEAD_BLOCK, LayerId, ModelConfig, ModelParams, fingerprint

MAGIC = b"ILAC"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_TAGS = {np.dtype("float64"): 0, np.dtype("int64"): 1}


def _block_token(lid: LayerId) -> str:
    return "head" if lid.is_head else str(lid.block)


def _parse_layer(block_token: str, role: str) -> LayerId:
    return LayerId(HEAD_BLOCK if block_token == "head" else int(block_token), role)


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _DTYPE_TAGS[arr.dtype]
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    return b"".join(chunks)


def write_tensor_file(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<I", len(meta))
        + meta
        + struct.pack("<I", len(tensors))
        + _pack_tensors(tensors)
    )
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends {self.pos + n - len(self.buf)} bytes early")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def read_tensor_file(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise TruncatedError(f"{path}: too short to be a checkpoint")
    body, stored = raw[:-4], raw[-4:]
    if struct.unpack("<I", stored)[0] != zlib.crc32(body):
        raise ChecksumError(f"{path}: checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u("<I")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    meta = json.loads(r.take(r.u("<I")).decode("utf-8"))
    count = r.u("<I")
    tensors = {}
    for _ in range(count):
        name = r.take(r.u("<H")).decode("utf-8")
        tag = r.u("<B")
        ndim = r.u("<B")
        dims = tuple(r.u("<I") for _ in range(ndim))
        dtype = _DTYPES.get(tag)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes after payload")
    return tensors, meta


@dataclass
class CheckpointState:
    params: ModelParams
    adapters: Optional[AdapterSet]
    metadata: dict


def save_checkpoint(path, params: ModelParams, adapters: Optional[AdapterSet], metadata: dict) -> None:
    cfg = params.config
    tensors: dict[str, np.ndarray] = {"param/embedding": params.embedding}
    for key, gain in params.gains.items():
        tensors[f"param/gain/{key}"] = gain
    for lid, w in params.weights.items():
        tensors[f"param/layer/{_block_token(lid)}/{lid.role}"] = w

    meta = dict(metadata)
    meta["config"] = {k: getattr(cfg, k) for k in ("blocks", "d_model", "heads", "d_ffn", "vocab", "seq_len", "seed")}
    meta["fingerprint"] = fingerprint(cfg)
    if adapters is None:
        meta["adapters"] = None
    else:
        meta["adapters"] = {"mode": adapters.mode, "rank": adapters.rank, "beta": adapters.beta}
        if adapters.mode == LORA:
            for lid, pair in adapters.entries.items():
                tensors[f"adapter/{_block_token(lid)}/{lid.role}/B"] = pair.B
                tensors[f"adapter/{_block_token(lid)}/{lid.role}/A"] = pair.A
        else:
            for lid, delta in adapters.entries.items():
                tensors[f"adapter/{_block_token(lid)}/{lid.role}/delta"] = delta
            for key, delta in adapters.extras.items():
                tensors[f"adapter/extra/{key}"] = delta
    write_tensor_file(path, tensors, meta)


def load_checkpoint(path) -> CheckpointState:
    tensors, meta = read_tensor_file(path)
    cfg = ModelConfig(**meta["config"])
    weights = {}
    gains = {}
    embedding = None
    lora_parts: dict[LayerId, dict[str, np.ndarray]] = {}
    fft_entries: dict[LayerId, np.ndarray] = {}
    extras: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        parts = name.split("/")
        if parts[0] == "param":
            if parts[1] == "embedding":
                embedding = arr
            elif parts[1] == "gain":
                gains["/".join(parts[2:])] = arr
            else:
                weights[_parse_layer(parts[2], parts[3])] = arr
        elif parts[0] == "adapter":
            if parts[1] == "extra":
                extras["/".join(parts[2:])] = arr
            elif parts[-1] in ("B", "A"):
                lid = _parse_layer(parts[1], parts[2])
                lora_parts.setdefault(lid, {})[parts[-1]] = arr
            else:
                fft_entries[_parse_layer(parts[1], parts[2])] = arr
    if embedding is None or not weights:
        raise CheckpointError(f"{path}: missing parameter tensors")
    params = ModelParams(cfg, weights, embedding, gains)

    adapters = None
    ameta = meta.get("adapters")
    if ameta is not None:
        if ameta["mode"] == LORA:
            entries = {lid: LoraPair(parts["B"], parts["A"]) for lid, parts in lora_parts.items()}
            adapters = AdapterSet(LORA, entries, rank=ameta["rank"], beta=ameta["beta"])
        else:
            adapters = AdapterSet(FFT, fft_entries, extras=extras)
    return CheckpointState(params, adapters, meta)
