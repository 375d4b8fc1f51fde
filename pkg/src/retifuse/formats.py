"""Binary file formats: embedding matrices, id sidecars and model checkpoints.

Embedding file layout (all integers little-endian u32)::

    b"MRNE" | version=1 | rows | cols | rows*cols float32 LE, row-major

The sidecar ``<path>.ids`` holds one sample id per line in row order.

Checkpoint layout::

    b"MRNC" | version=1 | meta_len | meta JSON (utf-8) | n_tensors
    then per tensor: name_len (u32) | name | ndim (u32) | dims (u32 each)
                     | payload float64 LE, row-major

Checkpoints keep float64 so a reloaded model reproduces training-time
outputs exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UnknownIdError

EMB_MAGIC = b"MRNE"
CKPT_MAGIC = b"MRNC"
VERSION = 1
_MAX_PAYLOAD = 1 << 36


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


@dataclass
class EmbeddingFile:
    ids: list[str]
    data: np.ndarray  # float32, (rows, cols)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype="<f4")
        if self.data.ndim != 2:
            raise FormatError(f"embedding matrix must be 2-D, got shape {self.data.shape}")
        if len(self.ids) != self.data.shape[0]:
            raise FormatError(f"{len(self.ids)} ids for {self.data.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("duplicate sample ids in embedding file")
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def lookup(self, sample_id: str) -> np.ndarray:
        try:
            return self.data[self._index[sample_id]].copy()
        except KeyError:
            raise UnknownIdError(f"sample id {sample_id!r} not in embedding file") from None

    def take(self, sample_ids) -> np.ndarray:
        return np.stack([self.lookup(s) for s in sample_ids]) if len(sample_ids) else (
            np.zeros((0, self.cols), dtype="<f4"))


def encode_embeddings(data) -> bytes:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise FormatError(f"embedding matrix must be 2-D, got shape {arr.shape}")
    out = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(out)):
        raise FormatError("embedding payload must be finite (after float32 conversion)")
    rows, cols = out.shape
    return EMB_MAGIC + struct.pack("<III", VERSION, rows, cols) + out.tobytes()


def decode_embeddings(blob: bytes) -> np.ndarray:
    if len(blob) < 16:
        raise FormatError("truncated header", offset=len(blob))
    if blob[:4] != EMB_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    need = rows * cols * 4
    if need > _MAX_PAYLOAD:
        raise FormatError(f"dimension overflow: {rows}x{cols}", offset=8)
    have = len(blob) - 16
    if have < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {have}", offset=len(blob))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", offset=16 + need)
    return np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=16).reshape(rows, cols).copy()


def write_embeddings(path, data, ids) -> None:
    ids = [str(i) for i in ids]
    if len(ids) != np.asarray(data).shape[0]:
        raise FormatError(f"{len(ids)} ids for {np.asarray(data).shape[0]} rows")
    for sid in ids:
        if not sid or "\n" in sid or "\r" in sid:
            raise FormatError(f"invalid sample id {sid!r}")
    atomic_write_bytes(path, encode_embeddings(data))
    atomic_write_text(sidecar_path(path), "".join(f"{sid}\n" for sid in ids))


def read_embeddings(path) -> EmbeddingFile:
    data = decode_embeddings(Path(path).read_bytes())
    side = sidecar_path(path)
    if side.exists():
        ids = side.read_text(encoding="utf-8").splitlines()
    else:
        ids = [str(i) for i in range(data.shape[0])]
    if len(ids) != data.shape[0]:
        raise FormatError(f"sidecar has {len(ids)} ids but file has {data.shape[0]} rows")
    return EmbeddingFile(ids, data)


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} has non-finite values")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint", offset=len(blob))
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint", offset=pos)
    return tensors, meta
