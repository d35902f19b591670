"""Little-endian binary formats: GTEN teacher stores and GCKP checkpoints.

GTEN::

    "GTEN" u32 version=1 u32 count u32 feat_dim u8 has_logits u32 logit_dim
    count x { u16 id_len, id (UTF-8), feat_dim x f32, [logit_dim x f32] }

GCKP::

    "GCKP" u32 version=1 u32 tensor_count u32 meta_len meta (UTF-8 JSON)
    tensor_count x { u16 name_len, name, u8 rank, rank x u32 dims, f32 payload }

The GCKP metadata carries ``payload_sha256``, the digest of every byte after
the metadata block, so corruption of tensor data is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..exceptions import ConfigMismatchError, FormatError, MissingRecordError

GTEN_MAGIC = b"GTEN"
GCKP_MAGIC = b"GCKP"
VERSION = 1


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or n > self.remaining():
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (need {n}, have {self.remaining()})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def text(self, n: int) -> str:
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: invalid UTF-8 at byte {self.pos - n}") from None


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------- GTEN


@dataclass
class TeacherStore:
    """Read-only map from sample id to a teacher feature vector (and optional logits)."""

    ids: List[str]
    features: np.ndarray
    logits: Optional[np.ndarray] = None
    _index: Dict[str, int] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.ids):
            raise FormatError("features must be (count, feat_dim) matching the id list")
        if self.logits is not None:
            self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)
            if self.logits.ndim != 2 or self.logits.shape[0] != len(self.ids):
                raise FormatError("logits must be (count, logit_dim) matching the id list")
        self._index = {}
        for k, i in enumerate(self.ids):
            if i in self._index:
                raise FormatError(f"duplicate teacher id {i!r}")
            self._index[i] = k

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_logits(self) -> bool:
        return self.logits is not None

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._index[i] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise MissingRecordError(f"no teacher record for id {exc.args[0]!r}") from None

    def lookup(self, key: str):
        k = self.rows([key])[0]
        if self.logits is None:
            return self.features[k]
        return self.features[k], self.logits[k]

    def features_for(self, ids: Sequence[str]) -> np.ndarray:
        return self.features[self.rows(ids)]

    def logits_for(self, ids: Sequence[str]) -> np.ndarray:
        if self.logits is None:
            raise FormatError("this teacher store carries no logits")
        return self.logits[self.rows(ids)]


def encode_teacher_store(store: TeacherStore) -> bytes:
    logit_dim = store.logits.shape[1] if store.has_logits else 0
    parts = [GTEN_MAGIC, struct.pack("<IIIBI", VERSION, len(store), store.feat_dim, int(store.has_logits), logit_dim)]
    for k, ident in enumerate(store.ids):
        raw = ident.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id too long for GTEN: {ident[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(store.features[k].astype("<f4").tobytes())
        if store.has_logits:
            parts.append(store.logits[k].astype("<f4").tobytes())
    return b"".join(parts)


def decode_teacher_store(buf: bytes) -> TeacherStore:
    r = _Reader(buf, "GTEN")
    if r.take(4) != GTEN_MAGIC:
        raise FormatError("GTEN: bad magic")
    version, count, feat_dim, has_logits, logit_dim = r.unpack("IIIBI")
    if version != VERSION:
        raise FormatError(f"GTEN: unsupported version {version}")
    if has_logits not in (0, 1):
        raise FormatError(f"GTEN: has_logits flag must be 0 or 1, got {has_logits}")
    if not has_logits and logit_dim:
        raise FormatError("GTEN: logit_dim must be 0 when has_logits is 0")
    if has_logits and logit_dim == 0:
        raise FormatError("GTEN: logit_dim must be positive when has_logits is 1")
    if feat_dim == 0:
        raise FormatError("GTEN: feat_dim must be positive")
    min_record = 2 + 4 * (feat_dim + logit_dim)
    if count * min_record > r.remaining():
        raise FormatError(f"GTEN: header declares {count} records but only {r.remaining()} bytes follow")
    ids, feats, logits = [], np.empty((count, feat_dim), np.float32), None
    if has_logits:
        logits = np.empty((count, logit_dim), np.float32)
    for k in range(count):
        (id_len,) = r.unpack("H")
        ids.append(r.text(id_len))
        feats[k] = r.floats(feat_dim)
        if has_logits:
            logits[k] = r.floats(logit_dim)
    if r.remaining():
        raise FormatError(f"GTEN: {r.remaining()} trailing bytes after {count} declared records")
    return TeacherStore(ids, feats, logits)


def write_teacher_store(store: TeacherStore, path) -> None:
    _atomic_write(path, encode_teacher_store(store))


def read_teacher_store(path) -> TeacherStore:
    with open(path, "rb") as fh:
        return decode_teacher_store(fh.read())


# ---------------------------------------------------------------- GCKP


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: dict

    @property
    def stage(self) -> int:
        return int(self.meta.get("stage", 0))


def _encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise FormatError(f"tensor {name!r} cannot be represented in GCKP")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(tensors: Dict[str, np.ndarray], meta: dict) -> bytes:
    body = _encode_tensors(tensors)
    meta = dict(meta)
    meta["payload_sha256"] = hashlib.sha256(body).hexdigest()
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = GCKP_MAGIC + struct.pack("<III", VERSION, len(tensors), len(meta_raw)) + meta_raw
    return head + body


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf, "GCKP")
    if r.take(4) != GCKP_MAGIC:
        raise FormatError("GCKP: bad magic")
    version, count, meta_len = r.unpack("III")
    if version != VERSION:
        raise FormatError(f"GCKP: unsupported version {version}")
    try:
        meta = json.loads(r.text(meta_len))
    except json.JSONDecodeError as exc:
        raise FormatError(f"GCKP: metadata is not valid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise FormatError("GCKP: metadata must be a JSON object")
    body = r.buf[r.pos :]
    expected = meta.get("payload_sha256")
    if expected is not None and hashlib.sha256(body).hexdigest() != expected:
        raise FormatError("GCKP: integrity check failed (payload digest mismatch)")
    if count * 3 > r.remaining():
        raise FormatError(f"GCKP: header declares {count} tensors but only {r.remaining()} bytes follow")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("H")
        name = r.text(name_len)
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if name in tensors:
            raise FormatError(f"GCKP: duplicate tensor name {name!r}")
        tensors[name] = r.floats(size).reshape(dims)
    if r.remaining():
        raise FormatError(f"GCKP: {r.remaining()} trailing bytes after {count} tensors")
    return Checkpoint(tensors, meta)


def checkpoint_save(model, meta: dict, path) -> Checkpoint:
    """Serialize all model parameters plus metadata, atomically."""
    meta = dict(meta)
    meta.setdefault("config_hash", model.config.digest())
    meta.setdefault("model_config", model.config.to_dict())
    meta.setdefault("num_classes", model.num_classes)
    tensors = model.state_dict()
    payload = encode_checkpoint(tensors, meta)
    _atomic_write(path, payload)
    return decode_checkpoint(payload)


def checkpoint_load(path, config=None) -> Checkpoint:
    """Read a checkpoint; if ``config`` is given its digest must match the stored one."""
    with open(path, "rb") as fh:
        ckpt = decode_checkpoint(fh.read())
    if config is not None and ckpt.meta.get("config_hash") != config.digest():
        raise ConfigMismatchError("checkpoint/config mismatch")
    return ckpt
