"""Named parameter snapshots and the TTLV binary container.

Container layout (all integers little-endian)::

    b"TTLV" | format_version u32 | [role u8, feature files only] | count u32
    per entry: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | dtype u8 | raw values

Checkpoints carry no role byte; feature files carry one of ``ROLES``.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import torch
from torch import nn

from .layers import NdiffError

MAGIC = b"TTLV"
FORMAT_VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
ROLES = {"MEL": 1, "MCC": 2, "F0": 3, "CTX": 4, "EMB": 5}
ROLE_NAMES = {v: k for k, v in ROLES.items()}


class FormatError(NdiffError):
    """File is not a readable TTLV container."""


class VersionError(FormatError):
    pass


class MismatchError(NdiffError, KeyError):
    """Store does not fit the architecture it is loaded into."""

    def __init__(self, message: str, entry: Optional[str] = None):
        self.entry = entry
        super().__init__(message)

    def __str__(self):
        return self.args[0]


@dataclass
class ParameterStore:
    """Ordered map ``dotted name -> numpy array``; an immutable-by-convention snapshot."""

    entries: Dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        clean = {}
        for k, v in self.entries.items():
            a = np.ascontiguousarray(v)
            if a.dtype not in (np.float32, np.float64):
                a = a.astype(np.float32)
            clean[str(k)] = a
        self.entries = clean

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> np.ndarray:
        return self.entries[name]

    def names(self):
        return list(self.entries)

    def __eq__(self, other):
        if not isinstance(other, ParameterStore) or self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    def subset(self, prefix: str) -> "ParameterStore":
        return ParameterStore({k: v for k, v in self.entries.items() if k.startswith(prefix)})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.entries.items():
            h.update(k.encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.entries.items()})

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        return cls({k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()})

    def load_into(self, module: nn.Module, strict: bool = True) -> nn.Module:
        """Copy values into ``module``; fails before touching it on any mismatch."""
        target = module.state_dict()
        for name, t in target.items():
            if name not in self.entries:
                raise MismatchError(f"missing entry {name!r}", name)
            if tuple(self.entries[name].shape) != tuple(t.shape):
                raise MismatchError(
                    f"entry {name!r} has shape {self.entries[name].shape}, expected {tuple(t.shape)}", name
                )
        if strict:
            extra = [n for n in self.entries if n not in target]
            if extra:
                raise MismatchError(f"unexpected entry {extra[0]!r}", extra[0])
        with torch.no_grad():
            for name, t in target.items():
                t.copy_(torch.from_numpy(self.entries[name].copy()).to(t.dtype))
        return module


def _pack_entries(entries: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        a = np.asarray(arr)
        if a.dtype == np.float64:
            a = a.astype("<f8")
        else:
            a = a.astype("<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"name too long: {name[:40]}...")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", a.ndim))
        out.write(struct.pack(f"<{a.ndim}I", *a.shape))
        out.write(struct.pack("<B", DTYPE_TAGS[a.dtype]))
        out.write(a.tobytes(order="C"))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_header(data: bytes, path):
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    return r, version


def _read_entries(r: _Reader) -> Dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{r.path}: bad entry name") from e
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (tag,) = r.unpack("<B")
        if tag not in TAG_DTYPES:
            raise FormatError(f"{r.path}: unknown dtype tag {tag}")
        dt = TAG_DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        buf = r.take(n * dt.itemsize)
        if name in entries:
            raise FormatError(f"{r.path}: duplicate entry {name!r}")
        entries[name] = np.frombuffer(buf, dtype=dt).reshape(dims).copy()
    if r.pos != len(r.data):
        raise FormatError(f"{r.path}: trailing bytes after last entry")
    return entries


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_params(store: ParameterStore, path) -> None:
    payload = MAGIC + struct.pack("<I", store.format_version) + _pack_entries(store.entries)
    _atomic_write(path, payload)


def load_params(path) -> ParameterStore:
    with open(path, "rb") as fh:
        data = fh.read()
    r, version = _read_header(data, path)
    return ParameterStore(_read_entries(r), format_version=version)


def save_features(path, role: str, **arrays: np.ndarray) -> None:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    payload = MAGIC + struct.pack("<IB", FORMAT_VERSION, ROLES[role]) + _pack_entries(arrays)
    _atomic_write(path, payload)


def load_features(path, role: Optional[str] = None) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    r, _ = _read_header(data, path)
    (tag,) = r.unpack("<B")
    if tag not in ROLE_NAMES:
        raise FormatError(f"{path}: unknown role tag {tag}")
    if role is not None and ROLE_NAMES[tag] != role:
        raise FormatError(f"{path}: role {ROLE_NAMES[tag]}, expected {role}")
    return _read_entries(r)


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
