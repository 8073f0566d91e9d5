"""On-disk anchor-space bundles and resident-set accounting.

File layout (little endian)::

    b"MORL" | u32 version | u32 section count
    per section: u16 name length | name (utf-8) | 2-byte dtype tag
                 | u8 ndim | u64 dims... | raw array bytes
    u64 FNV-1a checksum of everything before it

Arrays are stored at full float64 precision so save/load is bit-exact.
Scalar metadata lives in a ``meta`` section holding sorted-key JSON.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numba
import numpy as np

from .deform import DeformationField
from .errors import CorruptRecord, InvalidInput, LedgerViolation, NotFound
from .scene import ANCHOR_ARRAYS, AnchorSpace, DecoderWeights

MAGIC = b"MORL"
VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_TAGS = {np.dtype("<f8"): b"f8", np.dtype("<i8"): b"i8", np.dtype("u1"): b"u1"}
_DTYPES = {v: k for k, v in _TAGS.items()}

Key = Union[str, int]


@numba.njit(cache=True)
def _fnv1a(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8)))


@dataclass
class Bundle:
    space: AnchorSpace
    field: Optional[DeformationField] = None


def _pack_sections(sections: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind in "fi" else arr.dtype
        if dt not in _TAGS:
            raise InvalidInput(f"unsupported dtype {arr.dtype} in section {name}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + _TAGS[dt] + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def _unpack_sections(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CorruptRecord("bad magic")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise CorruptRecord("checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CorruptRecord(f"unsupported format version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            dt = _DTYPES[bytes(body[pos:pos + 2])]
            ndim = body[pos + 2]
            pos += 3
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CorruptRecord(f"section {name} runs past the end")
            out[name] = np.frombuffer(body[pos:pos + size], dtype=dt).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptRecord(f"malformed section table: {exc}") from exc
    if pos != len(body):
        raise CorruptRecord("trailing bytes after last section")
    return out


def encode_bundle(space: AnchorSpace, fld: Optional[DeformationField] = None) -> bytes:
    meta = {"kind": space.kind, "n": space.n, "t_n": space.t_n, "grid_voxel": space.grid_voxel}
    sections = [(f"anchor.{name}", getattr(space, name)) for name in ANCHOR_ARRAYS]
    sections += list(space.decoder.params().items())
    if fld is not None:
        meta["field"] = {"position_scale": fld.position_scale, "owner": fld.owner}
        sections += list(fld.params().items())
        sections.append(("deform.bbox", fld.bbox))
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    return _pack_sections([("meta", blob)] + sections)


def decode_bundle(data: bytes) -> Bundle:
    sec = _unpack_sections(data)
    try:
        meta = json.loads(sec.pop("meta").tobytes().decode())
        arrays = {name: sec[f"anchor.{name}"] for name in ANCHOR_ARRAYS}
        decoder = DecoderWeights(sec["decoder.w1"], sec["decoder.b1"],
                                 sec["decoder.w2"], sec["decoder.b2"])
        space = AnchorSpace(decoder=decoder, grid_voxel=meta["grid_voxel"], kind=meta["kind"],
                            n=meta["n"], t_n=meta["t_n"], **arrays)
        fld = None
        if "field" in meta:
            fld = DeformationField(
                sec["deform.plane_xy"], sec["deform.plane_xt"], sec["deform.plane_yt"],
                sec["deform.w1"], sec["deform.b1"], sec["deform.w2"], sec["deform.b2"],
                sec["deform.bbox"], meta["field"]["position_scale"], meta["field"]["owner"])
    except (KeyError, ValueError) as exc:
        raise CorruptRecord(f"missing or invalid section: {exc}") from exc
    return Bundle(space, fld)


@dataclass
class LedgerEvent:
    seq: int
    key: Key
    action: str  # "load", "unload" or "create"
    tag: str = ""


@dataclass
class ResidencyLedger:
    resident: set = field(default_factory=set)
    peak_key: int = 0
    peak_global: int = 0
    events: list = field(default_factory=list)

    @property
    def key_count(self) -> int:
        return sum(1 for k in self.resident if k != "global")

    def _log(self, key: Key, action: str, tag: str) -> None:
        self.events.append(LedgerEvent(len(self.events), key, action, tag))

    def enter(self, key: Key, action: str = "load", tag: str = "") -> None:
        if key in self.resident:
            raise LedgerViolation(f"{key!r} is already resident")
        self.resident.add(key)
        self._log(key, action, tag)
        self.peak_key = max(self.peak_key, self.key_count)
        self.peak_global = max(self.peak_global, int("global" in self.resident))

    def leave(self, key: Key, tag: str = "") -> None:
        if key not in self.resident:
            raise LedgerViolation(f"unload of non-resident {key!r}")
        self.resident.discard(key)
        self._log(key, "unload", tag)


@dataclass
class ResidencyReport:
    resident: set
    peak_key: int
    peak_global: int
    events: list


class AnchorStore:
    """Directory of bundles, ``gca.morl`` and ``kfa_{n:04}.morl``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.ledger = ResidencyLedger()
        self._bundles: dict = {}

    @staticmethod
    def filename(key: Key) -> str:
        return "gca.morl" if key == "global" else f"kfa_{int(key):04d}.morl"

    def path(self, key: Key) -> Path:
        return self.root / self.filename(key)

    def exists(self, key: Key) -> bool:
        return self.path(key).is_file()

    def save(self, key: Key, space: AnchorSpace, fld: Optional[DeformationField] = None) -> Path:
        data = encode_bundle(space, fld)
        target = self.path(key)
        tmp = target.with_suffix(".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)
        return target

    def load(self, key: Key, tag: str = "") -> Bundle:
        target = self.path(key)
        if not target.is_file():
            raise NotFound(f"no record for {key!r} at {target}")
        bundle = decode_bundle(target.read_bytes())
        self.ledger.enter(key, "load", tag)
        self._bundles[key] = bundle
        return bundle

    def create(self, key: Key, bundle: Bundle, tag: str = "") -> Bundle:
        """Register a bundle built in memory (e.g. a freshly derived space)."""
        self.ledger.enter(key, "create", tag)
        self._bundles[key] = bundle
        return bundle

    def get(self, key: Key) -> Bundle:
        if key not in self._bundles:
            raise LedgerViolation(f"{key!r} is not resident")
        return self._bundles[key]

    def unload(self, key: Key, tag: str = "") -> None:
        self.ledger.leave(key, tag)
        del self._bundles[key]

    def unload_all(self, tag: str = "") -> None:
        for key in sorted(self.ledger.resident, key=str):
            self.unload(key, tag)

    def residency_report(self) -> ResidencyReport:
        led = self.ledger
        return ResidencyReport(set(led.resident), led.peak_key, led.peak_global, list(led.events))
