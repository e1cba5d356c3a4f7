"""Single-file tensor archive.

Layout:

    bytes 0..8    magic b"STARCH01"
    bytes 8..16   little-endian uint64 header length in bytes
    bytes 16..    UTF-8 JSON header
    ...           zero padding up to the first 64-byte boundary
    ...           contiguous little-endian float32 tensor payload

The header is a JSON object with three keys: "meta" (arbitrary JSON metadata,
e.g. model config and pruning provenance), "tensors" (list of records with
name, shape, dtype, offset, length), and integrity digests.  Tensor offsets
are absolute file offsets and 64-byte aligned.  Serialization is canonical
(sorted keys, no whitespace), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ArchiveError

MAGIC = b"STARCH01"
ALIGN = 64
_HEADER_FIXED = len(MAGIC) + 8  # magic + length field


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _header_digest(header: dict) -> str:
    probe = dict(header)
    probe["header_sha256"] = ""
    return hashlib.sha256(_canonical(probe)).hexdigest()


def save_tensors(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors plus JSON metadata to `path`."""
    if not tensors:
        raise ArchiveError("archive requires at least one tensor")
    records = []
    blobs = []
    # lay out payload first so offsets can go into the header; the header
    # length feeds back into the offsets, so iterate until stable
    prepared = []
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"tensor {name!r} contains non-finite values")
        prepared.append((name, arr))

    def build_header(payload_start: int) -> tuple[dict, int]:
        recs = []
        off = payload_start
        for name, arr in prepared:
            off = (off + ALIGN - 1) // ALIGN * ALIGN
            length = arr.size * 4
            recs.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "f32",
                    "offset": off,
                    "length": length,
                }
            )
            off += length
        header = {"meta": meta, "tensors": recs}
        return header, off

    # fixpoint: header size depends on offsets, offsets on header size.
    # digests are fixed-width hex so a zero placeholder has the final length.
    payload_start = _HEADER_FIXED
    for _ in range(8):
        header, _ = build_header(payload_start)
        header["payload_sha256"] = "0" * 64
        header["header_sha256"] = "0" * 64
        hlen = len(_canonical(header))
        new_start = _HEADER_FIXED + hlen
        if new_start == payload_start:
            break
        payload_start = new_start
    header, end = build_header(payload_start)

    payload = bytearray(end - payload_start)
    base = payload_start
    for rec, (name, arr) in zip(header["tensors"], prepared):
        lo = rec["offset"] - base
        payload[lo : lo + rec["length"]] = arr.astype("<f4").tobytes()
    header["payload_sha256"] = hashlib.sha256(bytes(payload)).hexdigest()
    header["header_sha256"] = _header_digest(header)
    blob = _canonical(header)
    if len(blob) != payload_start - _HEADER_FIXED:  # pragma: no cover
        raise ArchiveError("internal error: header size not stable")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(bytes(payload))


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an archive back as (meta, tensors).  Strictly validated."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_FIXED:
        raise ArchiveError("file shorter than fixed header", offset=0)
    if raw[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"bad magic {raw[:len(MAGIC)]!r}", offset=0)
    hlen = int.from_bytes(raw[len(MAGIC) : _HEADER_FIXED], "little")
    if _HEADER_FIXED + hlen > len(raw):
        raise ArchiveError(f"declared header length {hlen} exceeds file", offset=len(MAGIC))
    blob = raw[_HEADER_FIXED : _HEADER_FIXED + hlen]
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"header is not valid JSON: {exc}", offset=_HEADER_FIXED) from exc
    if not isinstance(header, dict) or set(header) != {
        "meta",
        "tensors",
        "payload_sha256",
        "header_sha256",
    }:
        raise ArchiveError("header has wrong top-level keys", offset=_HEADER_FIXED)
    if _header_digest(header) != header["header_sha256"]:
        raise ArchiveError("header checksum mismatch", offset=_HEADER_FIXED)
    payload_start = _HEADER_FIXED + hlen
    payload = raw[payload_start:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ArchiveError("payload checksum mismatch", offset=payload_start)

    tensors: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        name = rec.get("name")
        off = rec.get("offset")
        length = rec.get("length")
        shape = tuple(rec.get("shape", ()))
        if rec.get("dtype") != "f32":
            raise ArchiveError(f"tensor {name!r} has unsupported dtype", offset=off)
        if off is None or off % ALIGN != 0:
            raise ArchiveError(f"tensor {name!r} offset not {ALIGN}-byte aligned", offset=off)
        n_elems = 1
        for s in shape:
            n_elems *= int(s)
        if length != n_elems * 4:
            raise ArchiveError(f"tensor {name!r} length/shape mismatch", offset=off)
        if off + length > len(raw):
            raise ArchiveError(f"tensor {name!r} extends past end of file", offset=off)
        if name in tensors:
            raise ArchiveError(f"duplicate tensor name {name!r}", offset=off)
        flat = np.frombuffer(raw, dtype="<f4", count=n_elems, offset=off)
        arr = flat.reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"tensor {name!r} contains non-finite values", offset=off)
        tensors[name] = arr
    return header["meta"], tensors
