"""Single on-disk container for checkpoints, score files and masks.

Layout: an 8-byte magic, one format-version byte, a little-endian u32 header
length, a UTF-8 text header, then raw payload blocks.  The header carries
`kind`, `meta.*` key=value pairs, and one manifest line per block:

    block=<name>|<codec>|<shape>|<offset>|<nbytes>

Codec `f8` is raw little-endian float64, row-major.  Codec `b1` is a binary
mask bit-packed row by row (most significant bit = lowest column index, rows
padded to a whole byte).  Offsets are relative to the payload start.  Writers
emit meta keys sorted, so identical content yields identical bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ValidationError

MAGIC = b"DUALPRNC"
FORMAT_VERSION = 1


@dataclass
class Container:
    kind: str
    meta: dict[str, str]
    blocks: dict[str, np.ndarray]  # insertion order == manifest order


def _encode_block(arr: np.ndarray, codec: str) -> bytes:
    if codec == "f8":
        return np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if codec == "b1":
        if arr.ndim != 2:
            raise ValidationError(f"bit-packed blocks must be 2-D, got shape {arr.shape}")
        return np.packbits(arr.astype(np.uint8), axis=1).tobytes()
    raise ValidationError(f"unknown block codec {codec!r}")


def _decode_block(raw: bytes, codec: str, shape: tuple[int, ...]) -> np.ndarray:
    if codec == "f8":
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if codec == "b1":
        rows, cols = shape
        packed = np.frombuffer(raw, dtype=np.uint8).reshape(rows, -1)
        return np.unpackbits(packed, axis=1)[:, :cols].astype(np.uint8)
    raise ArtifactError(f"unknown block codec {codec!r}")


def _block_nbytes(arr: np.ndarray, codec: str) -> int:
    if codec == "f8":
        return arr.size * 8
    return arr.shape[0] * ((arr.shape[1] + 7) // 8)


def write_container(path, kind: str, meta: dict[str, str],
                    blocks: list[tuple[str, np.ndarray]],
                    bitpack: set[str] | frozenset[str] = frozenset()) -> None:
    """Write `blocks` (name, array) in order; names listed in `bitpack` use codec b1."""
    lines = [f"kind={kind}"]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise ValidationError(f"invalid meta entry {key!r}")
        lines.append(f"meta.{key}={value}")

    payload = bytearray()
    offset = 0
    for name, arr in blocks:
        if "|" in name or "\n" in name:
            raise ValidationError(f"invalid block name {name!r}")
        codec = "b1" if name in bitpack else "f8"
        raw = _encode_block(arr, codec)
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"block={name}|{codec}|{shape}|{offset}|{len(raw)}")
        payload += raw
        offset += len(raw)

    header = ("\n".join(lines) + "\n").encode("utf-8")
    out = bytearray()
    out += MAGIC
    out.append(FORMAT_VERSION)
    out += len(header).to_bytes(4, "little")
    out += header
    out += payload
    Path(path).write_bytes(bytes(out))


def read_container(path, expect_kind: str | None = None) -> Container:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from None
    if len(raw) < len(MAGIC) + 5 or raw[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{path}: bad magic, not a container file")
    version = raw[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {version}")
    header_len = int.from_bytes(raw[len(MAGIC) + 1 : len(MAGIC) + 5], "little")
    header_start = len(MAGIC) + 5
    if header_start + header_len > len(raw):
        raise ArtifactError(f"{path}: truncated header")
    try:
        header = raw[header_start : header_start + header_len].decode("utf-8")
    except UnicodeDecodeError:
        raise ArtifactError(f"{path}: header is not valid UTF-8") from None
    payload = raw[header_start + header_len :]

    kind = None
    meta: dict[str, str] = {}
    blocks: dict[str, np.ndarray] = {}
    expected_offset = 0
    for line in header.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "kind":
            kind = value
        elif key.startswith("meta."):
            meta[key[5:]] = value
        elif key == "block":
            parts = value.split("|")
            if len(parts) != 5:
                raise ArtifactError(f"{path}: malformed manifest line {line!r}")
            name, codec, shape_s, offset_s, nbytes_s = parts
            try:
                shape = tuple(int(n) for n in shape_s.split(",")) if shape_s else ()
                offset, nbytes = int(offset_s), int(nbytes_s)
            except ValueError:
                raise ArtifactError(f"{path}: malformed manifest line {line!r}") from None
            if offset != expected_offset or offset + nbytes > len(payload):
                raise ArtifactError(f"{path}: block {name} offsets inconsistent with payload")
            expected_offset = offset + nbytes
            blocks[name] = _decode_block(payload[offset : offset + nbytes], codec, shape)
        else:
            raise ArtifactError(f"{path}: unknown header line {line!r}")
    if kind is None:
        raise ArtifactError(f"{path}: missing kind")
    if expected_offset != len(payload):
        raise ArtifactError(f"{path}: payload has {len(payload)} bytes, manifest covers {expected_offset}")
    if expect_kind is not None and kind != expect_kind:
        raise ArtifactError(f"{path}: expected kind {expect_kind!r}, found {kind!r}")
    return Container(kind=kind, meta=meta, blocks=blocks)


def file_fingerprint(path) -> str:
    """sha256 of the file bytes; artifacts link to each other through these."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
