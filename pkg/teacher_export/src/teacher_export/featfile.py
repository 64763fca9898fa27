"""Independent writer and validator for the student trainer's feature files.

The format (documented in the consumer's README) is: 5-byte magic "SVFT1",
little-endian u32 header length, UTF-8 key=value header lines, then a raw
little-endian float32 payload of n_utts consecutive [frames, teacher_dim]
C-order blocks, one per utt= header line, in header order. The header
records the zlib CRC32 of the payload.

This module deliberately does not import the consumer package; agreement
between the two implementations is established by the test suite, not by
sharing code.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ChecksumError, ConfigError, DataError, TruncatedFileError

MAGIC = b"SVFT1"

_ID_FORBIDDEN = set(" \t\r\n=")


@dataclass(frozen=True)
class FeatureHeader:
    n_utts: int
    frames: int
    teacher_dim: int
    teacher_name: str
    layer: str  # "final" or a decimal layer index
    ids: tuple


def _check_utt_id(utt_id: str):
    if not utt_id or any(ch in _ID_FORBIDDEN for ch in utt_id) or not utt_id.isascii():
        raise DataError(
            f"utterance id {utt_id!r} must be non-empty ASCII without whitespace or '='")


def write_feature_file(path, items, teacher_name: str, layer="final"):
    """Write (utt_id, [frames, dim] array) pairs as one feature file.

    Every array must share one shape and be finite; ids must be unique.
    """
    layer = str(layer)
    if layer != "final" and not layer.isdigit():
        raise ConfigError(f"layer must be 'final' or a nonnegative integer, got {layer!r}")

    ids = []
    blocks = []
    shape = None
    for utt_id, arr in items:
        _check_utt_id(utt_id)
        if utt_id in ids:
            raise DataError(f"duplicate utterance id {utt_id!r}")
        a = np.asarray(arr)
        if a.ndim != 2:
            raise DataError(f"features for {utt_id!r} must be [frames, dim], got shape {a.shape}")
        if shape is None:
            shape = a.shape
        elif a.shape != shape:
            raise DataError(f"features for {utt_id!r} have shape {a.shape}, expected {shape}")
        if not np.isfinite(a).all():
            raise DataError(f"features for {utt_id!r} contain non-finite values")
        ids.append(utt_id)
        blocks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    frames, dim = shape if shape is not None else (0, 0)
    payload = b"".join(blocks)
    lines = [
        f"n_utts={len(ids)}",
        f"frames={frames}",
        f"teacher_dim={dim}",
        "dtype=real32",
        f"teacher_name={teacher_name}",
        f"layer={layer}",
        f"payload_crc32={zlib.crc32(payload) & 0xFFFFFFFF}",
    ]
    lines.extend(f"utt={utt_id}" for utt_id in ids)
    header = "".join(line + "\n" for line in lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def _header_pairs(path):
    """Envelope checks, then the header as ordered (key, value) pairs + payload."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4:
        raise TruncatedFileError(f"{path}: file too short for magic and header length")
    if data[:len(MAGIC)] != MAGIC:
        raise DataError(
            f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r} "
            f"(unknown format or version)")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    body = len(MAGIC) + 4
    if len(data) < body + hlen:
        raise TruncatedFileError(f"{path}: header claims {hlen} bytes, file ends early")
    try:
        text = data[body:body + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: header is not valid UTF-8") from exc
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: header line {lineno} has no '=': {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return pairs, data[body + hlen:]


def _scalar(pairs, key, path) -> str:
    values = [v for k, v in pairs if k == key]
    if not values:
        raise DataError(f"{path}: header is missing required key {key!r}")
    if len(values) > 1:
        raise DataError(f"{path}: duplicate header key {key!r}")
    return values[0]


def validate_feature_file(path) -> FeatureHeader:
    """Full header/size/CRC validation; returns the parsed header on success."""
    pairs, payload = _header_pairs(path)
    try:
        n_utts = int(_scalar(pairs, "n_utts", path))
        frames = int(_scalar(pairs, "frames", path))
        dim = int(_scalar(pairs, "teacher_dim", path))
    except ValueError as exc:
        raise DataError(f"{path}: non-integer size field in header ({exc})")
    dtype = _scalar(pairs, "dtype", path)
    if dtype != "real32":
        raise DataError(f"{path}: unsupported dtype {dtype!r}")
    layer = _scalar(pairs, "layer", path)
    if layer != "final" and not layer.isdigit():
        raise DataError(f"{path}: layer must be 'final' or an index, got {layer!r}")
    teacher_name = _scalar(pairs, "teacher_name", path)
    if n_utts < 0 or frames < 0 or dim < 0:
        raise DataError(f"{path}: negative size in header")

    ids = [v for k, v in pairs if k == "utt"]
    if len(ids) != n_utts:
        raise DataError(f"{path}: header lists {len(ids)} utterance ids for n_utts={n_utts}")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate utterance ids in header")

    expected = n_utts * frames * dim * 4
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header needs {expected}")
    if len(payload) > expected:
        raise DataError(
            f"{path}: payload has {len(payload)} bytes, {expected} expected; trailing garbage")
    recorded = _scalar(pairs, "payload_crc32", path)
    try:
        recorded = int(recorded)
    except ValueError:
        raise DataError(f"{path}: payload_crc32 is not an integer: {recorded!r}")
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != recorded:
        raise ChecksumError(
            f"{path}: payload CRC32 {actual} does not match recorded {recorded}")

    return FeatureHeader(n_utts, frames, dim, teacher_name, layer, tuple(ids))


def read_feature_file(path):
    """Validate, then decode -> (FeatureHeader, {utt_id: [frames, dim] float32})."""
    header = validate_feature_file(path)
    with open(path, "rb") as fh:
        data = fh.read()
    payload = data[len(MAGIC) + 4 + struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])[0]:]
    block = header.frames * header.teacher_dim * 4
    features = {}
    for i, utt_id in enumerate(header.ids):
        flat = np.frombuffer(payload[i * block:(i + 1) * block], dtype="<f4")
        features[utt_id] = flat.reshape(header.frames, header.teacher_dim).copy()
    return header, features
