"""Bit-exact file formats: WAV ingestion, teacher feature files, model
checkpoints, and flat run-config text.

Both binary formats share one layout: a 5-byte magic (which doubles as the
version), a little-endian u32 header length, a UTF-8 key=value header, then a
raw little-endian real32 payload whose CRC32 is recorded in the header.
Everything is endian-pinned; readers reject unknown magics, truncation, and
checksum mismatches with typed errors.
"""

from __future__ import annotations

import dataclasses
import struct
import types
import typing
import wave
import zlib
from dataclasses import dataclass

import numpy as np

from .distill import DistillConfig
from .encoder import EncoderConfig, SvMixerModel
from .errors import ChecksumError, ConfigError, DataError, TruncatedFileError
from .trainer import TrainConfig

FEATURE_MAGIC = b"SVFT1"
CHECKPOINT_MAGIC = b"SVMX1"


# ---------------------------------------------------------------------------
# waveforms

def read_wav(path, allow_any_rate: bool = False):
    """PCM16 mono WAV -> (float32 samples scaled by 1/32768, sample_rate)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
                raise DataError(f"{path}: expected uncompressed 16-bit PCM")
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    except EOFError as exc:
        raise TruncatedFileError(f"{path}: WAV data ends early") from exc
    if len(raw) != 2 * n:
        raise TruncatedFileError(f"{path}: expected {2 * n} sample bytes, got {len(raw)}")
    if not allow_any_rate and rate != 16000:
        raise DataError(f"{path}: sample rate {rate} is not 16000 (pass allow_any_rate to accept)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32768.0)
    return samples, rate


def write_wav(path, waveform, sample_rate: int = 16000):
    """Float samples in [-1, 1] -> PCM16 mono WAV; values read back from
    read_wav round-trip to identical int16 words."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"waveform must be 1-d, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("waveform contains non-finite samples")
    q = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(q.tobytes())


# ---------------------------------------------------------------------------
# shared binary envelope

def _write_block(path, magic: bytes, header_lines: list[str], payload: bytes):
    header = "".join(line + "\n" for line in header_lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def _read_block(path, magic: bytes):
    """Returns (ordered header pairs, payload bytes) after envelope checks."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(magic) + 4:
        raise TruncatedFileError(f"{path}: file too short for magic and header length")
    if data[:len(magic)] != magic:
        raise DataError(
            f"{path}: bad magic {data[:len(magic)]!r}, expected {magic!r} "
            f"(unknown format or version)")
    (hlen,) = struct.unpack("<I", data[len(magic):len(magic) + 4])
    body = len(magic) + 4
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


def _unique(pairs, path):
    seen = {}
    for key, value in pairs:
        if key == "utt" or key.startswith("param"):
            continue
        if key in seen:
            raise DataError(f"{path}: duplicate header key {key!r}")
        seen[key] = value
    return seen


def _require(header: dict, key: str, path) -> str:
    if key not in header:
        raise DataError(f"{path}: header is missing required key {key!r}")
    return header[key]


def _check_crc(payload: bytes, recorded: str, path):
    try:
        expected = int(recorded)
    except ValueError:
        raise DataError(f"{path}: payload_crc32 is not an integer: {recorded!r}")
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != expected:
        raise ChecksumError(
            f"{path}: payload CRC32 {actual} does not match recorded {expected}")


# ---------------------------------------------------------------------------
# teacher feature files

@dataclass(frozen=True)
class FeatureMeta:
    n_utts: int
    frames: int
    teacher_dim: int
    teacher_name: str
    layer: str  # "final" or a decimal layer index


_ID_FORBIDDEN = set(" \t\r\n=")


def _check_utt_id(utt_id: str):
    if not utt_id or any(ch in _ID_FORBIDDEN for ch in utt_id) or not utt_id.isascii():
        raise DataError(
            f"utterance id {utt_id!r} must be non-empty ASCII without whitespace or '='")


def write_features(path, features, teacher_name: str, layer="final"):
    """Write utterance features as one real32 little-endian block per id.

    `features` is a dict or list of (id, [T, H_t] array) pairs; every array
    must share one shape. Payload length is exactly n_utts*T*H_t*4 bytes.
    """
    items = list(features.items()) if isinstance(features, dict) else list(features)
    layer = str(layer)
    if layer != "final" and not layer.isdigit():
        raise ConfigError(f"layer must be 'final' or a nonnegative integer, got {layer!r}")

    arrays = []
    shape = None
    seen = set()
    for utt_id, arr in items:
        _check_utt_id(utt_id)
        if utt_id in seen:
            raise DataError(f"duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        a = np.asarray(arr)
        if a.ndim != 2:
            raise DataError(f"features for {utt_id!r} must be [frames, dim], got shape {a.shape}")
        if shape is None:
            shape = a.shape
        elif a.shape != shape:
            raise DataError(
                f"features for {utt_id!r} have shape {a.shape}, expected {shape}")
        if not np.isfinite(a).all():
            raise DataError(f"features for {utt_id!r} contain non-finite values")
        arrays.append(np.ascontiguousarray(a, dtype="<f4"))

    frames, dim = shape if shape is not None else (0, 0)
    payload = b"".join(a.tobytes() for a in arrays)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    lines = [
        f"n_utts={len(arrays)}",
        f"frames={frames}",
        f"teacher_dim={dim}",
        "dtype=real32",
        f"teacher_name={teacher_name}",
        f"layer={layer}",
        f"payload_crc32={crc}",
    ]
    lines.extend(f"utt={utt_id}" for utt_id, _ in items)
    _write_block(path, FEATURE_MAGIC, lines, payload)


def read_features(path, expect_frames: int | None = None, expect_dim: int | None = None):
    """Read a feature file -> (FeatureMeta, {utt_id: [T, H_t] float32 array})."""
    pairs, payload = _read_block(path, FEATURE_MAGIC)
    header = _unique(pairs, path)
    try:
        n_utts = int(_require(header, "n_utts", path))
        frames = int(_require(header, "frames", path))
        dim = int(_require(header, "teacher_dim", path))
    except ValueError as exc:
        raise DataError(f"{path}: non-integer size field in header ({exc})")
    if _require(header, "dtype", path) != "real32":
        raise DataError(f"{path}: unsupported dtype {header['dtype']!r}")
    layer = _require(header, "layer", path)
    if layer != "final" and not layer.isdigit():
        raise DataError(f"{path}: layer must be 'final' or an index, got {layer!r}")
    meta = FeatureMeta(n_utts, frames, dim, _require(header, "teacher_name", path), layer)

    if n_utts < 0 or frames < 0 or dim < 0:
        raise DataError(f"{path}: negative size in header")
    ids = [value for key, value in pairs if key == "utt"]
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
    _check_crc(payload, _require(header, "payload_crc32", path), path)

    if expect_frames is not None and frames != expect_frames:
        raise DataError(f"{path}: file has {frames} frames per utterance, expected {expect_frames}")
    if expect_dim is not None and dim != expect_dim:
        raise DataError(f"{path}: file has teacher_dim={dim}, expected {expect_dim}")

    block = frames * dim * 4
    features = {}
    for i, utt_id in enumerate(ids):
        flat = np.frombuffer(payload[i * block:(i + 1) * block], dtype="<f4")
        features[utt_id] = flat.reshape(frames, dim).copy()
    return meta, features


# ---------------------------------------------------------------------------
# config value serialization (shared by checkpoints and run configs)

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text: str, hint):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text == "none":
            return None
        return _parse_value(text, args[0])
    if hint is bool:
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if hint is tuple or origin is tuple:
        if not text:
            return ()
        return tuple(int(v) for v in text.split(","))
    raise ValueError(f"unsupported config field type {hint!r}")


def _field_hints(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: SvMixerModel, path):
    """Serialize config + every named parameter as contiguous real32 blocks."""
    lines = [f"config.{name}={_format_value(getattr(model.config, name))}"
             for name in _field_hints(EncoderConfig)]
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"param={name}|{dims}|{offset}")
        chunks.append(arr.tobytes())
        offset += len(chunks[-1])
    payload = b"".join(chunks)
    lines.append(f"payload_bytes={len(payload)}")
    lines.append(f"payload_crc32={zlib.crc32(payload) & 0xFFFFFFFF}")
    _write_block(path, CHECKPOINT_MAGIC, lines, payload)


def _parse_checkpoint_header(pairs, path):
    config_kwargs = {}
    manifest = []
    hints = _field_hints(EncoderConfig)
    for key, value in pairs:
        if key.startswith("config."):
            name = key[len("config."):]
            if name not in hints:
                raise DataError(f"{path}: unknown config field {name!r} in header")
            try:
                config_kwargs[name] = _parse_value(value, hints[name])
            except ValueError as exc:
                raise DataError(f"{path}: bad value for config.{name}: {exc}")
        elif key == "param":
            parts = value.split("|")
            if len(parts) != 3:
                raise DataError(f"{path}: malformed param line {value!r}")
            name, dims, offset = parts
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            manifest.append((name, shape, int(offset)))
    missing = set(hints) - set(config_kwargs)
    if missing:
        raise DataError(f"{path}: header is missing config fields {sorted(missing)}")
    try:
        config = EncoderConfig(**config_kwargs)
    except ConfigError as exc:
        raise DataError(f"{path}: checkpoint config is invalid: {exc}")
    return config, manifest


def load_checkpoint(path, model: SvMixerModel):
    """Load parameters into `model`; the stored config must match exactly."""
    pairs, payload = _read_block(path, CHECKPOINT_MAGIC)
    header = _unique(pairs, path)
    config, manifest = _parse_checkpoint_header(pairs, path)

    if config != model.config:
        diffs = [name for name in _field_hints(EncoderConfig)
                 if getattr(config, name) != getattr(model.config, name)]
        raise ConfigError(
            f"{path}: checkpoint config does not match the target model; "
            f"differing fields: {', '.join(diffs)}")

    expected_bytes = int(_require(header, "payload_bytes", path))
    if len(payload) < expected_bytes:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header claims {expected_bytes}")
    if len(payload) > expected_bytes:
        raise DataError(f"{path}: {len(payload) - expected_bytes} trailing payload bytes")
    _check_crc(payload, _require(header, "payload_crc32", path), path)

    stored = {name: (shape, offset) for name, shape, offset in manifest}
    for name, p in model.named_parameters():
        if name not in stored:
            raise DataError(f"{path}: checkpoint is missing parameter {name!r}")
        shape, offset = stored.pop(name)
        if shape != p.data.shape:
            raise DataError(
                f"{path}: parameter {name!r} has shape {shape}, model expects {p.data.shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(payload):
            raise TruncatedFileError(f"{path}: parameter {name!r} extends past payload end")
        flat = np.frombuffer(payload[offset:end], dtype="<f4")
        p.data = flat.reshape(shape).astype(model.dtype)
    if stored:
        raise DataError(f"{path}: checkpoint has extra parameters {sorted(stored)}")
    return model


def load_model(path, dtype=np.float32) -> SvMixerModel:
    """Construct a model from a checkpoint's embedded config and load it."""
    pairs, _ = _read_block(path, CHECKPOINT_MAGIC)
    config, _ = _parse_checkpoint_header(pairs, path)
    model = SvMixerModel(config, seed=0, dtype=dtype)
    return load_checkpoint(path, model)


# ---------------------------------------------------------------------------
# run configs

@dataclass
class RunConfig:
    encoder: EncoderConfig
    train: TrainConfig
    distill: DistillConfig
    seed: int = 0

    def __post_init__(self):
        # one seed governs the run; the training config mirrors it
        self.train.seed = self.seed


def parse_run_config(text: str, path: str = "<config>") -> RunConfig:
    """Flat key=value lines routed to the config dataclass owning each key.

    `seed` is shared: it seeds model construction and is mirrored into the
    training config. Unknown keys are rejected.
    """
    enc_hints = _field_hints(EncoderConfig)
    train_hints = _field_hints(TrainConfig)
    distill_hints = _field_hints(DistillConfig)
    enc_kwargs, train_kwargs, distill_kwargs = {}, {}, {}
    seed = 0
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            if key == "seed":
                seed = int(value)
            elif key in enc_hints:
                enc_kwargs[key] = _parse_value(value, enc_hints[key])
            elif key in train_hints:
                train_kwargs[key] = _parse_value(value, train_hints[key])
            elif key in distill_hints:
                distill_kwargs[key] = _parse_value(value, distill_hints[key])
            else:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    train_kwargs["seed"] = seed
    return RunConfig(EncoderConfig(**enc_kwargs), TrainConfig(**train_kwargs),
                     DistillConfig(**distill_kwargs), seed)


def read_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read(), str(path))


def format_run_config(run: RunConfig) -> str:
    """Deterministic text echo of a run config; parse(format(x)) == x."""
    lines = [f"seed={run.seed}"]
    for section, cls in ((run.encoder, EncoderConfig), (run.train, TrainConfig),
                         (run.distill, DistillConfig)):
        for name in _field_hints(cls):
            if cls is TrainConfig and name == "seed":
                continue  # mirrored from the top-level seed
            lines.append(f"{name}={_format_value(getattr(section, name))}")
    return "".join(line + "\n" for line in lines)


def write_run_config(path, run: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run_config(run))
