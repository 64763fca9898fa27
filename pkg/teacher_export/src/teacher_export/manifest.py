"""Export manifests: flat key=value text naming a teacher, a layer
selection, an output path, and the utterances to run through it.

    teacher=/path/or/hub-id        required
    teacher_name=wavlm-large       optional label stored in output headers
    layer=final                    optional; or comma-separated indices: 0,6,12
    out=features.feat              required
    utt=<id> <wav path>            zero or more, exported in order

Relative paths (teacher, out, wav) resolve against the manifest's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError

_SCALAR_KEYS = ("teacher", "teacher_name", "layer", "out")


@dataclass(frozen=True)
class ExportManifest:
    teacher: str
    teacher_name: str
    layers: tuple            # ("final",) or a tuple of int indices
    out: str
    utterances: tuple        # ((utt_id, wav_path), ...)


def _parse_layers(value: str, where: str):
    value = value.strip()
    if value == "final":
        return ("final",)
    try:
        layers = tuple(int(part.strip()) for part in value.split(","))
    except ValueError:
        raise ConfigError(f"{where}: layer must be 'final' or comma-separated indices, "
                          f"got {value!r}")
    if not layers:
        raise ConfigError(f"{where}: empty layer list")
    if any(i < 0 for i in layers):
        raise ConfigError(f"{where}: negative layer index in {value!r}")
    if len(set(layers)) != len(layers):
        raise ConfigError(f"{where}: duplicate layer index in {value!r}")
    return layers


def parse_manifest(text: str, base_dir=".", path: str = "<manifest>") -> ExportManifest:
    scalars = {}
    utterances = []
    seen_ids = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key == "utt":
            parts = value.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: utt line needs '<id> <wav path>'")
            utt_id, wav = parts
            if utt_id in seen_ids:
                raise ConfigError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
            seen_ids.add(utt_id)
            utterances.append((utt_id, os.path.join(base_dir, wav)))
        elif key in _SCALAR_KEYS:
            if key in scalars:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            scalars[key] = (value, lineno)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown manifest key {key!r}")

    for key in ("teacher", "out"):
        if key not in scalars:
            raise ConfigError(f"{path}: manifest is missing required key {key!r}")
    teacher = scalars["teacher"][0]
    # hub ids pass through; anything that exists locally becomes a real path
    teacher_path = os.path.join(base_dir, teacher)
    if os.path.exists(teacher_path):
        teacher = teacher_path
    if "layer" in scalars:
        value, lineno = scalars["layer"]
        layers = _parse_layers(value, f"{path}:{lineno}")
    else:
        layers = ("final",)
    name = scalars.get("teacher_name", (os.path.basename(teacher.rstrip("/")), 0))[0]
    return ExportManifest(teacher=teacher, teacher_name=name, layers=layers,
                          out=os.path.join(base_dir, scalars["out"][0]),
                          utterances=tuple(utterances))


def read_manifest(path) -> ExportManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_manifest(fh.read(), os.path.dirname(os.path.abspath(path)), str(path))
