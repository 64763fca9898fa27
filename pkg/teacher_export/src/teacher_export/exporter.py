"""Run audio through a frozen pretrained speech model and write its hidden
states as feature files the student trainer can consume directly.

Layer selection follows the hidden-state convention of wav2vec2-style
models: index 0 is the conv frontend's projected output, index i the i-th
encoder layer, and "final" the last entry. One file is written per selected
layer; integer selections get ".layer<i>" inserted before the output path's
extension so a multi-layer export cannot collide.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .audio import expected_frames, read_wav_mono16k
from .errors import ConfigError, DataError, FrameCountError
from .featfile import write_feature_file
from .manifest import ExportManifest


@dataclass(frozen=True)
class ExportedFile:
    path: str
    layer: str
    n_utts: int
    frames: int
    teacher_dim: int


def load_teacher(name_or_path):
    """Resolve a model from a local path or hub id, frozen in inference mode."""
    from transformers import AutoModel

    try:
        model = AutoModel.from_pretrained(name_or_path)
    except (OSError, EnvironmentError, ValueError) as exc:
        raise DataError(f"cannot load teacher {name_or_path!r}: {exc}") from exc
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def teacher_states(model, waveform) -> list:
    """All hidden states for one clip -> list of [frames, dim] float32 arrays."""
    x = torch.from_numpy(np.ascontiguousarray(waveform, dtype=np.float32))
    with torch.inference_mode():
        out = model(x[None, :], output_hidden_states=True)
    return [np.ascontiguousarray(h[0].cpu().numpy(), dtype="<f4")
            for h in out.hidden_states]


def _layer_path(out, layer) -> str:
    if layer == "final":
        return out
    stem, ext = os.path.splitext(out)
    return f"{stem}.layer{layer}{ext}"


def export(man: ExportManifest, allow_any_rate: bool = False) -> list:
    """Export every manifest utterance; returns one ExportedFile per layer."""
    model = load_teacher(man.teacher)

    # states[j] holds (utt_id, array) pairs for selected layer index j
    collected = {layer: [] for layer in man.layers}
    for utt_id, wav_path in man.utterances:
        waveform = read_wav_mono16k(wav_path, allow_any_rate=allow_any_rate)
        want = expected_frames(len(waveform))
        if want == 0:
            raise DataError(
                f"{utt_id}: clip of {len(waveform)} samples is too short to produce frames")
        states = teacher_states(model, waveform)
        frames = states[-1].shape[0]
        if frames != want:
            raise FrameCountError(
                f"{utt_id}: teacher produced {frames} frames for {len(waveform)} samples, "
                f"consumer arithmetic needs {want}; teacher stride/kernel stack is "
                f"incompatible")
        for layer in man.layers:
            if layer == "final":
                arr = states[-1]
            else:
                if layer >= len(states):
                    raise ConfigError(
                        f"layer index {layer} out of range; teacher exposes "
                        f"{len(states)} hidden states (0..{len(states) - 1})")
                arr = states[layer]
            collected[layer].append((utt_id, arr))

    results = []
    for layer in man.layers:
        path = _layer_path(man.out, layer)
        items = collected[layer]
        write_feature_file(path, items, teacher_name=man.teacher_name, layer=layer)
        frames, dim = items[0][1].shape if items else (0, 0)
        results.append(ExportedFile(path, str(layer), len(items), frames, dim))
    return results
