"""WAV ingestion and the consumer's frame arithmetic.

The downstream trainer frames 16 kHz audio through a 7-layer strided conv
stack; `expected_frames` reimplements that arithmetic so the exporter can
reject a teacher whose feature rate disagrees before writing anything.
"""

from __future__ import annotations

import wave

import numpy as np

from .errors import DataError

# conv geometry of the consumer's frontend (and of the wav2vec2 family)
FRONTEND_KERNELS = (10, 3, 3, 3, 3, 2, 2)
FRONTEND_STRIDES = (5, 2, 2, 2, 2, 2, 2)

SAMPLE_RATE = 16000


def expected_frames(n_samples: int) -> int:
    """Frames the consumer derives from n_samples; 0 if the clip is too short."""
    t = int(n_samples)
    for k, s in zip(FRONTEND_KERNELS, FRONTEND_STRIDES):
        if t < k:
            return 0
        t = (t - k) // s + 1
    return t


def read_wav_mono16k(path, allow_any_rate: bool = False) -> np.ndarray:
    """Load 16-bit PCM mono WAV as float32 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
            rate = fh.getframerate()
            if rate != SAMPLE_RATE and not allow_any_rate:
                raise DataError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32768.0)
