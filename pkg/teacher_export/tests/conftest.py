"""Session fixtures: two tiny local teachers and a small WAV corpus."""

import os

import pytest

os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")
os.environ.setdefault("HF_HUB_OFFLINE", "1")

from teacher_fixtures import SAMPLE_RATE, build_teacher, make_clip, write_wav


@pytest.fixture(scope="session")
def teacher_dir(tmp_path_factory):
    return build_teacher(tmp_path_factory.mktemp("teacher"),
                         (5, 2, 2, 2, 2, 2, 2), seed=0)


@pytest.fixture(scope="session")
def mismatched_teacher_dir(tmp_path_factory):
    # final stride 1 doubles the frame rate vs the consumer's arithmetic
    return build_teacher(tmp_path_factory.mktemp("bad_teacher"),
                         (5, 2, 2, 2, 2, 2, 1), seed=1)


@pytest.fixture(scope="session")
def wav_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("wavs")
    for i in range(3):
        write_wav(d / f"utt{i}.wav", make_clip(seed=10 + i))
    write_wav(d / "short.wav", make_clip(seed=20, n_samples=300))
    write_wav(d / "one_second.wav", make_clip(seed=21, n_samples=SAMPLE_RATE))
    write_wav(d / "slow_rate.wav", make_clip(seed=22, n_samples=24000), sample_rate=8000)
    return d
