"""File formats: 16-bit PCM WAV, face-track image directories and JSON-lines manifests."""

from __future__ import annotations

import json
import os
import wave
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Union

import numpy as np
from PIL import Image

from .signal import SAMPLE_RATE, VIDEO_FPS

PathLike = Union[str, os.PathLike]

FACE_INDEX = "index.txt"
CORPUS_ROOT_ENV = "LIPSYNC_TSE_CORPUS_ROOT"


def read_wav(path: PathLike, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono 16-bit WAV as float32 in [-1, 1]."""
    with wave.open(str(path), "rb") as f:
        rate = f.getframerate()
        channels = f.getnchannels()
        width = f.getsampwidth()
        raw = f.readframes(f.getnframes())
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {channels} channels")
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != {expected_rate}")
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path: PathLike, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())


def write_face_track(directory: PathLike, frames: np.ndarray, fps: int = VIDEO_FPS) -> None:
    """Store a (frames, H, W) uint8 track as numbered PNGs plus an index file."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError(f"face track must be (frames, height, width), got {frames.shape}")
    if frames.dtype != np.uint8:
        frames = np.clip(np.round(frames), 0, 255).astype(np.uint8)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(frames):
        name = f"{i:06d}.png"
        Image.fromarray(frame).save(d / name)
        names.append(name)
    h, w = frames.shape[1:]
    header = f"# fps={fps} height={h} width={w} frames={len(frames)}"
    (d / FACE_INDEX).write_text("\n".join([header, *names]) + "\n", encoding="utf-8")


def read_face_track(directory: PathLike) -> np.ndarray:
    d = Path(directory)
    index = d / FACE_INDEX
    if not index.exists():
        raise FileNotFoundError(f"{d}: missing face-track index {FACE_INDEX}")
    names = [
        line.strip()
        for line in index.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    if not names:
        raise ValueError(f"{d}: empty face track")
    return np.stack([np.asarray(Image.open(d / n).convert("L")) for n in names])


def dumps_record(record: Mapping[str, Any]) -> str:
    # insertion order is the field order; callers build records in a fixed order
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: PathLike, records: Iterable[Mapping[str, Any]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(dumps_record(rec) + "\n")


def iter_jsonl(path: PathLike) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record") from exc


def read_jsonl(path: PathLike) -> list[dict]:
    return list(iter_jsonl(path))


def corpus_root(default: Optional[PathLike]) -> Path:
    """Corpus root, overridable through the ``LIPSYNC_TSE_CORPUS_ROOT`` environment variable."""
    env = os.environ.get(CORPUS_ROOT_ENV)
    if env:
        return Path(env)
    if default is None:
        raise ValueError(f"no corpus root given and {CORPUS_ROOT_ENV} is unset")
    return Path(default)
