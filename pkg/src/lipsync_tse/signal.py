"""Deterministic waveform primitives: SNR mixing, shifting, framing, overlap-add."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

SAMPLE_RATE = 16000
VIDEO_FPS = 25


def power(x: np.ndarray) -> float:
    """Mean power of a waveform, accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(power(signal) / power(noise))


def mix_at_snr(
    target: np.ndarray,
    interferers: Sequence[np.ndarray],
    snrs_db: Sequence[float],
    rates: Optional[Sequence[int]] = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Mix ``target`` with interferers scaled to the requested target-to-interferer SNRs.

    All signals are truncated to the shortest one before powers are measured.
    Returns the float32 mixture and the float32 scaled sources (target first).
    """
    if len(interferers) != len(snrs_db):
        raise ValueError(
            f"got {len(interferers)} interferers but {len(snrs_db)} SNR values"
        )
    if not interferers:
        raise ValueError("at least one interferer is required")
    if rates is not None:
        if len(rates) != len(interferers) + 1:
            raise ValueError("rates must list the target rate followed by each interferer rate")
        if len(set(int(r) for r in rates)) != 1:
            raise ValueError(f"sample rate mismatch: {list(rates)}")

    n = min(len(target), *(len(b) for b in interferers))
    if n < 1:
        raise ValueError("cannot mix empty waveforms")
    s = np.asarray(target, dtype=np.float64)[:n]
    p_target = float(np.mean(s * s))
    if p_target <= 0.0:
        raise ValueError("target has zero power")

    mixture = s.copy()
    sources = [s]
    for i, (b, snr) in enumerate(zip(interferers, snrs_db)):
        b = np.asarray(b, dtype=np.float64)[:n]
        p_b = float(np.mean(b * b))
        if p_b <= 0.0:
            raise ValueError(f"interferer {i} has zero power")
        scale = math.sqrt(p_target / (p_b * 10.0 ** (float(snr) / 10.0)))
        b = b * scale
        mixture += b
        sources.append(b)
    return mixture.astype(np.float32), [src.astype(np.float32) for src in sources]


def shift_samples(shift_s: float, rate: int = SAMPLE_RATE) -> int:
    return int(round(shift_s * rate))


def shift_fits(
    n_samples: int, shift_s: float, clip_len_s: float, clip_start_s: float, rate: int = SAMPLE_RATE
) -> bool:
    """Whether both the shifted and unshifted clip windows lie inside the source."""
    start = shift_samples(clip_start_s, rate)
    length = shift_samples(clip_len_s, rate)
    d = shift_samples(shift_s, rate)
    lo = min(start, start + d)
    hi = max(start, start + d) + length
    return lo >= 0 and hi <= n_samples


def shift_audio(
    w: np.ndarray,
    shift_s: float,
    clip_len_s: float,
    clip_start_s: float,
    rate: int = SAMPLE_RATE,
    circular_fallback: bool = False,
) -> np.ndarray:
    """Cut the clip ``[clip_start, clip_start + clip_len)`` with its content displaced by ``shift_s``.

    ``out[n] = w[start + d + n]`` with ``d = round(shift_s * rate)``. When the window
    leaves the source, a circular shift is used if ``circular_fallback`` is set,
    otherwise ``ValueError`` is raised.
    """
    w = np.asarray(w)
    start = shift_samples(clip_start_s, rate)
    length = shift_samples(clip_len_s, rate)
    d = shift_samples(shift_s, rate)
    if length < 1:
        raise ValueError("clip length must be at least one sample")
    lo = start + d
    if lo >= 0 and lo + length <= len(w):
        return w[lo : lo + length].copy()
    if not circular_fallback:
        raise ValueError(
            f"shifted window [{lo}, {lo + length}) outside source of {len(w)} samples"
        )
    idx = (np.arange(length) + lo) % len(w)
    return w[idx].copy()


def num_frames(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def frame_signal(w: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Split into half-overlapping frames; the tail is zero-padded so there are ceil(len / hop) frames."""
    if frame_len % 2:
        raise ValueError(f"frame_len must be even, got {frame_len}")
    if hop * 2 != frame_len:
        raise ValueError(f"hop must be frame_len / 2, got hop={hop} for frame_len={frame_len}")
    w = np.asarray(w)
    if w.ndim != 1 or len(w) < 1:
        raise ValueError("expected a non-empty 1-D waveform")
    n = num_frames(len(w), hop)
    padded = np.zeros((n - 1) * hop + frame_len, dtype=w.dtype)
    padded[: len(w)] = w
    idx = np.arange(n)[:, None] * hop + np.arange(frame_len)[None, :]
    return padded[idx]


def overlap_add(frames: np.ndarray, out_len: int) -> np.ndarray:
    """Overlap-add half-overlapping frames, then truncate or zero-extend to ``out_len``."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"expected a frames x frame_len matrix, got shape {frames.shape}")
    n, frame_len = frames.shape
    if frame_len % 2:
        raise ValueError(f"frame_len must be even, got {frame_len}")
    hop = frame_len // 2
    acc = np.zeros((n + 1, hop), dtype=np.result_type(frames.dtype, np.float64))
    acc[:n] += frames[:, :hop]
    acc[1:] += frames[:, hop:]
    out = acc.reshape(-1)
    if n == 0:
        out = out[:0]
    if len(out) >= out_len:
        return out[:out_len]
    return np.concatenate([out, np.zeros(out_len - len(out), dtype=out.dtype)])
