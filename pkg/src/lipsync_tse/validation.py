"""Input checks for waveforms, face tracks and audio-visual pairs."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .signal import SAMPLE_RATE, VIDEO_FPS


def check_waveform(x, name: str = "audio", min_samples: int = 1) -> np.ndarray:
    """1-D finite float32 waveform."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if x.size < min_samples:
        raise ValueError(f"{name} has {x.size} samples, need at least {min_samples}")
    if not np.issubdtype(x.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got {x.dtype}")
    x = x.astype(np.float32)
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite samples")
    return x


def check_face_track(v, image_size: int | None = None, name: str = "video") -> np.ndarray:
    """(frames, H, W) grayscale track; uint8 is scaled to [0, 1]."""
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"{name} must have shape (frames, H, W), got {v.shape}")
    if v.shape[0] < 1:
        raise ValueError(f"{name} has no frames")
    if image_size is not None and v.shape[1:] != (image_size, image_size):
        raise ValueError(f"{name} frames must be {image_size}x{image_size}, got {v.shape[1:]}")
    if v.dtype == np.uint8:
        return v.astype(np.float32) / 255.0
    v = v.astype(np.float32)
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite pixels")
    return v


def check_av_pair(audio, video, image_size: int | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Validate one (audio, video) pair whose durations agree to within one video frame."""
    a = check_waveform(audio)
    v = check_face_track(video, image_size)
    gap = abs(a.size / SAMPLE_RATE - v.shape[0] / VIDEO_FPS)
    if gap > 1.0 / VIDEO_FPS + 1e-9:
        raise ValueError(
            f"audio ({a.size / SAMPLE_RATE:.3f} s) and video ({v.shape[0] / VIDEO_FPS:.3f} s) "
            "durations differ by more than one video frame"
        )
    return a, v


def check_av_pairs(X, image_size: int | None = None) -> list:
    """A sequence of (audio, video) pairs."""
    if isinstance(X, tuple) and len(X) == 2 and np.asarray(X[0]).ndim == 1:
        raise TypeError("X must be a sequence of (audio, video) pairs, not a single pair")
    pairs = list(X)
    if not pairs:
        raise ValueError("X is empty")
    out = []
    for i, item in enumerate(pairs):
        if len(item) != 2:
            raise ValueError(f"X[{i}] must be an (audio, video) pair")
        out.append(check_av_pair(item[0], item[1], image_size))
    return out


def check_targets(y: Sequence, n: int, name: str = "y") -> list:
    y = list(y)
    if len(y) != n:
        raise ValueError(f"{name} has {len(y)} entries, X has {n}")
    return y
