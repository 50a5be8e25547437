"""Speech-lip synchronization network.

An audio front-end (learned filterbank + TCN blocks + average pooling down to the video
frame rate) and a visual front-end are concatenated frame by frame and fused by a TCN
back-end. Global average pooling, a linear layer and a sigmoid give the probability
that soundtrack and face track are synchronized. Three intermediate taps are exposed:
``sync1`` (visual only), ``sync2`` (fused features) and ``sync3`` (back-end output).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import GlobalLayerNorm, VisualFrontend, align_frames, tcn_stack
from .signal import SAMPLE_RATE, VIDEO_FPS

TAPS = ("sync1", "sync2", "sync3")


@dataclass
class SLSynConfig:
    audio_channels: int = 256
    audio_hidden: int = 512
    audio_blocks: int = 8
    encoder_kernel: int = 40
    kernel: int = 3
    pools: tuple = (4, 8)
    image_size: int = 112
    visual_stem: int = 64
    visual_widths: tuple = (64, 128, 256, 256)
    visual_blocks_per_stage: int = 2
    visual_temporal_norm: bool = True
    fused_channels: int = 256
    backend_hidden: int = 512
    backend_blocks: int = 1

    @classmethod
    def toy(cls, image_size: int = 32) -> "SLSynConfig":
        """CPU-sized network for synthetic-corpus experiments."""
        return cls(
            audio_channels=32,
            audio_hidden=64,
            audio_blocks=2,
            image_size=image_size,
            visual_stem=8,
            visual_widths=(8, 16, 32),
            visual_blocks_per_stage=1,
            fused_channels=32,
            backend_hidden=64,
            backend_blocks=3,
        )

    @property
    def hop(self) -> int:
        return self.encoder_kernel // 2

    @property
    def visual_channels(self) -> int:
        return self.visual_widths[-1]

    def tap_channels(self, tap: str) -> int:
        return self.visual_channels if tap == "sync1" else self.fused_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pools"] = list(self.pools)
        d["visual_widths"] = list(self.visual_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SLSynConfig":
        d = dict(d)
        d["pools"] = tuple(d["pools"])
        d["visual_widths"] = tuple(d["visual_widths"])
        return cls(**d)


def check_durations(n_samples: int, n_frames: int, rate: int = SAMPLE_RATE, fps: int = VIDEO_FPS):
    """Audio and video must agree to within one video frame."""
    gap = abs(n_samples / rate - n_frames / fps)
    if gap > 1.0 / fps + 1e-9:
        raise ValueError(
            f"audio ({n_samples / rate:.3f} s) and video ({n_frames / fps:.3f} s) "
            "durations differ by more than one video frame"
        )


class AudioFrontend(nn.Module):
    def __init__(self, cfg: SLSynConfig):
        super().__init__()
        self.hop = cfg.hop
        self.kernel = cfg.encoder_kernel
        self.conv = nn.Conv1d(1, cfg.audio_channels, cfg.encoder_kernel, cfg.hop, bias=False)
        self.norm = GlobalLayerNorm(cfg.audio_channels)
        self.tcn = tcn_stack(cfg.audio_channels, cfg.audio_hidden, cfg.audio_blocks, cfg.kernel)
        self.pools = tuple(cfg.pools)

    def forward(self, audio):
        n = audio.shape[-1]
        frames = -(-n // self.hop)
        pad = (frames - 1) * self.hop + self.kernel - n
        x = F.pad(audio.unsqueeze(1), (0, pad))
        x = self.tcn(self.norm(F.relu(self.conv(x))))
        for p in self.pools:
            x = F.avg_pool1d(x, p, p, ceil_mode=True)
        return x


class SyncTrunk(nn.Module):
    """Everything up to the last tap; the attractor encoder reuses a (possibly truncated) copy."""

    def __init__(self, cfg: SLSynConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualFrontend(
            cfg.image_size, cfg.visual_stem, cfg.visual_widths, cfg.visual_blocks_per_stage,
            cfg.visual_temporal_norm,
        )
        self.audio = AudioFrontend(cfg)
        self.fuse = nn.Conv1d(cfg.audio_channels + cfg.visual_channels, cfg.fused_channels, 1)
        self.backend = tcn_stack(
            cfg.fused_channels, cfg.backend_hidden, cfg.backend_blocks, cfg.kernel
        )
        self.last_tap = "sync3"

    def truncated(self, tap: str) -> "SyncTrunk":
        """A deep copy holding only the submodules needed to compute ``tap``."""
        if tap not in TAPS:
            raise ValueError(f"unknown tap {tap!r}; expected one of {TAPS}")
        trunk = copy.deepcopy(self)
        trunk.last_tap = tap
        if tap == "sync1":
            del trunk.audio, trunk.fuse
            trunk.audio = None
            trunk.fuse = None
        if tap in ("sync1", "sync2"):
            del trunk.backend
            trunk.backend = None
        return trunk

    def forward(self, audio, video, upto: Optional[str] = None) -> dict:
        upto = upto or self.last_tap
        if TAPS.index(upto) > TAPS.index(self.last_tap):
            raise ValueError(f"trunk truncated at {self.last_tap}, cannot compute {upto}")
        check_durations(audio.shape[-1], video.shape[1])
        taps = {"sync1": self.visual(video)}
        if upto == "sync1":
            return taps
        t = video.shape[1]
        a = align_frames(self.audio(audio), t)
        taps["sync2"] = self.fuse(torch.cat([a, taps["sync1"]], dim=1))
        if upto == "sync2":
            return taps
        taps["sync3"] = self.backend(taps["sync2"])
        return taps


class SLSyn(nn.Module):
    """Binary speech-lip synchronization classifier."""

    def __init__(self, cfg: Optional[SLSynConfig] = None):
        super().__init__()
        self.cfg = cfg or SLSynConfig()
        self.trunk = SyncTrunk(self.cfg)
        self.head = nn.Linear(self.cfg.fused_channels, 1)

    def forward(self, audio, video):
        """``audio (batch, samples)``, ``video (batch, frames, H, W)`` -> ``(y_hat (batch,), taps)``."""
        taps = self.trunk(audio, video)
        logit = self.head(taps["sync3"].mean(dim=-1)).squeeze(-1)
        return torch.sigmoid(logit), taps

    def logits(self, audio, video):
        taps = self.trunk(audio, video)
        return self.head(taps["sync3"].mean(dim=-1)).squeeze(-1)


def predict_proba(model: SLSyn, audio: np.ndarray, video: np.ndarray) -> float:
    """Synchronization probability for a single clip."""
    model.eval()
    with torch.no_grad():
        a = torch.as_tensor(np.asarray(audio, dtype=np.float32))[None]
        v = torch.as_tensor(normalize_video(video))[None]
        y, _ = model(a, v)
    return float(y[0])


def normalize_video(video: np.ndarray) -> np.ndarray:
    """uint8 grayscale frames -> float32 in [0, 1]; float input is passed through."""
    video = np.asarray(video)
    if video.dtype == np.uint8:
        return video.astype(np.float32) / 255.0
    return video.astype(np.float32)


def sync_accuracy(y_hat, labels, threshold: float = 0.5) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    labels = np.asarray(labels)
    if y_hat.size == 0:
        raise ValueError("cannot compute accuracy of an empty set")
    return float(np.mean((y_hat > threshold).astype(int) == labels))
