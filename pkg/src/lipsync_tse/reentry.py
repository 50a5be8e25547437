"""Audio-visual target speaker extraction with interlaced self-enrolling speaker encoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import GlobalLayerNorm, ResNetBlock, tcn_stack, upsample_repeat
from .slsyn import TAPS, SLSyn, SLSynConfig, SyncTrunk
from .signal import SAMPLE_RATE, VIDEO_FPS


@dataclass
class ReentryConfig:
    N: int = 256
    L: int = 40
    R: int = 4
    B: int = 8
    hidden: int = 512
    kernel: int = 3
    embed_dim: int = 256
    num_classes: int = 800
    gamma: float = 0.005
    adaptation_blocks: int = 5
    adaptation_hidden: int = 512
    attractor_dim: int = 256
    dropout_p: float = 0.9
    tap: str = "sync3"
    spk_channels: int = 256
    spk_blocks: int = 3
    spk_pool: int = 3
    # ablation switches
    use_speaker_encoders: bool = True
    concat_embeddings: bool = True
    share_speaker_encoders: bool = False
    slsyn: SLSynConfig = field(default_factory=SLSynConfig)

    def __post_init__(self):
        if isinstance(self.slsyn, dict):
            self.slsyn = SLSynConfig.from_dict(self.slsyn)
        if self.L % 2:
            raise ValueError(f"L must be even, got {self.L}")
        if self.R < 2:
            raise ValueError(f"R must be >= 2, got {self.R}")
        for name in ("N", "B", "hidden", "embed_dim", "num_classes", "attractor_dim", "spk_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}, got {self.tap!r}")
        frames_per_second = SAMPLE_RATE / (self.L // 2)
        if frames_per_second % VIDEO_FPS:
            raise ValueError("encoder frame rate must be an integer multiple of the video rate")

    @property
    def upsample_factor(self) -> int:
        return int(SAMPLE_RATE // (self.L // 2) // VIDEO_FPS)

    @classmethod
    def desk(cls, num_classes: int = 8, image_size: int = 32, **overrides) -> "ReentryConfig":
        """CPU-scale preset: N=64, R=2, B=4."""
        params = dict(
            N=64,
            R=2,
            B=4,
            hidden=128,
            embed_dim=64,
            num_classes=num_classes,
            adaptation_hidden=64,
            attractor_dim=64,
            spk_channels=64,
            slsyn=SLSynConfig.toy(image_size),
        )
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "slsyn"}
        d["slsyn"] = self.slsyn.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReentryConfig":
        return cls(**d)


@dataclass
class StageOutputs:
    masks: List[torch.Tensor]
    embeddings: List[torch.Tensor]
    logits: List[torch.Tensor]
    stage_features: List[torch.Tensor]
    features: torch.Tensor


class SpeechEncoder(nn.Module):
    """ReLU(Conv1D(x, N, L, L/2)), tail-padded to ceil(len / (L/2)) frames."""

    def __init__(self, N: int, L: int):
        super().__init__()
        self.L, self.hop = L, L // 2
        self.conv = nn.Conv1d(1, N, L, self.hop, bias=False)

    def forward(self, x):
        n = x.shape[-1]
        if n < 1:
            raise ValueError("cannot encode an empty waveform")
        frames = -(-n // self.hop)
        pad = (frames - 1) * self.hop + self.L - n
        return F.relu(self.conv(F.pad(x.unsqueeze(1), (0, pad))))


class SpeechDecoder(nn.Module):
    """Per-frame linear N -> L followed by overlap-add with hop L/2."""

    def __init__(self, N: int, L: int):
        super().__init__()
        self.N, self.L, self.hop = N, L, L // 2
        self.linear = nn.Linear(N, L, bias=False)

    def forward(self, feats, out_len: int):
        if feats.shape[1] != self.N:
            raise ValueError(f"decoder expects {self.N} channels, got {feats.shape[1]}")
        frames = self.linear(feats.transpose(1, 2))  # (b, t, L)
        b, t, _ = frames.shape
        acc = frames.new_zeros(b, t + 1, self.hop)
        acc = acc + F.pad(frames[..., : self.hop], (0, 0, 0, 1))
        acc = acc + F.pad(frames[..., self.hop :], (0, 0, 1, 0))
        out = acc.reshape(b, -1)
        if out.shape[-1] >= out_len:
            return out[:, :out_len]
        return F.pad(out, (0, out_len - out.shape[-1]))


class AttractorEncoder(nn.Module):
    """Pretrained sync-network slice up to the chosen tap, followed by adaptation TCN blocks."""

    def __init__(self, trunk: SyncTrunk, cfg: ReentryConfig, pretrained: bool = False):
        super().__init__()
        self.tap = cfg.tap
        self.sync = trunk.truncated(cfg.tap)
        self.pretrained = pretrained
        width = cfg.slsyn.tap_channels(cfg.tap)
        self.proj = (
            nn.Conv1d(width, cfg.attractor_dim, 1) if width != cfg.attractor_dim else nn.Identity()
        )
        self.adapt = tcn_stack(
            cfg.attractor_dim, cfg.adaptation_hidden, cfg.adaptation_blocks, cfg.kernel, dilated=False
        )

    def set_frozen(self, frozen: bool) -> None:
        if frozen and not self.pretrained:
            raise RuntimeError("freezing the attractor requires pretrained sync-network weights")
        for p in self.sync.parameters():
            p.requires_grad_(not frozen)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.sync.parameters())

    def forward(self, x, v):
        taps = self.sync(x, v, upto=self.tap)
        return self.adapt(self.proj(taps[self.tap]))


class SpeakerEncoder(nn.Module):
    """Encoded speech -> utterance-level speaker embedding (ResNet blocks + temporal average)."""

    def __init__(self, cfg: ReentryConfig):
        super().__init__()
        c = cfg.spk_channels
        self.norm = GlobalLayerNorm(cfg.N)
        self.proj = nn.Conv1d(cfg.N, c, 1, bias=False)
        self.blocks = nn.Sequential(
            *[ResNetBlock(c, c, 1, cfg.spk_pool) for _ in range(cfg.spk_blocks)]
        )
        self.dropout = nn.Dropout(cfg.dropout_p)
        self.out = nn.Linear(c, cfg.embed_dim)

    def forward(self, feats):
        y = self.blocks(self.proj(self.norm(feats)))
        return self.out(self.dropout(y.mean(dim=-1)))


class ExtractorStack(nn.Module):
    """Channel fuse -> B dilated TCN blocks -> 1x1 conv -> ReLU mask."""

    def __init__(self, in_channels: int, cfg: ReentryConfig):
        super().__init__()
        self.in_channels = in_channels
        self.norm = GlobalLayerNorm(in_channels)
        self.fuse = nn.Conv1d(in_channels, cfg.N, 1)
        self.tcn = tcn_stack(cfg.N, cfg.hidden, cfg.B, cfg.kernel)
        self.mask = nn.Conv1d(cfg.N, cfg.N, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"stack expects {self.in_channels} channels, got {x.shape[1]}")
        return F.relu(self.mask(self.tcn(self.fuse(self.norm(x)))))


class ReentryModel(nn.Module):
    def __init__(
        self,
        cfg: Optional[ReentryConfig] = None,
        slsyn: Optional[SLSyn] = None,
        pretrained: bool = False,
    ):
        super().__init__()
        self.cfg = cfg = cfg or ReentryConfig()
        if slsyn is None:
            slsyn = SLSyn(cfg.slsyn)
        elif slsyn.cfg != cfg.slsyn:
            raise ValueError("sync network configuration does not match the extractor config")
        self.encoder = SpeechEncoder(cfg.N, cfg.L)
        self.decoder = SpeechDecoder(cfg.N, cfg.L)
        self.attractor = AttractorEncoder(slsyn.trunk, cfg, pretrained)
        use_a = cfg.use_speaker_encoders and cfg.concat_embeddings
        later = cfg.N + cfg.attractor_dim + (cfg.embed_dim if use_a else 0)
        self.stacks = nn.ModuleList(
            [ExtractorStack(cfg.N + cfg.attractor_dim, cfg)]
            + [ExtractorStack(later, cfg) for _ in range(cfg.R - 1)]
        )
        if cfg.use_speaker_encoders:
            n_enc = 1 if cfg.share_speaker_encoders else cfg.R - 1
            self.speaker_encoders = nn.ModuleList([SpeakerEncoder(cfg) for _ in range(n_enc)])
            self.heads = nn.ModuleList(
                [nn.Linear(cfg.embed_dim, cfg.num_classes, bias=False) for _ in range(cfg.R - 1)]
            )
        else:
            self.speaker_encoders = None
            self.heads = None

    def speech_encode(self, x):
        return self.encoder(x)

    def speech_decode(self, feats, out_len: int):
        return self.decoder(feats, out_len)

    def attractor_encode(self, x, v):
        return self.attractor(x, v)

    def speaker_encode(self, stage_feats, r: int, out_len: int):
        """Embedding ``A^r`` (r in 1..R-1) of the stage-r estimate, re-encoded through the shared codec."""
        if self.speaker_encoders is None:
            raise RuntimeError("speaker encoders are disabled in this configuration")
        if not 1 <= r <= self.cfg.R - 1:
            raise ValueError(f"stage must be in [1, {self.cfg.R - 1}], got {r}")
        enc = self.speaker_encoders[0 if self.cfg.share_speaker_encoders else r - 1]
        wav = self.decoder(stage_feats, out_len)
        return enc(self.encoder(wav))

    def forward(self, x, v):
        """``x (batch, samples)``, ``v (batch, frames, H, W)`` -> ``(s_hat (batch, samples), StageOutputs)``."""
        if v is None:
            raise ValueError("the attractor needs the target speaker's face track")
        cfg = self.cfg
        n = x.shape[-1]
        X = self.encoder(x)
        t = X.shape[-1]
        V = upsample_repeat(self.attractor(x, v), cfg.upsample_factor, t)
        masks, embeddings, logits, stage_feats = [], [], [], []
        inp = torch.cat([X, V], dim=1)
        for r in range(cfg.R):
            M = self.stacks[r](inp)
            if not bool(torch.isfinite(M).all()):
                raise FloatingPointError(f"non-finite activations in extractor stack {r + 1}")
            masks.append(M)
            S_r = X * M
            stage_feats.append(S_r)
            if r == cfg.R - 1:
                break
            parts = [M, V]
            if self.speaker_encoders is not None:
                A = self.speaker_encode(S_r, r + 1, n)
                embeddings.append(A)
                logits.append(self.heads[r](A))
                if cfg.concat_embeddings:
                    parts.append(A.unsqueeze(-1).expand(-1, -1, t))
            inp = torch.cat(parts, dim=1)
        S = stage_feats[-1]
        s_hat = self.decoder(S, n)
        return s_hat, StageOutputs(masks, embeddings, logits, stage_feats, S)


def count_params(module: Optional[nn.Module], trainable_only: bool = False) -> int:
    if module is None:
        return 0
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )
