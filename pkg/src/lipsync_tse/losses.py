"""Training objectives: SI-SDR, speaker cross-entropy, their weighted sum, and the sync BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

# Relative floor on the distortion energy: caps SI-SDR at 10*log10(1/EPS) = 80 dB
# independently of signal scale.
EPS = 1e-8
# Absolute floor keeping an all-zero estimate finite.
TINY = 1e-30
BCE_CLAMP = 1e-7

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.005
    num_stages: int = 4

    def __post_init__(self):
        if not torch.isfinite(torch.tensor(float(self.gamma))) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.num_stages < 2:
            raise ValueError(f"num_stages must be >= 2, got {self.num_stages}")


def si_sdr(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale-invariant SDR in dB over the last axis.

    ``10 log10(|a s|^2 / (|s_hat - a s|^2 + eps |a s|^2))`` with ``a = <s_hat, s> / |s|^2``.
    """
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if est.shape[-1] < 2:
        raise ValueError("signals must have at least 2 samples")
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    if bool((ref_energy <= 0).any()):
        raise ValueError("reference has zero power")
    alpha = (est * ref).sum(-1, keepdim=True) / ref_energy
    proj = alpha * ref
    noise = est - proj
    p_proj = (proj * proj).sum(-1)
    p_noise = (noise * noise).sum(-1)
    return 10 * torch.log10((p_proj + TINY) / (p_noise + eps * p_proj + TINY))


def si_sdr_loss(est: torch.Tensor, ref: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Negative SI-SDR, averaged over any batch axes."""
    return -si_sdr(est, ref, eps).mean()


def speaker_ce_loss(logits: torch.Tensor, label: Union[int, torch.Tensor]) -> torch.Tensor:
    """Cross-entropy of speaker logits ``W^r A^r`` against the target speaker index."""
    if logits.shape[-1] < 2:
        raise ValueError("need at least two speaker classes")
    label = torch.as_tensor(label, dtype=torch.long, device=logits.device)
    num_classes = logits.shape[-1]
    if bool(((label < 0) | (label >= num_classes)).any()):
        raise ValueError(f"speaker label out of range [0, {num_classes})")
    if logits.dim() == 1:
        return F.cross_entropy(logits[None], label.reshape(1))
    return F.cross_entropy(logits, label.reshape(-1))


def total_loss(sisdr_loss: Number, ce_losses: Sequence[Number], weights: LossWeights) -> Number:
    if len(ce_losses) != weights.num_stages - 1:
        raise ValueError(
            f"expected {weights.num_stages - 1} speaker losses for {weights.num_stages} stages, "
            f"got {len(ce_losses)}"
        )
    ce_sum = sum(ce_losses) if ce_losses else 0.0
    return sisdr_loss + weights.gamma * ce_sum


def bce_sync_loss(y_hat: torch.Tensor, y: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    """Binary cross-entropy for the synchronized (1) / shifted (0) decision, batch-averaged."""
    y_hat = torch.as_tensor(y_hat, dtype=torch.get_default_dtype()) if not torch.is_tensor(y_hat) else y_hat
    y = torch.as_tensor(y, dtype=y_hat.dtype, device=y_hat.device)
    p = y_hat.clamp(clamp, 1 - clamp)
    return (-(y * torch.log(p)) - (1 - y) * torch.log(1 - p)).mean()
