"""Evaluation metrics in float64 numpy and batch scoring of estimate/reference/mixture files."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .io import PathLike, read_wav
from .losses import EPS, TINY


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1:
        raise ValueError(f"expected equal-length 1-D signals, got {est.shape} and {ref.shape}")
    if len(ref) < 2:
        raise ValueError("signals must have at least 2 samples")
    return est, ref


def si_sdr(est, ref, eps: float = EPS) -> float:
    est, ref = _pair(est, ref)
    ref_energy = float(ref @ ref)
    if ref_energy <= 0:
        raise ValueError("reference has zero power")
    proj = (float(est @ ref) / ref_energy) * ref
    noise = est - proj
    p_proj = float(proj @ proj)
    return 10 * math.log10((p_proj + TINY) / (float(noise @ noise) + eps * p_proj + TINY))


def sdr(est, ref, eps: float = EPS) -> float:
    """Plain signal-to-distortion ratio (no scale projection, no filtered decomposition)."""
    est, ref = _pair(est, ref)
    p_ref = float(ref @ ref)
    if p_ref <= 0:
        raise ValueError("reference has zero power")
    err = est - ref
    return 10 * math.log10((p_ref + TINY) / (float(err @ err) + eps * p_ref + TINY))


def improvement(metric_est_vs_ref: float, metric_mix_vs_ref: float) -> float:
    if not (math.isfinite(metric_est_vs_ref) and math.isfinite(metric_mix_vs_ref)):
        raise ValueError("metrics must be finite")
    return metric_est_vs_ref - metric_mix_vs_ref


def utterance_scores(est, ref, mix) -> dict:
    """SI-SDR, SDR and their improvements over the unprocessed mixture."""
    n = min(len(est), len(ref), len(mix))
    est, ref, mix = (np.asarray(a, dtype=np.float64)[:n] for a in (est, ref, mix))
    s_est, s_mix = si_sdr(est, ref), si_sdr(mix, ref)
    d_est, d_mix = sdr(est, ref), sdr(mix, ref)
    return {
        "si_sdr": s_est,
        "si_sdri": improvement(s_est, s_mix),
        "sdr": d_est,
        "sdri": improvement(d_est, d_mix),
    }


def score_triples(
    entries: Iterable[Mapping], root: Optional[PathLike] = None
) -> list[dict]:
    """Score (estimate, reference, mixture) WAV triples; one record per entry.

    Each entry needs ``estimate_path``, ``reference_path`` and ``mixture_path``
    (relative to ``root`` when given) and may carry ``sample_id``.
    """
    base = Path(root) if root is not None else Path(".")
    records = []
    for i, e in enumerate(entries):
        est = read_wav(base / e["estimate_path"])
        ref = read_wav(base / e["reference_path"])
        mix = read_wav(base / e["mixture_path"])
        rec = {"sample_id": e.get("sample_id", str(i))}
        rec.update(utterance_scores(est, ref, mix))
        records.append(rec)
    return records
