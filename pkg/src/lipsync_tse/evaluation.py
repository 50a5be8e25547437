"""Per-utterance scoring of an extractor over a mixture manifest and the aggregate report.

The report holds one record per utterance plus aggregates: an SI-SDRi histogram, mean
scores bucketed by target-interference SNR and by effective visual duration (deciles of
unoccluded frames), and overall means. Aggregates are computed from records sorted by
``sample_id`` so the report does not depend on manifest order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from . import io
from .datasim import Corpus, effective_visual_duration, render_mixture
from .metrics import utterance_scores
from .signal import snr_db
from .slsyn import normalize_video

log = logging.getLogger(__name__)

METRICS = ("si_sdr", "si_sdri", "sdr", "sdri")
SNR_EDGES = tuple(float(x) for x in range(-10, 11, 2))
DURATION_EDGES = tuple(float(x) for x in range(0, 101, 10))
REPORT_FORMAT = "lipsync-tse-report/1"

Separator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class EvalReport:
    records: List[dict]
    histogram: dict
    by_snr: List[dict]
    by_visual_duration: List[dict]
    summary: dict
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "summary": self.summary,
            "skipped": self.skipped,
            "histogram": self.histogram,
            "by_snr": self.by_snr,
            "by_visual_duration": self.by_visual_duration,
            "meta": self.meta,
        }


def model_separator(model: torch.nn.Module) -> Separator:
    """Wrap an extraction model as ``(mixture, video) -> estimate``."""
    model.eval()

    def run(mixture: np.ndarray, video: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(mixture, dtype=np.float32))[None]
            v = torch.as_tensor(normalize_video(video))[None]
            s_hat, _ = model(x, v)
        return s_hat[0].numpy()

    return run


def identity_separator(mixture, video):
    return np.asarray(mixture)


def interference_snr(target: np.ndarray, interferers: Sequence[np.ndarray]) -> float:
    """Energy contrast between the target and the summed interference, in dB."""
    return snr_db(target, np.sum(interferers, axis=0))


def score_entry(separate: Separator, entry: dict, corpus: Corpus) -> dict:
    r = render_mixture(entry, corpus)
    est = np.asarray(separate(r["mixture"], r["video"]), dtype=np.float64)
    if est.shape != r["mixture"].shape:
        raise ValueError(
            f"{entry['sample_id']}: estimate has {est.shape} samples, mixture has {r['mixture'].shape}"
        )
    rec = {
        "sample_id": entry["sample_id"],
        "speaker": entry.get("speaker"),
        "snr_db": interference_snr(r["target"], r["interferers"]),
        "visual_duration": effective_visual_duration(len(r["video"]), entry.get("occlusion") or []),
    }
    rec.update(utterance_scores(est, r["target"], r["mixture"]))
    return rec


def _bucket_index(x: float, edges: Sequence[float]) -> Optional[int]:
    """Half-open bins ``[lo, hi)``; the last bin is closed on the right."""
    if x < edges[0] or x > edges[-1]:
        return None
    i = int(np.searchsorted(edges, x, side="right")) - 1
    return min(i, len(edges) - 2)


def bucket_means(records: Sequence[dict], key: str, edges: Sequence[float]) -> List[dict]:
    groups: Dict[int, List[dict]] = {}
    for r in records:
        i = _bucket_index(r[key], edges)
        if i is not None:
            groups.setdefault(i, []).append(r)
    out = []
    for i in range(len(edges) - 1):
        g = groups.get(i, [])
        row = {"lo": edges[i], "hi": edges[i + 1], "count": len(g)}
        for m in METRICS:
            row[m] = float(np.mean([r[m] for r in g])) if g else None
        out.append(row)
    return out


def histogram(values: Sequence[float], bin_width: float = 1.0) -> dict:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"edges": [], "counts": []}
    lo = math.floor(values.min() / bin_width) * bin_width
    hi = math.ceil(values.max() / bin_width) * bin_width
    if hi <= lo:
        hi = lo + bin_width
    n_bins = int(round((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def summarize(records: Sequence[dict]) -> dict:
    out = {"count": len(records)}
    for m in METRICS:
        out[m] = float(np.mean([r[m] for r in records])) if records else None
    return out


def build_report(records: Sequence[dict], skipped: int = 0, bin_width: float = 1.0, meta=None) -> EvalReport:
    records = sorted(records, key=lambda r: r["sample_id"])
    return EvalReport(
        records=list(records),
        histogram=histogram([r["si_sdri"] for r in records], bin_width),
        by_snr=bucket_means(records, "snr_db", SNR_EDGES),
        by_visual_duration=bucket_means(records, "visual_duration", DURATION_EDGES),
        summary=summarize(records),
        skipped=skipped,
        meta=dict(meta or {}),
    )


def evaluate(
    model: Union[torch.nn.Module, Separator],
    manifest: Sequence[dict],
    corpus: Corpus,
    bin_width: float = 1.0,
    meta: Optional[dict] = None,
) -> EvalReport:
    """Score every manifest entry on its full utterance; entries whose reference is missing are skipped."""
    separate = model_separator(model) if isinstance(model, torch.nn.Module) else model
    records, skipped = [], 0
    for entry in manifest:
        try:
            corpus.audio(entry["target_path"])
        except (KeyError, FileNotFoundError):
            skipped += 1
            continue
        records.append(score_entry(separate, entry, corpus))
    if skipped:
        log.warning("skipped %d entries with a missing reference", skipped)
    return build_report(records, skipped, bin_width, meta)


# --------------------------------------------------------------------------- files


def write_report(report: EvalReport, out_dir) -> Path:
    """``records.jsonl``, ``summary.json`` and CSV plot-data files under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_jsonl(out / "records.jsonl", report.records)
    (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "si_sdri_histogram.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lo", "hi", "count"])
        e, c = report.histogram["edges"], report.histogram["counts"]
        for i, n in enumerate(c):
            w.writerow([e[i], e[i + 1], n])
    for name, rows in (("by_snr", report.by_snr), ("by_visual_duration", report.by_visual_duration)):
        with open(out / f"{name}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["lo", "hi", "count", *METRICS])
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return out


def read_report(out_dir) -> EvalReport:
    out = Path(out_dir)
    summary_path = out / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"{out}: no summary.json")
    d = json.loads(summary_path.read_text())
    if d.get("format") != REPORT_FORMAT:
        raise ValueError(f"{summary_path}: not a {REPORT_FORMAT} report")
    return EvalReport(
        records=io.read_jsonl(out / "records.jsonl"),
        histogram=d["histogram"],
        by_snr=d["by_snr"],
        by_visual_duration=d["by_visual_duration"],
        summary=d["summary"],
        skipped=d["skipped"],
        meta=d.get("meta", {}),
    )


def format_report(report: EvalReport) -> str:
    s = report.summary
    lines = [f"utterances: {s['count']}  skipped: {report.skipped}"]
    if s["count"]:
        lines.append(
            "mean  SI-SDR {si_sdr:.2f} dB  SI-SDRi {si_sdri:.2f} dB  SDR {sdr:.2f} dB  SDRi {sdri:.2f} dB".format(**s)
        )
    for title, rows, unit in (
        ("SI-SDRi by target-interference SNR", report.by_snr, "dB"),
        ("SI-SDRi by effective visual duration", report.by_visual_duration, "%"),
    ):
        lines.append(title)
        for r in rows:
            if r["count"]:
                lines.append(f"  [{r['lo']:g}, {r['hi']:g}) {unit}  n={r['count']:<4d} {r['si_sdri']:.2f}")
    return "\n".join(lines)
