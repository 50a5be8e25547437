"""Corpora and manifests: synthetic audio-visual speakers, mixtures, sync samples, occlusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import signal as sps

from . import io
from .signal import SAMPLE_RATE, VIDEO_FPS, mix_at_snr, shift_audio, shift_fits

SAMPLES_PER_FRAME = SAMPLE_RATE // VIDEO_FPS  # 640
MIN_UTTERANCE_S = 4.0
SNR_RANGE = (-10.0, 10.0)
SHIFT_RANGE = (0.2, 1.0)


# --------------------------------------------------------------------------- corpus


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    audio: np.ndarray  # float32 samples at 16 kHz
    video: np.ndarray  # uint8 (frames, H, W) at 25 fps

    @property
    def audio_path(self) -> str:
        return f"audio/{self.utt_id}.wav"

    @property
    def video_path(self) -> str:
        return f"video/{self.utt_id}"

    @property
    def duration_s(self) -> float:
        return len(self.audio) / SAMPLE_RATE


class Corpus:
    """A set of utterances addressable by the relative paths used in manifests."""

    def __init__(self, utterances: Iterable[Utterance], root: Optional[Path] = None):
        self.utterances = list(utterances)
        self.root = Path(root) if root is not None else None
        self._by_audio = {u.audio_path: u for u in self.utterances}
        self._by_video = {u.video_path: u for u in self.utterances}

    def __len__(self):
        return len(self.utterances)

    def speakers(self) -> List[str]:
        return sorted({u.speaker for u in self.utterances})

    def by_speaker(self) -> Dict[str, List[Utterance]]:
        out: Dict[str, List[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker, []).append(u)
        return out

    def subset(self, speakers: Iterable[str]) -> "Corpus":
        keep = set(speakers)
        return Corpus([u for u in self.utterances if u.speaker in keep], self.root)

    def audio(self, path: str) -> np.ndarray:
        if path in self._by_audio:
            return self._by_audio[path].audio
        if self.root is None:
            raise KeyError(f"unknown audio {path!r}")
        return io.read_wav(self.root / path)

    def video(self, path: str) -> np.ndarray:
        if path in self._by_video:
            return self._by_video[path].video
        if self.root is None:
            raise KeyError(f"unknown face track {path!r}")
        return io.read_face_track(self.root / path)

    def save(self, root: Path) -> None:
        root = Path(root)
        records = []
        for u in self.utterances:
            io.write_wav(root / u.audio_path, u.audio)
            io.write_face_track(root / u.video_path, u.video)
            records.append(
                {
                    "utt_id": u.utt_id,
                    "speaker": u.speaker,
                    "audio_path": u.audio_path,
                    "video_path": u.video_path,
                    "duration_s": round(u.duration_s, 6),
                    "frames": int(len(u.video)),
                }
            )
        io.write_jsonl(root / "corpus.jsonl", records)
        self.root = root

    @classmethod
    def load(cls, root: Path) -> "Corpus":
        root = Path(root)
        utts = [
            Utterance(
                r["utt_id"],
                r["speaker"],
                io.read_wav(root / r["audio_path"]),
                io.read_face_track(root / r["video_path"]),
            )
            for r in io.iter_jsonl(root / "corpus.jsonl")
        ]
        return cls(utts, root)


# --------------------------------------------------------------------------- synthetic speakers


@dataclass
class SyntheticAVConfig:
    num_speakers: int = 8
    utterances_per_speaker: int = 4
    duration_s: tuple = (4.0, 4.0)
    image_size: int = 112
    tones_per_speaker: int = 3
    band_start_hz: float = 300.0
    band_width_hz: float = 500.0
    band_spacing_hz: float = 800.0
    envelope_bandwidth_hz: float = 4.0
    carrier_bands: Optional[List[tuple]] = None
    noise_std: float = 1.0

    def bands(self) -> List[tuple]:
        if self.carrier_bands is not None:
            bands = [tuple(b) for b in self.carrier_bands]
        else:
            bands = [
                (self.band_start_hz + k * self.band_spacing_hz,
                 self.band_start_hz + k * self.band_spacing_hz + self.band_width_hz)
                for k in range(self.num_speakers)
            ]
        if len(bands) != self.num_speakers:
            raise ValueError("need one carrier band per speaker")
        ordered = sorted(bands)
        for (lo1, hi1), (lo2, hi2) in zip(ordered, ordered[1:]):
            if lo2 < hi1:
                raise ValueError("synthetic speakers must occupy disjoint carrier bands")
        if ordered[-1][1] >= SAMPLE_RATE / 2:
            raise ValueError("carrier band above Nyquist")
        return bands


def smooth_envelope(rng: np.random.Generator, n_samples: int, bandwidth_hz: float) -> np.ndarray:
    """Non-negative, band-limited random envelope in [0, 1] with silent stretches."""
    ctrl_rate = 100
    n_ctrl = int(math.ceil(n_samples / SAMPLE_RATE * ctrl_rate)) + 2
    white = rng.standard_normal(n_ctrl + 64)
    b, a = sps.butter(2, bandwidth_hz / (ctrl_rate / 2))
    z = sps.filtfilt(b, a, white)[32 : 32 + n_ctrl]
    z = (z - z.mean()) / (z.std() + 1e-12)
    e = np.maximum(z + 0.3, 0.0)
    e /= e.max() + 1e-12
    t_ctrl = np.arange(n_ctrl) / ctrl_rate
    t = np.arange(n_samples) / SAMPLE_RATE
    return np.interp(t, t_ctrl, e)


def frame_envelope(env: np.ndarray, n_frames: int) -> np.ndarray:
    """Mean envelope over each video frame's 640-sample window."""
    padded = np.zeros(n_frames * SAMPLES_PER_FRAME)
    m = min(len(env), len(padded))
    padded[:m] = env[:m]
    return padded.reshape(n_frames, SAMPLES_PER_FRAME).mean(axis=1)


class FaceGeometry:
    """Pixel layout of the procedural face; the mouth opening tracks the speech envelope."""

    def __init__(self, size: int):
        self.size = size
        self.mouth_cx = size // 2
        self.mouth_cy = int(round(size * 0.70))
        self.mouth_half_w = max(2, size // 6)
        self.max_open = max(3.0, size * 0.22)
        self.min_open = max(0.5, size * 0.02)

    def mouth_box(self):
        top = int(math.floor(self.mouth_cy - self.max_open / 2 - 1))
        bottom = int(math.ceil(self.mouth_cy + self.max_open / 2 + 1))
        return (max(top, 0), min(bottom, self.size),
                self.mouth_cx - self.mouth_half_w, self.mouth_cx + self.mouth_half_w)


SKIN, LIP = 170.0, 30.0


def render_face(openness: np.ndarray, size: int, rng: np.random.Generator, noise_std: float = 1.0) -> np.ndarray:
    """Frames whose mouth aperture height is ``min + openness * (max - min)`` pixels.

    Edge rows are anti-aliased by coverage, so the mouth's total darkness is linear in
    the aperture height.
    """
    g = FaceGeometry(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.full((size, size), 90.0)
    face = ((xx - size / 2) / (size * 0.38)) ** 2 + ((yy - size / 2) / (size * 0.46)) ** 2 <= 1
    base[face] = SKIN
    for ex in (size * 0.35, size * 0.65):
        eye = ((xx - ex) / (size * 0.07)) ** 2 + ((yy - size * 0.38) / (size * 0.035)) ** 2 <= 1
        base[eye] = 40.0
    rows = np.arange(size, dtype=np.float64)
    cols = np.abs(np.arange(size) - g.mouth_cx) < g.mouth_half_w
    frames = np.empty((len(openness), size, size), dtype=np.uint8)
    for i, o in enumerate(openness):
        h = g.min_open + float(np.clip(o, 0, 1)) * (g.max_open - g.min_open)
        cover = np.clip(h / 2 - np.abs(rows + 0.5 - g.mouth_cy) + 0.5, 0.0, 1.0)
        img = base.copy()
        img[:, cols] = img[:, cols] * (1 - cover[:, None]) + LIP * cover[:, None]
        if noise_std > 0:
            img += rng.normal(0.0, noise_std, img.shape)
        frames[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return frames


def measure_aperture(frames: np.ndarray) -> np.ndarray:
    """Per-frame mouth opening in pixels, read back from the rendered images."""
    frames = np.asarray(frames, dtype=np.float64)
    g = FaceGeometry(frames.shape[-1])
    top, bottom, left, right = g.mouth_box()
    region = frames[:, top:bottom, left + 1 : right - 1]
    darkness = np.clip((SKIN - region) / (SKIN - LIP), 0, 1)
    return darkness.sum(axis=1).mean(axis=1)


def synth_speech(
    rng: np.random.Generator, env: np.ndarray, band: tuple, n_tones: int
) -> np.ndarray:
    t = np.arange(len(env)) / SAMPLE_RATE
    lo, hi = band
    freqs = np.linspace(lo, hi, n_tones + 2)[1:-1]
    freqs = freqs + rng.uniform(-0.1, 0.1, n_tones) * (hi - lo) / (n_tones + 1)
    carrier = np.zeros_like(t)
    for f in freqs:
        vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
        carrier += np.sin(2 * np.pi * f * t * vib + rng.uniform(0, 2 * np.pi))
    x = env * carrier
    return (0.5 * x / (np.abs(x).max() + 1e-12)).astype(np.float32)


def gen_synthetic_av(cfg: SyntheticAVConfig, seed: int) -> Corpus:
    """Synthetic speakers: band-limited carriers modulated by smooth random envelopes, with
    procedural face tracks whose lip opening follows the same envelope at 25 fps."""
    rng = np.random.default_rng(seed)
    bands = cfg.bands()
    utts = []
    for k in range(cfg.num_speakers):
        spk = f"spk{k:02d}"
        for j in range(cfg.utterances_per_speaker):
            dur = rng.uniform(*cfg.duration_s)
            n_frames = int(round(dur * VIDEO_FPS))
            n = n_frames * SAMPLES_PER_FRAME
            env = smooth_envelope(rng, n, cfg.envelope_bandwidth_hz)
            audio = synth_speech(rng, env, bands[k], cfg.tones_per_speaker)
            fe = frame_envelope(env, n_frames)
            video = render_face(fe, cfg.image_size, rng, cfg.noise_std)
            utts.append(Utterance(f"{spk}_u{j:02d}", spk, audio, video))
    return Corpus(utts)


# --------------------------------------------------------------------------- splits & mixtures


def split_speakers(
    speakers: Sequence[str], fractions: Sequence[float], seed: int
) -> List[List[str]]:
    """Partition speakers into pairwise disjoint groups (e.g. train/val/test)."""
    rng = np.random.default_rng(seed)
    order = list(sorted(speakers))
    rng.shuffle(order)
    counts = [int(math.floor(f * len(order))) for f in fractions]
    counts[0] += len(order) - sum(counts)
    out, i = [], 0
    for c in counts:
        out.append(sorted(order[i : i + c]))
        i += c
    return out


def label_map(speakers: Iterable[str]) -> Dict[str, int]:
    return {s: i for i, s in enumerate(sorted(speakers))}


def build_mixture_manifest(
    corpus: Corpus,
    n_samples: int,
    n_interferers: int,
    seed: int,
    labels: Optional[Dict[str, int]] = None,
    min_duration_s: float = MIN_UTTERANCE_S,
    prefix: str = "mix",
) -> List[dict]:
    """Pair target utterances with interferers from other speakers at SNRs ~ U[-10, 10] dB."""
    if n_interferers not in (1, 2):
        raise ValueError("n_interferers must be 1 (2-mix) or 2 (3-mix)")
    usable = [u for u in corpus.utterances if u.duration_s >= min_duration_s - 1e-9]
    by_spk: Dict[str, List[Utterance]] = {}
    for u in usable:
        by_spk.setdefault(u.speaker, []).append(u)
    speakers = sorted(by_spk)
    if len(speakers) < n_interferers + 1:
        raise ValueError(
            f"need at least {n_interferers + 1} speakers with utterances >= {min_duration_s} s, "
            f"found {len(speakers)}"
        )
    labels = labels if labels is not None else label_map(speakers)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_samples):
        spk_idx = rng.choice(len(speakers), size=n_interferers + 1, replace=False)
        chosen = [by_spk[speakers[s]] for s in spk_idx]
        utts = [c[rng.integers(len(c))] for c in chosen]
        snrs = rng.uniform(*SNR_RANGE, size=n_interferers)
        target = utts[0]
        entries.append(
            {
                "sample_id": f"{prefix}-{i:06d}",
                "target_path": target.audio_path,
                "video_path": target.video_path,
                "interferer_paths": [u.audio_path for u in utts[1:]],
                "snr_dbs": [round(float(s), 6) for s in snrs],
                "target_bounds": [0, int(len(target.audio))],
                "interferer_bounds": [[0, int(len(u.audio))] for u in utts[1:]],
                "speaker": target.speaker,
                "speaker_label": int(labels.get(target.speaker, -1)),
                "occlusion": [],
                "seed": int(rng.integers(2**31 - 1)),
            }
        )
    return entries


def mixture_length(entry: dict) -> int:
    """Shared length after truncation to the shortest source, floored to whole video frames."""
    lens = [entry["target_bounds"][1] - entry["target_bounds"][0]]
    lens += [b[1] - b[0] for b in entry["interferer_bounds"]]
    return (min(lens) // SAMPLES_PER_FRAME) * SAMPLES_PER_FRAME


def render_mixture(entry: dict, corpus: Corpus, max_len_s: Optional[float] = None, offset_s: float = 0.0) -> dict:
    """Materialize a mixture entry: mixture, target reference, interferers and face track."""
    n = mixture_length(entry)
    start = 0
    if max_len_s is not None:
        cap = int(round(max_len_s * VIDEO_FPS)) * SAMPLES_PER_FRAME
        if n > cap:
            start = int(round(offset_s * VIDEO_FPS)) * SAMPLES_PER_FRAME
            start = min(start, n - cap)
            n = cap
    t0 = entry["target_bounds"][0]
    target = corpus.audio(entry["target_path"])[t0 + start : t0 + start + n]
    interferers = [
        corpus.audio(p)[b[0] + start : b[0] + start + n]
        for p, b in zip(entry["interferer_paths"], entry["interferer_bounds"])
    ]
    mixture, sources = mix_at_snr(target, interferers, entry["snr_dbs"])
    f0 = (t0 + start) // SAMPLES_PER_FRAME
    video = corpus.video(entry["video_path"])[f0 : f0 + n // SAMPLES_PER_FRAME]
    for occ in entry.get("occlusion") or []:
        video = apply_occlusion(video, OcclusionSpec(*occ))
    return {
        "mixture": mixture,
        "target": sources[0],
        "interferers": sources[1:],
        "video": video,
    }


# --------------------------------------------------------------------------- occlusion


@dataclass(frozen=True)
class OcclusionSpec:
    start_frame: int
    duration_frames: int


def apply_occlusion(v: np.ndarray, spec: OcclusionSpec) -> np.ndarray:
    """Black out frames ``[start, start + duration)``; every other frame is left untouched."""
    n = len(v)
    s, d = spec.start_frame, spec.duration_frames
    if s < 0 or d < 0 or s + d > n or (d > 0 and s >= n):
        raise ValueError(f"occlusion [{s}, {s + d}) outside face track of {n} frames")
    out = np.array(v, copy=True)
    out[s : s + d] = 0
    return out


def sample_occlusion(rng: np.random.Generator, n_frames: int) -> OcclusionSpec:
    """Uniform duration in [0, n_frames], then a uniform in-bounds start."""
    d = int(rng.integers(0, n_frames + 1))
    s = int(rng.integers(0, n_frames - d + 1))
    return OcclusionSpec(s, d)


def add_occlusions(entries: List[dict], seed: int) -> List[dict]:
    """Occlusion variant of a mixture manifest; one random blackout interval per entry."""
    rng = np.random.default_rng(seed)
    out = []
    for e in entries:
        e = dict(e)
        spec = sample_occlusion(rng, mixture_length(e) // SAMPLES_PER_FRAME)
        e["occlusion"] = [[spec.start_frame, spec.duration_frames]]
        out.append(e)
    return out


def effective_visual_duration(n_frames: int, occlusions: Sequence[Sequence[int]]) -> float:
    """Percentage of frames left unoccluded."""
    if n_frames <= 0:
        raise ValueError("face track has no frames")
    hidden = np.zeros(n_frames, dtype=bool)
    for s, d in occlusions:
        hidden[s : s + d] = True
    return 100.0 * (n_frames - int(hidden.sum())) / n_frames


def measure_effective_visual_duration(entries: Iterable[dict]) -> List[float]:
    return [
        effective_visual_duration(mixture_length(e) // SAMPLES_PER_FRAME, e.get("occlusion") or [])
        for e in entries
    ]


# --------------------------------------------------------------------------- sync samples


def _frame_aligned(x_s: float) -> float:
    return round(x_s * VIDEO_FPS) / VIDEO_FPS


def make_sync_sample(
    corpus: Corpus,
    rng: np.random.Generator,
    clip_len_s: Optional[float] = None,
    p_mixture: float = 0.75,
    p_negative: float = 0.5,
    sample_id: str = "sync",
    interference_only: bool = False,
) -> dict:
    """Draw one positive (original soundtrack) or negative (soundtrack shifted 0.2-1 s) clip.

    With probability ``p_mixture`` an interferer from another speaker is added at an SNR
    drawn from U[-10, 10] dB. ``interference_only`` builds the variant where the face track
    is paired with the interferer's speech alone (label 0).
    """
    if clip_len_s is None:
        # U[1, 4] s, capped so that the longest utterance still leaves shift headroom
        longest = max((u.duration_s for u in corpus.utterances), default=0.0)
        upper = min(4.0, longest - SHIFT_RANGE[1])
        if upper < 1.0:
            raise ValueError(f"corpus too small: longest utterance is {longest:.2f} s")
        clip_len_s = _frame_aligned(rng.uniform(1.0, upper))
    clip_len_s = _frame_aligned(clip_len_s)
    need = clip_len_s + SHIFT_RANGE[1]
    cands = [u for u in corpus.utterances if u.duration_s >= need - 1e-9]
    if not cands:
        raise ValueError(
            f"corpus too small: no utterance of at least {need:.2f} s for {clip_len_s:.2f} s clips"
        )
    target = cands[rng.integers(len(cands))]
    negative = interference_only or rng.random() < p_negative
    mixture = interference_only or rng.random() < p_mixture
    shift = 0.0
    if negative and not interference_only:
        shift = float(rng.uniform(*SHIFT_RANGE)) * (1 if rng.random() < 0.5 else -1)
        shift = round(shift, 6)
    lo = max(0.0, -shift)
    hi = target.duration_s - clip_len_s - max(0.0, shift)
    starts = np.arange(math.ceil(lo * VIDEO_FPS - 1e-9), math.floor(hi * VIDEO_FPS + 1e-9) + 1)
    circular = len(starts) == 0
    start = float(starts[rng.integers(len(starts))]) / VIDEO_FPS if not circular else 0.0
    interferer_path, interferer_start, snr = None, 0.0, None
    if mixture:
        others = [u for u in corpus.utterances if u.speaker != target.speaker and u.duration_s >= clip_len_s]
        if not others:
            raise ValueError("corpus too small: no interferer from another speaker")
        other = others[rng.integers(len(others))]
        interferer_path = other.audio_path
        max_start = int(math.floor((other.duration_s - clip_len_s) * VIDEO_FPS + 1e-9))
        interferer_start = int(rng.integers(0, max_start + 1)) / VIDEO_FPS
        snr = round(float(rng.uniform(*SNR_RANGE)), 6)
    return {
        "sample_id": sample_id,
        "audio_path": target.audio_path,
        "video_path": target.video_path,
        "interferer_path": interferer_path,
        "snr_db": snr,
        "clip_start_s": round(start, 6),
        "clip_len_s": round(clip_len_s, 6),
        "shift_s": shift,
        "label": 0 if negative else 1,
        "interferer_start_s": round(interferer_start, 6),
        "kind": "interference_only" if interference_only else ("negative" if negative else "positive"),
        "circular": bool(circular),
    }


def build_sync_manifest(
    corpus: Corpus,
    n_samples: int,
    seed: int,
    clip_len_s: Optional[float] = None,
    p_mixture: float = 0.75,
    p_negative: float = 0.5,
    interference_only: bool = False,
    prefix: str = "sync",
) -> List[dict]:
    rng = np.random.default_rng(seed)
    return [
        make_sync_sample(
            corpus, rng, clip_len_s, p_mixture, p_negative,
            sample_id=f"{prefix}-{i:06d}", interference_only=interference_only,
        )
        for i in range(n_samples)
    ]


def render_sync_sample(spec: dict, corpus: Corpus) -> tuple:
    """-> ``(audio float32, video uint8, label)`` for a sync manifest entry."""
    src = corpus.audio(spec["audio_path"])
    length = int(round(spec["clip_len_s"] * SAMPLE_RATE))
    f0 = int(round(spec["clip_start_s"] * VIDEO_FPS))
    n_frames = int(round(spec["clip_len_s"] * VIDEO_FPS))
    video = corpus.video(spec["video_path"])[f0 : f0 + n_frames]
    if spec.get("kind") == "interference_only":
        other = corpus.audio(spec["interferer_path"])
        i0 = int(round(spec["interferer_start_s"] * SAMPLE_RATE))
        return other[i0 : i0 + length].astype(np.float32), video, 0
    audio = shift_audio(
        src, spec["shift_s"], spec["clip_len_s"], spec["clip_start_s"],
        circular_fallback=bool(spec.get("circular")),
    )
    if spec.get("interferer_path"):
        other = corpus.audio(spec["interferer_path"])
        i0 = int(round(spec["interferer_start_s"] * SAMPLE_RATE))
        audio, _ = mix_at_snr(audio, [other[i0 : i0 + length]], [spec["snr_db"]])
    return audio.astype(np.float32), video, int(spec["label"])
