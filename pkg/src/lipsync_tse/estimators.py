"""scikit-learn style wrappers around the sync network and the extraction model.

``X`` is always a sequence of ``(audio, video)`` pairs: a 1-D 16 kHz waveform and a
``(frames, H, W)`` grayscale face track at 25 fps.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch.utils.data import Dataset

from . import metrics
from .reentry import ReentryConfig, ReentryModel
from .datasim import SAMPLES_PER_FRAME
from .signal import VIDEO_FPS
from .slsyn import TAPS, SLSyn, SLSynConfig
from .training import TrainPlan, seed_everything, train_reentry, train_slsyn
from .validation import check_av_pairs, check_targets, check_waveform


class _SyncArrays(Dataset):
    def __init__(self, pairs, labels):
        self.pairs, self.labels = pairs, labels

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        a, v = self.pairs[i]
        return a, v, int(self.labels[i])


class _MixtureArrays(Dataset):
    def __init__(self, pairs, targets, speaker_labels):
        self.pairs, self.targets, self.speaker_labels = pairs, targets, speaker_labels

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        m, v = self.pairs[i]
        return m, self.targets[i], v, int(self.speaker_labels[i])


def _holdout(n: int, fraction: float, seed: int):
    idx = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    if k == 0 or k == n:
        return idx, idx
    return idx[k:], idx[:k]


def _run(model, pair):
    a, v = pair
    return torch.as_tensor(a)[None], torch.as_tensor(v)[None]


class SyncDetector(ClassifierMixin, BaseEstimator):
    """Binary speech-lip synchronization classifier (label 1 = in sync)."""

    def __init__(
        self,
        config: Optional[SLSynConfig] = None,
        max_steps: Optional[int] = 1000,
        max_epochs: int = 100,
        steps_per_epoch: Optional[int] = 100,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        lr_decay: float = 0.04,
        patience: int = 4,
        validation_fraction: float = 0.1,
        tap: str = "sync3",
        random_state: int = 0,
    ):
        self.config = config
        self.max_steps = max_steps
        self.max_epochs = max_epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.tap = tap
        self.random_state = random_state

    def _plan(self) -> TrainPlan:
        return TrainPlan(
            stages=("pretrain_slsyn",),
            init_lr=self.learning_rate,
            slsyn_lr_decay=self.lr_decay,
            slsyn_patience=self.patience,
            max_epochs=self.max_epochs,
            steps_per_epoch=self.steps_per_epoch,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            seed=self.random_state,
        )

    def fit(self, X, y):
        cfg = self.config or SLSynConfig.toy()
        pairs = check_av_pairs(X, cfg.image_size)
        y = np.asarray(check_targets(y, len(pairs)))
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("sync labels must be 0 or 1")
        seed_everything(self.random_state)
        model = SLSyn(cfg)
        tr, va = _holdout(len(pairs), self.validation_fraction, self.random_state)
        res = train_slsyn(
            model,
            _SyncArrays([pairs[i] for i in tr], y[tr]),
            _SyncArrays([pairs[i] for i in va], y[va]),
            self._plan(),
        )
        if res.best_state is not None:
            model.load_state_dict(res.best_state)
        model.eval()
        self.model_ = model
        self.history_ = res.history
        self.n_steps_ = res.steps
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_model(cls, model: SLSyn, **params) -> "SyncDetector":
        est = cls(config=model.cfg, **params)
        est.model_ = model.eval()
        est.history_, est.n_steps_ = [], 0
        est.classes_ = np.array([0, 1])
        return est

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        pairs = check_av_pairs(X, self.model_.cfg.image_size)
        p = np.empty(len(pairs))
        with torch.no_grad():
            for i, pair in enumerate(pairs):
                y_hat, _ = self.model_(*_run(self.model_, pair))
                p[i] = float(y_hat[0])
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

    def transform(self, X) -> list:
        """Per-clip tap features ``(frames, channels)`` at the configured tap."""
        check_is_fitted(self, "model_")
        if self.tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}")
        pairs = check_av_pairs(X, self.model_.cfg.image_size)
        out = []
        with torch.no_grad():
            for pair in pairs:
                taps = self.model_.trunk(*_run(self.model_, pair), upto=self.tap)
                out.append(taps[self.tap][0].T.numpy())
        return out


class TargetSpeakerExtractor(TransformerMixin, BaseEstimator):
    """Extracts the speaker whose face track accompanies each mixture.

    ``sync_detector`` (a fitted :class:`SyncDetector`) initializes the attractor; with
    ``freeze_attractor`` its sync-network slice stays fixed during training.
    """

    def __init__(
        self,
        config: Optional[ReentryConfig] = None,
        sync_detector: Optional[SyncDetector] = None,
        freeze_attractor: bool = False,
        max_steps: Optional[int] = 500,
        max_epochs: int = 100,
        steps_per_epoch: Optional[int] = 50,
        batch_size: int = 4,
        learning_rate: float = 1e-3,
        truncate_s: Optional[float] = 6.0,
        validation_fraction: float = 0.0,
        random_state: int = 0,
    ):
        self.config = config
        self.sync_detector = sync_detector
        self.freeze_attractor = freeze_attractor
        self.max_steps = max_steps
        self.max_epochs = max_epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.truncate_s = truncate_s
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, speaker_labels: Optional[Sequence[int]] = None):
        cfg = self.config or ReentryConfig.desk()
        pairs = check_av_pairs(X, cfg.slsyn.image_size)
        targets = [check_waveform(t, "target") for t in check_targets(y, len(pairs))]
        for i, ((m, _), t) in enumerate(zip(pairs, targets)):
            if len(m) != len(t):
                raise ValueError(f"mixture {i} and its target differ in length")
        labels = np.full(len(pairs), -1) if speaker_labels is None else np.asarray(speaker_labels)
        if len(labels) != len(pairs):
            raise ValueError("speaker_labels must have one entry per mixture")
        if labels.max(initial=-1) >= cfg.num_classes:
            raise ValueError(f"speaker labels must be < num_classes={cfg.num_classes}")
        seed_everything(self.random_state)
        if self.sync_detector is not None:
            check_is_fitted(self.sync_detector, "model_")
            model = ReentryModel(cfg, self.sync_detector.model_, pretrained=True)
        else:
            model = ReentryModel(cfg)
        if self.freeze_attractor:
            model.attractor.set_frozen(True)
        pairs, targets = _truncate(pairs, targets, self.truncate_s)
        tr, va = _holdout(len(pairs), self.validation_fraction, self.random_state)
        plan = TrainPlan(
            stages=("train_reentry",),
            init_lr=self.learning_rate,
            max_epochs=self.max_epochs,
            steps_per_epoch=self.steps_per_epoch,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            seed=self.random_state,
        )
        res = train_reentry(
            model,
            _MixtureArrays([pairs[i] for i in tr], [targets[i] for i in tr], labels[tr]),
            _MixtureArrays([pairs[i] for i in va], [targets[i] for i in va], labels[va]),
            plan,
        )
        model.eval()
        self.model_ = model
        self.history_ = res.history
        self.step_losses_ = res.step_losses
        self.n_steps_ = res.steps
        return self

    @classmethod
    def from_model(cls, model: ReentryModel, **params) -> "TargetSpeakerExtractor":
        est = cls(config=model.cfg, **params)
        est.model_ = model.eval()
        est.history_, est.step_losses_, est.n_steps_ = [], [], 0
        return est

    def transform(self, X) -> list:
        """Estimated target waveforms, each as long as its input mixture."""
        check_is_fitted(self, "model_")
        pairs = check_av_pairs(X, self.model_.cfg.slsyn.image_size)
        out = []
        with torch.no_grad():
            for pair in pairs:
                s_hat, _ = self.model_(*_run(self.model_, pair))
                out.append(s_hat[0].numpy())
        return out

    def score(self, X, y) -> float:
        """Mean SI-SDR improvement (dB) over the mixtures."""
        est = self.transform(X)
        refs = check_targets(y, len(est))
        gains = [
            metrics.improvement(metrics.si_sdr(e, r), metrics.si_sdr(m, r))
            for e, r, (m, _) in zip(est, refs, X)
        ]
        return float(np.mean(gains))


def _truncate(pairs, targets, seconds: Optional[float]):
    """Crop to whole video frames, and to ``seconds`` when given."""
    frames = None if seconds is None else int(round(seconds * VIDEO_FPS))
    out_p, out_t = [], []
    for (m, v), t in zip(pairs, targets):
        f = min(len(v), len(m) // SAMPLES_PER_FRAME)
        if frames is not None:
            f = min(f, frames)
        n = f * SAMPLES_PER_FRAME
        out_p.append((m[:n], v[:f]))
        out_t.append(t[:n])
    return out_p, out_t
