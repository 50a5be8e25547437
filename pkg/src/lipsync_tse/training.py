"""Three-stage training: sync pre-training, extractor training with a frozen attractor,
joint fine-tuning. Learning-rate schedules, datasets, loops and checkpoints."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from .datasim import Corpus, SAMPLES_PER_FRAME, render_mixture, render_sync_sample
from .losses import LossWeights, bce_sync_loss, si_sdr_loss, speaker_ce_loss, total_loss
from .reentry import ReentryConfig, ReentryModel
from .slsyn import SLSyn, SLSynConfig, normalize_video, sync_accuracy

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lipsync-tse/1"
STAGES = ("pretrain_slsyn", "train_frozen_attractor", "train_reentry", "finetune_all")


# --------------------------------------------------------------------------- schedules


def exponential_lr(epoch: int, init_lr: float = 1e-3, decay: float = 0.04) -> float:
    """Learning rate decreasing by ``decay`` (4%) every epoch."""
    return init_lr * (1.0 - decay) ** epoch


class EarlyStopping:
    """Counts consecutive epochs without a strict improvement of the best validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when the loss improved."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience

    def state_dict(self) -> dict:
        return {"best": self.best, "bad_epochs": self.bad_epochs, "patience": self.patience}

    def load_state_dict(self, d: dict) -> None:
        self.best, self.bad_epochs, self.patience = d["best"], d["bad_epochs"], d["patience"]


class PlateauHalving(EarlyStopping):
    """Halve the learning rate after ``halve_patience`` stagnant epochs, stop after ``patience``."""

    def __init__(self, halve_patience: int = 6, patience: int = 10):
        super().__init__(patience)
        self.halve_patience = halve_patience

    @property
    def should_halve(self) -> bool:
        return self.bad_epochs == self.halve_patience

    def state_dict(self) -> dict:
        d = super().state_dict()
        d["halve_patience"] = self.halve_patience
        return d

    def load_state_dict(self, d: dict) -> None:
        super().load_state_dict(d)
        self.halve_patience = d["halve_patience"]


def plateau_trace(
    val_losses: Sequence[float], init_lr: float = 1e-3, halve_patience: int = 6, patience: int = 10
) -> tuple:
    """Learning rate used in each epoch and the epoch after which training stops (or None)."""
    sched = PlateauHalving(halve_patience, patience)
    lr, lrs = init_lr, []
    for epoch, v in enumerate(val_losses):
        lrs.append(lr)
        sched.update(v)
        if sched.should_stop:
            return lrs, epoch
        if sched.should_halve:
            lr /= 2
    return lrs, None


def exponential_trace(
    val_losses: Sequence[float], init_lr: float = 1e-3, decay: float = 0.04, patience: int = 4
) -> tuple:
    stop = EarlyStopping(patience)
    lrs = []
    for epoch, v in enumerate(val_losses):
        lrs.append(exponential_lr(epoch, init_lr, decay))
        stop.update(v)
        if stop.should_stop:
            return lrs, epoch
    return lrs, None


# --------------------------------------------------------------------------- plans


@dataclass
class TrainPlan:
    stages: tuple = ("pretrain_slsyn", "train_frozen_attractor", "finetune_all")
    init_lr: float = 1e-3
    slsyn_lr_decay: float = 0.04
    slsyn_patience: int = 4
    halve_patience: int = 6
    stop_patience: int = 10
    max_epochs: int = 100
    steps_per_epoch: Optional[int] = None
    max_steps: Optional[int] = None
    truncate_s: float = 6.0
    batch_size: int = 4
    seed: int = 0
    init_attractor: bool = True
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.stages = tuple(self.stages)
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}; expected one of {STAGES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)


def ablation_plans(**common) -> Dict[str, TrainPlan]:
    """The four training strategies: no pre-training, init only, init + freeze, full 3-stage."""
    return {
        "expt1_no_pretrain": TrainPlan(stages=("train_reentry",), init_attractor=False, **common),
        "expt2_init": TrainPlan(stages=("pretrain_slsyn", "train_reentry"), **common),
        "expt3_init_fix": TrainPlan(stages=("pretrain_slsyn", "train_frozen_attractor"), **common),
        "expt4_three_stage": TrainPlan(
            stages=("pretrain_slsyn", "train_frozen_attractor", "finetune_all"), **common
        ),
    }


# --------------------------------------------------------------------------- data


class SyncDataset(Dataset):
    def __init__(self, manifest: List[dict], corpus: Corpus):
        self.manifest = manifest
        self.corpus = corpus

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, i):
        audio, video, label = render_sync_sample(self.manifest[i], self.corpus)
        return audio, normalize_video(video), label


class MixtureDataset(Dataset):
    """Rendered mixtures, truncated to ``max_len_s`` (None for full utterances)."""

    def __init__(self, manifest: List[dict], corpus: Corpus, max_len_s: Optional[float] = None):
        self.manifest = manifest
        self.corpus = corpus
        self.max_len_s = max_len_s

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, i):
        e = self.manifest[i]
        r = render_mixture(e, self.corpus, self.max_len_s)
        return r["mixture"], r["target"], normalize_video(r["video"]), int(e.get("speaker_label", -1))


def collate_sync(items):
    frames = min(len(v) for _, v, _ in items)
    n = frames * SAMPLES_PER_FRAME
    audio = torch.stack([torch.as_tensor(a[:n]) for a, _, _ in items])
    video = torch.stack([torch.as_tensor(v[:frames]) for _, v, _ in items])
    labels = torch.tensor([float(l) for _, _, l in items])
    return audio, video, labels


def collate_mixture(items):
    frames = min(len(v) for _, _, v, _ in items)
    n = frames * SAMPLES_PER_FRAME
    mix = torch.stack([torch.as_tensor(m[:n]) for m, _, _, _ in items])
    tgt = torch.stack([torch.as_tensor(t[:n]) for _, t, _, _ in items])
    video = torch.stack([torch.as_tensor(v[:frames]) for _, _, v, _ in items])
    labels = torch.tensor([l for _, _, _, l in items], dtype=torch.long)
    return mix, tgt, video, labels


def batches(dataset: Dataset, batch_size: int, collate, rng: Optional[np.random.Generator] = None):
    order = np.arange(len(dataset))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield collate([dataset[j] for j in order[i : i + batch_size]])


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def set_single_thread() -> None:
    torch.set_num_threads(1)


# --------------------------------------------------------------------------- loss helpers


def reentry_loss(model: ReentryModel, mix, tgt, video, labels) -> tuple:
    """Total multi-task loss and its parts for one batch."""
    s_hat, out = model(mix, video)
    sisdr = si_sdr_loss(s_hat, tgt)
    cfg = model.cfg
    valid = labels >= 0
    ce = []
    if out.logits:
        for logit in out.logits:
            ce.append(speaker_ce_loss(logit[valid], labels[valid]) if bool(valid.any()) else logit.sum() * 0)
    else:
        ce = [sisdr.new_zeros(()) for _ in range(cfg.R - 1)]
    loss = total_loss(sisdr, ce, LossWeights(cfg.gamma, cfg.R))
    return loss, sisdr, ce


class DivergenceError(FloatingPointError):
    pass


def _check_finite(loss: torch.Tensor, where: str, dump: Optional[Callable[[], None]] = None):
    if not bool(torch.isfinite(loss)):
        if dump is not None:
            dump()
        raise DivergenceError(f"non-finite loss at {where}")


# --------------------------------------------------------------------------- loops


@dataclass
class TrainResult:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    history: List[dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    best_val: float = math.inf
    best_state: Optional[dict] = None
    epochs: int = 0
    steps: int = 0


def _epoch_iter(dataset, plan: TrainPlan, collate, rng):
    """Batches for one epoch: a full shuffled pass, or ``steps_per_epoch`` batches drawn cyclically."""
    if plan.steps_per_epoch is None:
        yield from batches(dataset, plan.batch_size, collate, rng)
        return
    produced = 0
    while produced < plan.steps_per_epoch:
        for b in batches(dataset, plan.batch_size, collate, rng):
            yield b
            produced += 1
            if produced >= plan.steps_per_epoch:
                return


def evaluate_sync(model: SLSyn, dataset: Dataset, batch_size: int = 8) -> tuple:
    """Mean BCE and accuracy (threshold 0.5) over a sync dataset."""
    if len(dataset) == 0:
        raise ValueError("empty sync manifest")
    model.eval()
    ys, ls, losses = [], [], []
    with torch.no_grad():
        for audio, video, labels in batches(dataset, batch_size, collate_sync):
            y_hat, _ = model(audio, video)
            losses.append(float(bce_sync_loss(y_hat, labels)) * len(labels))
            ys.append(y_hat.numpy())
            ls.append(labels.numpy())
    y = np.concatenate(ys)
    lab = np.concatenate(ls)
    return sum(losses) / len(lab), sync_accuracy(y, lab)


def train_slsyn(
    model: SLSyn,
    train: Dataset,
    val: Dataset,
    plan: TrainPlan,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Adam, lr = init * 0.96^epoch, stop after ``slsyn_patience`` epochs without improvement."""
    rng = np.random.default_rng(plan.seed)
    opt = torch.optim.Adam(model.parameters(), lr=plan.init_lr)
    stop = EarlyStopping(plan.slsyn_patience)
    res = TrainResult(model, opt)
    for epoch in range(plan.max_epochs):
        lr = exponential_lr(epoch, plan.init_lr, plan.slsyn_lr_decay)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        for audio, video, labels in _epoch_iter(train, plan, collate_sync, rng):
            y_hat, _ = model(audio, video)
            loss = bce_sync_loss(y_hat, labels)
            _check_finite(loss, f"sync pre-training epoch {epoch} step {res.steps}")
            opt.zero_grad()
            loss.backward()
            if plan.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), plan.grad_clip)
            opt.step()
            res.steps += 1
            res.step_losses.append(loss.item())
            if on_step:
                on_step(res.steps, loss.item())
            if plan.max_steps and res.steps >= plan.max_steps:
                break
        val_loss, val_acc = evaluate_sync(model, val)
        improved = stop.update(val_loss)
        if improved:
            res.best_val = val_loss
            res.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        res.history.append({"epoch": epoch, "lr": lr, "val_loss": val_loss, "val_acc": val_acc})
        res.epochs = epoch + 1
        log.info("sync epoch %d lr %.3g val_loss %.4f val_acc %.3f", epoch, lr, val_loss, val_acc)
        if stop.should_stop or (plan.max_steps and res.steps >= plan.max_steps):
            break
    return res


def evaluate_reentry(model: ReentryModel, dataset: Dataset, batch_size: int = 4) -> dict:
    model.eval()
    total, sisdr, n = 0.0, 0.0, 0
    with torch.no_grad():
        for mix, tgt, video, labels in batches(dataset, batch_size, collate_mixture):
            loss, l_sisdr, _ = reentry_loss(model, mix, tgt, video, labels)
            total += loss.item() * len(mix)
            sisdr += float(l_sisdr) * len(mix)
            n += len(mix)
    return {"loss": total / n, "si_sdr_loss": sisdr / n}


def train_reentry(
    model: ReentryModel,
    train: Dataset,
    val: Dataset,
    plan: TrainPlan,
    on_step: Optional[Callable[[int, float], None]] = None,
    dump: Optional[Callable[[], None]] = None,
) -> TrainResult:
    """Adam on trainable parameters; halve lr after 6 stagnant epochs, stop after 10."""
    rng = np.random.default_rng(plan.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=plan.init_lr)
    sched = PlateauHalving(plan.halve_patience, plan.stop_patience)
    res = TrainResult(model, opt)
    for epoch in range(plan.max_epochs):
        model.train()
        for mix, tgt, video, labels in _epoch_iter(train, plan, collate_mixture, rng):
            where = f"extractor training epoch {epoch} step {res.steps}"
            try:
                loss, _, _ = reentry_loss(model, mix, tgt, video, labels)
            except FloatingPointError as e:
                if dump is not None:
                    dump()
                raise DivergenceError(f"{e} at {where}") from e
            _check_finite(loss, where, dump)
            opt.zero_grad()
            loss.backward()
            if plan.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, plan.grad_clip)
            opt.step()
            res.steps += 1
            res.step_losses.append(loss.item())
            if on_step:
                on_step(res.steps, loss.item())
            if plan.max_steps and res.steps >= plan.max_steps:
                break
        scores = evaluate_reentry(model, val, plan.batch_size)
        lr = opt.param_groups[0]["lr"]
        if sched.update(scores["loss"]):
            res.best_val = scores["loss"]
            res.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        res.history.append({"epoch": epoch, "lr": lr, "val_loss": scores["loss"], "val_si_sdr_loss": scores["si_sdr_loss"]})
        res.epochs = epoch + 1
        log.info("extractor epoch %d lr %.3g val_loss %.4f", epoch, lr, scores["loss"])
        if sched.should_stop or (plan.max_steps and res.steps >= plan.max_steps):
            break
        if sched.should_halve:
            for g in opt.param_groups:
                g["lr"] /= 2
    return res


# --------------------------------------------------------------------------- checkpoints


def make_checkpoint(kind: str, stage: str, model, cfg, plan: TrainPlan, result: Optional[TrainResult] = None, **extra) -> dict:
    ck = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "stage": stage,
        "config": cfg.to_dict(),
        "plan": plan.to_dict(),
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer_state": result.optimizer.state_dict() if result else None,
        "epoch": result.epochs if result else 0,
        "steps": result.steps if result else 0,
        "best_val": result.best_val if result else None,
        "history": result.history if result else [],
        "step_losses": result.step_losses if result else [],
    }
    if kind == "reentry":
        ck["attractor_pretrained"] = bool(model.attractor.pretrained)
    ck.update(extra)
    return ck


def save_checkpoint(ck: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(ck, path)


def load_checkpoint(path) -> dict:
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ck, dict) or ck.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    return ck


def model_from_checkpoint(ck: dict):
    if ck["kind"] == "slsyn":
        model = SLSyn(SLSynConfig.from_dict(ck["config"]))
    elif ck["kind"] == "reentry":
        model = ReentryModel(
            ReentryConfig.from_dict(ck["config"]), pretrained=ck.get("attractor_pretrained", False)
        )
    else:
        raise ValueError(f"unknown checkpoint kind {ck['kind']!r}")
    model.load_state_dict(ck["model_state"])
    model.eval()
    return model


# --------------------------------------------------------------------------- stages


@dataclass
class StageData:
    corpus: Corpus
    sync_train: List[dict] = field(default_factory=list)
    sync_val: List[dict] = field(default_factory=list)
    mix_train: List[dict] = field(default_factory=list)
    mix_val: List[dict] = field(default_factory=list)


def _require(prev: Optional[dict], kind: str, stages: Sequence[str], stage: str) -> dict:
    if prev is None or prev.get("kind") != kind or prev.get("stage") not in stages:
        raise RuntimeError(
            f"stage {stage!r} requires a checkpoint from stage {' or '.join(stages)}"
        )
    return prev


def run_stage(
    plan: TrainPlan,
    stage: str,
    config: ReentryConfig,
    data: StageData,
    prev: Optional[dict] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
    dump_path: Optional[Path] = None,
) -> dict:
    """Run one training stage and return its checkpoint."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    seed_everything(plan.seed)
    trunc = plan.truncate_s
    if stage == "pretrain_slsyn":
        model = SLSyn(config.slsyn)
        res = train_slsyn(
            model, SyncDataset(data.sync_train, data.corpus), SyncDataset(data.sync_val, data.corpus), plan, on_step
        )
        if res.best_state is not None:
            model.load_state_dict(res.best_state)
        _, acc = evaluate_sync(model, SyncDataset(data.sync_val, data.corpus))
        return make_checkpoint("slsyn", stage, model, config.slsyn, plan, res, val_accuracy=acc)

    if stage in ("train_frozen_attractor", "train_reentry"):
        if stage == "train_frozen_attractor" or plan.init_attractor:
            ck = _require(prev, "slsyn", ("pretrain_slsyn",), stage)
            slsyn = SLSyn(SLSynConfig.from_dict(ck["config"]))
            slsyn.load_state_dict(ck["model_state"])
            if slsyn.cfg != config.slsyn:
                raise ValueError("pre-trained sync network does not match the extractor config")
            model = ReentryModel(config, slsyn, pretrained=True)
        else:
            model = ReentryModel(config)
        model.attractor.set_frozen(stage == "train_frozen_attractor")
    else:  # finetune_all
        ck = _require(prev, "reentry", ("train_frozen_attractor",), stage)
        model = model_from_checkpoint(ck)
        model.attractor.set_frozen(False)

    def dump():
        if dump_path is not None:
            save_checkpoint(make_checkpoint("reentry", stage, model, config, plan, diverged=True), dump_path)

    res = train_reentry(
        model,
        MixtureDataset(data.mix_train, data.corpus, trunc),
        MixtureDataset(data.mix_val, data.corpus, None),
        plan,
        on_step,
        dump,
    )
    if res.best_state is not None:
        model.load_state_dict(res.best_state)
    return make_checkpoint("reentry", stage, model, config, plan, res)


def run_plan(plan: TrainPlan, config: ReentryConfig, data: StageData, out_dir: Optional[Path] = None) -> Dict[str, dict]:
    """Execute the plan's stages in order, each feeding its checkpoint to the next."""
    out: Dict[str, dict] = {}
    prev = None
    for stage in plan.stages:
        ck = run_stage(plan, stage, config, data, prev,
                       dump_path=(Path(out_dir) / f"{stage}.diverged.pt") if out_dir else None)
        if out_dir is not None:
            save_checkpoint(ck, Path(out_dir) / f"{stage}.pt")
        out[stage] = ck
        prev = ck
    return out
