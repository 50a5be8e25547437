"""Command-line entry point: ``lipsync-tse <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config
from .datasim import (
    Corpus,
    add_occlusions,
    build_mixture_manifest,
    build_sync_manifest,
    gen_synthetic_av,
    label_map,
    split_speakers,
)
from .evaluation import evaluate, format_report, read_report, write_report
from .metrics import score_triples
from .slsyn import check_durations
from .training import (
    StageData,
    load_checkpoint,
    model_from_checkpoint,
    run_stage,
    save_checkpoint,
    seed_everything,
    set_single_thread,
)
from .validation import check_av_pair

log = logging.getLogger("lipsync_tse")

MANIFESTS = ("sync_train", "sync_val", "mix_train", "mix_val", "mix_test", "mix_test_occluded")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.plan.seed = args.seed
    return cfg


def _corpus_dir(data: Path) -> Path:
    return io.corpus_root(data / "corpus")


def _load_data(data: Path) -> StageData:
    data = Path(data)
    if not data.is_dir():
        raise FileNotFoundError(f"data directory not found: {data}")
    corpus = Corpus.load(_corpus_dir(data))

    def manifest(name):
        path = data / f"{name}.jsonl"
        return io.read_jsonl(path) if path.exists() else []

    return StageData(
        corpus,
        sync_train=manifest("sync_train"),
        sync_val=manifest("sync_val"),
        mix_train=manifest("mix_train"),
        mix_val=manifest("mix_val"),
    )


def _stage(args, stage: str, prev: Optional[dict]) -> int:
    cfg = _config(args)
    set_single_thread()
    data = _load_data(args.data)
    needed = ("sync_train", "sync_val") if stage == "pretrain_slsyn" else ("mix_train", "mix_val")
    for name in needed:
        if not getattr(data, name):
            raise FileNotFoundError(f"{args.data}: missing or empty {name}.jsonl")
    out = Path(args.out)
    ck = run_stage(
        cfg.plan, stage, cfg.model, data, prev,
        on_step=lambda s, l: log.debug("step %d loss %.4f", s, l),
        dump_path=out.with_suffix(".diverged.pt"),
    )
    save_checkpoint(ck, out)
    best = ck.get("best_val")
    print(f"{stage}: {ck['steps']} steps, {ck['epoch']} epochs, best val loss {best:.4f} -> {out}")
    return 0


# --------------------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = cfg.plan.seed
    sizes = cfg.sizes
    out = Path(args.out)
    corpus = gen_synthetic_av(cfg.synth, seed)
    corpus.save(out / "corpus")
    train_spk, val_spk, test_spk = split_speakers(corpus.speakers(), sizes.split, seed)
    labels = label_map(train_spk)
    train, val, test = (corpus.subset(s) for s in (train_spk, val_spk, test_spk))
    manifests = {
        "sync_train": build_sync_manifest(train, sizes.n_sync_train, seed, sizes.clip_len_s, prefix="sync-train"),
        "sync_val": build_sync_manifest(val, sizes.n_sync_val, seed + 1, sizes.clip_len_s, prefix="sync-val"),
        "mix_train": build_mixture_manifest(train, sizes.n_mix_train, sizes.n_interferers, seed + 2, labels, prefix="mix-train"),
        "mix_val": build_mixture_manifest(val, sizes.n_mix_val, sizes.n_interferers, seed + 3, labels, prefix="mix-val"),
        "mix_test": build_mixture_manifest(test, sizes.n_mix_test, sizes.n_interferers, seed + 4, labels, prefix="mix-test"),
    }
    manifests["mix_test_occluded"] = add_occlusions(manifests["mix_test"], seed + 5)
    for name, entries in manifests.items():
        io.write_jsonl(out / f"{name}.jsonl", entries)
    (out / "splits.json").write_text(
        json.dumps({"train": train_spk, "val": val_spk, "test": test_spk, "labels": labels}, indent=2) + "\n"
    )
    print(f"wrote {len(corpus)} utterances and {len(manifests)} manifests to {out}")
    return 0


def cmd_pretrain(args) -> int:
    return _stage(args, "pretrain_slsyn", None)


def cmd_train(args) -> int:
    cfg = _config(args)
    prev = load_checkpoint(args.init) if args.init else None
    stage = "train_frozen_attractor" if "train_frozen_attractor" in cfg.plan.stages else "train_reentry"
    if args.stage:
        stage = args.stage
    return _stage(args, stage, prev)


def cmd_finetune(args) -> int:
    return _stage(args, "finetune_all", load_checkpoint(args.init))


def cmd_infer(args) -> int:
    set_single_thread()
    ck = load_checkpoint(args.checkpoint)
    if ck["kind"] != "reentry":
        raise UsageError("infer needs an extraction-model checkpoint")
    model = model_from_checkpoint(ck)
    audio = io.read_wav(args.audio)
    video = io.read_face_track(args.video)
    check_durations(len(audio), len(video))
    a, v = check_av_pair(audio, video, model.cfg.slsyn.image_size)
    from .evaluation import model_separator

    est = model_separator(model)(a, v)
    io.write_wav(args.out, est)
    print(f"wrote {len(est)} samples to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    set_single_thread()
    ck = load_checkpoint(args.checkpoint)
    if ck["kind"] != "reentry":
        raise UsageError("evaluate needs an extraction-model checkpoint")
    manifest_path = Path(args.manifest)
    root = io.corpus_root(args.corpus or manifest_path.parent / "corpus")
    corpus = Corpus.load(root)
    report = evaluate(
        model_from_checkpoint(ck), io.read_jsonl(manifest_path), corpus,
        meta={"checkpoint": str(args.checkpoint), "manifest": str(manifest_path), "stage": ck["stage"]},
    )
    write_report(report, args.out)
    print(format_report(report))
    return 0


def cmd_report(args) -> int:
    report = read_report(args.report)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(format_report(report))
    return 0


def cmd_score(args) -> int:
    records = score_triples(io.read_jsonl(args.manifest), args.root)
    if args.out:
        io.write_jsonl(args.out, records)
    for r in records:
        print(f"{r['sample_id']}\tSI-SDR {r['si_sdr']:.3f}\tSI-SDRi {r['si_sdri']:.3f}\tSDR {r['sdr']:.3f}\tSDRi {r['sdri']:.3f}")
    if records:
        print(f"mean SI-SDRi {np.mean([r['si_sdri'] for r in records]):.3f} dB over {len(records)} utterances")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipsync-tse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("simulate", cmd_simulate, "generate a synthetic corpus and manifests")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "stage 1: sync-network pre-training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "stage 2: extractor training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", help="stage-1 checkpoint")
    sp.add_argument("--stage", choices=("train_frozen_attractor", "train_reentry"))
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "stage 3: joint fine-tuning")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True, help="stage-2 checkpoint")
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "extract the target speaker from one mixture")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--video", required=True, help="face-track directory")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score a checkpoint on a mixture manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", help="corpus root (default: <manifest dir>/corpus)")
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "print a saved evaluation report")
    sp.add_argument("--report", required=True)
    sp.add_argument("--json", action="store_true")

    sp = add("score", cmd_score, "score estimate/reference/mixture WAV triples")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root")
    sp.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command != "report":
            seed_everything(args.seed if args.seed is not None else 0)
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        parser.print_usage(sys.stderr)
        print(f"lipsync-tse {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as e:
        print(f"lipsync-tse {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
