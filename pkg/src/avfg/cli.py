"""Command-line entry point: ``avfg <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .fileformat import FormatError
from .pseudofake import augment_pair
from .synthdata import SPLITS, ClipPair, SeededCorpus, build_corpus, load_split, write_clip
from .train import (
    NumericError,
    ablation_grid,
    evaluate,
    export_histograms,
    export_maps,
    load_checkpoint,
    run_ablation_suite,
    train,
)

log = logging.getLogger("avfg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-corpus", "augment", "train", "eval", "ablate", "export-maps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=("desk", "paper"))
    common.add_argument("--out", type=Path, default=Path("avfg-out"), help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    common.add_argument("--grid", help="ablation grid (ablate only)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")

    parser = _Parser(prog="avfg", description="Audio-visual inconsistency detector on synthetic clips.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "gen-corpus": "write the synthetic corpus (clip files and manifest)",
        "augment": "write pseudo-fake versions of the training clips",
        "train": "train a detector and save the best checkpoint",
        "eval": "score a split with a checkpoint and print the AUC",
        "ablate": "run an ablation grid and write a results CSV",
        "export-maps": "export distance, attention and fused maps",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _workers() -> int:
    raw = os.environ.get("AVFG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AVFG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"AVFG_THREADS must be a positive integer, got {raw!r}")
    return n


def _splits(cfg: RunConfig, names=SPLITS) -> dict[str, list[ClipPair]]:
    corpus_dir = cfg["corpus.dir"]
    if not corpus_dir:
        return SeededCorpus(cfg.corpus_spec())(cfg.seed)
    model = cfg.model_config()
    want_a = (model.audio_len, model.audio_channels)
    want_v = (model.frames, model.visual_channels, model.height, model.width)
    out = {}
    for name in names:
        clips = load_split(corpus_dir, name)
        for c in clips:
            if c.audio.shape != want_a or c.visual.shape != want_v:
                raise ValueError(
                    f"{c.clip_id}: shapes {c.audio.shape}/{c.visual.shape} do not match the "
                    f"{cfg['preset']} preset {want_a}/{want_v}"
                )
        out[name] = clips
    return out


def _checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["eval.checkpoint"]) if cfg["eval.checkpoint"] else out / "checkpoint.avfc"


# -- subcommands -----------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig, out: Path, args) -> None:
    manifest = build_corpus(cfg.corpus_spec(), out)
    counts = {s: sum(1 for c in manifest["clips"] if c["split"] == s) for s in SPLITS}
    print(" ".join(f"{s}={n}" for s, n in counts.items()))


def cmd_augment(cfg: RunConfig, out: Path, args) -> None:
    clips = _splits(cfg, ("train",))["train"]
    rng = np.random.default_rng([cfg.seed, 2])
    aug = cfg.augment_config()
    (out / "clips").mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out / "augment.jsonl", "w") as fh:
        for i, clip in enumerate(clips):
            j = int(rng.integers(len(clips) - 1))
            donor = clips[j + (j >= i)]
            new, label, spec = augment_pair(clip, donor, aug, rng)
            if spec is None:
                continue
            rel = f"clips/{new.clip_id}.avfg"
            write_clip(out / rel, new)
            fh.write(json.dumps({"id": new.clip_id, "source": clip.clip_id, "label": label, "file": rel, **spec.to_dict()}))
            fh.write("\n")
            n += 1
    print(f"pseudo_fakes={n} of {len(clips)}")


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    clips = _splits(cfg, ("train",))["train"]
    result = train(cfg.train_config(), clips, out_dir=out, log_path=out / "train_log.jsonl")
    print(f"best_epoch={result.best_epoch} best_loss={result.best_loss!r} checkpoint={result.checkpoint}")


def _eval_report(cfg: RunConfig, out: Path, split: str):
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run train first or set eval.checkpoint")
    detector, _ = load_checkpoint(ckpt)
    clips = _splits(cfg, (split,))[split]
    return detector, clips, evaluate(detector, clips, {"checkpoint": str(ckpt), "split": split})


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    split = cfg["eval.split"]
    _, _, report = _eval_report(cfg, out, split)
    with open(out / f"scores_{split}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "label", "score", "mean_fused"])
        for row in zip(report.clip_ids, report.labels, report.scores, report.mean_fused):
            w.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3]))])
    export_histograms(report, out / f"histogram_{split}.csv")
    print(f"auc={report.auc!r}")


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    cells = ablation_grid(args.grid or cfg["ablate.grid"])
    seeds = list(cfg["ablate.seeds"])
    if cfg["corpus.dir"]:
        fixed = _splits(cfg)

        def splits_for(seed):
            return fixed

        workers = 1  # a local closure cannot be shipped to worker processes
    else:
        splits_for = SeededCorpus(cfg.corpus_spec())
        workers = _workers()
    rows = run_ablation_suite(cells, cfg.train_config(), seeds, splits_for, out / "results.csv", workers)
    for r in rows:
        print(f"{r['row']} seed={r['seed']} auc_test={r['auc_test']:.4f} auc_shift={r['auc_shift']:.4f}")


def cmd_export_maps(cfg: RunConfig, out: Path, args) -> None:
    split = cfg["export.split"]
    detector, clips, report = _eval_report(cfg, out, split)
    written = export_maps(detector, clips[: cfg["export.limit"]], out / "maps")
    export_histograms(report, out / f"histogram_{split}.csv")
    print(f"maps={len(written)} dir={out / 'maps'}")


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-maps": cmd_export_maps,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(build_parser().format_usage() + "avfg: error: a subcommand is required")
        if args.grid is not None and args.command != "ablate":
            raise UsageError(f"avfg {args.command}: error: --grid only applies to ablate")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.resolve(args.config, args.overrides, args.seed, args.preset)
        if args.grid is not None:
            ablation_grid(args.grid)  # validates the name
        _workers()
        if args.dry_run:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(out)
        HANDLERS[args.command](cfg, out, args)
    except NumericError as exc:
        print(f"avfg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"avfg: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
