"""Command line: ``btnet {gen,train,eval,check,ablate}``.

Every subcommand reads an optional INI config (``--config``), applies flag
overrides, and writes the resolved configuration next to its artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .ablation import run_ablation
from .check import FAULTS, run_checks
from .config import RunConfig, apply_overrides, load_config
from .datagen import DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .metrics import roc_summary, write_roc_curve
from .models import MODEL_CLASSES, CheckpointError, ConfigError, build_model, load_checkpoint
from .training import TrainingError, evaluate, train

log = logging.getLogger("btnet")

SPLITS = ("train", "val", "test")
SPLIT_STREAM = {"train": 0, "val": 1, "test": 2}


class CliError(RuntimeError):
    pass


def _split_path(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.data_dir) / f"{split}.bin"


def _load_split(cfg: RunConfig, split: str):
    path = _split_path(cfg, split)
    if not path.is_file():
        raise CliError(f"missing {split} dataset: {path} (run `btnet gen` first)")
    return read_dataset(path)


def _write_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


# --- subcommands ---------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> dict:
    """Write train/val/test splits from disjoint RNG substreams of one seed."""
    cfg = cfg.seeded()
    out = Path(cfg.data_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}") from None
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    written = {}
    for split in SPLITS:
        ds = generate_dataset(cfg.gen, counts[split], stream=SPLIT_STREAM[split])
        path = _split_path(cfg, split)
        try:
            write_dataset(path, ds)
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc}") from None
        written[split] = {"path": str(path), "events": len(ds), "signal": int(ds.label.sum())}
        log.info("wrote %d %s events to %s", len(ds), split, path)
    _write_config(out, cfg)
    summary = {"splits": written, "config": cfg.to_dict()}
    _dump_json(out / "gen_summary.json", summary)
    return summary


def cmd_train(cfg: RunConfig, resume: Path | None = None) -> dict:
    cfg = cfg.seeded()
    train_ds, val_ds = _load_split(cfg, "train"), _load_split(cfg, "val")
    out = Path(cfg.out)
    _write_config(out, cfg)
    model = build_model(cfg.model)
    log.info("training %s (%d parameters) on %d events", cfg.model.label, model.n_params, len(train_ds))
    res = train(model, train_ds, val_ds, cfg.train, out, resume=resume,
                extra_meta={"run_config": cfg.to_dict()})
    summary = {"model": cfg.model.label, "n_params": model.n_params, "best_epoch": res.best_epoch,
               "best_val_loss": res.best_val_loss, "epochs_run": len(res.history),
               "stopped_early": res.stopped_early, "config": cfg.to_dict()}
    _dump_json(out / "train_summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, checkpoint: Path | None = None, untrained: bool = False,
             strict_config: bool = False) -> dict:
    """ROC summary of a checkpoint (or a freshly initialised model) on the test split."""
    out = Path(cfg.out)
    if untrained:
        cfg = cfg.seeded()
        model = build_model(cfg.model)
        source = "untrained"
    else:
        ckpt = Path(checkpoint) if checkpoint is not None else out / "best.ckpt"
        if not ckpt.is_file():
            raise CliError(f"missing checkpoint: {ckpt}")
        model, _, _ = load_checkpoint(ckpt)
        if strict_config and model.cfg.to_dict() != replace(cfg.model, seed=model.cfg.seed).to_dict():
            raise CliError(f"checkpoint {ckpt} was trained with a different model config "
                           f"({model.cfg.label}) than requested ({cfg.model.label})")
        source = str(ckpt)
    test_ds = _load_split(cfg, "test")
    scores, loss = evaluate(model, test_ds, cfg.train.eval_batch_size)
    summ = roc_summary(scores, test_ds.label, tuple(cfg.ablate.efficiencies))
    out.mkdir(parents=True, exist_ok=True)
    write_roc_curve(out / "roc.txt", summ)
    summary = {"model": model.cfg.label, "source": source, "test_events": len(test_ds), "test_loss": loss,
               **{k: (v if v != float("inf") else "inf") for k, v in summ.to_dict().items()},
               "model_config": model.cfg.to_dict(), "config": cfg.to_dict()}
    _dump_json(out / "eval_summary.json", summary)
    return summary


def cmd_check(seed: int = 0, fault: str | None = None, out: Path | None = None) -> tuple[bool, str]:
    report = run_checks(seed=seed, fault=fault)
    text = report.text()
    if fault is not None:
        text = f"[fault injected: {fault}]\n" + text
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "check_report.txt").write_text(text + "\n")
    return report.passed, text


def cmd_ablate(cfg: RunConfig) -> str:
    cfg = cfg.seeded()
    train_ds, val_ds, test_ds = (_load_split(cfg, s) for s in SPLITS)
    out = Path(cfg.out)
    _write_config(out, cfg)
    result = run_ablation(cfg, train_ds, val_ds, test_ds, out)
    return result.table()


# --- argument parsing ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--config", type=Path, help="INI file with [run]/[gen]/[model]/[train]/[ablate] sections")
    p.add_argument("--seed", type=int, help="run seed (required for gen/train/ablate unless set in the config)")
    p.add_argument("--out", type=Path, help="output directory (gen: dataset directory)")
    p.add_argument("--data", type=Path, help="dataset directory (default: [run] data_dir)")
    p.add_argument("--model", choices=MODEL_CLASSES, help="model class")
    p.add_argument("--bilinear", action=argparse.BooleanOptionalAction, default=None, help="bilinear layers")
    p.add_argument("--so2", action=argparse.BooleanOptionalAction, default=None, help="SO(2) jet-axis layers")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btnet", description="Bilinear tensor networks for toy jet tagging")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate train/val/test datasets")
    _common(p)
    p = sub.add_parser("train", help="train one model, keeping the best-validation-loss checkpoint")
    _common(p)
    p.add_argument("--resume", type=Path, help="continue from a last.ckpt")
    p = sub.add_parser("eval", help="ROC/AUC/rejection of a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint (default: OUT/best.ckpt)")
    p.add_argument("--untrained", action="store_true", help="evaluate a freshly initialised model")
    p = sub.add_parser("check", help="equivariance and gradient self-checks")
    _common(p)
    p.add_argument("--inject-fault", choices=FAULTS, help="negative control: the checks must fail")
    p = sub.add_parser("ablate", help="train the model ladder over several seeds")
    _common(p)
    p.add_argument("--n-seeds", type=int, help="runs per configuration")
    p.add_argument("--configs", help="comma-separated ladder labels, e.g. baseline,vector,tensor+BiL+SO2")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out, model=args.model, bilinear=args.bilinear,
                          so2=args.so2, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    if args.data is not None:
        cfg = replace(cfg, data_dir=str(args.data))
    elif args.command == "gen" and args.out is not None:
        cfg = replace(cfg, data_dir=str(args.out))
    if args.command == "ablate":
        ab = cfg.ablate
        if args.n_seeds is not None:
            ab = replace(ab, n_seeds=args.n_seeds)
        if args.configs:
            ab = replace(ab, configs=tuple(c.strip() for c in args.configs.split(",") if c.strip()))
        cfg = replace(cfg, ablate=ab)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            summary = cmd_gen(cfg)
            for split, info in summary["splits"].items():
                print(f"{split}: {info['events']} events ({info['signal']} signal) -> {info['path']}")
        elif args.command == "train":
            s = cmd_train(cfg, args.resume)
            print(f"{s['model']}: best epoch {s['best_epoch']} val loss {s['best_val_loss']:.6g} -> {cfg.out}")
        elif args.command == "eval":
            explicit = args.config is not None or any(x is not None for x in (args.model, args.bilinear, args.so2))
            s = cmd_eval(cfg, args.checkpoint, args.untrained, strict_config=explicit)
            print(f"{s['model']}: AUC {s['auc']:.4f}  "
                  + "  ".join(f"{k} {s[k]}" for k in s if k.startswith("R")) + f"  -> {cfg.out}")
        elif args.command == "check":
            ok, text = cmd_check(cfg.seed or 0, args.inject_fault, args.out)
            print(text)
            return 0 if ok else 1
        elif args.command == "ablate":
            print(cmd_ablate(cfg))
    except (CliError, ConfigError, CheckpointError, DatasetFormatError, TrainingError) as exc:
        print(f"btnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
