"""Command-line workflows: gen-data, train, infer, eval.

Exit status is 0 on success, 1 on validation errors (bad arguments,
config, or inputs) and 2 on runtime failures.  Logs go to stderr; reports
and volumes go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import gen_phantom, labels_to_channels, normalize
from .inference import channels_to_labels, ensemble_predict
from .io import (FormatError, load_checkpoint, load_config, model_config, read_rvol,
                 resolve_config, save_checkpoint, write_rvol)
from .losses import LossWeights
from .metrics import CLASSES, case_metrics, mean_report
from .model import ConfigError, build_model
from .optim import AdamState, Schedule, train_epoch

log = logging.getLogger("vaeseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def case_name(path: Path) -> str:
    return path.name.split(".", 1)[0]


# ----------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> None:
    if args.size < 16 or args.size % 8:
        raise UsageError(f"--size must be a multiple of 8 and >= 16, got {args.size}")
    if args.count < 1:
        raise UsageError("--count must be positive")
    log.info("gen-data config %s", _dump(vars_of(args)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(args.count):
        seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        image, labels = gen_phantom(seed, args.size, args.difficulty)
        name = f"case_{i:03d}"
        write_rvol(out / f"{name}.img.rvol", image, "image")
        write_rvol(out / f"{name}.lbl.rvol", labels, "labels")
        cases.append(name)
    manifest = {"cases": cases, "size": args.size, "seed": args.seed,
                "difficulty": args.difficulty}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(directory) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(name, normalized image, target channels) for every case in a gen-data directory."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["cases"]
    else:
        names = sorted(case_name(p) for p in directory.glob("*.img.rvol"))
    if not names:
        raise UsageError(f"no cases found in {directory}")
    out = []
    for name in names:
        image, _ = read_rvol(directory / f"{name}.img.rvol")
        labels, _ = read_rvol(directory / f"{name}.lbl.rvol")
        if image.shape[1:] != labels.shape:
            raise FormatError(f"{name}: image and label shapes differ")
        out.append((name, normalize(image), labels_to_channels(labels)))
    return out


# ----------------------------------------------------------------------
# train


def cmd_train(args) -> None:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = resolve_config(ckpt.config, overrides)
    else:
        cfg = load_config(args.config, overrides) if args.config else resolve_config(None, overrides)
    mcfg = model_config(cfg)
    train_dir = Path(cfg["data.train_dir"])
    if not cfg["data.train_dir"] or not train_dir.is_dir():
        raise UsageError(f"data.train_dir {cfg['data.train_dir']!r} does not exist")
    if cfg["data.val_dir"] and not Path(cfg["data.val_dir"]).is_dir():
        raise UsageError(f"data.val_dir {cfg['data.val_dir']!r} does not exist")
    dataset = [(img, tgt) for _, img, tgt in load_dataset(train_dir)]
    schedule = Schedule(cfg["train.alpha0"], cfg["train.epochs"])
    weights = LossWeights(cfg["train.w_l2"], cfg["train.w_kl"], l2_reduction=cfg["train.l2_reduction"])

    resolved = _dump(cfg)
    log.info("train config %s", resolved)
    print(resolved, file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")

    if args.resume:
        model, state, start = ckpt.model, ckpt.adam or AdamState(), ckpt.epoch
        if model.config != mcfg:
            raise UsageError("overrides change the model architecture of the resumed checkpoint")
    else:
        model, state, start = build_model(mcfg, cfg["train.init_seed"]), AdamState(), 0

    every = max(1, cfg["train.checkpoint_every"])
    log_path = out / "train_log.jsonl"
    with open(log_path, "a" if args.resume else "w") as logf:
        for epoch in range(start, schedule.total_epochs):
            stats = train_epoch(model, dataset, state, schedule, epoch, cfg["train.seed"], weights,
                                cfg["train.weight_decay"], augment_data=cfg["train.augment"])
            row = {"epoch": epoch, "lr": stats.lr, "dice_loss": stats.dice, "l2": stats.l2,
                   "kl": stats.kl, "total": stats.total}
            logf.write(_dump(row) + "\n")
            logf.flush()
            log.info("epoch %d lr %.6g dice %.4f l2 %.4f kl %.4g total %.4f",
                     epoch, stats.lr, stats.dice, stats.l2, stats.kl, stats.total)
            done = epoch + 1
            if done % every == 0 and done < schedule.total_epochs:
                save_checkpoint(out / f"epoch_{done:04d}.ckpt", cfg, model, done, state)
    save_checkpoint(out / "final.ckpt", cfg, model, schedule.total_epochs, state)


# ----------------------------------------------------------------------
# infer


def cmd_infer(args) -> None:
    if not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    log.info("infer config %s", _dump(vars_of(args)))
    models = [load_checkpoint(p).model for p in args.ckpt]
    cfg0 = models[0].config
    for path, m in zip(args.ckpt, models):
        if m.config != cfg0:
            raise UsageError(f"checkpoint {path} has an incompatible model configuration")
    image, head = read_rvol(args.input)
    if head.get("kind") != "image":
        raise FormatError(f"{args.input} is not an image volume")
    probs = ensemble_predict(models, normalize(image), use_tta=args.tta)
    write_rvol(args.out, channels_to_labels(probs, args.threshold), "labels")


# ----------------------------------------------------------------------
# eval


def _label_files(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.glob("*.rvol")):
        if p.name.endswith(".img.rvol"):
            continue
        files[case_name(p)] = p
    return files


def cmd_eval(args) -> None:
    log.info("eval config %s", _dump(vars_of(args)))
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    preds, gts = _label_files(pred_dir), _label_files(gt_dir)
    if not preds:
        raise UsageError(f"no label files in {pred_dir}")
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise UsageError(f"cases without a counterpart: {missing}")
    cases = {}
    for name in sorted(preds):
        p, _ = read_rvol(preds[name])
        g, _ = read_rvol(gts[name])
        if p.shape != g.shape:
            raise FormatError(f"{name}: prediction shape {p.shape} != ground truth {g.shape}")
        cases[name] = case_metrics(p, g)
    report = {"classes": list(CLASSES), "cases": cases, "mean": mean_report(cases)}
    Path(args.report).write_text(json.dumps(report, indent=1) + "\n")


# ----------------------------------------------------------------------


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vaeseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic phantom cases")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", default="low", choices=["low", "medium", "high"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a dotted-key JSON config")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a label volume with one or more checkpoints")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compare predicted and reference label volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"vaeseg: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, FormatError, ConfigError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
