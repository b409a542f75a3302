"""Command-line entry point: ``pcdnet {synth,train,eval,gradcheck,plot}``.

Settings come from an optional ``--config`` file, then ``--set key=value``
overrides, then the dedicated flags. Exit codes: 0 success, 1 usage or
configuration, 2 data, 3 numeric, 4 tree mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, apply_pairs, dump_config, load_config, parse_pairs
from .errors import ConfigurationError, DataError, PCDError

log = logging.getLogger("pcdnet")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which means "data error" here
        raise _UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for data, init and training order")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcdnet", description="Pose-conditioned dendritic landmark localization.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--start", type=int, default=0, help="index of the first sample")
    p.add_argument("--refs-only", action="store_true",
                   help="store synth:<seed>:<index> references instead of PNG files")
    p.add_argument("--name", default="manifest.jsonl", help="manifest file name inside --out")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--val-manifest", help="validation manifest scored every epoch")
    p.add_argument("--checkpoint", help="initialize from this checkpoint")
    p.add_argument("--mining", action="store_true", help="add a hard-sample mining phase")
    p.add_argument("--no-conditioning", action="store_true", help="drop the pose conditioning path")
    p.add_argument("--plain-softmax", action="store_true", help="score every pixel instead of the sampled mask")
    p.add_argument("--fine-stage", action="store_true", help="add and train the fine-grained stage")
    p.add_argument("--more-filters", action="store_true", help="widen the keypoint network")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    _common(p)
    p.add_argument("--manifest", help="evaluation manifest")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--tta", action="store_true", help="average with the mirrored image")
    p.add_argument("--protocol", choices=("bbox", "interocular"), help="NME normalizer")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    _common(p)
    p.add_argument("--probes", type=int, default=12, help="model entries to probe")

    p = sub.add_parser("plot", help="overlay CED tables in one SVG")
    _common(p)
    p.add_argument("tables", nargs="+", help="CED tables, optionally written LABEL=PATH")
    p.add_argument("--title", default="Cumulative error distribution")
    return parser


# ---- configuration -------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.update(parse_pairs(item, "--set"))
    flags = {"seed": args.seed, "paths.out": args.out}
    for key, attr in (("paths.manifest", "manifest"), ("paths.val_manifest", "val_manifest"),
                      ("paths.checkpoint", "checkpoint")):
        flags[key] = getattr(args, attr, None)
    if getattr(args, "no_conditioning", False):
        flags["model.conditioning"] = False
    for key, attr in (("train.mining", "mining"), ("train.plain_softmax", "plain_softmax"),
                      ("model.fine_stage", "fine_stage"), ("model.more_filters", "more_filters"),
                      ("tta", "tta")):
        if getattr(args, attr, False):
            flags[key] = True
    if getattr(args, "protocol", None):
        flags["eval.normalizer"] = args.protocol
    pairs.update({k: v for k, v in flags.items() if v is not None})
    return apply_pairs(cfg, pairs)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_path(cfg: RunConfig, key: str) -> Path:
    value = cfg.paths.get(key)
    if not value:
        raise ConfigurationError(f"missing required path: --{key.replace('_', '-')} or paths.{key}")
    p = Path(value)
    if not p.exists():
        raise DataError(f"{key.replace('_', ' ')} {p} not found")
    return p


def _limit_threads():
    n = os.environ.get("PCD_THREADS")
    if not n:
        return None
    try:
        limit = int(n)
    except ValueError:
        raise ConfigurationError(f"PCD_THREADS must be an integer, got {n!r}") from None
    if limit < 1:
        raise ConfigurationError("PCD_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


# ---- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, count: int, start: int = 0, refs_only: bool = False,
              name: str = "manifest.jsonl") -> Path:
    from .data.annotations import DatasetManifest, save_image, write_manifest
    from .data.synth import synth_sample

    if count < 1 or start < 0:
        raise ConfigurationError("--count must be >= 1 and --start >= 0")
    out = _out_dir(cfg)
    scfg = cfg.synth.with_seed(cfg.seed)
    records = []
    if not refs_only:
        (out / "images").mkdir(exist_ok=True)
    for i in range(start, start + count):
        img, rec = synth_sample(scfg, i)
        if not refs_only:
            rel = f"images/{scfg.seed}_{i:06d}.png"
            save_image(img, out / rel)
            rec = replace(rec, image=rel)
        records.append(rec)
    path = out / name
    write_manifest(DatasetManifest(scfg.tree, scfg.image_size, records, scfg.to_dict()), path)
    log.info("wrote %d samples to %s", count, path)
    return path


def model_signature(model, cfg: RunConfig) -> dict:
    """Parameter counts per group plus the training-side toggles, which add no parameters."""
    return {"variant": cfg.variant(), "params": model.signature()}


def cmd_train(cfg: RunConfig) -> Path:
    from .data.annotations import read_manifest
    from .data.dataset import load_samples
    from .net import build_model, load_checkpoint, save_checkpoint
    from .trainer import train, train_fine_stage

    manifest = read_manifest(_require_path(cfg, "manifest"))
    samples = load_samples(manifest)
    val = None
    if cfg.paths.get("val_manifest"):
        val = load_samples(read_manifest(_require_path(cfg, "val_manifest")))
    out = _out_dir(cfg)
    if cfg.paths.get("checkpoint"):
        model = load_checkpoint(_require_path(cfg, "checkpoint"), expect_tree=manifest.tree)
    else:
        model = build_model(manifest.tree, manifest.image_size, seed=cfg.seed, dtype=cfg.model.dtype,
                            **cfg.model_overrides())
    log.info("signature %s", json.dumps(model_signature(model, cfg), sort_keys=True))
    (out / "run.cfg").write_text(dump_config(cfg))
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    train(model, samples, cfg.train, val=val, log_path=log_path)
    if cfg.model.fine_stage:
        train_fine_stage(model, samples, replace(cfg.train, mining=True), val=val, log_path=log_path)
    ckpt = out / "model.pcdc"
    save_checkpoint(model, ckpt, extra={"variant": cfg.variant()})
    log.info("saved %s", ckpt)
    return ckpt


def cmd_eval(cfg: RunConfig) -> dict:
    from .data.annotations import read_manifest
    from .data.dataset import load_samples
    from .evaluator import ced_table, evaluate
    from .net import load_checkpoint

    manifest = read_manifest(_require_path(cfg, "manifest"))
    model = load_checkpoint(_require_path(cfg, "checkpoint"), expect_tree=manifest.tree)
    log.info("signature %s", json.dumps({"params": model.signature()}, sort_keys=True))
    samples = load_samples(manifest)
    stage = "fine" if model.has_fine_stage else "coarse"
    report = evaluate(model, samples, cfg.eval, tta=cfg.tta, stage=stage)
    summary = {**report.summary(), "tta": cfg.tta, "normalizer": cfg.eval.normalizer, "stage": stage}
    out = _out_dir(cfg)
    (out / "metrics.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out / "ced.csv").write_text(ced_table(report))
    return summary


def cmd_gradcheck(cfg: RunConfig, probes: int = 12) -> list:
    from .gradsuite import model_report, op_reports

    reports = op_reports(cfg.seed)
    reports.append(model_report(cfg.seed, count=probes, overrides=cfg.model_overrides()))
    if cfg.paths.get("out"):
        (_out_dir(cfg) / "gradcheck.txt").write_text("".join(r.line() + "\n" for r in reports))
    return reports


def _parse_table_arg(item: str) -> tuple:
    label, sep, path = item.partition("=")
    if not sep:
        path = item
        label = Path(item).parent.name or Path(item).stem
    return label, Path(path)


def cmd_plot(cfg: RunConfig, tables: list, title: str = "Cumulative error distribution") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluator import read_ced_table

    curves = []
    for item in tables:
        label, path = _parse_table_arg(item)
        if not path.exists():
            raise DataError(f"CED table {path} not found")
        curves.append((label, *read_ced_table(path.read_text())))
    plt.rcParams["svg.hashsalt"] = "pcdnet"  # stable element ids
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, grid, frac in curves:
        ax.plot(grid, frac, label=label)
    ax.set_xlabel("NME")
    ax.set_ylabel("fraction of images")
    ax.set_ylim(0, 1)
    ax.set_xlim(left=0)
    ax.grid(alpha=0.3)
    ax.set_title(title)
    ax.legend(loc="lower right")
    path = _out_dir(cfg) / "ced.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# ---- entry point --------------------------------------------------------------

def _dispatch(args, cfg: RunConfig) -> int:
    if args.command == "synth":
        print(cmd_synth(cfg, args.count, args.start, args.refs_only, args.name))
    elif args.command == "train":
        print(cmd_train(cfg))
    elif args.command == "eval":
        print(json.dumps(cmd_eval(cfg), sort_keys=True))
    elif args.command == "gradcheck":
        reports = cmd_gradcheck(cfg, args.probes)
        for r in reports:
            print(r.line())
        failed = [r.name for r in reports if not r.passed]
        if failed:
            print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
            return 3
    elif args.command == "plot":
        print(cmd_plot(cfg, args.tables, args.title))
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        limits = _limit_threads()
        try:
            return _dispatch(args, cfg)
        finally:
            if limits is not None:
                limits.restore_original_limits()
    except PCDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
