"""Seeded ablation sweep: baseline vs each toggle, on freshly synthesized data.

Every run trains two phases of ``epochs`` each (the second is the mined
phase for ``mining``) and records validation NME. Results are appended to a
JSON file after each run, so an interrupted sweep resumes where it stopped.

    python -m pcdnet.ablation --out ablation_results.json --seeds 0 1 2 3 4
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from .data.dataset import load_samples, synth_manifest
from .data.synth import SynthConfig
from .evaluator import evaluate
from .net import build_model
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "no-conditioning", "plain-softmax", "mining")


def sweep_config(seed: int, epochs: int = 10) -> TrainConfig:
    return TrainConfig(epochs=epochs, base_lr=0.05, momentum=0.9, lr_drop_every=4, second_phase=True,
                       eval_every=0, seed=seed)


def run_one(variant: str, seed: int, train_count=2000, val_count=500, image_size=64, epochs=10) -> dict:
    synth = SynthConfig(image_size=image_size, seed=seed)
    tr = load_samples(synth_manifest(synth, train_count))
    va = load_samples(synth_manifest(synth, val_count, start=train_count))
    cfg = sweep_config(seed, epochs)
    overrides = {}
    if variant == "no-conditioning":
        overrides["conditioning"] = False
    elif variant == "plain-softmax":
        cfg = replace(cfg, plain_softmax=True)
    elif variant == "mining":
        cfg = replace(cfg, mining=True)
    elif variant != "baseline":
        raise ValueError(variant)
    model = build_model("aflw21", image_size, seed=seed, **overrides)
    t0 = time.perf_counter()
    train(model, tr, cfg)
    seconds = time.perf_counter() - t0
    rec = {"variant": variant, "seed": seed, "seconds": seconds, "nme": evaluate(model, va).nme_mean}
    if variant == "baseline":
        rec["nme_tta"] = evaluate(model, va, tta=True).nme_mean
    return rec


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pcdnet.ablation")
    ap.add_argument("--out", default="ablation_results.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--train-count", type=int, default=2000)
    ap.add_argument("--val-count", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=10)
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    path = Path(a.out)
    done = json.loads(path.read_text()) if path.exists() else []
    have = {(r["variant"], r["seed"]) for r in done}
    for seed in a.seeds:
        for v in a.variants:
            if (v, seed) in have:
                continue
            rec = run_one(v, seed, a.train_count, a.val_count, epochs=a.epochs)
            rec.update(train_count=a.train_count, val_count=a.val_count, epochs=a.epochs)
            log.info("%s", rec)
            done.append(rec)
            path.write_text(json.dumps(done, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
