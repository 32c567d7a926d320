"""Seeded experiment runners shared by the scripts and the acceptance suite.

Every run trains on fold 0 of the default synthetic dataset (8 classes x 25
pairs, 16 channels, 256 samples, SNR 2, five sets) with the default model and
varies only the model/training seed.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from pathlib import Path

from .config import run_config
from .evalmetrics import open_set_report
from .pretrain import pretrain_from_config
from .synthdata import SynthConfig, generate, write_dataset
from .trainer import fit

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
OPEN_CLASS = "class00"


def synthetic_dataset(root, cfg: SynthConfig | None = None) -> Path:
    """Write the synthetic dataset under ``root`` unless it is already there."""
    cfg = cfg or SynthConfig()
    root = Path(root)
    if not (root / "manifest.jsonl").exists():
        write_dataset(generate(cfg), root, cfg)
    return root


def retrieval_run(data_dir, seed: int, overrides: dict | None = None, out_dir=None) -> dict:
    """Train one model and report test-split retrieval metrics and wall time."""
    cfg = run_config(overrides={"data": str(data_dir), "seed": seed, **(overrides or {})})
    t0 = time.perf_counter()
    res = fit(cfg, out_dir=out_dir)
    report = res.test_report
    out = {
        "seed": seed,
        "overrides": overrides or {},
        "seconds": time.perf_counter() - t0,
        "best_epoch": res.best_epoch,
        **report.summary(),
    }
    if cfg.open_class:
        out["open_set"] = open_set_report(report, cfg.open_class, res.experiment.splits["test"].classes)
    log.info("run %s", out)
    return out


def pretrain_run(data_dir, seed: int, ckpt, overrides: dict | None = None) -> dict:
    """Forecasting pre-training on the training split; MAE is measured on the validation split."""
    cfg = run_config(overrides={"data": str(data_dir), "seed": seed, **(overrides or {})})
    t0 = time.perf_counter()
    res = pretrain_from_config(cfg, out=ckpt)
    final = res.history[-1]["val_mae"] if res.history else res.init_val_mae
    return {
        "seed": seed,
        "seconds": time.perf_counter() - t0,
        "init_val_mae": res.init_val_mae,
        "final_val_mae": final,
        "reduction": 1.0 - final / res.init_val_mae,
        "ckpt": str(ckpt),
    }


class RunCache:
    """JSON-lines store of finished runs keyed by name, so long sweeps can be resumed."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.results: dict[str, dict] = {}
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                rec = json.loads(line)
                self.results[rec["key"]] = rec["result"]

    def get(self, key: str, compute):
        if key not in self.results:
            self.results[key] = compute()
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a") as f:
                    f.write(json.dumps({"key": key, "result": self.results[key]}) + "\n")
        return self.results[key]


def median(runs, key: str) -> float:
    return statistics.median(r[key] for r in runs)


NEGATIVE_VARIANTS = {
    "both_all": {},
    "none_all": {"loss.strategy": "none"},
    "both_m1": {"loss.neg_samples": 1},
    "both_m4": {"loss.neg_samples": 4},
}


def negative_sweep(data_dir, cache: RunCache, seeds=SEEDS, variants=NEGATIVE_VARIANTS) -> dict[str, list[dict]]:
    return {
        name: [cache.get(f"{name}/seed{s}", lambda s=s, ov=ov: retrieval_run(data_dir, s, ov)) for s in seeds]
        for name, ov in variants.items()
    }


def open_set_runs(data_dir, cache: RunCache, seeds=SEEDS, open_class: str = OPEN_CLASS) -> list[dict]:
    return [
        cache.get(f"open_{open_class}/seed{s}", lambda s=s: retrieval_run(data_dir, s, {"open_class": open_class}))
        for s in seeds
    ]


def pretraining_runs(data_dir, work_dir, cache: RunCache, seeds=SEEDS) -> tuple[list[dict], list[dict]]:
    """(pre-training records, fine-tuned retrieval records), one of each per seed."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    pre, tuned = [], []
    for s in seeds:
        ckpt = work_dir / f"encoder_seed{s}.ckpt"
        rec = cache.get(f"pretrain/seed{s}", lambda s=s, c=ckpt: pretrain_run(data_dir, s, c))
        if not Path(rec["ckpt"]).exists():
            rec = pretrain_run(data_dir, s, ckpt)
        pre.append(rec)
        tuned.append(cache.get(f"finetune/seed{s}", lambda s=s, c=rec["ckpt"]: retrieval_run(data_dir, s, {"pretrained": c})))
    return pre, tuned
