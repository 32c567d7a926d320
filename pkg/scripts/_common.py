import argparse
import json
import logging
from pathlib import Path

from neuroretrieve.experiments import SEEDS, RunCache, synthetic_dataset


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--work-dir", default="runs/synthetic", help="dataset, checkpoints and the run cache live here")
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def prepare(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    work = Path(args.work_dir)
    data = synthetic_dataset(work / "data")
    return work, data, RunCache(work / "runs.jsonl")


def table(rows, keys):
    print("  ".join(f"{k:>10}" for k in keys))
    for r in rows:
        print("  ".join(f"{r[k]:>10.4f}" if isinstance(r[k], float) else f"{str(r[k]):>10}" for k in keys))


def dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")
