"""Command-line entry point: ``neuroretrieve <command> ...``.

Exit codes: 0 success, 1 invalid input (config, files, shapes), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError

log = logging.getLogger("neuroretrieve")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

EMBEDDING_FORMAT_HELP = """\
Visual embedding cache (little-endian):
  bytes 0-3    magic b"EMBV"
  u32          format version (1)
  u32          count (rows)
  u32          dim
  count*dim    float32, row-major
Sidecar <cache>.ids.jsonl: one {"pair_id": str, "row": int} object per line.
Without a sidecar, a manifest's image_ref fields are read as row numbers.
Set "embeddings": "<cache path>" and "visual.dim": <dim> in the run config to use it.
"""


def _load_config(path, seed=None, overrides=None):
    values = dict(overrides or {})
    if seed is not None:
        values["seed"] = seed
    return config_mod.run_config(path, values)


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synthdata import SynthConfig, generate, write_dataset

    cfg = SynthConfig(
        n_classes=args.classes,
        per_class=args.per_class,
        V=args.v,
        T=args.t,
        fs=args.fs,
        side=args.side,
        snr=args.snr,
        n_sets=args.n_sets,
        seed=args.seed,
    )
    data = generate(cfg)
    out = write_dataset(data, args.out, cfg)
    print(json.dumps({"out": str(out), "pairs": len(data.clips), "classes": cfg.n_classes, "n_sets": cfg.n_sets}))
    return EXIT_OK


def _clip_paths(src: Path) -> list[tuple[Path, Path]]:
    if src.is_dir():
        return [(p, p.relative_to(src)) for p in sorted(src.rglob("*.eeg"))]
    if src.exists():
        return [(src, Path(src.name))]
    raise FileNotFoundError(src)


def cmd_preprocess(args) -> int:
    from .dataio import read_clip, write_clip
    from .preprocess import FilterSpec, preprocess_clip

    src, dst = Path(args.inp), Path(args.out)
    pairs = _clip_paths(src)
    if not pairs:
        raise FileNotFoundError(f"no .eeg clips under {src}")
    single_file = not src.is_dir() and dst.suffix == ".eeg"
    n = 0
    for path, rel in pairs:
        clip = read_clip(path)
        target = args.target_fs or None
        band = None if args.no_bandpass else FilterSpec(args.low, args.high, args.order, target or clip.fs)
        out = preprocess_clip(clip, target, band, zero_phase=not args.single_pass)
        dest = dst if single_file else dst / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_clip(out, dest)
        n += 1
    print(json.dumps({"clips": n, "out": str(dst)}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pretrain import pretrain_from_config

    cfg = _load_config(args.config, args.seed, _parse_set(args.set))
    res = pretrain_from_config(cfg, out=args.out)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"out": args.out, "epochs": len(res.history), "init_val_mae": res.init_val_mae, "final": last}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import fit

    cfg = _load_config(args.config, args.seed, _parse_set(args.set))
    if args.print_config:
        print(config_mod.dumps(cfg))
        return EXIT_OK
    out_dir = args.out_dir or cfg.out_dir
    res = fit(cfg, out_dir=out_dir, resume=args.resume)
    summary = {"out_dir": out_dir, "best_epoch": res.best_epoch}
    if res.test_report is not None:
        summary["test"] = res.test_report.summary()
    print(json.dumps(summary))
    return EXIT_OK


def _experiment_from_checkpoint(ckpt, fold=None, open_class=None, data=None):
    from .dataio import read_checkpoint
    from .trainer import load_params, setup, stats_from_meta

    tensors, meta = read_checkpoint(ckpt)
    if "config" not in meta:
        raise ValueError(f"{ckpt} is not a retrieval-model checkpoint")
    flat = dict(meta["config"])
    if fold is not None:
        flat["fold"] = fold
    if open_class is not None:
        flat["open_class"] = open_class
    if data:
        flat["data"], flat["manifest"] = data, ""
    cfg = config_mod.from_flat(flat)
    exp = setup(cfg, stats=stats_from_meta(meta), vis_stats=stats_from_meta(meta, "vis"))
    if exp.montage.n_nodes != meta["V"]:
        raise ValueError(f"data has {exp.montage.n_nodes} channels, checkpoint was trained on {meta['V']}")
    load_params(exp.model, tensors)
    return exp, meta


def cmd_eval(args) -> int:
    from .evalmetrics import open_set_report
    from .trainer import evaluate

    exp, _ = _experiment_from_checkpoint(args.ckpt, args.fold, args.open_class, args.data)
    test = exp.splits["test"]
    report = evaluate(exp.model, test)
    summary = {"type": "summary", "fold": exp.cfg.fold, "gallery_size": len(test), **report.summary()}
    summary["per_class_accuracy"] = report.per_class_accuracy
    if args.open_class:
        summary["open_set"] = open_set_report(report, args.open_class, test.classes)
    if args.report:
        with open(args.report, "w") as f:
            for q in report.queries:
                f.write(
                    json.dumps(
                        {
                            "type": "query",
                            "pair_id": q.pair_id,
                            "query_class": q.query_class,
                            "rank": q.rank_of_correct,
                            "reciprocal_rank": 1.0 / q.rank_of_correct if q.rank_of_correct else 0.0,
                            "ap": q.ap,
                            "predicted_class": q.predicted_class,
                            "top5": q.ranked_ids[:5],
                        }
                    )
                    + "\n"
                )
            f.write(json.dumps(summary) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    import torch

    from .dataio import read_clip
    from .evalmetrics import cosine_scores, rank_gallery
    from .preprocess import normalize
    from .trainer import embed, prepare_clips

    exp, meta = _experiment_from_checkpoint(args.ckpt, args.fold, None, args.data)
    clip = read_clip(args.clip)
    if clip.n_channels != meta["V"]:
        raise ValueError(f"query clip has {clip.n_channels} channels, checkpoint expects {meta['V']}")
    if meta.get("fs") and clip.fs != meta["fs"]:
        raise ValueError(f"query clip sampled at {clip.fs} Hz, checkpoint expects {meta['fs']} Hz")
    clip = prepare_clips([clip], exp.cfg)[0]
    if exp.stats is not None:
        clip = normalize(clip, exp.stats)
    gallery = exp.splits["test"]
    with torch.no_grad():
        q = exp.model.embed_eeg(torch.as_tensor(clip.data[None], dtype=torch.float64)).numpy()
    _, g = embed(exp.model, gallery)
    ranked = rank_gallery(q[0], g, gallery.ids)
    scores = dict(zip(gallery.ids, cosine_scores(q, g)[0].tolist()))
    cls = dict(zip(gallery.ids, gallery.classes))
    k = len(ranked) if args.top_k is None else min(args.top_k, len(ranked))
    rows = [{"rank": i + 1, "pair_id": pid, "score": scores[pid], "class_label": cls[pid]} for i, pid in enumerate(ranked[:k])]
    for r in rows:
        print(f"{r['rank']:4d}  {r['pair_id']}  {r['score']:+.6f}  {r['class_label']}")
    if args.report:
        Path(args.report).write_text(json.dumps({"query": str(args.clip), "gallery_size": len(ranked), "results": rows}, indent=1) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.module, n_configs=args.configs, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.report.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_dump_embeddings(args) -> int:
    from .dataio import EmbeddingCache, load_manifest, write_embeddings

    if args.describe:
        print(EMBEDDING_FORMAT_HELP, end="")
        return EXIT_OK
    if not args.data or not args.out:
        raise ConfigError("dump-embeddings needs --data and --out (or --describe)")
    cfg = _load_config(args.config, args.seed, {"data": args.data})
    manifest = load_manifest(cfg.manifest_path)
    if args.from_npy:
        vectors = np.load(args.from_npy)
        if vectors.ndim != 2:
            raise ValueError(f"{args.from_npy}: expected a 2-D array, got shape {vectors.shape}")
        rows = {e.pair_id: int(e.image_ref) for e in manifest.entries}
        if max(rows.values()) >= len(vectors):
            raise ValueError(f"manifest references row {max(rows.values())}, array has {len(vectors)} rows")
    else:
        from .trainer import build_model, load_images, montage_for
        from .visual import ImageItem, encode_images

        images = load_images(manifest, manifest.root)
        if images is None:
            raise FileNotFoundError(f"no images.npy under {manifest.root}")
        # same seeded initialization as training, so the features match a run without a cache
        V = manifest.load_clip(manifest.entries[0]).n_channels
        model = build_model(cfg, montage_for(cfg, V, manifest.root))
        items = [ImageItem(e.pair_id, e.class_label, images[int(e.image_ref)].astype(np.float64)) for e in manifest.entries]
        vectors = encode_images(items, model.visual)
        rows = {e.pair_id: i for i, e in enumerate(manifest.entries)}
    write_embeddings(EmbeddingCache(vectors=np.asarray(vectors), id_index=rows), args.out)
    print(json.dumps({"out": args.out, "count": len(vectors), "dim": int(np.asarray(vectors).shape[1])}))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run config (flat JSON object with dotted keys)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neuroretrieve", description="EEG-to-image contrastive retrieval")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic paired dataset")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=25)
    s.add_argument("--v", type=int, default=16)
    s.add_argument("--t", type=int, default=256)
    s.add_argument("--fs", type=float, default=128.0)
    s.add_argument("--snr", type=float, default=2.0)
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--n-sets", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth, seed_default=7)

    s = sub.add_parser("preprocess", parents=[common], help="resample and band-pass clip files")
    s.add_argument("--in", dest="inp", required=True, help="clip file or directory of .eeg clips")
    s.add_argument("--out", required=True)
    s.add_argument("--low", type=float, default=55.0)
    s.add_argument("--high", type=float, default=95.0)
    s.add_argument("--order", type=int, default=4)
    s.add_argument("--target-fs", type=float, default=1024.0, help="0 keeps the recorded rate")
    s.add_argument("--single-pass", action="store_true", help="causal filtering instead of zero-phase")
    s.add_argument("--no-bandpass", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("pretrain", parents=[common], help="forecasting pre-training of the EEG encoder")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="contrastive training")
    s.add_argument("--out-dir", default=None)
    s.add_argument("--resume", default=None, help="last.ckpt of an interrupted run")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="retrieval metrics on a fold's test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--fold", type=int, default=None)
    s.add_argument("--open-class", default=None)
    s.add_argument("--report", default=None)
    s.add_argument("--data", default=None, help="override the dataset directory stored in the checkpoint")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("retrieve", parents=[common], help="rank gallery images for one query clip")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--top-k", type=int, default=5)
    s.add_argument("--fold", type=int, default=None)
    s.add_argument("--report", default=None)
    s.add_argument("--data", default=None)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--module", default="all", help="all, encoder, loss, pretrain or a single case")
    s.add_argument("--configs", type=int, default=5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("dump-embeddings", parents=[common], help="write a visual embedding cache")
    s.add_argument("--data", default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--from-npy", default=None, help="(rows, dim) array of external features, rows = image_ref")
    s.add_argument("--describe", action="store_true", help="print the cache format and exit")
    s.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None and hasattr(args, "seed_default"):
        args.seed = args.seed_default
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
