"""Contrastive training: data assembly, the epoch loop, checkpointing and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .config import RunConfig
from .crossmodal import NegativeConfig, negative_mask
from .dataio import (
    EmbeddingCache,
    PairManifest,
    load_manifest,
    manifest_id_index,
    read_checkpoint,
    read_embeddings,
    save_checkpoint,
)
from .diffcore import DTYPE, NonFiniteLossError, OptimizerState, evaluate_with_gradients, step
from .evalmetrics import RetrievalReport, evaluate_retrieval, fold
from .montage import SensorMontage, default_montage, load_positions
from .model import RetrievalModel
from .preprocess import FilterSpec, NormStats, fit_norm, normalize, preprocess_clip
from .visual import ImageEncoder, ImageItem, check_cache_dim, encode_images

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class PairedSet:
    """Aligned EEG/visual tensors for one split."""

    ids: list[str]
    classes: list[str]
    eeg: torch.Tensor  # (n, V, T), preprocessed and normalized
    visual: torch.Tensor  # (n, vis_dim) pre-projection features
    images: torch.Tensor | None = None  # (n, H, W) when the image encoder trains

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PairedSet":
        idx = list(idx)
        return PairedSet(
            ids=[self.ids[i] for i in idx],
            classes=[self.classes[i] for i in idx],
            eeg=self.eeg[idx],
            visual=self.visual[idx],
            images=None if self.images is None else self.images[idx],
        )


def assemble_batch(data: PairedSet, indices) -> tuple[torch.Tensor, torch.Tensor]:
    """Rows of both sides in the order of ``indices``."""
    idx = list(indices)
    return data.eeg[idx], data.visual[idx]


# --------------------------------------------------------------------------- data loading


def load_images(manifest: PairManifest, data_dir) -> np.ndarray | None:
    path = Path(data_dir) / "images.npy"
    return np.load(path) if path.exists() else None


def visual_lookup(manifest: PairManifest, entries, cache: EmbeddingCache) -> np.ndarray:
    rows = []
    for e in entries:
        if e.pair_id not in cache.id_index:
            raise KeyError(f"pair {e.pair_id!r} has no visual embedding in the cache")
        rows.append(cache.vectors[cache.id_index[e.pair_id]])
    return np.asarray(rows, dtype=np.float64)


def filter_spec(cfg: RunConfig, fs: float) -> FilterSpec | None:
    p = cfg.preprocess
    if not p.bandpass:
        return None
    return FilterSpec(low_hz=p.low, high_hz=p.high, order=p.order, fs=p.target_fs or fs)


def prepare_clips(clips, cfg: RunConfig) -> list:
    """Resampling and band-pass per the config; normalization is applied separately."""
    p = cfg.preprocess
    return [preprocess_clip(c, p.target_fs or None, filter_spec(cfg, c.fs), p.zero_phase) for c in clips]


def montage_for(cfg: RunConfig, V: int, data_dir=None) -> SensorMontage:
    data_dir = data_dir or cfg.data
    path = cfg.montage.positions or (Path(data_dir) / "montage.txt" if data_dir else "")
    if path and Path(path).exists():
        positions = load_positions(path)
        if len(positions) != V:
            raise ValueError(f"coordinate file has {len(positions)} sensors, clips have {V}")
    else:
        positions = default_montage(V)
    return SensorMontage.from_positions(positions, k=cfg.montage.k)


def build_model(cfg: RunConfig, montage: SensorMontage, vis_dim: int | None = None, in_ch: int = 1) -> RetrievalModel:
    vis_dim = vis_dim or cfg.visual.dim
    visual = ImageEncoder(side=cfg.visual.side, in_ch=in_ch, dim=vis_dim)
    model = RetrievalModel(
        cfg.encoder,
        montage.P,
        vis_dim=vis_dim,
        joint_dim=cfg.joint_dim,
        tau=cfg.loss.tau,
        learn_tau=cfg.loss.learn_tau,
        visual=visual,
        visual_trainable=cfg.visual.trainable,
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    return model.init(gen)


@dataclass
class Experiment:
    cfg: RunConfig
    manifest: PairManifest
    roles: dict
    stats: NormStats | None
    montage: SensorMontage
    model: RetrievalModel
    splits: dict[str, PairedSet] = field(default_factory=dict)
    raw_fs: float = 0.0
    vis_stats: NormStats | None = None


@dataclass
class EEGSplits:
    roles: dict
    entries: dict  # role -> manifest entries
    clips: dict  # role -> preprocessed, normalized clips
    stats: NormStats | None
    raw_fs: float = 0.0


def load_eeg_splits(cfg: RunConfig, manifest: PairManifest, stats: NormStats | None = None) -> EEGSplits:
    """Fold roles, the open-set exclusion, preprocessing and train-fitted normalization.

    Pass ``stats`` (e.g. from a checkpoint) to normalize with them instead of refitting.
    """
    roles = fold(manifest.n_sets, cfg.split_seed, cfg.fold)
    entries = {role: manifest.in_sets(sets) for role, sets in roles.items()}
    if cfg.open_class:
        if cfg.open_class not in manifest.classes:
            raise ValueError(f"open class {cfg.open_class!r} not in manifest")
        for role in ("train", "val"):
            entries[role] = [e for e in entries[role] if e.class_label != cfg.open_class]

    raw = {role: [manifest.load_clip(e) for e in ents] for role, ents in entries.items()}
    pre = {role: prepare_clips(clips, cfg) for role, clips in raw.items()}
    if stats is None and cfg.preprocess.normalize:
        stats = fit_norm(pre["train"])
    if stats is not None:
        pre = {role: [normalize(c, stats) for c in clips] for role, clips in pre.items()}
    return EEGSplits(roles=roles, entries=entries, clips=pre, stats=stats, raw_fs=raw["train"][0].fs)


def fit_feature_stats(train_features: np.ndarray) -> NormStats:
    std = train_features.std(axis=0)
    return NormStats(mean=train_features.mean(axis=0), std=np.maximum(std, 1e-8))


def setup(
    cfg: RunConfig,
    manifest: PairManifest | None = None,
    stats: NormStats | None = None,
    vis_stats: NormStats | None = None,
) -> Experiment:
    """Load data for the configured fold, fit train normalization and build the model.

    ``stats`` and ``vis_stats`` (EEG channels, visual feature dimensions) are
    refitted on the training split unless given, e.g. from a checkpoint.
    """
    manifest = manifest or load_manifest(cfg.manifest_path)
    eeg = load_eeg_splits(cfg, manifest, stats)
    roles, entries, pre, stats = eeg.roles, eeg.entries, eeg.clips, eeg.stats
    V = pre["train"][0].n_channels
    montage = montage_for(cfg, V, manifest.root)

    cache = None
    if cfg.embeddings:
        cache = read_embeddings(cfg.embeddings)
        if not cache.id_index:
            cache.id_index = manifest_id_index(manifest)
        check_cache_dim(cache, cfg.visual.dim)
        model = build_model(cfg, montage, vis_dim=cache.dim)
    else:
        model = build_model(cfg, montage)
    images = None if cache is not None else load_images(manifest, manifest.root)
    if cache is None and images is None:
        raise FileNotFoundError(f"no embeddings configured and no images.npy next to {cfg.manifest_path}")

    vis, pixels = {}, {}
    for role, ents in entries.items():
        if cache is not None:
            vis[role], pixels[role] = visual_lookup(manifest, ents, cache), None
        else:
            px = np.stack([images[int(e.image_ref)] for e in ents]).astype(np.float64)
            items = [ImageItem(e.pair_id, e.class_label, p) for e, p in zip(ents, px)]
            vis[role], pixels[role] = encode_images(items, model.visual), px
    # a trainable image encoder sees raw pixels, so there are no fixed features to standardize
    if cfg.visual.standardize and not cfg.visual.trainable:
        vis_stats = vis_stats or fit_feature_stats(vis["train"])
        vis = {role: (v - vis_stats.mean) / vis_stats.std for role, v in vis.items()}
    else:
        vis_stats = None

    splits = {}
    for role, ents in entries.items():
        px = pixels[role]
        splits[role] = PairedSet(
            ids=[e.pair_id for e in ents],
            classes=[e.class_label for e in ents],
            eeg=torch.as_tensor(np.stack([c.data for c in pre[role]]), dtype=DTYPE),
            visual=torch.as_tensor(vis[role], dtype=DTYPE),
            images=None if px is None or not cfg.visual.trainable else torch.as_tensor(px, dtype=DTYPE),
        )
    return Experiment(
        cfg=cfg,
        manifest=manifest,
        roles=roles,
        stats=stats,
        montage=montage,
        model=model,
        splits=splits,
        raw_fs=eeg.raw_fs,
        vis_stats=vis_stats,
    )


# --------------------------------------------------------------------------- evaluation


@torch.no_grad()
def embed(model: RetrievalModel, data: PairedSet, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    eeg, vis = [], []
    for i in range(0, len(data), batch_size):
        eeg.append(model.embed_eeg(data.eeg[i : i + batch_size]))
        z_I = data.visual[i : i + batch_size]
        if data.images is not None:
            z_I = model.visual(data.images[i : i + batch_size])
        vis.append(model.embed_visual(z_I))
    return torch.cat(eeg).numpy(), torch.cat(vis).numpy()


def evaluate(model: RetrievalModel, queries: PairedSet, gallery: PairedSet | None = None) -> RetrievalReport:
    """Retrieve every query's image among the gallery images (default: the query split's own)."""
    gallery = gallery or queries
    q_emb, _ = embed(model, queries)
    _, g_emb = embed(model, gallery)
    return evaluate_retrieval(q_emb, queries.ids, queries.classes, g_emb, gallery.ids, gallery.classes)


# --------------------------------------------------------------------------- training


def checkpoint_meta(exp: Experiment, extra: dict | None = None) -> dict:
    meta = {
        "config": config_mod.flatten(exp.cfg),
        "V": exp.montage.n_nodes,
        "fs": exp.raw_fs,
        "positions": exp.montage.positions.tolist(),
        "vis_dim": exp.model.proj_img.weight.shape[0],
    }
    if exp.stats is not None:
        meta["norm_mean"] = exp.stats.mean.tolist()
        meta["norm_std"] = exp.stats.std.tolist()
    if exp.vis_stats is not None:
        meta["vis_mean"] = exp.vis_stats.mean.tolist()
        meta["vis_std"] = exp.vis_stats.std.tolist()
    meta.update(extra or {})
    return meta


def params_numpy(model: RetrievalModel) -> dict[str, np.ndarray]:
    return {n: p.detach().numpy().copy() for n, p in model.named_parameters()}


@torch.no_grad()
def load_params(model: RetrievalModel, values: dict[str, np.ndarray], strict: bool = True) -> None:
    own = dict(model.named_parameters())
    if strict and set(own) - set(values):
        raise KeyError(f"missing tensors {sorted(set(own) - set(values))}")
    for name, v in values.items():
        if name not in own:
            raise KeyError(f"unknown tensor {name!r}")
        if tuple(v.shape) != tuple(own[name].shape):
            raise ValueError(f"{name}: shape {tuple(v.shape)} != {tuple(own[name].shape)}")
        own[name].copy_(torch.as_tensor(v, dtype=DTYPE))


@dataclass
class TrainState:
    epoch: int
    optim: OptimizerState
    rng: np.random.Generator
    best_mrr: float = -1.0
    best_params: dict | None = None
    best_epoch: int = -1
    history: list = field(default_factory=list)


def save_train_state(exp: Experiment, state: TrainState, path) -> None:
    tensors = {f"param.{n}": v for n, v in params_numpy(exp.model).items()}
    tensors.update({f"optim.{k}": v for k, v in state.optim.tensors().items()})
    if state.best_params is not None:
        tensors.update({f"best.{n}": v for n, v in state.best_params.items()})
    meta = checkpoint_meta(
        exp,
        {
            "epoch": state.epoch,
            "optim": state.optim.meta(),
            "rng": state.rng.bit_generator.state,
            "best_mrr": state.best_mrr,
            "best_epoch": state.best_epoch,
            "history": state.history,
        },
    )
    save_checkpoint(tensors, path, meta)


def load_train_state(exp: Experiment, path) -> TrainState:
    tensors, meta = read_checkpoint(path)
    load_params(exp.model, {k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    optim = OptimizerState.restore(meta["optim"], {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")})
    best = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")} or None
    return TrainState(
        epoch=meta["epoch"],
        optim=optim,
        rng=rng,
        best_mrr=meta["best_mrr"],
        best_params=best,
        best_epoch=meta["best_epoch"],
        history=meta["history"],
    )


def neg_config(cfg: RunConfig) -> NegativeConfig:
    m = cfg.loss.neg_samples
    return NegativeConfig(cfg.loss.strategy, m if m == "all" else int(m))


def train_epoch(exp: Experiment, state: TrainState) -> float:
    cfg, model = exp.cfg, exp.model
    data = exp.splits["train"]
    neg = neg_config(cfg)
    params = model.trainable()
    order = state.rng.permutation(len(data))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size].tolist()
        E, z_I = assemble_batch(data, idx)
        images = None if data.images is None else data.images[idx]
        mask = negative_mask(len(idx), neg.sample_size, state.rng)
        try:
            loss, grads = evaluate_with_gradients(lambda: model.loss(E, z_I, neg, mask, images), params)
        except (NonFiniteLossError, ValueError) as e:
            raise TrainingAborted(f"epoch {state.epoch}, batch at {start}: {e}") from e
        step(params, grads, state.optim)
        losses.append(loss * len(idx))
    return float(np.sum(losses) / len(data))


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_params: dict[str, np.ndarray]
    test_report: RetrievalReport | None
    experiment: Experiment


def fit(cfg: RunConfig, exp: Experiment | None = None, out_dir=None, resume=None, stop_after: int | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, keeping the parameters with the best validation MRR.

    ``stop_after`` ends the loop early (after that many total epochs) while
    leaving ``last.ckpt`` resumable.
    """
    exp = exp or setup(cfg)
    if cfg.pretrained and resume is None:
        from .pretrain import transfer

        transfer(cfg.pretrained, exp.model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config_mod.save(cfg, out / "config.json")

    if resume is not None:
        state = load_train_state(exp, resume)
    else:
        o = cfg.optim
        state = TrainState(epoch=0, optim=OptimizerState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps), rng=np.random.default_rng(cfg.seed))
        state.best_params = params_numpy(exp.model)

    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    while state.epoch < last:
        t0 = time.perf_counter()
        loss = train_epoch(exp, state)
        report = evaluate(exp.model, exp.splits["val"])
        state.epoch += 1
        rec = {"epoch": state.epoch, "loss": loss, "val_mrr": report.mrr, "val_map": report.map}
        state.history.append(rec)
        log.info("epoch %d loss %.4f val_mrr %.4f val_map %.4f (%.1fs)", state.epoch, loss, report.mrr, report.map, time.perf_counter() - t0)
        if report.mrr > state.best_mrr:
            state.best_mrr, state.best_epoch = report.mrr, state.epoch
            state.best_params = params_numpy(exp.model)
        if out is not None:
            save_train_state(exp, state, out / "last.ckpt")

    test_report = None
    if state.epoch >= cfg.epochs:
        load_params(exp.model, state.best_params)
        test_report = evaluate(exp.model, exp.splits["test"])
        if out is not None:
            save_checkpoint(state.best_params, out / "model.ckpt", checkpoint_meta(exp, {"best_epoch": state.best_epoch}))
    if out is not None:
        with open(out / "metrics.jsonl", "w") as f:
            for rec in state.history:
                f.write(json.dumps(rec) + "\n")
    return FitResult(history=state.history, best_epoch=state.best_epoch, best_params=state.best_params, test_report=test_report, experiment=exp)


# --------------------------------------------------------------------------- restoring trained models


def model_from_checkpoint(path) -> tuple[RetrievalModel, RunConfig, dict]:
    tensors, meta = read_checkpoint(path)
    cfg = config_mod.from_flat(meta["config"])
    montage = SensorMontage.from_positions(np.asarray(meta["positions"]), k=cfg.montage.k)
    model = build_model(cfg, montage, vis_dim=meta["vis_dim"])
    load_params(model, tensors)
    return model, cfg, meta


def stats_from_meta(meta: dict, prefix: str = "norm") -> NormStats | None:
    """EEG normalization stats (prefix "norm") or visual feature stats (prefix "vis") saved in a checkpoint."""
    if f"{prefix}_mean" not in meta:
        return None
    return NormStats(mean=np.asarray(meta[f"{prefix}_mean"]), std=np.asarray(meta[f"{prefix}_std"]))
