"""Self-supervised forecasting pre-training of the EEG encoder, and transfer into a retrieval model."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import config as config_mod
from .config import RunConfig
from .dataio import EEGClip, load_manifest, read_checkpoint, save_checkpoint
from .diffcore import DTYPE, OptimizerState, ParamStore, evaluate_with_gradients, step
from .encoder import EEGEncoder, ForecastHead

log = logging.getLogger(__name__)


def make_windows(clip, T: int, horizon: int, stride: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(past V x T, future V x horizon) pairs at offsets 0, stride, 2*stride, ... while they fit."""
    if T < 1 or horizon < 1 or stride < 1:
        raise ValueError("T, horizon and stride must be >= 1")
    data = clip.data if isinstance(clip, EEGClip) else np.asarray(clip)
    total = data.shape[-1]
    if T + horizon > total:
        warnings.warn(f"window {T}+{horizon} does not fit a clip of {total} samples", stacklevel=2)
        return []
    return [(data[:, o : o + T], data[:, o + T : o + T + horizon]) for o in range(0, total - T - horizon + 1, stride)]


def pretrain_loss(future: torch.Tensor, forecast: torch.Tensor) -> torch.Tensor:
    """Mean absolute forecast error: average over horizon steps of the per-node mean |E - E_hat|.

    Leading batch axes are averaged as well.
    """
    if future.shape != forecast.shape:
        raise ValueError(f"target {tuple(future.shape)} vs forecast {tuple(forecast.shape)}")
    return (future - forecast).abs().mean()


class Forecaster(nn.Module):
    def __init__(self, encoder: EEGEncoder, horizon: int, window: int):
        super().__init__()
        self.encoder = encoder
        self.head = ForecastHead(encoder.cfg.M, horizon, window, kernel=encoder.cfg.kernel)

    def init(self, gen: torch.Generator) -> "Forecaster":
        self.encoder.init(gen)
        self.head.init(gen)
        return self

    def forward(self, past: torch.Tensor) -> torch.Tensor:
        """past (B, V, T) -> forecast (B, V, horizon)."""
        enc = self.encoder
        return self.head(enc.skip_sum(enc.features(past)))


def window_tensors(clips, T: int, horizon: int, stride: int) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = [w for c in clips for w in make_windows(c, T, horizon, stride)]
    if not pairs:
        raise ValueError("no pre-training windows fit the clips")
    past = torch.as_tensor(np.stack([p for p, _ in pairs]), dtype=DTYPE)
    future = torch.as_tensor(np.stack([f for _, f in pairs]), dtype=DTYPE)
    return past, future


@torch.no_grad()
def forecast_mae(model: Forecaster, past: torch.Tensor, future: torch.Tensor, batch_size: int = 128) -> float:
    total = 0.0
    for i in range(0, len(past), batch_size):
        total += pretrain_loss(future[i : i + batch_size], model(past[i : i + batch_size])).item() * len(past[i : i + batch_size])
    return total / len(past)


@dataclass
class PretrainResult:
    model: Forecaster
    history: list = field(default_factory=list)  # {"epoch", "loss", "val_mae"}
    init_val_mae: float | None = None


def build_forecaster(cfg: RunConfig, P: np.ndarray) -> Forecaster:
    # the encoder draws from the same seeded stream as in build_model, so a
    # zero-epoch checkpoint holds the scratch encoder
    gen = torch.Generator().manual_seed(cfg.seed)
    encoder = EEGEncoder(cfg.encoder, P)
    return Forecaster(encoder, cfg.pretrain.effective_horizon, cfg.pretrain.window).init(gen)


def run_pretraining(
    cfg: RunConfig,
    train_clips,
    P: np.ndarray,
    val_clips=None,
    out=None,
    meta: dict | None = None,
) -> PretrainResult:
    """Train encoder + forecast head on sliding windows; optionally save an encoder checkpoint."""
    pc = cfg.pretrain
    horizon = pc.effective_horizon
    model = build_forecaster(cfg, P)
    past, future = window_tensors(train_clips, pc.window, horizon, pc.stride)
    val = window_tensors(val_clips, pc.window, horizon, pc.stride) if val_clips else None
    params = ParamStore.from_module(model)
    optim = OptimizerState(lr=pc.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    rng = np.random.default_rng(cfg.seed)
    result = PretrainResult(model=model)
    if val is not None:
        result.init_val_mae = forecast_mae(model, *val)

    for epoch in range(1, pc.epochs + 1):
        order = rng.permutation(len(past))
        total = 0.0
        for start in range(0, len(order), pc.batch_size):
            idx = order[start : start + pc.batch_size].tolist()
            loss, grads = evaluate_with_gradients(lambda: pretrain_loss(future[idx], model(past[idx])), params)
            step(params, grads, optim)
            total += loss * len(idx)
        rec = {"epoch": epoch, "loss": total / len(past)}
        if val is not None:
            rec["val_mae"] = forecast_mae(model, *val)
        result.history.append(rec)
        log.info("pretrain epoch %d %s", epoch, rec)

    if out is not None:
        save_encoder(model, out, {**(meta or {}), "config": config_mod.flatten(cfg), "horizon": horizon, "history": result.history})
    return result


def save_encoder(model: Forecaster, path, meta: dict | None = None) -> None:
    tensors = {n: p.detach().numpy() for n, p in model.named_parameters()}
    save_checkpoint(tensors, path, {**(meta or {}), "V": model.encoder.n_nodes, "kind": "encoder"})


@torch.no_grad()
def transfer(checkpoint, model) -> nn.Module:
    """Overwrite ``model.encoder`` with the ``encoder.*`` tensors of a checkpoint (path or dict).

    Other tensors in the checkpoint (the forecast head) are ignored and the
    model's projections and visual side are left untouched.
    """
    tensors = read_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else dict(checkpoint)
    enc = {k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")}
    own = dict(model.encoder.named_parameters())
    if "node_emb" in enc and enc["node_emb"].shape[0] != model.encoder.n_nodes:
        raise ValueError(f"checkpoint encoder has {enc['node_emb'].shape[0]} nodes, model has {model.encoder.n_nodes}")
    missing = sorted(set(own) - set(enc))
    unknown = sorted(set(enc) - set(own))
    if missing or unknown:
        raise KeyError(f"encoder tensors missing {missing}, unexpected {unknown}")
    for name, value in enc.items():
        if tuple(value.shape) != tuple(own[name].shape):
            raise ValueError(f"encoder.{name}: checkpoint {tuple(value.shape)} vs model {tuple(own[name].shape)}")
    for name, value in enc.items():
        own[name].copy_(torch.as_tensor(value, dtype=DTYPE))
    return model


def pretrain_from_config(cfg: RunConfig, out=None) -> PretrainResult:
    """Pre-train on the training split of the configured fold, tracking validation-split MAE."""
    from .trainer import load_eeg_splits, montage_for

    manifest = load_manifest(cfg.manifest_path)
    eeg = load_eeg_splits(cfg, manifest)
    montage = montage_for(cfg, eeg.clips["train"][0].n_channels, manifest.root)
    meta = {"positions": montage.positions.tolist()}
    if eeg.stats is not None:
        meta.update(norm_mean=eeg.stats.mean.tolist(), norm_std=eeg.stats.std.tolist())
    return run_pretraining(cfg, eeg.clips["train"], montage.P, eeg.clips["val"], out=out, meta=meta)
