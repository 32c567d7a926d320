
import numpy as np
import pytest
import torch

from neuroretrieve.config import run_config
from neuroretrieve.dataio import EEGClip, read_checkpoint
from neuroretrieve.diffcore import DTYPE
from neuroretrieve.montage import SensorMontage, default_montage
from neuroretrieve.pretrain import (
    build_forecaster,
    forecast_mae,
    make_windows,
    pretrain_from_config,
    pretrain_loss,
    run_pretraining,
    transfer,
    window_tensors,
)
from neuroretrieve.trainer import build_model

V = 4


def small_cfg(**kw):
    base = {
        "encoder.M": 4,
        "encoder.D": 2,
        "encoder.out_dim": 6,
        "encoder.C_node": 3,
        "joint_dim": 16,
        "visual.dim": 8,
        "pretrain.window": 16,
        "pretrain.stride": 8,
        "pretrain.epochs": 2,
        "pretrain.batch_size": 8,
    }
    base.update(kw)
    return run_config(overrides=base)


def montage():
    return SensorMontage.from_positions(default_montage(V), k=2)


def clips(n=6, T=48, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T) / 32.0
    out = []
    for i in range(n):
        phase = rng.uniform(0, 2 * np.pi, (V, 1))
        out.append(EEGClip(f"p{i}", np.sin(2 * np.pi * 3 * t + phase) + 0.1 * rng.standard_normal((V, T)), 32.0, "c"))
    return out


def test_windows_follow_the_stride():
    data = np.arange(20.0).reshape(2, 10)
    w = make_windows(data, T=4, horizon=2, stride=3)
    assert len(w) == 2
    past, fut = w[1]
    assert past.tolist() == [[3, 4, 5, 6], [13, 14, 15, 16]]
    assert fut.tolist() == [[7, 8], [17, 18]]


def test_window_that_fits_exactly():
    assert len(make_windows(np.zeros((1, 6)), T=4, horizon=2, stride=1)) == 1


def test_short_clip_warns_and_yields_nothing():
    with pytest.warns(UserWarning):
        assert make_windows(np.zeros((1, 5)), T=4, horizon=2, stride=1) == []


@pytest.mark.parametrize("args", [(0, 1, 1), (4, 0, 1), (4, 1, 0)])
def test_window_arguments_are_validated(args):
    with pytest.raises(ValueError):
        make_windows(np.zeros((1, 20)), *args)


def test_pretrain_loss_cases():
    a = torch.zeros(2, 3, 4, dtype=DTYPE)
    assert pretrain_loss(a, a).item() == 0.0
    b = a.clone()
    b[0, 0, 0] = 2.4
    assert pretrain_loss(a, b).item() == pytest.approx(2.4 / 24, abs=1e-15)
    with pytest.raises(ValueError):
        pretrain_loss(a, a[..., :3])


def test_constant_signals_are_learned():
    cfg = small_cfg(**{"pretrain.epochs": 20, "pretrain.lr": 1e-2})
    const = [EEGClip(f"p{i}", np.full((V, 48), 0.5 * (i - 2)), 32.0, "c") for i in range(5)]
    result = run_pretraining(cfg, const, montage().P, const)
    scale = np.mean([np.abs(c.data).mean() for c in const])
    assert result.history[-1]["val_mae"] <= 0.1 * scale
    assert result.history[-1]["val_mae"] < result.init_val_mae


def test_zero_epochs_keep_the_scratch_encoder(tmp_path):
    cfg = small_cfg(**{"pretrain.epochs": 0})
    run_pretraining(cfg, clips(), montage().P, out=tmp_path / "enc.ckpt")
    tensors, meta = read_checkpoint(tmp_path / "enc.ckpt")
    scratch = build_model(cfg, montage())
    for name, p in scratch.encoder.named_parameters():
        assert np.array_equal(tensors[f"encoder.{name}"], p.detach().numpy())
    assert meta["kind"] == "encoder" and meta["V"] == V and meta["history"] == []


def test_pretraining_is_deterministic(tmp_path):
    cfg = small_cfg()
    for name in ("a", "b"):
        run_pretraining(cfg, clips(), montage().P, clips(seed=1), out=tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_forecast_error_drops_on_held_out_windows():
    cfg = small_cfg(**{"pretrain.epochs": 5})
    result = run_pretraining(cfg, clips(12), montage().P, clips(4, seed=9))
    assert result.history[-1]["val_mae"] < result.init_val_mae
    past, fut = window_tensors(clips(4, seed=9), 16, 4, 8)
    assert forecast_mae(result.model, past, fut) == pytest.approx(result.history[-1]["val_mae"], rel=1e-12)


def test_transfer_copies_only_the_encoder(tmp_path):
    cfg = small_cfg()
    res = run_pretraining(cfg, clips(), montage().P, out=tmp_path / "enc.ckpt")
    model = build_model(small_cfg(seed=5), montage())
    proj_before = model.proj_eeg.weight.detach().clone()
    transfer(tmp_path / "enc.ckpt", model)
    for (n, a), (_, b) in zip(model.encoder.named_parameters(), res.model.encoder.named_parameters()):
        assert torch.equal(a, b), n
    assert torch.equal(model.proj_eeg.weight, proj_before)


def test_transfer_rejects_mismatches(tmp_path):
    cfg = small_cfg()
    run_pretraining(cfg, clips(), montage().P, out=tmp_path / "enc.ckpt")
    tensors, _ = read_checkpoint(tmp_path / "enc.ckpt")
    other = build_model(cfg, SensorMontage.from_positions(default_montage(V + 1), k=2))
    with pytest.raises(ValueError):
        transfer(tensors, other)
    model = build_model(cfg, montage())
    with pytest.raises(KeyError):
        transfer({k: v for k, v in tensors.items() if k != "encoder.lift_w"}, model)
    with pytest.raises(ValueError):
        transfer({**tensors, "encoder.lift_w": np.zeros(7)}, model)


def test_pretrain_from_config(tiny_overrides, tmp_path):
    cfg = run_config(overrides=tiny_overrides)
    result = pretrain_from_config(cfg, out=tmp_path / "enc.ckpt")
    assert len(result.history) == 2 and "val_mae" in result.history[0]
    _, meta = read_checkpoint(tmp_path / "enc.ckpt")
    assert len(meta["positions"]) == 6 and len(meta["norm_mean"]) == 6
