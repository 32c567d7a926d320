"""Synthetic paired EEG/image data with a controllable amount of shared information.

Each pair carries a latent code ``z = prototype[class] + instance_noise``.

* The image is a sinusoidal grating. Its orientation and spatial frequency are
  smooth functions of the class prototype; its phase and brightness offset are
  functions of the instance noise.
* The EEG clip is, per channel, a sum of sinusoids at fixed frequencies whose
  amplitudes are a channel-specific softplus mixing of ``z``. Trial phases are
  random. The mixture is scaled so its RMS equals ``snr`` and unit-variance
  1/f noise is added.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.linear_model import RidgeClassifier
from sklearn.model_selection import train_test_split

from .dataio import EEGClip, ManifestEntry, PairManifest, write_clip, write_manifest
from .evalmetrics import make_splits
from .montage import default_montage, save_positions
from .visual import ImageItem


@dataclass
class SynthConfig:
    n_classes: int = 8
    per_class: int = 25
    V: int = 16
    T: int = 256
    fs: float = 128.0
    side: int = 32
    snr: float = 2.0
    latent_dim: int = 8
    instance_scale: float = 0.4
    n_sets: int = 5
    seed: int = 7

    def __post_init__(self):
        for name in ("n_classes", "per_class", "V", "T", "fs", "side", "latent_dim", "n_sets"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.snr < 0 or self.instance_scale < 0:
            raise ValueError("snr and instance_scale must be non-negative")


@dataclass
class SynthData:
    clips: list[EEGClip]
    images: list[ImageItem]
    manifest: PairManifest
    latents: np.ndarray


def pink_noise(rng: np.random.Generator, shape, fs: float) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum along the last axis."""
    T = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(T, d=1.0 / fs)
    f[0] = f[1] if T > 1 else 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n=T, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def grating(side: int, orientation: float, cycles: float, phase: float, offset: float) -> np.ndarray:
    coords = (np.arange(side) + 0.5) / side
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = xx * np.cos(orientation) + yy * np.sin(orientation)
    return np.clip(0.5 + 0.35 * np.sin(2 * np.pi * cycles * proj + phase) + offset, 0.0, 1.0)


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    L, V, T = cfg.latent_dim, cfg.V, cfg.T
    n_freq = L
    freqs = np.linspace(0.05, 0.35, n_freq) * cfg.fs
    prototypes = rng.standard_normal((cfg.n_classes, L))
    mixing = rng.standard_normal((V, n_freq, L)) / np.sqrt(L)
    img_dirs = rng.standard_normal((4, L)) / np.sqrt(L)

    n = cfg.n_classes * cfg.per_class
    labels = np.repeat(np.arange(cfg.n_classes), cfg.per_class)
    noise_codes = cfg.instance_scale * rng.standard_normal((n, L))
    latents = prototypes[labels] + noise_codes

    amps = _softplus(np.einsum("vfl,nl->nvf", mixing, latents))  # (n, V, F)
    rms = np.sqrt(np.mean(np.sum(amps**2, axis=-1) / 2))
    amps *= cfg.snr / rms
    trial_phase = rng.uniform(0, 2 * np.pi, size=(n, V, n_freq))
    t = np.arange(T) / cfg.fs
    noise = pink_noise(rng, (n, V, T), cfg.fs)

    clips, images, entries = [], [], []
    for i in range(n):
        c = labels[i]
        waves = np.sin(2 * np.pi * freqs[None, :, None] * t + trial_phase[i][..., None])  # (V, F, T)
        data = np.einsum("vf,vft->vt", amps[i], waves) + noise[i]
        pair_id = f"c{c:02d}_{i % cfg.per_class:04d}"
        label = f"class{c:02d}"
        clips.append(EEGClip(pair_id=pair_id, data=data, fs=cfg.fs, class_label=label))

        proto = prototypes[c]
        u = noise_codes[i] / max(cfg.instance_scale, 1e-12)
        orientation = np.arctan2(img_dirs[0] @ proto, img_dirs[1] @ proto)
        cycles = 1.5 + 4.5 * _sigmoid(2.0 * (img_dirs[2] @ proto))
        phase = 2 * np.pi * _sigmoid(1.5 * (img_dirs[3] @ u))
        offset = 0.15 * np.tanh(img_dirs[2] @ u)
        images.append(ImageItem(pair_id=pair_id, class_label=label, pixels=grating(cfg.side, orientation, cycles, phase, offset)))
        entries.append(ManifestEntry(pair_id=pair_id, eeg_path=f"clips/{pair_id}.eeg", image_ref=i, class_label=label, set_id=0))

    plan = make_splits([(e.pair_id, e.class_label) for e in entries], cfg.n_sets, seed=cfg.seed)
    for e in entries:
        e.set_id = plan.assignment[e.pair_id]
    manifest = PairManifest(entries=entries, n_sets=cfg.n_sets)
    return SynthData(clips=clips, images=images, manifest=manifest, latents=latents)


def band_power_features(clips, n_bands: int = 8) -> np.ndarray:
    """Log mean power in ``n_bands`` equal-width bands per channel, flattened."""
    feats = []
    for clip in clips:
        x = np.asarray(clip.data, dtype=np.float64)
        power = np.abs(np.fft.rfft(x - x.mean(axis=1, keepdims=True), axis=1)) ** 2
        bands = np.array_split(power[:, 1:], n_bands, axis=1)
        feats.append(np.log(np.stack([b.mean(axis=1) for b in bands], axis=1) + 1e-12).ravel())
    return np.asarray(feats)


def probe_decodability(clips, labels, seed: int = 0, alpha: float = 1.0) -> float:
    """Held-out accuracy of a one-vs-rest ridge classifier on band-power features (80/20 split)."""
    X = band_power_features(clips)
    y = np.asarray(labels)
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=0.2, random_state=seed, stratify=y)
    mu, sd = X_tr.mean(axis=0), X_tr.std(axis=0) + 1e-12
    clf = RidgeClassifier(alpha=alpha).fit((X_tr - mu) / sd, y_tr)
    return float(clf.score((X_te - mu) / sd, y_te))


def write_dataset(data: SynthData, out_dir, cfg: SynthConfig | None = None) -> Path:
    """Write clips, ``images.npy``, ``manifest.jsonl`` and ``montage.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    for clip, entry in zip(data.clips, data.manifest.entries):
        write_clip(clip, out / entry.eeg_path)
    np.save(out / "images.npy", np.stack([im.pixels for im in data.images]).astype(np.float32))
    write_manifest(data.manifest, out / "manifest.jsonl")
    save_positions(default_montage(data.clips[0].n_channels), out / "montage.txt")
    if cfg is not None:
        (out / "synth.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    return out
