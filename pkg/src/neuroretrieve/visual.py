"""Visual encodings: cached backbone features or a small built-in conv encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import DimensionMismatchError, EmbeddingCache
from .diffcore import DTYPE, glorot_


@dataclass
class ImageItem:
    pair_id: str
    class_label: str
    pixels: np.ndarray | None = None  # (H, W) or (H, W, C) in [0, 1]

    def __post_init__(self):
        if self.pixels is not None:
            px = np.asarray(self.pixels, dtype=np.float64)
            if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
                raise ValueError(f"image {self.pair_id!r}: pixels must be finite and in [0, 1]")
            self.pixels = px


def encode_from_cache(pair_id: str, cache: EmbeddingCache, expected_dim: int | None = None) -> np.ndarray:
    return cache.lookup(pair_id, expected_dim=expected_dim)


def resize_to_model(pixels: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of an (H, W[, C]) image to side x side (align_corners=False)."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.shape[:2] == (side, side):
        return px.copy()
    t = torch.as_tensor(px, dtype=DTYPE)
    t = t[None, None] if t.dim() == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0]
    return (out[0] if px.ndim == 2 else out.permute(1, 2, 0)).numpy()


class ImageEncoder(nn.Module):
    """Three conv(3x3) -> 2x2 max pool -> tanh stages, then a linear head."""

    def __init__(self, side: int = 32, in_ch: int = 1, widths=(8, 16, 16), dim: int = 128):
        super().__init__()
        if side % 8:
            raise ValueError("image side must be divisible by 8")
        self.side, self.in_ch, self.dim = side, in_ch, dim
        chans = (in_ch, *widths)
        self.conv_w = nn.ParameterList(
            nn.Parameter(torch.empty(chans[i + 1], chans[i], 3, 3, dtype=DTYPE)) for i in range(3)
        )
        self.conv_b = nn.ParameterList(nn.Parameter(torch.zeros(chans[i + 1], dtype=DTYPE)) for i in range(3))
        flat = widths[-1] * (side // 8) ** 2
        self.head_w = nn.Parameter(torch.empty(flat, dim, dtype=DTYPE))
        self.head_b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def init(self, gen: torch.Generator):
        for w in self.conv_w:
            glorot_(w, gen, w.shape[1] * 9, w.shape[0] * 9)
        glorot_(self.head_w, gen, *self.head_w.shape)
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W) or (B, C, H, W) -> (B, dim)."""
        if x.dim() == 3:
            x = x[:, None]
        for w, b in zip(self.conv_w, self.conv_b):
            x = torch.tanh(F.max_pool2d(F.conv2d(x, w, b, padding=1), 2))
        return x.flatten(1) @ self.head_w + self.head_b


def image_batch(items, side: int) -> torch.Tensor:
    arrs = []
    for it in items:
        px = resize_to_model(it.pixels, side)
        arrs.append(px if px.ndim == 2 else np.moveaxis(px, -1, 0))
    return torch.as_tensor(np.stack(arrs), dtype=DTYPE)


def encode_image(item: ImageItem, encoder: ImageEncoder) -> np.ndarray:
    with torch.no_grad():
        return encoder(image_batch([item], encoder.side))[0].numpy()


def encode_images(items, encoder: ImageEncoder, batch_size: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            out.append(encoder(image_batch(items[i : i + batch_size], encoder.side)).numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.dim))


def check_cache_dim(cache: EmbeddingCache, expected_dim: int) -> None:
    if cache.dim != expected_dim:
        raise DimensionMismatchError(f"embedding cache dim {cache.dim} != configured visual dim {expected_dim}")
