"""The retrieval model: EEG encoder + visual side + joint-space projections."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .crossmodal import NegativeConfig, Projection, infonce_loss
from .diffcore import DTYPE, ParamStore
from .encoder import EEGEncoder, EncoderConfig
from .visual import ImageEncoder


class RetrievalModel(nn.Module):
    def __init__(
        self,
        enc_cfg: EncoderConfig,
        P: np.ndarray,
        vis_dim: int = 128,
        joint_dim: int = 64,
        tau: float = 0.07,
        learn_tau: bool = False,
        visual: ImageEncoder | None = None,
        visual_trainable: bool = False,
    ):
        super().__init__()
        self.encoder = EEGEncoder(enc_cfg, P)
        self.proj_eeg = Projection(enc_cfg.out_dim, joint_dim)
        self.proj_img = Projection(vis_dim, joint_dim)
        self.visual = visual
        if visual is not None and visual.dim != vis_dim:
            raise ValueError(f"image encoder emits {visual.dim} dims, projection expects {vis_dim}")
        self.visual_trainable = visual_trainable
        if visual is not None and not visual_trainable:
            visual.requires_grad_(False)
        if learn_tau:
            self.log_tau = nn.Parameter(torch.tensor(math.log(tau), dtype=DTYPE))
        else:
            self.register_buffer("fixed_tau", torch.tensor(tau, dtype=DTYPE))

    def init(self, gen: torch.Generator) -> "RetrievalModel":
        self.encoder.init(gen)
        self.proj_eeg.init(gen)
        self.proj_img.init(gen)
        if self.visual is not None:
            self.visual.init(gen)
        return self

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp() if hasattr(self, "log_tau") else self.fixed_tau

    def trainable(self) -> ParamStore:
        return ParamStore((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def all_params(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def embed_eeg(self, E: torch.Tensor) -> torch.Tensor:
        return self.proj_eeg(self.encoder(E))

    def embed_visual(self, z_I: torch.Tensor) -> torch.Tensor:
        return self.proj_img(z_I)

    def loss(self, E, z_I, neg: NegativeConfig, mask: torch.Tensor | None = None, images=None) -> torch.Tensor:
        if images is not None:
            z_I = self.visual(images)
        return infonce_loss(self.embed_eeg(E), self.embed_visual(z_I), self.tau, neg, mask=mask)
