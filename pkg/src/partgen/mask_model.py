"""Conditional VAE over per-part pixel masks.

Masks are CNN-encoded per part, aggregated with a bidirectional GRU over the
fixed slot order (absent parts feed zero tensors), gated by a box-path GRU
feature and by the category embedding, then mapped to a diagonal Gaussian.
The decoder replicates the gated latent across slots, runs a bidirectional
GRU and decodes each step into two-class per-pixel logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import PartGraph
from .labelmap import LabelMapTensor, compose_label_map

LOGVAR_CLAMP = 10.0
PROB_EPS = 1e-7


@dataclass(frozen=True)
class MaskModelConfig:
    p: int
    n_categories: int
    mask_resolution: int = 64
    h_s: int = 128  # per-part recurrent state width (mask path)
    h_b: int = 64  # box-path recurrent width before the 1x1 transform
    d_m: int = 128
    cnn_channels: tuple[int, int, int] = (8, 16, 32)
    encoder_box_conditioning: bool = True  # ablation: drop H_b gating in the encoder
    latent_conditioning: bool = True  # ablation: drop gating of the latent vector

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_categories": self.n_categories,
            "mask_resolution": self.mask_resolution,
            "h_s": self.h_s,
            "h_b": self.h_b,
            "d_m": self.d_m,
            "cnn_channels": list(self.cnn_channels),
            "encoder_box_conditioning": self.encoder_box_conditioning,
            "latent_conditioning": self.latent_conditioning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskModelConfig":
        return cls(
            p=int(d["p"]),
            n_categories=int(d["n_categories"]),
            mask_resolution=int(d["mask_resolution"]),
            h_s=int(d["h_s"]),
            h_b=int(d["h_b"]),
            d_m=int(d["d_m"]),
            cnn_channels=tuple(int(c) for c in d["cnn_channels"]),
            encoder_box_conditioning=bool(d["encoder_box_conditioning"]),
            latent_conditioning=bool(d["latent_conditioning"]),
        )


@dataclass(frozen=True)
class MaskPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor


class MaskCNN(nn.Module):
    """Three stride-2 blocks from an m x m raster to an h_s vector."""

    def __init__(self, cfg: MaskModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.cnn_channels
        # GELU keeps the stack smooth, so finite-difference checks are exact
        self.convs = nn.Sequential(
            nn.Conv2d(1, c1, 4, 2, 1),
            nn.GELU(),
            nn.Conv2d(c1, c2, 4, 2, 1),
            nn.GELU(),
            nn.Conv2d(c2, c3, 4, 2, 1),
            nn.GELU(),
        )
        side = cfg.mask_resolution // 8
        self.out = nn.Linear(c3 * side * side, cfg.h_s)
        # sparse binary inputs leave conv features tiny; normalize before the GRU
        self.norm = nn.LayerNorm(cfg.h_s)

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        b, p, m, _ = masks.shape
        h = self.convs(masks.reshape(b * p, 1, m, m))
        return self.norm(self.out(h.reshape(b * p, -1))).reshape(b, p, -1)


class MaskEncoder(nn.Module):
    def __init__(self, cfg: MaskModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_cnn = MaskCNN(cfg)
        self.mask_gru = nn.GRU(cfg.h_s, cfg.h_s // 2, batch_first=True, bidirectional=True)
        self.box_gru = nn.GRU(4, cfg.h_b // 2, batch_first=True, bidirectional=True)
        self.box_transform = nn.Linear(cfg.h_b, cfg.h_s)  # the 1x1 transform to p x h_s
        self.category_gate = nn.Embedding(cfg.n_categories, cfg.h_s)
        self.pool_norm = nn.LayerNorm(cfg.h_s)
        self.mu_head = nn.Linear(cfg.h_s, cfg.d_m)
        self.log_var_head = nn.Linear(cfg.h_s, cfg.d_m)
        # start with a tight posterior so early reconstruction sees clean latents
        nn.init.constant_(self.log_var_head.bias, -4.0)

    def forward(
        self, masks: torch.Tensor, boxes: torch.Tensor, category: torch.Tensor
    ) -> MaskPosterior:
        if masks.shape[-1] != self.cfg.mask_resolution:
            raise ValueError(
                f"mask resolution {masks.shape[-1]} != configured {self.cfg.mask_resolution}"
            )
        if masks.shape[1] != self.cfg.p or boxes.shape[1] != self.cfg.p:
            raise ValueError("sequence length must equal the global slot count p")
        h_s, _ = self.mask_gru(self.mask_cnn(masks))
        if self.cfg.encoder_box_conditioning:
            h_b, _ = self.box_gru(boxes)
            h_s = h_s * torch.sigmoid(self.box_transform(h_b))
        pooled = self.pool_norm(h_s.mean(dim=1))
        pooled = pooled * torch.sigmoid(self.category_gate(category))
        mu = self.mu_head(pooled)
        log_var = self.log_var_head(pooled).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return MaskPosterior(mu=mu, log_var=log_var)


class MaskDecoder(nn.Module):
    def __init__(self, cfg: MaskModelConfig):
        super().__init__()
        self.cfg = cfg
        self.box_gru = nn.GRU(4, cfg.h_b // 2, batch_first=True, bidirectional=True)
        self.box_gate = nn.Linear(cfg.h_b, cfg.d_m)
        self.category_gate = nn.Embedding(cfg.n_categories, cfg.d_m)
        self.to_zg = nn.Linear(cfg.d_m, cfg.h_s)
        self.zg_norm = nn.LayerNorm(cfg.h_s)
        self.gru = nn.GRU(cfg.h_s, cfg.h_s // 2, batch_first=True, bidirectional=True)
        c1, c2, c3 = cfg.cnn_channels
        side = cfg.mask_resolution // 8
        self.side, self.c3 = side, c3
        self.from_state = nn.Linear(cfg.h_s, c3 * side * side)
        self.deconvs = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c3, c2, 3, 1, 1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c2, c1, 3, 1, 1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c1, 2, 3, 1, 1),  # two-class logits per pixel
        )

    def forward(
        self, z: torch.Tensor, boxes: torch.Tensor, category: torch.Tensor
    ) -> torch.Tensor:
        """Per-slot foreground probability rasters, shape (B, p, m, m)."""
        if self.cfg.latent_conditioning:
            h_b, _ = self.box_gru(boxes)
            z = z * torch.sigmoid(self.box_gate(h_b.mean(dim=1)))
            z = z * torch.sigmoid(self.category_gate(category))
        z_g = self.zg_norm(self.to_zg(z))
        z_rep = z_g.unsqueeze(1).expand(-1, self.cfg.p, -1)
        steps, _ = self.gru(z_rep)
        steps = steps + z_rep  # residual keeps the latent visible past the gates
        b, p, _ = steps.shape
        h = self.from_state(steps.reshape(b * p, -1)).reshape(b * p, self.c3, self.side, self.side)
        logits = self.deconvs(h)
        probs = torch.softmax(logits, dim=1)[:, 1]
        m = self.cfg.mask_resolution
        return probs.reshape(b, p, m, m)


class MaskVAE(nn.Module):
    def __init__(self, cfg: MaskModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = MaskEncoder(cfg)
        self.decoder = MaskDecoder(cfg)

    def encode(self, masks, boxes, category) -> MaskPosterior:
        return self.encoder(masks, boxes, category)

    def decode(self, z, boxes, category) -> torch.Tensor:
        return self.decoder(z, boxes, category)

    def forward(self, masks, boxes, category, noise):
        post = self.encode(masks, boxes, category)
        z = post.mu + torch.exp(0.5 * post.log_var) * noise
        return self.decode(z, boxes, category), post


def mask_nll(pred: torch.Tensor, gt: torch.Tensor, presence: torch.Tensor) -> torch.Tensor:
    """Mean over present parts of mean per-pixel BCE; 0 when nothing is present."""
    probs = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = gt.to(probs.dtype)
    bce = -(t * torch.log(probs) + (1 - t) * torch.log(1 - probs))
    per_part = bce.mean(dim=(-1, -2))
    mask = presence.to(probs.dtype)
    n_present = mask.sum(dim=-1)
    totals = (per_part * mask).sum(dim=-1)
    safe = torch.where(n_present > 0, totals / n_present.clamp(min=1), torch.zeros_like(totals))
    return safe.mean()


def sample_to_tensors(sample_masks: dict[int, np.ndarray], p: int, m: int) -> np.ndarray:
    """Dense (p, m, m) array with zero rasters for absent slots."""
    out = np.zeros((p, m, m), dtype=np.float32)
    for slot, mask in sample_masks.items():
        out[slot] = mask
    return out


def sample_label_map(
    model: MaskVAE,
    layout: PartGraph,
    category: int,
    rng: np.random.Generator,
    canvas_size: int = 128,
    threshold: float = 0.5,
) -> tuple[LabelMapTensor, dict[int, np.ndarray]]:
    """Draw z ~ N(0, I), decode per-part rasters, binarize and compose.

    Returns the composed label map and the binarized per-part rasters (the
    rasters are kept so box-only edits can recompose without re-decoding).
    """
    cfg = model.cfg
    z = torch.from_numpy(rng.standard_normal(cfg.d_m)).to(torch.float32)
    boxes = torch.from_numpy(layout.boxes.astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        probs = model.decode(z.unsqueeze(0), boxes, torch.tensor([category]))[0].numpy()
    present = layout.present_slots()
    rasters = {k: (probs[k] >= threshold).astype(np.uint8) for k in present}
    tensor = compose_label_map(
        rasters, layout.boxes, layout.presence, category, canvas_size, cfg.p
    )
    return tensor, rasters
