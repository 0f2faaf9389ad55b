"""Category-conditioned label-map-to-image translation with adversarial training.

The generator is a stack of spatially-adaptive normalization blocks whose
modulation input is the label map concatenated depth-wise with broadcast
category-embedding planes. The discriminator is a category-aware multi-scale
patch network trained with the hinge objective plus feature matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class TranslatorConfig:
    p: int
    n_categories: int
    out_resolution: int = 128  # 256 is exposed as an ablation flag
    d_e: int = 64
    embed_channels: int = 8  # category planes concatenated to the label map
    n_blocks: int = 7
    base_channels: int = 16
    n_disc_scales: int = 2
    disc_channels: int = 16
    class_conditioning: bool = True  # ablation: drop the category planes

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_categories": self.n_categories,
            "out_resolution": self.out_resolution,
            "d_e": self.d_e,
            "embed_channels": self.embed_channels,
            "n_blocks": self.n_blocks,
            "base_channels": self.base_channels,
            "n_disc_scales": self.n_disc_scales,
            "disc_channels": self.disc_channels,
            "class_conditioning": self.class_conditioning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TranslatorConfig":
        return cls(
            p=int(d["p"]),
            n_categories=int(d["n_categories"]),
            out_resolution=int(d["out_resolution"]),
            d_e=int(d["d_e"]),
            embed_channels=int(d["embed_channels"]),
            n_blocks=int(d["n_blocks"]),
            base_channels=int(d["base_channels"]),
            n_disc_scales=int(d["n_disc_scales"]),
            disc_channels=int(d["disc_channels"]),
            class_conditioning=bool(d["class_conditioning"]),
        )

    @property
    def seg_channels(self) -> int:
        return self.p + self.embed_channels


class CategoryPlanes(nn.Module):
    """Embed the category and broadcast it to spatial planes."""

    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.n_categories, cfg.d_e)
        self.to_planes = nn.Linear(cfg.d_e, cfg.embed_channels)
        self.enabled = cfg.class_conditioning

    def forward(self, category: torch.Tensor, h: int, w: int) -> torch.Tensor:
        planes = self.to_planes(self.embed(category))
        if not self.enabled:
            planes = planes * 0.0
        return planes.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, h, w)


class SpadeNorm(nn.Module):
    """Parameter-free normalization modulated by the semantic input."""

    def __init__(self, channels: int, seg_channels: int, hidden: int = 32):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(seg_channels, hidden, 3, 1, 1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, 1, 1)
        self.beta = nn.Conv2d(hidden, channels, 3, 1, 1)

    def forward(self, x: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        seg = F.interpolate(seg, size=x.shape[-2:], mode="nearest")
        h = self.shared(seg)
        return self.norm(x) * (1 + self.gamma(h)) + self.beta(h)


class SpadeBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, seg_channels: int):
        super().__init__()
        c_mid = min(c_in, c_out)
        self.norm1 = SpadeNorm(c_in, seg_channels)
        self.conv1 = nn.Conv2d(c_in, c_mid, 3, 1, 1)
        self.norm2 = SpadeNorm(c_mid, seg_channels)
        self.conv2 = nn.Conv2d(c_mid, c_out, 3, 1, 1)
        self.learn_skip = c_in != c_out
        if self.learn_skip:
            self.norm_s = SpadeNorm(c_in, seg_channels)
            self.conv_s = nn.Conv2d(c_in, c_out, 1, bias=False)

    def forward(self, x: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        skip = self.conv_s(self.norm_s(x, seg)) if self.learn_skip else x
        h = self.conv1(F.leaky_relu(self.norm1(x, seg), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h, seg), 0.2))
        return skip + h


def _generator_channels(cfg: TranslatorConfig) -> list[int]:
    c = cfg.base_channels
    plan = [4 * c, 4 * c, 2 * c, 2 * c, c, c, c]
    if cfg.n_blocks <= len(plan):
        return plan[: cfg.n_blocks]
    return plan + [c] * (cfg.n_blocks - len(plan))


class Generator(nn.Module):
    """Label map + category planes -> RGB in [-1, 1]."""

    START_SIZE = 4

    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        self.cfg = cfg
        self.planes = CategoryPlanes(cfg)
        chans = _generator_channels(cfg)
        self.stem = nn.Conv2d(cfg.seg_channels, chans[0], 3, 1, 1)
        self.blocks = nn.ModuleList(
            SpadeBlock(a, b, cfg.seg_channels)
            for a, b in zip(chans, chans[1:] + [chans[-1]])
        )
        # upsample after the leading blocks until the output resolution is reached
        n_up = 0
        size = self.START_SIZE
        while size < cfg.out_resolution:
            size *= 2
            n_up += 1
        if n_up > cfg.n_blocks:
            raise ValueError("not enough blocks to reach the output resolution")
        self.upsample_after = set(range(n_up))
        self.to_rgb = nn.Conv2d(chans[-1] if cfg.n_blocks > 0 else chans[0], 3, 3, 1, 1)

    def forward(self, label_map: torch.Tensor, category: torch.Tensor) -> torch.Tensor:
        _check_one_hot(label_map)
        b, _, h, w = label_map.shape
        seg = torch.cat([label_map, self.planes(category, h, w)], dim=1)
        x = self.stem(F.interpolate(seg, size=(self.START_SIZE,) * 2, mode="nearest"))
        for i, block in enumerate(self.blocks):
            x = block(x, seg)
            if i in self.upsample_after:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.to_rgb(x))


def _check_one_hot(label_map: torch.Tensor) -> None:
    if not torch.all((label_map == 0) | (label_map == 1)):
        raise ValueError("label map channels must be binary")
    if torch.any(label_map.sum(dim=1) > 1):
        raise ValueError("label map must be one-hot per pixel")


class PatchDiscriminator(nn.Module):
    """Single-scale patch network; returns the score map and feature list.

    With kernel 4 the score map side is H/4 - 2 for an even input side H
    (two stride-2 convs then two stride-1 convs).
    """

    def __init__(self, in_channels: int, ndf: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                nn.Conv2d(in_channels, ndf, 4, 2, 1),
                nn.Conv2d(ndf, ndf * 2, 4, 2, 1),
                nn.Conv2d(ndf * 2, ndf * 2, 4, 1, 1),
            ]
        )
        self.score = nn.Conv2d(ndf * 2, 1, 4, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
            feats.append(x)
        return self.score(x), feats


class Discriminator(nn.Module):
    """Category-aware multi-scale patch discriminator."""

    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        self.cfg = cfg
        self.planes = CategoryPlanes(cfg)
        in_ch = cfg.p + 3 + cfg.embed_channels
        self.scales = nn.ModuleList(
            PatchDiscriminator(in_ch, cfg.disc_channels) for _ in range(cfg.n_disc_scales)
        )

    def forward(
        self, label_map: torch.Tensor, image: torch.Tensor, category: torch.Tensor
    ) -> tuple[list[torch.Tensor], list[list[torch.Tensor]]]:
        if label_map.shape[-2:] != image.shape[-2:]:
            raise ValueError("label map and image spatial sizes must match")
        b, _, h, w = image.shape
        x = torch.cat([label_map, image, self.planes(category, h, w)], dim=1)
        scores, features = [], []
        for i, scale in enumerate(self.scales):
            s, f = scale(x)
            scores.append(s)
            features.append(f)
            if i + 1 < len(self.scales):
                x = F.avg_pool2d(x, 2)
        return scores, features


def score_map_size(input_size: int) -> int:
    """Documented patch-map side for PatchDiscriminator on an even input side."""
    return input_size // 4 - 2


def hinge_d_loss(real_scores: list[torch.Tensor], fake_scores: list[torch.Tensor]) -> torch.Tensor:
    """Mean hinge loss over every patch at every scale."""
    real = torch.cat([s.reshape(-1) for s in real_scores])
    fake = torch.cat([s.reshape(-1) for s in fake_scores])
    return F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()


def feature_matching(
    real_features: list[torch.Tensor], fake_features: list[torch.Tensor]
) -> torch.Tensor:
    """Mean over feature pairs of the mean absolute difference."""
    if len(real_features) != len(fake_features) or not real_features:
        raise ValueError("feature lists must be nonempty and aligned")
    losses = [(r - f).abs().mean() for r, f in zip(real_features, fake_features)]
    return torch.stack(losses).mean()


def generator_loss(
    fake_scores: list[torch.Tensor],
    disc_feature_pairs: tuple[list[torch.Tensor], list[torch.Tensor]] | None = None,
    perceptual_feature_pairs: tuple[list[torch.Tensor], list[torch.Tensor]] | None = None,
    lambda_disc_feat: float = 10.0,
    lambda_perc_feat: float = 10.0,
) -> torch.Tensor:
    fake = torch.cat([s.reshape(-1) for s in fake_scores])
    loss = -fake.mean()
    if disc_feature_pairs is not None:
        real_f, fake_f = disc_feature_pairs
        loss = loss + lambda_disc_feat * feature_matching(real_f, fake_f)
    if perceptual_feature_pairs is not None:
        real_f, fake_f = perceptual_feature_pairs
        loss = loss + lambda_perc_feat * feature_matching(real_f, fake_f)
    return loss


class RandomPerceptualFeatures(nn.Module):
    """Fixed random-weight feature extractor for desk-scale training.

    Level 0 is the raw image itself, so matching on these features bounds the
    plain pixel-wise L1 gap; two frozen conv levels add structure.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, int] = (8, 16)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c1, c2 = channels
        self.conv1 = nn.Conv2d(3, c1, 3, 2, 1)
        self.conv2 = nn.Conv2d(c1, c2, 3, 2, 1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                bound = (6.0 / fan_in) ** 0.5
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h1 = F.relu(self.conv1(image))
        h2 = F.relu(self.conv2(h1))
        return [image, h1, h2]


def flatten_features(nested: list[list[torch.Tensor]]) -> list[torch.Tensor]:
    return [f for per_scale in nested for f in per_scale]
