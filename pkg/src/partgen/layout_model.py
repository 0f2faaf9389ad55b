"""Conditional VAE over part-labelled bounding-box layouts.

Encoder: graph convolutions with symmetric normalization and self-loops over
the part graph, category-gated pooling plus a 1x1-conv skip path over the box
sub-matrix. Decoder: an MLP over the gated latent, conditioned on category and
part presence, emitting presence probabilities, box coordinates and a
symmetrized adjacency probability matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import PartGraph, validate_part_graph

LOGVAR_CLAMP = 10.0
PROB_EPS = 1e-7
IOU_EPS = 1e-6


@dataclass(frozen=True)
class LayoutModelConfig:
    p: int
    n_categories: int
    category_slots: tuple[tuple[int, ...], ...]  # allowed slots per category
    gcn_widths: tuple[int, ...] = (32, 64)
    d_z: int = 64
    decoder_widths: tuple[int, ...] = (64, 64)
    encoder_category_conditioning: bool = True  # ablation: disable encoder-side gating
    skip_connection: bool = True  # ablation: disable the box-submatrix skip path

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_categories": self.n_categories,
            "category_slots": [list(s) for s in self.category_slots],
            "gcn_widths": list(self.gcn_widths),
            "d_z": self.d_z,
            "decoder_widths": list(self.decoder_widths),
            "encoder_category_conditioning": self.encoder_category_conditioning,
            "skip_connection": self.skip_connection,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutModelConfig":
        return cls(
            p=int(d["p"]),
            n_categories=int(d["n_categories"]),
            category_slots=tuple(tuple(int(s) for s in row) for row in d["category_slots"]),
            gcn_widths=tuple(int(w) for w in d["gcn_widths"]),
            d_z=int(d["d_z"]),
            decoder_widths=tuple(int(w) for w in d["decoder_widths"]),
            encoder_category_conditioning=bool(d["encoder_category_conditioning"]),
            skip_connection=bool(d["skip_connection"]),
        )


@dataclass(frozen=True)
class LayoutPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass(frozen=True)
class LayoutDecodeOutput:
    presence_probs: torch.Tensor  # (..., p) in (0,1)
    boxes: torch.Tensor  # (..., p, 4) in [0,1]
    adjacency_probs: torch.Tensor  # (..., p, p), symmetric


def normalized_adjacency(A: torch.Tensor) -> torch.Tensor:
    """D^{-1/2} (A + I) D^{-1/2}; the self-loop keeps every degree >= 1."""
    p = A.shape[-1]
    eye = torch.eye(p, dtype=A.dtype, device=A.device)
    a_tilde = A + eye
    deg = a_tilde.sum(dim=-1)
    inv_sqrt = deg.pow(-0.5)
    return a_tilde * inv_sqrt.unsqueeze(-1) * inv_sqrt.unsqueeze(-2)


def gcn_layer(
    H: torch.Tensor, A: torch.Tensor, weight: torch.Tensor, activation=torch.relu
) -> torch.Tensor:
    """One propagation step: activation(D^{-1/2} (A+I) D^{-1/2} H W)."""
    return activation(normalized_adjacency(A) @ H @ weight)


class GraphConv(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, H: torch.Tensor, A_norm: torch.Tensor) -> torch.Tensor:
        return torch.relu(A_norm @ H @ self.weight)


class LayoutEncoder(nn.Module):
    def __init__(self, cfg: LayoutModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = (5,) + cfg.gcn_widths
        self.convs = nn.ModuleList(GraphConv(a, b) for a, b in zip(widths[:-1], widths[1:]))
        hidden = cfg.gcn_widths[-1]
        self.category_gate = nn.Embedding(cfg.n_categories, hidden)
        self.skip = nn.Linear(4, hidden)  # 1x1 conv over the p spatial positions
        self.trunk = nn.Linear(hidden, hidden)
        self.mu_head = nn.Linear(hidden, cfg.d_z)
        self.log_var_head = nn.Linear(hidden, cfg.d_z)
        # start with a tight posterior so early reconstruction sees clean latents
        nn.init.constant_(self.log_var_head.bias, -4.0)

    def forward(self, X: torch.Tensor, A: torch.Tensor, category: torch.Tensor) -> LayoutPosterior:
        if int(category.max()) >= self.cfg.n_categories or int(category.min()) < 0:
            raise ValueError(f"category index out of range [0, {self.cfg.n_categories})")
        A_norm = normalized_adjacency(A.to(X.dtype))
        h = X
        for conv in self.convs:
            h = conv(h, A_norm)
        pooled = h.mean(dim=-2)
        if self.cfg.encoder_category_conditioning:
            pooled = pooled * torch.sigmoid(self.category_gate(category))
        if self.cfg.skip_connection:
            pooled = pooled + self.skip(X[..., 1:5]).mean(dim=-2)
        feat = torch.relu(self.trunk(pooled))
        mu = self.mu_head(feat)
        log_var = self.log_var_head(feat).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return LayoutPosterior(mu=mu, log_var=log_var)


class LayoutDecoder(nn.Module):
    def __init__(self, cfg: LayoutModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gate = nn.Linear(cfg.n_categories + cfg.p, cfg.d_z)
        layers: list[nn.Module] = []
        widths = (cfg.d_z,) + cfg.decoder_widths
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.mlp = nn.Sequential(*layers)
        w = cfg.decoder_widths[-1]
        self.presence_head = nn.Linear(w, cfg.p)
        self.box_head = nn.Linear(w, cfg.p * 4)
        self.adjacency_head = nn.Linear(w, cfg.p * cfg.p)

    def forward(
        self, z: torch.Tensor, category: torch.Tensor, part_list: torch.Tensor
    ) -> LayoutDecodeOutput:
        cat_onehot = nn.functional.one_hot(category, self.cfg.n_categories).to(z.dtype)
        gate = torch.sigmoid(self.gate(torch.cat([cat_onehot, part_list.to(z.dtype)], dim=-1)))
        h = self.mlp(z * gate)
        presence = torch.sigmoid(self.presence_head(h))
        boxes = torch.sigmoid(self.box_head(h)).reshape(*h.shape[:-1], self.cfg.p, 4)
        adj = torch.sigmoid(self.adjacency_head(h)).reshape(*h.shape[:-1], self.cfg.p, self.cfg.p)
        adj = (adj + adj.transpose(-1, -2)) / 2
        return LayoutDecodeOutput(presence_probs=presence, boxes=boxes, adjacency_probs=adj)


class LayoutVAE(nn.Module):
    """The full layout model; batched over the leading dimension."""

    def __init__(self, cfg: LayoutModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LayoutEncoder(cfg)
        self.decoder = LayoutDecoder(cfg)

    def check_part_list(self, category: int, slots) -> None:
        allowed = set(self.cfg.category_slots[category])
        bad = sorted(set(int(s) for s in slots) - allowed)
        if bad:
            raise ValueError(f"slots {bad} are not in category {category}'s part list")

    def encode(self, X, A, category) -> LayoutPosterior:
        return self.encoder(X, A, category)

    def decode(self, z, category, part_list) -> LayoutDecodeOutput:
        return self.decoder(z, category, part_list)

    def forward(self, X, A, category, part_list, noise):
        post = self.encode(X, A, category)
        z = reparameterize(post, noise)
        return self.decode(z, category, part_list), post


def reparameterize(post: LayoutPosterior, noise: torch.Tensor) -> torch.Tensor:
    return post.mu + torch.exp(0.5 * post.log_var) * noise


# ---------------------------------------------------------------------------
# Losses (all dtype-preserving; defined per the layout reconstruction objective)
# ---------------------------------------------------------------------------


def _clamp_probs(probs: torch.Tensor) -> torch.Tensor:
    return probs.clamp(PROB_EPS, 1.0 - PROB_EPS)


def presence_nll(presence_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Bernoulli negative log-likelihood averaged over the p slots."""
    probs = _clamp_probs(presence_probs)
    t = targets.to(probs.dtype)
    nll = -(t * torch.log(probs) + (1 - t) * torch.log(1 - probs))
    return nll.mean(dim=-1).mean()


def box_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-row IoU of (x0, y0, x1, y1) boxes; degenerate rows give 0."""
    ix0 = torch.maximum(pred[..., 0], gt[..., 0])
    iy0 = torch.maximum(pred[..., 1], gt[..., 1])
    ix1 = torch.minimum(pred[..., 2], gt[..., 2])
    iy1 = torch.minimum(pred[..., 3], gt[..., 3])
    inter = (ix1 - ix0).clamp(min=0) * (iy1 - iy0).clamp(min=0)
    area_p = (pred[..., 2] - pred[..., 0]).clamp(min=0) * (pred[..., 3] - pred[..., 1]).clamp(min=0)
    area_g = (gt[..., 2] - gt[..., 0]).clamp(min=0) * (gt[..., 3] - gt[..., 1]).clamp(min=0)
    union = area_p + area_g - inter
    return inter / union.clamp(min=IOU_EPS)


def iou_nll(pred: torch.Tensor, gt: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """-ln(IoU), clamped below by eps so disjoint boxes stay finite."""
    return -torch.log(box_iou(pred, gt).clamp(min=eps))


def _center_distances(centers: torch.Tensor) -> torch.Tensor:
    # sqrt stabilized away from 0 so coincident centers keep finite gradients
    diff = centers.unsqueeze(-2) - centers.unsqueeze(-3)
    return torch.sqrt((diff**2).sum(dim=-1) + 1e-12)


def box_loss(pred: torch.Tensor, gt: torch.Tensor, part_list: torch.Tensor) -> torch.Tensor:
    """Per-box MSE + IoU terms over present parts (divided by p), plus the
    pairwise center-distance MSE over ordered present pairs (divided by
    p(p-1)). Absent parts contribute nothing to either sum."""
    mask = part_list.to(pred.dtype)
    p = pred.shape[-2]
    mse = ((pred - gt) ** 2).sum(dim=-1)
    instance = ((mse + iou_nll(pred, gt)) * mask).sum(dim=-1) / p

    centers_p = (pred[..., 0:2] + pred[..., 2:4]) / 2
    centers_g = (gt[..., 0:2] + gt[..., 2:4]) / 2
    dist_p = _center_distances(centers_p)
    dist_g = _center_distances(centers_g)
    pair_mask = mask.unsqueeze(-1) * mask.unsqueeze(-2)
    pair_mask = pair_mask * (1 - torch.eye(p, dtype=pred.dtype, device=pred.device))
    # p = 1 has no ordered pairs; the empty sum stays zero
    pairwise = (((dist_p - dist_g) ** 2) * pair_mask).sum(dim=(-1, -2)) / max(p * (p - 1), 1)
    return (instance + pairwise).mean()


def adjacency_bce(adjacency_probs: torch.Tensor, A_gt: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy averaged over all p^2 entries."""
    probs = _clamp_probs(adjacency_probs)
    t = A_gt.to(probs.dtype)
    bce = -(t * torch.log(probs) + (1 - t) * torch.log(1 - probs))
    return bce.mean(dim=(-1, -2)).mean()


def kl_diag_gaussian(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over latent dims."""
    kl = 0.5 * (torch.exp(log_var) + mu**2 - 1.0 - log_var).sum(dim=-1)
    return kl.mean()


def reconstruction_loss(
    out: LayoutDecodeOutput, X: torch.Tensor, A: torch.Tensor, part_list: torch.Tensor
) -> torch.Tensor:
    return (
        presence_nll(out.presence_probs, X[..., 0])
        + box_loss(out.boxes, X[..., 1:5], part_list)
        + adjacency_bce(out.adjacency_probs, A)
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_layout(
    model: LayoutVAE,
    category: int,
    part_list,
    rng: np.random.Generator,
    threshold: float = 0.5,
) -> PartGraph:
    """Draw z ~ N(0, I) and decode one layout as a valid part graph.

    Predicted presence is thresholded then intersected with the requested part
    list; adjacency is thresholded on the symmetrized probabilities; box
    corners are reordered so widths and heights are nonnegative.
    """
    cfg = model.cfg
    model.check_part_list(category, part_list)
    l_c = torch.zeros(cfg.p)
    l_c[list(part_list)] = 1.0
    z = torch.from_numpy(rng.standard_normal(cfg.d_z)).to(torch.float32)
    with torch.no_grad():
        out = model.decode(
            z.unsqueeze(0), torch.tensor([category]), l_c.unsqueeze(0)
        )
    presence = (out.presence_probs[0] > threshold).numpy() & (l_c.numpy() > 0.5)
    boxes = out.boxes[0].numpy().astype(np.float64)
    x0 = np.minimum(boxes[:, 0], boxes[:, 2])
    x1 = np.maximum(boxes[:, 0], boxes[:, 2])
    y0 = np.minimum(boxes[:, 1], boxes[:, 3])
    y1 = np.maximum(boxes[:, 1], boxes[:, 3])
    X = np.zeros((cfg.p, 5), dtype=np.float64)
    X[presence, 0] = 1.0
    X[presence, 1] = x0[presence]
    X[presence, 2] = y0[presence]
    X[presence, 3] = x1[presence]
    X[presence, 4] = y1[presence]

    adj = (out.adjacency_probs[0].numpy() > threshold).astype(np.int8)
    np.fill_diagonal(adj, 0)
    adj[~presence, :] = 0
    adj[:, ~presence] = 0
    graph = PartGraph(X=X, A=adj, category=category)
    validate_part_graph(graph, cfg.p)
    return graph
