"""Generation protocol and Frechet-distance scoring.

FID = ||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}), computed from Gaussian
moment fits of image embeddings. The matrix square root goes through the
symmetrized product sqrt(C1) C2 sqrt(C1), whose eigenvalues are clamped at
zero, so the result is non-negative and symmetric in its arguments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

SHRINKAGE = 1e-6


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # N x d
    extractor_id: str

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class EvalReport:
    per_category: dict[str, float]
    overall: float
    sample_counts: dict[str, int]
    extractor_id: str
    seed: int
    shrinkage_applied: bool = False

    def to_dict(self) -> dict:
        return {
            "overall_fid": self.overall,
            "per_category_fid": self.per_category,
            "sample_counts": self.sample_counts,
            "extractor_id": self.extractor_id,
            "seed": self.seed,
            "shrinkage_applied": self.shrinkage_applied,
        }

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(str(prefix) + ".json").write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        lines = ["category,fid"]
        lines += [f"{c},{v:.6f}" for c, v in self.per_category.items()]
        lines.append(f"overall,{self.overall:.6f}")
        Path(str(prefix) + ".csv").write_text("\n".join(lines) + "\n")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """Closed-form Frechet distance between two Gaussians given their moments."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    diff = mu1 - mu2
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    fid = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


def fit_moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Sample mean and covariance (1/(N-1)); shrinkage when N <= d."""
    feats = np.asarray(features, dtype=np.float64)
    n, d = feats.shape
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    shrunk = n <= d
    if shrunk:
        cov = cov + SHRINKAGE * np.eye(d)
    return mu, cov, shrunk


def frechet_distance(real: FeatureSet, fake: FeatureSet) -> float:
    if real.d != fake.d:
        raise ValueError(f"feature dims differ: {real.d} vs {fake.d}")
    for fs, name in ((real, "real"), (fake, "fake")):
        if fs.n < 2:
            raise ValueError(f"{name} feature set needs at least 2 rows, got {fs.n}")
        if not np.all(np.isfinite(fs.features)):
            raise ValueError(f"{name} feature set contains non-finite values")
    mu1, cov1, _ = fit_moments(real.features)
    mu2, cov2, _ = fit_moments(fake.features)
    return frechet_from_moments(mu1, cov1, mu2, cov2)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class ImageFeatureExtractor:
    """Interface: images (N, H, W, 3) uint8 -> FeatureSet."""

    extractor_id: str = "abstract"

    def extract(self, images: list[np.ndarray]) -> FeatureSet:
        raise NotImplementedError


class SmallCNNExtractor(ImageFeatureExtractor):
    """Deterministic small random-weight CNN; the desk-scale test extractor."""

    def __init__(self, seed: int = 0, d: int = 16):
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 8, 5, 4, 2)
        self.conv2 = nn.Conv2d(8, d, 5, 4, 2)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                bound = (3.0 / fan_in) ** 0.5
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()
        for p in (*self.conv1.parameters(), *self.conv2.parameters()):
            p.requires_grad_(False)
        self.extractor_id = f"small-cnn-seed{seed}-d{d}"

    def extract(self, images: list[np.ndarray]) -> FeatureSet:
        batch = torch.from_numpy(
            np.stack([img.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0 for img in images])
        )
        with torch.no_grad():
            h = torch.relu(self.conv1(batch))
            h = torch.relu(self.conv2(h))
            feats = h.mean(dim=(2, 3))
        return FeatureSet(features=feats.numpy().astype(np.float64), extractor_id=self.extractor_id)


class InceptionExtractor(ImageFeatureExtractor):
    """Pretrained pool3 embedding (2048-d), for full-scale parity runs.

    Needs torchvision with downloadable weights; constructing it without
    network access raises with a pointer at the test extractor.
    """

    def __init__(self):
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3
        except ImportError as e:  # pragma: no cover
            raise RuntimeError("torchvision is required for the pretrained extractor") from e
        try:
            self.net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        except Exception as e:  # pragma: no cover - weight download is env-dependent
            raise RuntimeError(
                "could not load pretrained inception weights; use SmallCNNExtractor "
                f"for offline runs ({e})"
            ) from e
        self.net.fc = nn.Identity()
        self.net.eval()
        self.extractor_id = "inception-v3-pool3"

    def extract(self, images: list[np.ndarray]) -> FeatureSet:  # pragma: no cover
        import torch.nn.functional as F

        batch = torch.from_numpy(
            np.stack([img.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0 for img in images])
        )
        batch = F.interpolate(batch, size=(299, 299), mode="bilinear", align_corners=False)
        with torch.no_grad():
            feats = self.net(batch)
        return FeatureSet(features=feats.numpy().astype(np.float64), extractor_id=self.extractor_id)


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------


def generate_eval_set(
    pipeline,
    test_samples,
    n_per_category: int = 100,
    rng: np.random.Generator | None = None,
) -> tuple[dict[int, list[np.ndarray]], dict[int, list[int]]]:
    """Generate n sprites per category, part lists drawn (with replacement)
    from that category's test-set part lists. Returns images and the seeds
    used, both keyed by category id."""
    import warnings

    rng = rng or np.random.default_rng(0)
    lists_by_cat: dict[int, list[tuple[int, ...]]] = {}
    for s in test_samples:
        lists_by_cat.setdefault(s.category, []).append(tuple(s.part_list))
    images: dict[int, list[np.ndarray]] = {}
    seeds: dict[int, list[int]] = {}
    for schema in pipeline.schemas:
        cid = schema.category_id
        if cid not in lists_by_cat:
            warnings.warn(f"category {schema.name!r} absent from the test set; skipped")
            continue
        pool = lists_by_cat[cid]
        images[cid], seeds[cid] = [], []
        for _ in range(n_per_category):
            part_list = pool[int(rng.integers(len(pool)))]
            seed = int(rng.integers(2**31 - 1))
            session = pipeline.generate(cid, part_list, seed)
            images[cid].append(session.image)
            seeds[cid].append(seed)
    return images, seeds


def evaluate(
    pipeline,
    real_samples,
    extractor: ImageFeatureExtractor,
    n_per_category: int = 100,
    seed: int = 0,
) -> EvalReport:
    """Per-category FID of generated sprites against category-wise real sets."""
    rng = np.random.default_rng(seed)
    fake_images, _ = generate_eval_set(pipeline, real_samples, n_per_category, rng)
    real_by_cat: dict[int, list[np.ndarray]] = {}
    for s in real_samples:
        if s.image is not None:
            real_by_cat.setdefault(s.category, []).append(s.image)
    names = {sch.category_id: sch.name for sch in pipeline.schemas}
    per_category: dict[str, float] = {}
    counts: dict[str, int] = {}
    shrunk = False
    for cid, fakes in sorted(fake_images.items()):
        reals = real_by_cat.get(cid, [])
        if len(reals) < 2 or len(fakes) < 2:
            continue
        real_fs = extractor.extract(reals)
        fake_fs = extractor.extract(fakes)
        _, _, s1 = fit_moments(real_fs.features)
        _, _, s2 = fit_moments(fake_fs.features)
        shrunk = shrunk or s1 or s2
        per_category[names[cid]] = frechet_distance(real_fs, fake_fs)
        counts[names[cid]] = len(fakes)
    overall = float(np.mean(list(per_category.values()))) if per_category else float("nan")
    return EvalReport(
        per_category=per_category,
        overall=overall,
        sample_counts=counts,
        extractor_id=extractor.extractor_id,
        seed=seed,
        shrinkage_applied=shrunk,
    )
