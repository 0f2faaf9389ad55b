"""Procedural desk-scale corpus: articulated stick-figure sprites.

Each category is a root body part with limbs attached in a star or chain
pattern. Masks are filled ellipses (even slots) or rectangles (odd slots),
and the RGB crop is a flat-color rendering with one deterministic color per
slot, so every stage of the pipeline has a learnable target at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import CategorySchema, ObjectSample, PartGraph, PartMaskSet, ground_truth_adjacency
from .labelmap import CANVAS_SIZE, compose_label_map, render_flat_sprite


@dataclass(frozen=True)
class ProceduralCategory:
    name: str
    n_parts: int
    adjacency: str = "star"  # "star" or "chain"
    present_prob: float = 1.0  # per-limb presence probability (root always present)


@dataclass(frozen=True)
class ProceduralSpec:
    categories: tuple[ProceduralCategory, ...]
    samples_per_category: int = 8
    mask_resolution: int = 64
    image_size: int = CANVAS_SIZE
    max_parts: int | None = None  # reject categories above this slot budget
    render_images: bool = True


def build_schemas(spec: ProceduralSpec) -> list[CategorySchema]:
    p = max(c.n_parts for c in spec.categories)
    schemas = []
    for cid, cat in enumerate(spec.categories):
        if cat.adjacency not in ("star", "chain"):
            raise ValueError(f"unknown adjacency pattern {cat.adjacency!r}")
        if spec.max_parts is not None and cat.n_parts > spec.max_parts:
            raise ValueError(
                f"category {cat.name!r} declares {cat.n_parts} parts, over the "
                f"configured limit {spec.max_parts}"
            )
        names = ["body"] + [f"limb{i}" for i in range(1, cat.n_parts)]
        template = np.zeros((p, p), dtype=np.int8)
        for i in range(1, cat.n_parts):
            j = 0 if cat.adjacency == "star" else i - 1
            template[i, j] = template[j, i] = 1
        schemas.append(
            CategorySchema(
                category_id=cid,
                name=cat.name,
                part_names=tuple(names),
                part_slots=tuple(range(cat.n_parts)),
                adjacency_template=template,
            )
        )
    return schemas


def _ellipse_mask(m: int, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:m, 0:m]
    cx = cy = (m - 1) / 2.0
    return (((xx - cx) / (rx * m / 2)) ** 2 + ((yy - cy) / (ry * m / 2)) ** 2 <= 1.0).astype(
        np.uint8
    )


def _rect_mask(m: int, fx: float, fy: float) -> np.ndarray:
    mask = np.zeros((m, m), dtype=np.uint8)
    wx, wy = int(round(fx * m / 2)), int(round(fy * m / 2))
    c = m // 2
    mask[c - wy : c + wy, c - wx : c + wx] = 1
    return mask


def _part_mask(slot: int, m: int, rng: np.random.Generator) -> np.ndarray:
    # shape family varies per part instance so masks carry per-sample identity
    extent = rng.uniform(0.55, 0.95, size=2)
    if rng.uniform() < 0.5:
        return _ellipse_mask(m, extent[0], extent[1])
    return _rect_mask(m, extent[0], extent[1])


def _clamp_box(box: np.ndarray) -> np.ndarray:
    return np.clip(box, 0.0, 1.0)


def make_procedural_corpus(
    spec: ProceduralSpec, rng: np.random.Generator
) -> tuple[list[ObjectSample], list[CategorySchema]]:
    """Generate the corpus; reproducible bit-for-bit from the generator state."""
    schemas = build_schemas(spec)
    p = max(c.n_parts for c in spec.categories)
    m = spec.mask_resolution
    samples: list[ObjectSample] = []
    for schema, cat in zip(schemas, spec.categories):
        for _ in range(spec.samples_per_category):
            X = np.zeros((p, 5), dtype=np.float64)
            present = np.zeros(p, dtype=bool)
            present[0] = True
            for i in range(1, cat.n_parts):
                present[i] = rng.uniform() < cat.present_prob

            # root body, roughly centered
            half = rng.uniform(0.18, 0.24)
            cx, cy = 0.5 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.04, 0.04)
            X[0, 0] = 1.0
            X[0, 1:5] = _clamp_box(np.array([cx - half, cy - half, cx + half, cy + half]))

            anchor_x, anchor_y = cx, cy
            n_limbs = max(1, cat.n_parts - 1)
            for i in range(1, cat.n_parts):
                if not present[i]:
                    continue
                if cat.adjacency == "star":
                    theta = 2 * math.pi * (i - 1) / n_limbs + rng.uniform(-0.3, 0.3)
                    ax, ay = cx, cy
                else:
                    theta = rng.uniform(-0.6, 0.6) + (math.pi / 2 if i % 2 else -math.pi / 2)
                    ax, ay = anchor_x, anchor_y
                dist = half + rng.uniform(0.08, 0.14)
                lx, ly = ax + dist * math.cos(theta), ay + dist * math.sin(theta)
                lw, lh = rng.uniform(0.06, 0.11), rng.uniform(0.06, 0.11)
                X[i, 0] = 1.0
                X[i, 1:5] = _clamp_box(np.array([lx - lw, ly - lh, lx + lw, ly + lh]))
                anchor_x, anchor_y = lx, ly

            masks = {int(i): _part_mask(int(i), m, rng) for i in np.flatnonzero(present)}
            A = ground_truth_adjacency(schema, X[:, 0])
            image = None
            if spec.render_images:
                tensor = compose_label_map(
                    masks, X[:, 1:5], X[:, 0], schema.category_id, spec.image_size, p
                )
                image = render_flat_sprite(tensor)
            samples.append(
                ObjectSample(
                    category=schema.category_id,
                    part_list=tuple(int(i) for i in np.flatnonzero(present)),
                    graph=PartGraph(X=X, A=A, category=schema.category_id),
                    masks=PartMaskSet(masks=masks, resolution=m),
                    image=image,
                )
            )
    return samples, schemas


def desk_spec(
    n_categories: int = 1,
    n_parts: int = 4,
    samples_per_category: int = 8,
    present_prob: float = 1.0,
    adjacency: str = "star",
) -> ProceduralSpec:
    """Small fixture spec used throughout the test suite."""
    cats = tuple(
        ProceduralCategory(
            name=f"critter{i}", n_parts=n_parts, adjacency=adjacency, present_prob=present_prob
        )
        for i in range(n_categories)
    )
    return ProceduralSpec(categories=cats, samples_per_category=samples_per_category)
