"""Canonical data model for part-based object sprites.

An object is a graph of parts: a presence/box feature matrix ``X`` (p x 5),
a binary part-of adjacency matrix ``A`` (p x p), per-part binary masks at a
fixed resolution, and an optional RGB crop. All box coordinates live in a
[0,1] x [0,1] canvas as (x_min, y_min, x_max, y_max) with y pointing down.
"""

from __future__ import annotations

import base64
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_MASK_RESOLUTION = 64


class SchemaError(ValueError):
    """Raised for malformed or inconsistent category schemas."""


class SampleError(ValueError):
    """Raised when a sample violates the data-model invariants."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CategorySchema:
    """One object category: its parts, their global slots and connectivity."""

    category_id: int
    name: str
    part_names: tuple[str, ...]
    part_slots: tuple[int, ...]  # local part index -> global slot index
    adjacency_template: np.ndarray  # p x p, symmetric, zero diagonal

    @property
    def slots(self) -> tuple[int, ...]:
        return self.part_slots

    def slot_for(self, part_name: str) -> int:
        try:
            return self.part_slots[self.part_names.index(part_name)]
        except ValueError:
            raise SchemaError(
                f"category {self.name!r} has no part named {part_name!r}"
            ) from None

    def validate(self, p: int) -> None:
        if len(set(self.part_slots)) != len(self.part_slots):
            raise SchemaError(f"category {self.name!r}: part_slots not injective")
        if len(self.part_names) != len(self.part_slots):
            raise SchemaError(f"category {self.name!r}: parts/slots length mismatch")
        t = self.adjacency_template
        if t.shape != (p, p):
            raise SchemaError(f"category {self.name!r}: template shape {t.shape} != ({p}, {p})")
        if not np.array_equal(t, t.T):
            raise SchemaError(f"category {self.name!r}: template not symmetric")
        if np.any(np.diag(t) != 0):
            raise SchemaError(f"category {self.name!r}: template diagonal not zero")
        owned = np.zeros(p, dtype=bool)
        owned[list(self.part_slots)] = True
        if np.any(t[~owned, :]) or np.any(t[:, ~owned]):
            raise SchemaError(f"category {self.name!r}: template edge on foreign slot")


@dataclass(frozen=True)
class PartGraph:
    """Part layout graph: X holds presence + box per slot, A the part-of edges."""

    X: np.ndarray  # p x 5 float64; col 0 presence, cols 1..4 box
    A: np.ndarray  # p x p int8
    category: int

    @property
    def p(self) -> int:
        return self.X.shape[0]

    @property
    def presence(self) -> np.ndarray:
        return self.X[:, 0].astype(np.int8)

    @property
    def boxes(self) -> np.ndarray:
        return self.X[:, 1:5]

    def present_slots(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.X[:, 0] > 0.5))


@dataclass(frozen=True)
class PartMaskSet:
    """Per-slot binary masks, each resolution x resolution, for present parts only."""

    masks: dict[int, np.ndarray]
    resolution: int = DEFAULT_MASK_RESOLUTION

    def slots(self) -> tuple[int, ...]:
        return tuple(sorted(self.masks))


@dataclass(frozen=True)
class ObjectSample:
    """One dataset record in canonical normalized coordinates."""

    category: int
    part_list: tuple[int, ...]
    graph: PartGraph
    masks: PartMaskSet
    image: np.ndarray | None = None  # H x W x 3 uint8


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_part_graph(graph: PartGraph, p: int | None = None) -> None:
    X, A = graph.X, graph.A
    if X.ndim != 2 or X.shape[1] != 5:
        raise SampleError(f"X must be p x 5, got {X.shape}")
    if p is not None and X.shape[0] != p:
        raise SampleError(f"X has {X.shape[0]} rows, expected p={p}")
    n = X.shape[0]
    if A.shape != (n, n):
        raise SampleError(f"A shape {A.shape} does not match p={n}")
    pres = X[:, 0]
    if not np.all(np.isin(pres, (0.0, 1.0))):
        raise SampleError("presence column must be binary")
    absent = pres < 0.5
    if np.any(X[absent] != 0.0):
        raise SampleError("rows of absent parts must be all-zero")
    boxes = X[:, 1:5]
    if np.any(boxes < -1e-9) or np.any(boxes > 1 + 1e-9):
        raise SampleError("box coordinates must lie in [0, 1]")
    present = ~absent
    if np.any(boxes[present, 2] < boxes[present, 0]) or np.any(
        boxes[present, 3] < boxes[present, 1]
    ):
        raise SampleError("boxes must have nonnegative width and height")
    if not np.all(np.isin(A, (0, 1))):
        raise SampleError("A must be binary")
    if not np.array_equal(A, A.T):
        raise SampleError("A must be symmetric")
    if np.any(np.diag(A) != 0):
        raise SampleError("A must have a zero diagonal")
    if np.any(A[absent, :]) or np.any(A[:, absent]):
        raise SampleError("A must be zero on rows/columns of absent parts")


def validate_sample(sample: ObjectSample, p: int | None = None) -> None:
    validate_part_graph(sample.graph, p)
    present = set(sample.graph.present_slots())
    if set(sample.part_list) != present:
        raise SampleError(
            f"part_list {sorted(sample.part_list)} != presence set {sorted(present)}"
        )
    if set(sample.masks.masks) != present:
        raise SampleError("masks must exist exactly for present slots")
    m = sample.masks.resolution
    for slot, mask in sample.masks.masks.items():
        if mask.shape != (m, m):
            raise SampleError(f"mask for slot {slot} has shape {mask.shape}, want ({m}, {m})")
        if not np.all(np.isin(mask, (0, 1))):
            raise SampleError(f"mask for slot {slot} is not binary")
    if sample.image is not None:
        img = sample.image
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise SampleError("image must be H x W x 3 uint8")


# ---------------------------------------------------------------------------
# Geometry: normalization, mask resizing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizedObject:
    boxes: np.ndarray  # k x 4 in [0,1]
    masks: list[np.ndarray] | None
    image: np.ndarray | None  # square canvas raster
    frame: tuple[float, float, float, float]


def normalize_object(
    boxes: np.ndarray,
    masks: list[np.ndarray] | None = None,
    image: np.ndarray | None = None,
) -> NormalizedObject:
    """Map raw pixel boxes (and the optional source crop) into the unit canvas.

    The normalization frame is the image rectangle when an image is given,
    otherwise the tight hull of the boxes. The frame is scaled by the inverse
    of its larger side and centered, so aspect ratio is preserved and the
    result sits centered in [0,1] x [0,1]. Without an image the output hull
    has unit extent on its larger side, which makes the map idempotent.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        raise SampleError("normalize_object needs at least one box")
    if image is not None:
        h, w = image.shape[:2]
        frame = (0.0, 0.0, float(w), float(h))
    else:
        frame = (
            float(boxes[:, 0].min()),
            float(boxes[:, 1].min()),
            float(boxes[:, 2].max()),
            float(boxes[:, 3].max()),
        )
    fw, fh = frame[2] - frame[0], frame[3] - frame[1]
    side = max(fw, fh)
    if side <= 0.0 or min(fw, fh) < 0.0 or (image is None and min(fw, fh) <= 0.0):
        raise SampleError(f"degenerate normalization frame {frame}")
    cx, cy = (frame[0] + frame[2]) / 2.0, (frame[1] + frame[3]) / 2.0
    out = np.empty_like(boxes)
    out[:, 0] = (boxes[:, 0] - cx) / side + 0.5
    out[:, 1] = (boxes[:, 1] - cy) / side + 0.5
    out[:, 2] = (boxes[:, 2] - cx) / side + 0.5
    out[:, 3] = (boxes[:, 3] - cy) / side + 0.5
    out = np.clip(out, 0.0, 1.0)

    canvas = None
    if image is not None:
        s = int(round(side))
        canvas = np.full((s, s, 3), 255, dtype=np.uint8)
        ox, oy = (s - image.shape[1]) // 2, (s - image.shape[0]) // 2
        canvas[oy : oy + image.shape[0], ox : ox + image.shape[1]] = image
    return NormalizedObject(boxes=out, masks=masks, image=canvas, frame=frame)


def resize_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbor resize of a binary raster to resolution x resolution."""
    mask = np.asarray(mask)
    h, w = mask.shape
    ys = np.minimum((np.arange(resolution) + 0.5) * h / resolution, h - 1).astype(int)
    xs = np.minimum((np.arange(resolution) + 0.5) * w / resolution, w - 1).astype(int)
    return (mask[np.ix_(ys, xs)] > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for the geometric augmentations; defaults are the identity."""

    translate_range: float = 0.0  # max |shift| per axis, canvas units
    part_scale_range: tuple[float, float] = (1.0, 1.0)
    object_scale_range: tuple[float, float] = (1.0, 1.0)
    mirror_prob: float = 0.0

    def validate(self) -> None:
        for lo, hi in (self.part_scale_range, self.object_scale_range):
            if lo <= 0.0 or hi <= 0.0 or hi < lo:
                raise ValueError(f"scale range ({lo}, {hi}) would produce zero-area boxes")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError("mirror_prob must be in [0, 1]")
        if self.translate_range < 0.0:
            raise ValueError("translate_range must be nonnegative")


def _scale_about(boxes: np.ndarray, cx, cy, sx, sy) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = (boxes[:, 0] - cx) * sx + cx
    out[:, 2] = (boxes[:, 2] - cx) * sx + cx
    out[:, 1] = (boxes[:, 1] - cy) * sy + cy
    out[:, 3] = (boxes[:, 3] - cy) * sy + cy
    return out


def augment(sample: ObjectSample, config: AugmentConfig, rng: np.random.Generator) -> ObjectSample:
    """Jitter one sample: object/part anisotropic scale, translate, mirror.

    Adjacency and presence are untouched; boxes are clamped back to the unit
    canvas. The draw order is fixed so results are deterministic per seed.
    """
    config.validate()
    present = np.asarray(sample.graph.presence, dtype=bool)
    boxes = sample.graph.boxes.copy()

    o_lo, o_hi = config.object_scale_range
    osx, osy = rng.uniform(o_lo, o_hi), rng.uniform(o_lo, o_hi)
    p_lo, p_hi = config.part_scale_range
    part_s = rng.uniform(p_lo, p_hi, size=(boxes.shape[0], 2))
    dx = rng.uniform(-config.translate_range, config.translate_range)
    dy = rng.uniform(-config.translate_range, config.translate_range)
    do_mirror = rng.uniform() < config.mirror_prob

    if np.any(present):
        # identity draws skip the arithmetic so they stay bit-exact identities
        if osx != 1.0 or osy != 1.0:
            hull_cx = (boxes[present, 0].min() + boxes[present, 2].max()) / 2.0
            hull_cy = (boxes[present, 1].min() + boxes[present, 3].max()) / 2.0
            boxes[present] = _scale_about(boxes[present], hull_cx, hull_cy, osx, osy)
        centers_x = (boxes[:, 0] + boxes[:, 2]) / 2.0
        centers_y = (boxes[:, 1] + boxes[:, 3]) / 2.0
        for i in np.flatnonzero(present):
            if part_s[i, 0] != 1.0 or part_s[i, 1] != 1.0:
                boxes[i : i + 1] = _scale_about(
                    boxes[i : i + 1], centers_x[i], centers_y[i], part_s[i, 0], part_s[i, 1]
                )
        if dx != 0.0 or dy != 0.0:
            boxes[present, 0] += dx
            boxes[present, 2] += dx
            boxes[present, 1] += dy
            boxes[present, 3] += dy
        if do_mirror:
            x0 = 1.0 - boxes[present, 2]
            x1 = 1.0 - boxes[present, 0]
            boxes[present, 0], boxes[present, 2] = x0, x1
        boxes[present] = np.clip(boxes[present], 0.0, 1.0)

    X = sample.graph.X.copy()
    X[:, 1:5] = np.where(present[:, None], boxes, 0.0)
    masks = sample.masks
    if do_mirror:
        masks = PartMaskSet(
            masks={s: m[:, ::-1].copy() for s, m in sample.masks.masks.items()},
            resolution=sample.masks.resolution,
        )
    image = sample.image
    if do_mirror and image is not None:
        image = image[:, ::-1].copy()
    return replace(
        sample,
        graph=PartGraph(X=X, A=sample.graph.A, category=sample.graph.category),
        masks=masks,
        image=image,
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_dataset(
    samples: list[ObjectSample],
    ratios: tuple[float, float, float] = (0.75, 0.15, 0.10),
    rng: np.random.Generator | None = None,
) -> tuple[list[ObjectSample], list[ObjectSample], list[ObjectSample]]:
    """Stratified train/val/test split, per-category counts within +-1 of ratios."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios {ratios} must sum to 1")
    rng = rng or np.random.default_rng(0)
    by_cat: dict[int, list[ObjectSample]] = {}
    for s in samples:
        by_cat.setdefault(s.category, []).append(s)

    splits: tuple[list[ObjectSample], ...] = ([], [], [])
    for cat in sorted(by_cat):
        group = by_cat[cat]
        n = len(group)
        if n < 3:
            warnings.warn(f"category {cat} has {n} samples; placing all in train")
            splits[0].extend(group)
            continue
        order = rng.permutation(n)
        # largest-remainder allocation keeps every count within +-1 of n*ratio
        exact = [n * r for r in ratios]
        counts = [int(np.floor(e)) for e in exact]
        rem = n - sum(counts)
        order_by_frac = sorted(range(3), key=lambda i: exact[i] - counts[i], reverse=True)
        for i in order_by_frac[:rem]:
            counts[i] += 1
        start = 0
        for split, c in zip(splits, counts):
            split.extend(group[i] for i in order[start : start + c])
            start += c
    return splits


# ---------------------------------------------------------------------------
# Canonical sample serialization (single text document per sample)
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".9g")
    if isinstance(value, str):
        return json.dumps(value)
    if value is None:
        return "null"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"cannot serialize {type(value)}")


def _encode_mask(mask: np.ndarray) -> str:
    return base64.b64encode(np.packbits(mask.astype(np.uint8).ravel()).tobytes()).decode("ascii")


def _decode_mask(data: str, resolution: int) -> np.ndarray:
    bits = np.unpackbits(
        np.frombuffer(base64.b64decode(data), dtype=np.uint8), count=resolution * resolution
    )
    return bits.reshape(resolution, resolution).astype(np.uint8)


def serialize_sample(sample: ObjectSample) -> str:
    """One canonical text document; field order fixed, floats at 9 significant digits."""
    doc = {
        "format": "partgen-sample@1",
        "category": sample.category,
        "part_list": list(sample.part_list),
        "mask_resolution": sample.masks.resolution,
        "x": [[v for v in row] for row in sample.graph.X.tolist()],
        "adjacency": [[int(v) for v in row] for row in sample.graph.A.tolist()],
        "masks": {str(s): _encode_mask(sample.masks.masks[s]) for s in sorted(sample.masks.masks)},
        "image_shape": list(sample.image.shape) if sample.image is not None else None,
        "image": (
            base64.b64encode(sample.image.tobytes()).decode("ascii")
            if sample.image is not None
            else None
        ),
    }
    return _fmt(doc) + "\n"


def deserialize_sample(text: str) -> ObjectSample:
    doc = json.loads(text)
    if doc.get("format") != "partgen-sample@1":
        raise SampleError(f"unknown sample format {doc.get('format')!r}")
    m = int(doc["mask_resolution"])
    X = np.asarray(doc["x"], dtype=np.float64)
    A = np.asarray(doc["adjacency"], dtype=np.int8)
    masks = {int(k): _decode_mask(v, m) for k, v in doc["masks"].items()}
    image = None
    if doc["image"] is not None:
        shape = tuple(doc["image_shape"])
        image = np.frombuffer(base64.b64decode(doc["image"]), dtype=np.uint8).reshape(shape).copy()
    return ObjectSample(
        category=int(doc["category"]),
        part_list=tuple(int(s) for s in doc["part_list"]),
        graph=PartGraph(X=X, A=A, category=int(doc["category"])),
        masks=PartMaskSet(masks=masks, resolution=m),
        image=image,
    )


# ---------------------------------------------------------------------------
# Schema + dataset directory IO
# ---------------------------------------------------------------------------
#
# Layout:
#   <root>/<category_name>/<sample_id>/meta          JSON: category, parts, boxes
#   <root>/<category_name>/<sample_id>/masks/<slot>.png   1-bit part mask
#   <root>/<category_name>/<sample_id>/image.png     8-bit RGB, optional
# Schema file: JSON listing categories, parts with global slots, adjacency edges.


def load_schemas(schema_path: str | Path) -> tuple[list[CategorySchema], int]:
    """Parse the schema file; returns the schemas and the global slot count p."""
    path = Path(schema_path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed schema file: {e}") from e
    cats = raw.get("categories")
    if not isinstance(cats, list) or not cats:
        raise SchemaError(f"{path}: schema lists no categories")
    max_slot = -1
    for c in cats:
        for part in c.get("parts", []):
            max_slot = max(max_slot, int(part["slot"]))
    p = max_slot + 1
    schemas = []
    for c in cats:
        names = tuple(str(part["name"]) for part in c["parts"])
        slots = tuple(int(part["slot"]) for part in c["parts"])
        by_name = dict(zip(names, slots))
        template = np.zeros((p, p), dtype=np.int8)
        for a, b in c.get("adjacency", []):
            if a not in by_name or b not in by_name:
                missing = a if a not in by_name else b
                raise SchemaError(f"{path}: adjacency names unknown part {missing!r} in {c['name']!r}")
            i, j = by_name[a], by_name[b]
            template[i, j] = template[j, i] = 1
        schema = CategorySchema(
            category_id=int(c["category_id"]),
            name=str(c["name"]),
            part_names=names,
            part_slots=slots,
            adjacency_template=template,
        )
        schema.validate(p)
        schemas.append(schema)
    schemas.sort(key=lambda s: s.category_id)
    if [s.category_id for s in schemas] != list(range(len(schemas))):
        raise SchemaError(f"{path}: category ids must be 0..M-1 without gaps")
    return schemas, p


def save_schemas(schemas: list[CategorySchema], schema_path: str | Path) -> None:
    cats = []
    for s in sorted(schemas, key=lambda c: c.category_id):
        edges = []
        seen = set()
        idx = {slot: name for name, slot in zip(s.part_names, s.part_slots)}
        for i, j in zip(*np.nonzero(s.adjacency_template)):
            if (j, i) in seen:
                continue
            seen.add((int(i), int(j)))
            edges.append([idx[int(i)], idx[int(j)]])
        cats.append(
            {
                "category_id": s.category_id,
                "name": s.name,
                "parts": [
                    {"name": n, "slot": slot} for n, slot in zip(s.part_names, s.part_slots)
                ],
                "adjacency": edges,
            }
        )
    Path(schema_path).write_text(_fmt({"categories": cats}) + "\n")


def save_dataset(
    samples: list[ObjectSample], schemas: list[CategorySchema], root: str | Path
) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = {s.category_id: s.name for s in schemas}
    counters: dict[int, int] = {}
    for sample in samples:
        n = counters.get(sample.category, 0)
        counters[sample.category] = n + 1
        d = root / names[sample.category] / f"{n:06d}"
        (d / "masks").mkdir(parents=True, exist_ok=True)
        meta = {
            "category": names[sample.category],
            "parts": list(sample.part_list),
            "boxes": {str(s): list(sample.graph.X[s, 1:5]) for s in sample.part_list},
            "mask_resolution": sample.masks.resolution,
        }
        (d / "meta").write_text(_fmt(meta) + "\n")
        for slot, mask in sample.masks.masks.items():
            Image.fromarray((mask * 255).astype(np.uint8), mode="L").convert("1").save(
                d / "masks" / f"{slot}.png"
            )
        if sample.image is not None:
            Image.fromarray(sample.image, mode="RGB").save(d / "image.png")


def load_dataset(
    root_path: str | Path, schema_path: str | Path
) -> tuple[list[ObjectSample], list[CategorySchema], int]:
    """Read a dataset directory; every sample is validated against the invariants."""
    schemas, p = load_schemas(schema_path)
    by_name = {s.name: s for s in schemas}
    root = Path(root_path)
    samples: list[ObjectSample] = []
    if not root.exists():
        return samples, schemas, p
    for cat_dir in sorted(d for d in root.iterdir() if d.is_dir()):
        if cat_dir.name not in by_name:
            raise SampleError(f"{cat_dir}: directory does not match any schema category")
        schema = by_name[cat_dir.name]
        sample_dirs = sorted(d for d in cat_dir.iterdir() if d.is_dir())
        if not sample_dirs:
            warnings.warn(f"category {cat_dir.name!r} is empty; skipped")
            continue
        for d in sample_dirs:
            samples.append(_load_sample_dir(d, schema, p))
    return samples, schemas, p


def _load_sample_dir(d: Path, schema: CategorySchema, p: int) -> ObjectSample:
    meta_path = d / "meta"
    try:
        meta = json.loads(meta_path.read_text())
        part_list = tuple(int(s) for s in meta["parts"])
        boxes = {int(k): [float(v) for v in vals] for k, vals in meta["boxes"].items()}
        resolution = int(meta.get("mask_resolution", DEFAULT_MASK_RESOLUTION))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SampleError(f"{meta_path}: malformed annotation: {e}") from e
    allowed = set(schema.part_slots)
    unknown = [s for s in part_list if s not in allowed]
    if unknown:
        raise SampleError(f"{meta_path}: slots {unknown} not in category {schema.name!r}")

    X = np.zeros((p, 5), dtype=np.float64)
    for slot in part_list:
        if slot not in boxes:
            raise SampleError(f"{meta_path}: missing box for slot {slot}")
        X[slot, 0] = 1.0
        X[slot, 1:5] = boxes[slot]
    A = schema.adjacency_template.copy()
    present = X[:, 0] > 0.5
    A[~present, :] = 0
    A[:, ~present] = 0

    masks = {}
    for slot in part_list:
        mask_path = d / "masks" / f"{slot}.png"
        if not mask_path.exists():
            raise SampleError(f"{mask_path}: missing mask for present slot {slot}")
        arr = np.asarray(Image.open(mask_path).convert("L"))
        masks[slot] = (arr > 127).astype(np.uint8)
        if masks[slot].shape != (resolution, resolution):
            masks[slot] = resize_mask(masks[slot], resolution)

    image = None
    img_path = d / "image.png"
    if img_path.exists():
        image = np.asarray(Image.open(img_path).convert("RGB")).copy()

    sample = ObjectSample(
        category=schema.category_id,
        part_list=part_list,
        graph=PartGraph(X=X, A=A, category=schema.category_id),
        masks=PartMaskSet(masks=masks, resolution=resolution),
        image=image,
    )
    try:
        validate_sample(sample, p)
    except SampleError as e:
        raise SampleError(f"{d}: {e}") from e
    return sample


def ground_truth_adjacency(schema: CategorySchema, presence: np.ndarray) -> np.ndarray:
    """Template restricted to present slots: the supervision target for A."""
    A = schema.adjacency_template.copy()
    absent = np.asarray(presence) < 0.5
    A[absent, :] = 0
    A[:, absent] = 0
    return A


def convert_pascal_part(annotation_root: str | Path, out_root: str | Path) -> None:
    """Stub for the original PASCAL-Part annotation converter.

    The expected output is the directory layout documented above: per-sample
    ``meta`` JSON with normalized boxes, 1-bit ``masks/<slot>.png`` rasters and
    an optional ``image.png`` crop. Parsing the upstream .mat annotation format
    is out of scope here.
    """
    raise NotImplementedError(
        "PASCAL-Part conversion is not bundled; produce the documented directory "
        "layout with any external tool, then use load_dataset()."
    )
