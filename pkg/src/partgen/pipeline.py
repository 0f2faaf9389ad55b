"""Chained inference and interactive edit sessions.

A bundle directory holds the three stage checkpoints plus the schema file and
the bank of training part lists. Generation is deterministic: every stage
draws from a generator derived from (session seed, stage name, revision), so
a session is fully determined by (category, part list, seed, edit sequence).
"""

from __future__ import annotations

import base64
import json
import shutil
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import training
from .checkpoint import CheckpointError, checkpoint_hash
from .data import (
    CategorySchema,
    ObjectSample,
    PartGraph,
    SampleError,
    _fmt,
    ground_truth_adjacency,
    load_schemas,
    save_schemas,
    validate_part_graph,
)
from .labelmap import LabelMapTensor, compose_label_map, from_index_canvas
from .layout_model import sample_layout
from .mask_model import sample_label_map

STAGE_SALT = {"partlist": 0, "box": 1, "mask": 2}
EDIT_KINDS = (
    "set_part_list",
    "set_boxes",
    "set_masks",
    "regenerate_layout",
    "regenerate_masks",
    "render",
)


class ConflictError(RuntimeError):
    """Stale base_revision: the client must refresh before committing."""


class EditError(ValueError):
    pass


@dataclass(frozen=True)
class EditSession:
    session_id: str
    category: int
    part_list: tuple[int, ...]
    layout: PartGraph
    label_map: LabelMapTensor
    mask_rasters: dict[int, np.ndarray]  # cached per-part rasters for recompose
    image: np.ndarray | None
    seed: int
    revision: int = 0


@dataclass(frozen=True)
class EditCommand:
    kind: str
    payload: dict
    base_revision: int


def _stage_rng(seed: int, stage: str, salt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(STAGE_SALT[stage], salt))
    return np.random.default_rng(ss)


class PipelineBundle:
    """Loaded checkpoints + schema + training part lists, ready for inference."""

    def __init__(self, layout_model, mask_model, generator, schemas, p, part_list_bank, hashes):
        self.layout_model = layout_model
        self.mask_model = mask_model
        self.generator = generator
        self.schemas: list[CategorySchema] = schemas
        self.p = p
        self.part_list_bank: dict[int, list[tuple[int, ...]]] = part_list_bank
        self.checkpoint_hashes: dict[str, str] = hashes

    @classmethod
    def load(cls, bundle_dir: str | Path) -> "PipelineBundle":
        bundle_dir = Path(bundle_dir)
        for name in ("box", "labelmap", "label2obj"):
            if not (bundle_dir / name / "manifest.json").exists():
                raise CheckpointError(f"{bundle_dir}: missing {name!r} checkpoint")
        schemas, p = load_schemas(bundle_dir / "schema.json")
        bank_raw = json.loads((bundle_dir / "part_lists.json").read_text())
        bank = {
            int(cid): [tuple(int(s) for s in pl) for pl in lists]
            for cid, lists in bank_raw.items()
        }
        hashes = {
            name: checkpoint_hash(bundle_dir / name) for name in ("box", "labelmap", "label2obj")
        }
        return cls(
            layout_model=training.load_layout_model(bundle_dir / "box"),
            mask_model=training.load_mask_model(bundle_dir / "labelmap"),
            generator=training.load_translator(bundle_dir / "label2obj"),
            schemas=schemas,
            p=p,
            part_list_bank=bank,
            hashes=hashes,
        )

    # -- category / part-list resolution --------------------------------

    def schema_for(self, category) -> CategorySchema:
        if isinstance(category, str):
            for s in self.schemas:
                if s.name == category:
                    return s
            raise EditError(f"unknown category {category!r}")
        if not 0 <= int(category) < len(self.schemas):
            raise EditError(f"unknown category id {category}")
        return self.schemas[int(category)]

    def resolve_part_list(self, schema: CategorySchema, parts) -> tuple[int, ...]:
        slots: list[int] = []
        unknown: list[str] = []
        for part in parts:
            if isinstance(part, str):
                if part in schema.part_names:
                    slots.append(schema.slot_for(part))
                else:
                    unknown.append(part)
            else:
                if int(part) in schema.part_slots:
                    slots.append(int(part))
                else:
                    unknown.append(str(part))
        if unknown:
            raise EditError(
                f"parts not in category {schema.name!r}: {', '.join(sorted(unknown))}"
            )
        return tuple(sorted(set(slots)))

    # -- generation ------------------------------------------------------

    def render(self, label_map: LabelMapTensor) -> np.ndarray:
        canvas = torch.from_numpy(
            label_map.canvas.transpose(2, 0, 1).astype(np.float32)
        ).unsqueeze(0)
        with torch.no_grad():
            out = self.generator(canvas, torch.tensor([label_map.category]))[0]
        img = ((out.numpy().transpose(1, 2, 0) + 1.0) * 127.5).round()
        return np.clip(img, 0, 255).astype(np.uint8)

    def generate(
        self, category, part_list=None, seed: int = 0, session_id: str | None = None
    ) -> EditSession:
        schema = self.schema_for(category)
        cid = schema.category_id
        if part_list is None:
            bank = self.part_list_bank.get(cid)
            if not bank:
                raise EditError(f"no training part lists recorded for {schema.name!r}")
            rng = _stage_rng(seed, "partlist")
            slots = bank[int(rng.integers(len(bank)))]
        else:
            slots = self.resolve_part_list(schema, part_list)
        layout = sample_layout(self.layout_model, cid, slots, _stage_rng(seed, "box"))
        label_map, rasters = sample_label_map(
            self.mask_model, layout, cid, _stage_rng(seed, "mask")
        )
        image = self.render(label_map)
        return EditSession(
            session_id=session_id or f"s-{cid}-{seed}",
            category=cid,
            part_list=layout.present_slots(),
            layout=layout,
            label_map=label_map,
            mask_rasters=rasters,
            image=image,
            seed=seed,
            revision=0,
        )

    # -- edits -----------------------------------------------------------

    def apply_edit(self, session: EditSession, command: EditCommand) -> EditSession:
        """Minimal recomputation per edit kind; the revision always increments.

        set_part_list resamples from the box stage; regenerate_* resample
        their stage onward; set_boxes recomposes the cached rasters and
        re-renders; set_masks and render only re-run the translator.
        """
        if command.base_revision != session.revision:
            raise ConflictError(
                f"base_revision {command.base_revision} != current {session.revision}"
            )
        if command.kind not in EDIT_KINDS:
            raise EditError(f"unknown edit kind {command.kind!r}")
        rev = session.revision + 1
        handler = getattr(self, f"_edit_{command.kind}")
        out = handler(session, command.payload, rev)
        return replace(out, revision=rev)

    def _resample_from_box(self, session: EditSession, slots, salt: int) -> EditSession:
        layout = sample_layout(
            self.layout_model, session.category, slots, _stage_rng(session.seed, "box", salt)
        )
        return self._resample_masks(replace(session, part_list=layout.present_slots(), layout=layout), salt)

    def _resample_masks(self, session: EditSession, salt: int) -> EditSession:
        label_map, rasters = sample_label_map(
            self.mask_model, session.layout, session.category,
            _stage_rng(session.seed, "mask", salt),
        )
        return replace(
            session, label_map=label_map, mask_rasters=rasters, image=self.render(label_map)
        )

    def _edit_set_part_list(self, session, payload, rev) -> EditSession:
        schema = self.schemas[session.category]
        slots = self.resolve_part_list(schema, payload["part_list"])
        return self._resample_from_box(session, slots, rev)

    def _edit_regenerate_layout(self, session, payload, rev) -> EditSession:
        salt = int(payload.get("seed", rev))
        return self._resample_from_box(session, session.part_list, salt)

    def _edit_regenerate_masks(self, session, payload, rev) -> EditSession:
        salt = int(payload.get("seed", rev))
        return self._resample_masks(session, salt)

    def _edit_render(self, session, payload, rev) -> EditSession:
        return replace(session, image=self.render(session.label_map))

    def _edit_set_boxes(self, session, payload, rev) -> EditSession:
        boxes = {int(k): [float(v) for v in vals] for k, vals in payload["boxes"].items()}
        present = set(session.part_list)
        X = session.layout.X.copy()
        for slot, box in boxes.items():
            if slot not in present:
                raise EditError(f"slot {slot} is not present in the layout")
            if len(box) != 4 or not all(0.0 <= v <= 1.0 for v in box):
                raise EditError(f"slot {slot}: box must be four values in [0, 1]")
            if box[2] < box[0] or box[3] < box[1]:
                raise EditError(f"slot {slot}: box has negative width or height")
            X[slot, 1:5] = box
        layout = PartGraph(X=X, A=session.layout.A, category=session.category)
        validate_part_graph(layout, self.p)
        label_map = compose_label_map(
            session.mask_rasters, layout.boxes, layout.presence, session.category,
            session.label_map.canvas.shape[0], self.p,
        )
        return replace(
            session, layout=layout, label_map=label_map, image=self.render(label_map)
        )

    def _edit_set_masks(self, session, payload, rev) -> EditSession:
        canvas = _decode_index_canvas(payload, session.label_map.canvas.shape[0])
        if canvas.max(initial=0) > self.p:
            raise EditError(f"index canvas labels exceed the slot count p={self.p}")
        schema = self.schemas[session.category]
        painted = [int(k) for k in np.unique(canvas) if k > 0]
        slots = tuple(s - 1 for s in painted)
        bad = sorted(set(slots) - set(schema.part_slots))
        if bad:
            raise EditError(f"painted slots {bad} are not in category {schema.name!r}")

        # layout bookkeeping: presence follows the canvas, boxes hug the paint
        size = canvas.shape[0]
        X = np.zeros_like(session.layout.X)
        m = self.mask_model.cfg.mask_resolution
        rasters: dict[int, np.ndarray] = {}
        for slot in slots:
            ys, xs = np.nonzero(canvas == slot + 1)
            x0, x1 = xs.min() / size, (xs.max() + 1) / size
            y0, y1 = ys.min() / size, (ys.max() + 1) / size
            X[slot, 0] = 1.0
            X[slot, 1:5] = (x0, y0, x1, y1)
            region = (canvas[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] == slot + 1)
            rasters[slot] = _resize_binary(region.astype(np.uint8), m)
        A = ground_truth_adjacency(schema, X[:, 0])
        layout = PartGraph(X=X, A=A, category=session.category)
        validate_part_graph(layout, self.p)
        label_map = from_index_canvas(canvas, layout.boxes, session.category, self.p)
        return replace(
            session,
            part_list=layout.present_slots(),
            layout=layout,
            label_map=label_map,
            mask_rasters=rasters,
            image=self.render(label_map),
        )


def _resize_binary(mask: np.ndarray, resolution: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum((np.arange(resolution) + 0.5) * h / resolution, h - 1).astype(int)
    xs = np.minimum((np.arange(resolution) + 0.5) * w / resolution, w - 1).astype(int)
    return (mask[np.ix_(ys, xs)] > 0).astype(np.uint8)


def _decode_index_canvas(payload: dict, expected_size: int) -> np.ndarray:
    if "index_canvas_b64" in payload:
        h = int(payload.get("height", expected_size))
        w = int(payload.get("width", expected_size))
        raw = base64.b64decode(payload["index_canvas_b64"])
        if len(raw) != h * w:
            raise EditError(f"index canvas payload has {len(raw)} bytes, expected {h * w}")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    if "index_canvas" in payload:
        return np.asarray(payload["index_canvas"], dtype=np.uint8)
    raise EditError("set_masks payload needs index_canvas or index_canvas_b64")


# ---------------------------------------------------------------------------
# Bundle assembly + session persistence
# ---------------------------------------------------------------------------


def assemble_bundle(
    bundle_dir: str | Path,
    box_checkpoint: str | Path,
    labelmap_checkpoint: str | Path,
    label2obj_checkpoint: str | Path,
    schemas: list[CategorySchema],
    train_samples: list[ObjectSample],
) -> Path:
    """Copy stage checkpoints next to the schema and the part-list bank."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    for name, src in (
        ("box", box_checkpoint),
        ("labelmap", labelmap_checkpoint),
        ("label2obj", label2obj_checkpoint),
    ):
        dst = bundle_dir / name
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(src, dst)
    save_schemas(schemas, bundle_dir / "schema.json")
    bank: dict[int, list[list[int]]] = {}
    for s in train_samples:
        bank.setdefault(s.category, []).append(list(s.part_list))
    (bundle_dir / "part_lists.json").write_text(
        json.dumps({str(k): v for k, v in sorted(bank.items())}) + "\n"
    )
    return bundle_dir


def serialize_session(session: EditSession) -> str:
    m = next(iter(session.mask_rasters.values())).shape[0] if session.mask_rasters else 0
    size = session.label_map.canvas.shape[0]
    doc = {
        "format": "partgen-session@1",
        "session_id": session.session_id,
        "category": session.category,
        "part_list": list(session.part_list),
        "seed": session.seed,
        "revision": session.revision,
        "x": [[v for v in row] for row in session.layout.X.tolist()],
        "adjacency": [[int(v) for v in row] for row in session.layout.A.tolist()],
        "canvas_size": size,
        "index_canvas_b64": base64.b64encode(
            session.label_map.index_canvas().tobytes()
        ).decode("ascii"),
        "mask_resolution": m,
        "mask_rasters": {
            str(k): base64.b64encode(np.packbits(v.ravel()).tobytes()).decode("ascii")
            for k, v in sorted(session.mask_rasters.items())
        },
        "image_b64": (
            base64.b64encode(session.image.tobytes()).decode("ascii")
            if session.image is not None
            else None
        ),
        "image_shape": list(session.image.shape) if session.image is not None else None,
    }
    return _fmt(doc) + "\n"


def deserialize_session(text: str, p: int) -> EditSession:
    doc = json.loads(text)
    if doc.get("format") != "partgen-session@1":
        raise SampleError(f"unknown session format {doc.get('format')!r}")
    X = np.asarray(doc["x"], dtype=np.float64)
    A = np.asarray(doc["adjacency"], dtype=np.int8)
    size = int(doc["canvas_size"])
    canvas = np.frombuffer(
        base64.b64decode(doc["index_canvas_b64"]), dtype=np.uint8
    ).reshape(size, size)
    layout = PartGraph(X=X, A=A, category=int(doc["category"]))
    m = int(doc["mask_resolution"])
    rasters = {}
    for k, blob in doc["mask_rasters"].items():
        bits = np.unpackbits(np.frombuffer(base64.b64decode(blob), dtype=np.uint8), count=m * m)
        rasters[int(k)] = bits.reshape(m, m).astype(np.uint8)
    image = None
    if doc["image_b64"] is not None:
        image = (
            np.frombuffer(base64.b64decode(doc["image_b64"]), dtype=np.uint8)
            .reshape(tuple(doc["image_shape"]))
            .copy()
        )
    return EditSession(
        session_id=str(doc["session_id"]),
        category=int(doc["category"]),
        part_list=tuple(int(s) for s in doc["part_list"]),
        layout=layout,
        label_map=from_index_canvas(canvas, X[:, 1:5], int(doc["category"]), p),
        mask_rasters=rasters,
        image=image,
        seed=int(doc["seed"]),
        revision=int(doc["revision"]),
    )


def session_snapshot(session: EditSession, schemas: list[CategorySchema], url_prefix: str = "") -> dict:
    schema = schemas[session.category]
    slot_names = {slot: name for name, slot in zip(schema.part_names, schema.part_slots)}
    snap = {
        "session_id": session.session_id,
        "revision": session.revision,
        "category": session.category,
        "category_name": schema.name,
        "seed": session.seed,
        "part_list": list(session.part_list),
        "part_names": [slot_names[s] for s in session.part_list],
        "boxes": {str(s): [float(v) for v in session.layout.X[s, 1:5]] for s in session.part_list},
        "adjacency": [[int(v) for v in row] for row in session.layout.A.tolist()],
        "canvas_size": session.label_map.canvas.shape[0],
    }
    if url_prefix:
        snap["label_map_png"] = f"{url_prefix}/sessions/{session.session_id}/label_map.png"
        snap["image_png"] = f"{url_prefix}/sessions/{session.session_id}/image.png"
    return snap
