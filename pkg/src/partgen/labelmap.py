"""Label-map composition and the indexed-PNG interchange format.

A label map is an H x W x p one-hot canvas: at most one part label per pixel,
all-zero meaning background. On disk it is an indexed PNG whose pixel value is
slot index + 1 (0 = background) plus a JSON sidecar carrying the boxes and the
category, which is the format the translator stage and the UI consume.
"""

from __future__ import annotations

import colorsys
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CANVAS_SIZE = 128


@dataclass(frozen=True)
class LabelMapTensor:
    canvas: np.ndarray  # H x W x p uint8, one-hot per pixel
    boxes: np.ndarray  # p x 4, the boxes used for warping
    category: int

    @property
    def p(self) -> int:
        return self.canvas.shape[2]

    def index_canvas(self) -> np.ndarray:
        """H x W uint8 raster of slot index + 1, 0 for background."""
        occupied = self.canvas.sum(axis=2) > 0
        idx = self.canvas.argmax(axis=2).astype(np.uint8) + 1
        idx[~occupied] = 0
        return idx

    def present_channels(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.canvas.sum(axis=(0, 1)) > 0))


def slot_color(slot: int) -> tuple[int, int, int]:
    """Deterministic per-slot color (golden-angle hue), stable across sessions."""
    hue = (slot * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def warp_mask_to_box(
    mask: np.ndarray, box: np.ndarray, canvas_size: int
) -> tuple[int, int, np.ndarray] | None:
    """Nearest-neighbor warp of an m x m mask into its box in pixel coordinates.

    Returns (y0, x0, patch) or None when the box rounds to zero area.
    """
    x0 = int(round(float(box[0]) * canvas_size))
    y0 = int(round(float(box[1]) * canvas_size))
    x1 = int(round(float(box[2]) * canvas_size))
    y1 = int(round(float(box[3]) * canvas_size))
    x0, x1 = max(0, x0), min(canvas_size, x1)
    y0, y1 = max(0, y0), min(canvas_size, y1)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        return None
    m = mask.shape[0]
    ys = np.minimum(((np.arange(h) + 0.5) * m / h).astype(int), m - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * m / w).astype(int), m - 1)
    return y0, x0, (mask[np.ix_(ys, xs)] > 0)


def compose_label_map(
    masks: dict[int, np.ndarray],
    boxes: np.ndarray,
    presence: np.ndarray,
    category: int = 0,
    canvas_size: int = CANVAS_SIZE,
    p: int | None = None,
) -> LabelMapTensor:
    """Warp each present binarized mask into its box and paint onto the canvas.

    Overlaps are resolved by paint order of descending box area, so smaller
    parts stay visible on top of larger ones; equal-area ties go to the lower
    slot index (painted last). Painting overwrites every channel at the
    covered pixels, which keeps the canvas one-hot by construction.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    presence = np.asarray(presence)
    p = p if p is not None else boxes.shape[0]
    canvas = np.zeros((canvas_size, canvas_size, p), dtype=np.uint8)
    slots = [int(k) for k in np.flatnonzero(presence > 0.5)]
    areas = {
        k: max(0.0, boxes[k, 2] - boxes[k, 0]) * max(0.0, boxes[k, 3] - boxes[k, 1])
        for k in slots
    }
    for k in sorted(slots, key=lambda k: (-areas[k], -k)):
        if k not in masks:
            continue
        warped = warp_mask_to_box(masks[k], boxes[k], canvas_size)
        if warped is None:
            warnings.warn(f"slot {k}: box has zero pixel area, part skipped")
            continue
        y0, x0, patch = warped
        region = canvas[y0 : y0 + patch.shape[0], x0 : x0 + patch.shape[1]]
        region[patch] = 0
        region[patch, k] = 1
    return LabelMapTensor(canvas=canvas, boxes=boxes.copy(), category=category)


def from_index_canvas(
    index_canvas: np.ndarray, boxes: np.ndarray, category: int, p: int
) -> LabelMapTensor:
    """Rebuild the one-hot tensor from a slot-index raster (0 = background)."""
    h, w = index_canvas.shape
    canvas = np.zeros((h, w, p), dtype=np.uint8)
    for k in range(p):
        canvas[:, :, k] = (index_canvas == k + 1).astype(np.uint8)
    return LabelMapTensor(canvas=canvas, boxes=np.asarray(boxes, dtype=np.float64), category=category)


def _palette(p: int) -> list[int]:
    colors = [(0, 0, 0)] + [slot_color(k) for k in range(p)]
    flat = [c for rgb in colors for c in rgb]
    return flat + [0] * (768 - len(flat))


def label_map_png_bytes(tensor: LabelMapTensor) -> bytes:
    img = Image.fromarray(tensor.index_canvas(), mode="P")
    img.putpalette(_palette(tensor.p))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def rgb_png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_label_map(tensor: LabelMapTensor, png_path: str | Path) -> None:
    png_path = Path(png_path)
    png_path.write_bytes(label_map_png_bytes(tensor))
    sidecar = {
        "category": tensor.category,
        "p": tensor.p,
        "boxes": [[float(v) for v in row] for row in tensor.boxes],
    }
    Path(str(png_path) + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_label_map(png_path: str | Path) -> LabelMapTensor:
    png_path = Path(png_path)
    sidecar = json.loads(Path(str(png_path) + ".json").read_text())
    index_canvas = np.asarray(Image.open(png_path)).astype(np.uint8)
    return from_index_canvas(
        index_canvas,
        np.asarray(sidecar["boxes"], dtype=np.float64),
        int(sidecar["category"]),
        int(sidecar["p"]),
    )


def render_flat_sprite(
    tensor: LabelMapTensor, background: tuple[int, int, int] = (255, 255, 255)
) -> np.ndarray:
    """Flat-color rendering of a label map with the per-slot palette."""
    idx = tensor.index_canvas()
    out = np.empty((*idx.shape, 3), dtype=np.uint8)
    out[:] = background
    for k in tensor.present_channels():
        out[idx == k + 1] = slot_color(k)
    return out


def check_one_hot(tensor: LabelMapTensor) -> None:
    sums = tensor.canvas.sum(axis=2)
    if sums.max(initial=0) > 1:
        raise ValueError("label map is not one-hot: some pixel carries multiple labels")
