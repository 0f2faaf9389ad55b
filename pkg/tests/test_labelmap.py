import numpy as np
import pytest

from partgen.labelmap import (
    check_one_hot,
    compose_label_map,
    from_index_canvas,
    label_map_png_bytes,
    load_label_map,
    render_flat_sprite,
    save_label_map,
    slot_color,
    warp_mask_to_box,
)


def full(m):
    return np.ones((m, m), dtype=np.uint8)


def test_single_full_canvas_part():
    tensor = compose_label_map({0: full(8)}, np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([1.0]),
                               canvas_size=16, p=1)
    assert tensor.canvas[:, :, 0].all()


def test_disjoint_boxes_disjoint_channels():
    boxes = np.array([[0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0]])
    tensor = compose_label_map({0: full(8), 1: full(8)}, boxes, np.array([1.0, 1.0]),
                               canvas_size=16, p=2)
    sums = tensor.canvas.sum(axis=2)
    assert sums.max() == 1
    assert (tensor.canvas[:, :, 0] * tensor.canvas[:, :, 1]).sum() == 0


def test_nested_boxes_small_part_wins():
    # big torso with a small head inside on an 8x8 toy canvas
    boxes = np.array([[0.0, 0.0, 1.0, 1.0], [0.25, 0.25, 0.5, 0.5]])
    tensor = compose_label_map({0: full(8), 1: full(8)}, boxes, np.array([1.0, 1.0]),
                               canvas_size=8, p=2)
    assert tensor.canvas[2:4, 2:4, 1].all()  # head pixels carry the head channel
    assert not tensor.canvas[2:4, 2:4, 0].any()
    assert tensor.canvas[0, 0, 0] == 1
    check_one_hot(tensor)


def test_equal_area_tie_goes_to_lower_slot():
    boxes = np.array([[0.0, 0.0, 0.5, 0.5], [0.0, 0.0, 0.5, 0.5]])
    tensor = compose_label_map({0: full(8), 1: full(8)}, boxes, np.array([1.0, 1.0]),
                               canvas_size=8, p=2)
    assert tensor.canvas[0:4, 0:4, 0].all() and not tensor.canvas[:, :, 1].any()


def test_zero_area_box_skipped_with_warning():
    boxes = np.array([[0.2, 0.2, 0.2, 0.8]])
    with pytest.warns(UserWarning, match="zero pixel area"):
        tensor = compose_label_map({0: full(8)}, boxes, np.array([1.0]), canvas_size=16, p=1)
    assert tensor.canvas.sum() == 0


def test_one_hot_property_1000_random_trials():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        p = int(rng.integers(1, 5))
        boxes = np.zeros((p, 4))
        masks = {}
        presence = np.zeros(p)
        for k in range(p):
            x0, y0 = rng.uniform(0, 0.9, size=2)
            boxes[k] = [x0, y0, min(1.0, x0 + rng.uniform(0, 0.6)), min(1.0, y0 + rng.uniform(0, 0.6))]
            masks[k] = (rng.uniform(size=(8, 8)) > 0.4).astype(np.uint8)
            presence[k] = rng.integers(0, 2)
        tensor = compose_label_map(masks, boxes, presence, canvas_size=32, p=p)
        sums = tensor.canvas.sum(axis=2)
        assert sums.max(initial=0) <= 1
        # channels only inside their boxes (+-1 pixel rounding)
        for k in range(p):
            if presence[k] < 0.5:
                assert not tensor.canvas[:, :, k].any()
                continue
            ys, xs = np.nonzero(tensor.canvas[:, :, k])
            if len(ys) == 0:
                continue
            assert xs.min() >= int(boxes[k, 0] * 32) - 1
            assert xs.max() <= int(np.ceil(boxes[k, 2] * 32)) + 1
            assert ys.min() >= int(boxes[k, 1] * 32) - 1
            assert ys.max() <= int(np.ceil(boxes[k, 3] * 32)) + 1


def test_warp_preserves_area_fraction():
    # nearest-neighbor warp keeps the foreground fraction within +-10%
    # (absolute) for boxes of at least 8x8 pixels; the rigorous NN bound
    # (one target pixel per box edge and dimension) is asserted alongside
    rng = np.random.default_rng(23)
    for _ in range(1000):
        m = 64
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        ry, rx = rng.uniform(0.2, 0.45, size=2)
        yy, xx = np.mgrid[0:m, 0:m] / (m - 1)
        if rng.uniform() < 0.5:
            mask = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0).astype(np.uint8)
        else:
            mask = ((np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)).astype(np.uint8)
        h = int(rng.integers(8, 40))
        w = int(rng.integers(8, 40))
        box = np.array([0.0, 0.0, w / 64, h / 64])
        warped = warp_mask_to_box(mask, box, 64)
        assert warped is not None
        _, _, patch = warped
        assert patch.shape == (h, w)
        frac_src = float(mask.mean())
        frac_dst = float(patch.mean())
        err = abs(frac_src - frac_dst)
        assert err <= 0.10
        fx = (mask.any(axis=0).sum()) / m
        fy = (mask.any(axis=1).sum()) / m
        assert err <= fx / h + fy / w + 1.0 / (h * w) + 1e-9


def test_index_canvas_round_trip():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
    tensor = from_index_canvas(idx, np.zeros((3, 4)), category=1, p=3)
    assert np.array_equal(tensor.index_canvas(), idx)


def test_png_round_trip(tmp_path):
    boxes = np.array([[0.1, 0.1, 0.6, 0.6], [0.5, 0.5, 0.9, 0.9]])
    tensor = compose_label_map({0: full(8), 1: full(8)}, boxes, np.array([1.0, 1.0]),
                               category=1, canvas_size=32, p=2)
    save_label_map(tensor, tmp_path / "lm.png")
    loaded = load_label_map(tmp_path / "lm.png")
    assert np.array_equal(loaded.canvas, tensor.canvas)
    assert loaded.category == 1
    assert np.allclose(loaded.boxes, tensor.boxes)
    assert label_map_png_bytes(loaded) == (tmp_path / "lm.png").read_bytes()


def test_slot_colors_deterministic_and_distinct():
    colors = [slot_color(k) for k in range(8)]
    assert colors == [slot_color(k) for k in range(8)]
    assert len(set(colors)) == 8


def test_render_flat_sprite_uses_palette():
    tensor = compose_label_map({0: full(8)}, np.array([[0.0, 0.0, 0.5, 0.5]]), np.array([1.0]),
                               canvas_size=8, p=1)
    img = render_flat_sprite(tensor)
    assert tuple(img[0, 0]) == slot_color(0)
    assert tuple(img[7, 7]) == (255, 255, 255)
