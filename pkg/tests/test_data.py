import json

import numpy as np
import pytest

from partgen import data
from partgen.corpus import ProceduralCategory, ProceduralSpec, desk_spec, make_procedural_corpus
from partgen.data import (
    AugmentConfig,
    ObjectSample,
    PartGraph,
    PartMaskSet,
    SampleError,
    augment,
    deserialize_sample,
    load_dataset,
    normalize_object,
    save_dataset,
    save_schemas,
    serialize_sample,
    split_dataset,
    validate_sample,
)


def make_sample(boxes: dict[int, list[float]], p: int = 4, category: int = 0, m: int = 8):
    X = np.zeros((p, 5))
    masks = {}
    for slot, box in boxes.items():
        X[slot, 0] = 1.0
        X[slot, 1:5] = box
        masks[slot] = np.ones((m, m), dtype=np.uint8)
    return ObjectSample(
        category=category,
        part_list=tuple(sorted(boxes)),
        graph=PartGraph(X=X, A=np.zeros((p, p), dtype=np.int8), category=category),
        masks=PartMaskSet(masks=masks, resolution=m),
    )


# ---------------------------------------------------------------------------
# normalize_object
# ---------------------------------------------------------------------------


def test_normalize_single_box_in_square_image():
    image = np.zeros((40, 40, 3), dtype=np.uint8)
    out = normalize_object(np.array([[10.0, 10.0, 30.0, 30.0]]), image=image)
    assert np.allclose(out.boxes, [[0.25, 0.25, 0.75, 0.75]])


def test_normalize_identity_when_already_unit():
    boxes = np.array([[0.0, 0.0, 1.0, 1.0]])
    out = normalize_object(boxes)
    assert np.allclose(out.boxes, boxes)


def test_normalize_wide_hull_centers_vertically():
    boxes = np.array([[0.0, 0.0, 60.0, 50.0], [40.0, 0.0, 100.0, 50.0]])
    out = normalize_object(boxes)
    # hull 100 x 50 scaled by 1/100, centered: vertical offset 0.25
    assert np.allclose(out.boxes[0], [0.0, 0.25, 0.6, 0.75])
    assert np.allclose(out.boxes[1], [0.4, 0.25, 1.0, 0.75])


def test_normalize_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        raw = rng.uniform(0, 200, size=(3, 2))
        sizes = rng.uniform(5, 80, size=(3, 2))
        boxes = np.hstack([raw, raw + sizes])
        once = normalize_object(boxes).boxes
        twice = normalize_object(once).boxes
        assert np.abs(once - twice).max() < 1e-9


def test_normalize_rejects_degenerate_hull():
    with pytest.raises(SampleError):
        normalize_object(np.array([[5.0, 5.0, 5.0, 5.0]]))


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------


def test_augment_mirror_reflects_boxes_and_masks():
    sample = make_sample({1: [0.1, 0.2, 0.4, 0.5]})
    sample.masks.masks[1][:, :4] = 0  # asymmetric mask
    out = augment(sample, AugmentConfig(mirror_prob=1.0), np.random.default_rng(0))
    assert np.allclose(out.graph.X[1, 1:5], [0.6, 0.2, 0.9, 0.5])
    assert np.array_equal(out.masks.masks[1], sample.masks.masks[1][:, ::-1])


def test_augment_identity_config_is_identity():
    sample = make_sample({0: [0.2, 0.3, 0.5, 0.8], 2: [0.1, 0.1, 0.3, 0.2]})
    out = augment(sample, AugmentConfig(), np.random.default_rng(5))
    assert np.array_equal(out.graph.X, sample.graph.X)
    assert np.array_equal(out.graph.A, sample.graph.A)
    assert all(np.array_equal(out.masks.masks[k], sample.masks.masks[k]) for k in (0, 2))


def test_augment_part_scale_grows_area_keeps_center():
    sample = make_sample({0: [0.4, 0.4, 0.6, 0.6]})
    cfg = AugmentConfig(part_scale_range=(1.2, 1.2))
    out = augment(sample, cfg, np.random.default_rng(0))
    box = out.graph.X[0, 1:5]
    assert np.allclose(box, [0.38, 0.38, 0.62, 0.62])
    area_ratio = (box[2] - box[0]) * (box[3] - box[1]) / 0.04
    assert abs(area_ratio - 1.44) < 1e-9


def test_augment_deterministic_given_seed():
    sample = make_sample({0: [0.3, 0.3, 0.6, 0.7], 1: [0.1, 0.1, 0.2, 0.3]})
    cfg = AugmentConfig(
        translate_range=0.05, part_scale_range=(0.8, 1.2),
        object_scale_range=(0.9, 1.1), mirror_prob=0.5,
    )
    a = augment(sample, cfg, np.random.default_rng(11))
    b = augment(sample, cfg, np.random.default_rng(11))
    assert np.array_equal(a.graph.X, b.graph.X)
    validate_sample(a)


def test_augment_rejects_zero_area_scale_range():
    sample = make_sample({0: [0.3, 0.3, 0.6, 0.7]})
    with pytest.raises(ValueError):
        augment(sample, AugmentConfig(part_scale_range=(0.0, 1.0)), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# split_dataset
# ---------------------------------------------------------------------------


def test_split_100_single_category():
    samples = [make_sample({0: [0.1, 0.1, 0.9, 0.9]}) for _ in range(100)]
    train, val, test = split_dataset(samples, rng=np.random.default_rng(0))
    assert (len(train), len(val), len(test)) == (75, 15, 10)


def test_split_empty():
    assert split_dataset([], rng=np.random.default_rng(0)) == ([], [], [])


def test_split_stratified_within_one_sample():
    samples = [
        make_sample({0: [0.1, 0.1, 0.9, 0.9]}, category=c) for c in range(10) for _ in range(40)
    ]
    train, val, test = split_dataset(samples, rng=np.random.default_rng(4))
    assert len(train) + len(val) + len(test) == 400
    for cat in range(10):
        counts = [sum(1 for s in part if s.category == cat) for part in (train, val, test)]
        for count, ratio in zip(counts, (0.75, 0.15, 0.10)):
            assert abs(count - 40 * ratio) <= 1
    # determinism
    train2, _, _ = split_dataset(samples, rng=np.random.default_rng(4))
    assert [id(s) for s in train] == [id(s) for s in train2]


def test_split_tiny_category_goes_to_train():
    samples = [make_sample({0: [0.1, 0.1, 0.9, 0.9]}, category=0) for _ in range(2)]
    with pytest.warns(UserWarning):
        train, val, test = split_dataset(samples, rng=np.random.default_rng(0))
    assert len(train) == 2 and not val and not test


# ---------------------------------------------------------------------------
# procedural corpus
# ---------------------------------------------------------------------------


def test_corpus_reproducible_byte_identical():
    spec = desk_spec(n_categories=1, n_parts=4, samples_per_category=8)
    a, _ = make_procedural_corpus(spec, np.random.default_rng(7))
    b, _ = make_procedural_corpus(spec, np.random.default_rng(7))
    assert [serialize_sample(s) for s in a] == [serialize_sample(s) for s in b]


def test_corpus_chain_adjacency_edge_count():
    spec = ProceduralSpec(
        categories=(ProceduralCategory(name="worm", n_parts=4, adjacency="chain"),),
        samples_per_category=1,
    )
    _, schemas = make_procedural_corpus(spec, np.random.default_rng(0))
    assert schemas[0].adjacency_template.sum() == 2 * 3  # 3 undirected edges


def test_corpus_two_category_part_histograms():
    spec = ProceduralSpec(
        categories=(
            ProceduralCategory(name="a", n_parts=3),
            ProceduralCategory(name="b", n_parts=5),
        ),
        samples_per_category=12,
    )
    samples, schemas = make_procedural_corpus(spec, np.random.default_rng(1))
    assert samples[0].graph.p == 5  # global p from the widest category
    seen = {0: set(), 1: set()}
    for s in samples:
        seen[s.category].update(s.part_list)
        validate_sample(s, 5)
    assert seen[0] == {0, 1, 2}
    assert seen[1] == {0, 1, 2, 3, 4}


def test_corpus_rejects_part_count_over_budget():
    spec = ProceduralSpec(
        categories=(ProceduralCategory(name="a", n_parts=6),), max_parts=4
    )
    with pytest.raises(ValueError):
        make_procedural_corpus(spec, np.random.default_rng(0))


def test_presence_column_matches_masks(desk_corpus):
    samples, _, p = desk_corpus
    for s in samples:
        present = set(np.flatnonzero(s.graph.X[:, 0] > 0.5))
        assert present == set(s.masks.masks)


# ---------------------------------------------------------------------------
# serialization + dataset directory round trips
# ---------------------------------------------------------------------------


def test_document_round_trip_bit_exact(desk_corpus):
    samples, _, _ = desk_corpus
    for s in samples[:4]:
        doc = serialize_sample(s)
        assert serialize_sample(deserialize_sample(doc)) == doc


def test_dataset_directory_round_trip(tmp_path, desk_corpus):
    samples, schemas, p = desk_corpus
    save_dataset(samples, schemas, tmp_path)
    save_schemas(schemas, tmp_path / "schema.json")
    loaded, schemas2, p2 = load_dataset(tmp_path, tmp_path / "schema.json")
    assert p2 == p and len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert np.allclose(a.graph.X, b.graph.X, atol=1e-8)
        assert np.array_equal(a.graph.A, b.graph.A)
        assert a.part_list == b.part_list
        assert all(np.array_equal(a.masks.masks[k], b.masks.masks[k]) for k in a.masks.masks)
        assert np.array_equal(a.image, b.image)


def test_load_empty_directory(tmp_path, desk_corpus):
    _, schemas, _ = desk_corpus
    save_schemas(schemas, tmp_path / "schema.json")
    samples, loaded_schemas, p = load_dataset(tmp_path / "nothing", tmp_path / "schema.json")
    assert samples == [] and len(loaded_schemas) == 1


def test_load_rejects_unknown_slot(tmp_path, desk_corpus):
    samples, schemas, _ = desk_corpus
    save_dataset(samples[:1], schemas, tmp_path)
    save_schemas(schemas, tmp_path / "schema.json")
    meta_path = tmp_path / schemas[0].name / "000000" / "meta"
    meta = json.loads(meta_path.read_text())
    meta["parts"] = [0, 9]
    meta["boxes"]["9"] = [0.1, 0.1, 0.2, 0.2]
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(SampleError, match=r"\[9\]"):
        load_dataset(tmp_path, tmp_path / "schema.json")


def test_load_malformed_meta_names_path(tmp_path, desk_corpus):
    samples, schemas, _ = desk_corpus
    save_dataset(samples[:1], schemas, tmp_path)
    save_schemas(schemas, tmp_path / "schema.json")
    meta_path = tmp_path / schemas[0].name / "000000" / "meta"
    meta_path.write_text("{not json")
    with pytest.raises(SampleError, match="meta"):
        load_dataset(tmp_path, tmp_path / "schema.json")


def test_load_warns_on_empty_category(tmp_path, desk_corpus):
    _, schemas, _ = desk_corpus
    save_schemas(schemas, tmp_path / "schema.json")
    (tmp_path / schemas[0].name).mkdir()
    with pytest.warns(UserWarning, match="empty"):
        samples, _, _ = load_dataset(tmp_path, tmp_path / "schema.json")
    assert samples == []
