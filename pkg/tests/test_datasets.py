import numpy as np
import pytest
from PIL import Image

from camalkit.datasets import (
    FoldPlan, SyntheticSpec, box_pseudo_masks, export_directory, export_masks, generate_synthetic,
    load_directory, load_mask, load_pseudo_masks, make_folds, normalize_images, shape_footprint,
)
from camalkit.errors import (
    ConfigError, DegenerateMaskError, FormatError, GenerationError, PairingError, StratificationError,
)


def test_generation_is_deterministic():
    a = generate_synthetic(SyntheticSpec(samples_per_class=3, seed=11))
    b = generate_synthetic(SyntheticSpec(samples_per_class=3, seed=11))
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) and x.label == y.label


def test_generation_contract(small_dataset):
    assert len(small_dataset) == 24 and small_dataset.n_classes == 3
    assert np.bincount(small_dataset.labels).tolist() == [8, 8, 8]
    for s in small_dataset:
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) == {0, 1}


def test_tag_is_outside_mask_and_follows_label(small_dataset):
    s = next(s for s in small_dataset if s.meta["has_tag"])
    # the tag corner never overlaps the object footprint
    corners = [s.mask[1:9, 1:9], s.mask[1:9, -9:-1], s.mask[-9:-1, 1:9], s.mask[-9:-1, -9:-1]]
    assert not corners[s.meta["train_corner"]].any()
    # the test rendering carries an uninformative tag
    assert not np.array_equal(s.image, s.eval_image) or s.meta["test_tag_label"] == s.label


def test_no_tag_when_uncorrelated():
    ds = generate_synthetic(SyntheticSpec(samples_per_class=4, spurious_correlation=0.0, seed=1))
    assert not any(s.meta["has_tag"] for s in ds)
    assert all(np.array_equal(s.image, s.eval_image) for s in ds)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(spurious_correlation=1.5)
    with pytest.raises(ConfigError):
        SyntheticSpec(n_classes=9)
    with pytest.raises(GenerationError):
        generate_synthetic(SyntheticSpec(image_size=(8, 8), samples_per_class=1))


def test_footprints():
    disc = shape_footprint("disc", (20, 20), (10, 10), 4.0, 0.0)
    # pixel centres within radius 4 of (10, 10): lattice count of (i + 0.5 - 10)^2 + ... <= 16
    expected = sum((i + 0.5 - 10) ** 2 + (j + 0.5 - 10) ** 2 <= 16 for i in range(20) for j in range(20))
    assert disc.sum() == expected
    assert shape_footprint("square", (20, 20), (10, 10), 5.0, 0.0).sum() == 64
    with pytest.raises(GenerationError):
        shape_footprint("hexagon", (8, 8), (4, 4), 2, 0)


def test_directory_roundtrip(tmp_path, small_dataset):
    export_directory(small_dataset, tmp_path / "d")
    back = load_directory(tmp_path / "d")
    assert back.ids == small_dataset.ids and back.n_classes == 3
    for a, b in zip(small_dataset, back):
        # 8-bit quantized at generation, so the PNG round trip is exact
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.eval_image, b.eval_image)
        assert np.array_equal(a.mask, b.mask) and a.label == b.label


def _write_pair(root, stem, mask, label="cat"):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(root / "images" / f"{stem}.png")
    Image.fromarray(mask).save(root / "masks" / f"{stem}.png")
    with open(root / "labels.csv", "a") as fh:
        if fh.tell() == 0:
            fh.write("stem,label\n")
        fh.write(f"{stem},{label}\n")


def test_loader_string_labels_and_errors(tmp_path):
    mask = np.zeros((8, 8), np.uint8)
    mask[2:5, 2:5] = 255
    _write_pair(tmp_path, "a", mask, "dog")
    _write_pair(tmp_path, "b", mask, "cat")
    ds = load_directory(tmp_path)
    assert ds.class_names == ["cat", "dog"] and ds["a"].label == 1

    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "c.png")
    with pytest.raises(PairingError):
        load_directory(tmp_path)


def test_loader_rejects_degenerate_and_grey_masks(tmp_path):
    _write_pair(tmp_path / "x", "a", np.zeros((8, 8), np.uint8))
    with pytest.raises(DegenerateMaskError, match="rejected a"):
        load_directory(tmp_path / "x")
    grey = np.zeros((8, 8), np.uint8)
    grey[0, 0] = 128
    Image.fromarray(grey).save(tmp_path / "g.png")
    with pytest.raises(FormatError):
        load_mask(tmp_path / "g.png")


def test_loader_resize_and_crop(tmp_path):
    mask = np.zeros((16, 16), np.uint8)
    mask[4:12, 4:12] = 255
    _write_pair(tmp_path, "a", mask)
    s = load_directory(tmp_path, resize=12, crop=8)["a"]
    assert s.image.shape == (3, 8, 8) and s.mask.shape == (8, 8)
    with pytest.raises(ConfigError):
        load_directory(tmp_path, crop=20)


def test_box_pseudo_masks_roundtrip(tmp_path, small_dataset):
    boxes = box_pseudo_masks(small_dataset, pad=3)
    s = small_dataset[0]
    ys, xs = np.nonzero(boxes[s.sample_id])
    my, mx = np.nonzero(s.mask)
    assert ys.min() == max(my.min() - 3, 0) and xs.max() == min(mx.max() + 3, 63)
    assert (boxes[s.sample_id] >= s.mask).all()
    export_masks(boxes, tmp_path / "pm")
    back = load_pseudo_masks(tmp_path / "pm", small_dataset)
    assert all(np.array_equal(back[k], boxes[k]) for k in boxes)
    (tmp_path / "pm" / f"{s.sample_id}.png").unlink()
    with pytest.raises(PairingError):
        load_pseudo_masks(tmp_path / "pm", small_dataset)


def test_folds_partition_and_stratify(small_dataset):
    plan = make_folds(small_dataset, k=4, seed=2)
    seen = []
    for f in range(4):
        test = plan.test_ids(f)
        assert set(test).isdisjoint(plan.train_ids(f))
        assert np.bincount([small_dataset[i].label for i in test], minlength=3).tolist() == [2, 2, 2]
        seen += test
    assert sorted(seen) == small_dataset.ids
    assert FoldPlan.from_json(plan.to_json()) == plan
    assert make_folds(small_dataset, k=4, seed=2) == plan


def test_folds_errors(small_dataset):
    with pytest.raises(StratificationError):
        make_folds(small_dataset, k=9)
    with pytest.raises(StratificationError):
        make_folds(small_dataset, k=1)


def test_normalize_images():
    x = np.ones((1, 3, 2, 2), np.float32) * np.array([0.485, 0.456, 0.406], np.float32)[None, :, None, None]
    assert np.allclose(normalize_images(x), 0, atol=1e-6)


def test_folds_exact_divisibility():
    ds = generate_synthetic(SyntheticSpec(samples_per_class=10, seed=0))
    plan = make_folds(ds, k=10, seed=4)
    for f in range(10):
        assert sorted(ds[i].label for i in plan.test_ids(f)) == [0, 1, 2]
