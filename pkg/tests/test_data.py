import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superguide.data import (
    DatasetError,
    GroupedDataset,
    SampleRecord,
    SpuriousSpec,
    format_group_table,
    generate_synthetic,
    group_table,
    load_dataset,
    majority_attribute,
    realized_correlation,
    save_dataset,
)

from conftest import tiny_spec


def _rec(i, y, z, split="train", size=4):
    return SampleRecord(f"r{i}", np.zeros((3, size, size), np.float32), y, z, split)


def test_rho_095_gives_950_50_per_class():
    spec = SpuriousSpec(split_sizes={"train": 2000, "val": 4, "test": 4}, noise=0.0)
    ds = generate_synthetic(spec)
    rows = {(y, z): n for s, y, z, n in group_table(ds) if s == "train"}
    assert rows == {(0, 0): 950, (0, 1): 50, (1, 0): 50, (1, 1): 950}


def test_rho_one_empties_minority_train_groups():
    ds = generate_synthetic(tiny_spec(correlation_ratio=1.0))
    counts = ds.group_counts
    assert counts[(0, 1, "train")] == 0 and counts[(1, 0, "train")] == 0
    for split in ("val", "test"):
        for y in range(2):
            for z in range(2):
                assert counts[(y, z, split)] > 0


def test_val_test_are_group_balanced(tiny_ds):
    for split in ("val", "test"):
        sizes = [n for s, _, _, n in group_table(tiny_ds) if s == split]
        assert len(sizes) == 4 and max(sizes) - min(sizes) <= 1


def _metadata_digest(root):
    with open(os.path.join(root, "metadata.csv"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_generation_is_deterministic(tmp_path):
    a, b = generate_synthetic(tiny_spec()), generate_synthetic(tiny_spec())
    for ra, rb in zip(a.records, b.records):
        assert ra.id == rb.id and np.array_equal(ra.image, rb.image)
        assert np.array_equal(ra.foreground_mask, rb.foreground_mask)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    assert _metadata_digest(tmp_path / "a") == _metadata_digest(tmp_path / "b")


def test_different_seed_changes_images():
    a, b = generate_synthetic(tiny_spec(seed=1)), generate_synthetic(tiny_spec(seed=2))
    assert not np.array_equal(a.records[0].image, b.records[0].image)


@pytest.mark.parametrize("rho", [-0.1, 1.3, float("nan")])
def test_rejects_bad_rho(rho):
    with pytest.raises(DatasetError, match="correlation_ratio"):
        generate_synthetic(tiny_spec(correlation_ratio=rho))


def test_rejects_sizes_leaving_empty_groups():
    with pytest.raises(DatasetError, match="val"):
        generate_synthetic(tiny_spec(split_sizes={"train": 64, "val": 3, "test": 16}))


def test_rejects_small_images():
    with pytest.raises(DatasetError):
        generate_synthetic(tiny_spec(image_size=8))


@pytest.mark.parametrize("mode", ["background_color", "corner_patch", "foreground_tint"])
def test_masks_binary_nonempty_strict_subset(mode):
    ds = generate_synthetic(tiny_spec(spurious_mode=mode))
    for r in ds.records:
        m = r.foreground_mask
        assert m.dtype == bool and m.shape == r.image.shape[1:]
        assert 0 < m.sum() < m.size
        assert r.image.min() >= 0.0 and r.image.max() <= 1.0


def _noise_free(mode, label, attribute, seed=0):
    spec = tiny_spec(spurious_mode=mode, noise=0.0, contrast=1.0, seed=seed)
    ds = generate_synthetic(spec)
    return [r for r in ds.records if r.label == label and r.attribute == attribute]


def test_spurious_attribute_lives_only_in_background():
    # background colour depends only on the attribute, never on the label
    for z in range(2):
        backgrounds = set()
        for y in range(2):
            for r in _noise_free("background_color", y, z):
                bg = r.image[:, ~r.foreground_mask]
                backgrounds.add(tuple(np.unique(bg.T, axis=0).ravel().round(4)))
        assert len(backgrounds) == 1


def test_class_lives_only_in_foreground():
    # the foreground pixel palette is the same for both attributes
    for y in range(2):
        palettes = set()
        for z in range(2):
            for r in _noise_free("background_color", y, z):
                fg = r.image[:, r.foreground_mask]
                palettes.add(tuple(np.unique(fg.T, axis=0).ravel().round(4)))
        assert len(palettes) == 1


def test_corner_patch_is_outside_mask():
    for r in _noise_free("corner_patch", 0, 1):
        grey = np.isclose(r.image, 0.45, atol=1e-2).all(axis=0)
        dark = np.isclose(r.image, 0.27, atol=1e-2).all(axis=0)
        light = np.isclose(r.image, 0.92, atol=1e-2).all(axis=0)
        patch = ~(grey | dark | light)
        assert patch.any() and not (patch & r.foreground_mask).any()


def test_foreground_tint_changes_foreground_only():
    a = _noise_free("foreground_tint", 0, 0)[0]
    for r in _noise_free("foreground_tint", 0, 1):
        bg = r.image[:, ~r.foreground_mask]
        assert np.allclose(bg, 0.45, atol=1e-2)
    assert a.image[:, a.foreground_mask].std() > 0


@settings(max_examples=25)
@given(
    rho=st.floats(0.0, 1.0),
    n_train=st.integers(8, 120),
    n_classes=st.integers(2, 3),
    n_attrs=st.integers(2, 3),
)
def test_realized_correlation_within_one_over_n(rho, n_train, n_classes, n_attrs):
    spec = SpuriousSpec(
        n_classes=n_classes,
        n_attributes=n_attrs,
        correlation_ratio=rho,
        split_sizes={"train": n_train, "val": n_classes * n_attrs, "test": n_classes * n_attrs},
    )
    ds = generate_synthetic(spec)
    for y in range(n_classes):
        n = sum(r.label == y for r in ds.split("train"))
        assert abs(realized_correlation(ds, y) - rho) <= 1.0 / n + 1e-12
        minority = [r for r in ds.split("train") if r.label == y and r.attribute != majority_attribute(y, n_attrs)]
        assert len(minority) == n - round(rho * n)


def test_group_table_empty_dataset():
    assert group_table(GroupedDataset([], ["a", "b"], ["x", "y"])) == []


def test_group_table_hand_built():
    ds = GroupedDataset([_rec(0, 0, 1), _rec(1, 0, 1), _rec(2, 1, 0)], ["a", "b"], ["x", "y"])
    assert group_table(ds) == [("train", 0, 1, 2), ("train", 1, 0, 1)]


@given(st.randoms(use_true_random=False))
def test_group_counts_invariant_under_shuffle(rnd):
    recs = [_rec(i, i % 2, (i // 2) % 2, ("train", "val", "test")[i % 3]) for i in range(12)]
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    a = GroupedDataset(recs, ["a", "b"], ["x", "y"])
    b = GroupedDataset(shuffled, ["a", "b"], ["x", "y"])
    assert group_table(a) == group_table(b)
    assert sum(n for *_, n in group_table(a)) == len(recs)


def test_group_table_consistent_with_generator(tiny_ds):
    table = format_group_table(tiny_ds).splitlines()
    assert table[0] == "split,label,attribute,count"
    assert "train,0,0,30" in table and "train,0,1,2" in table


def test_record_validation():
    with pytest.raises(DatasetError, match="label"):
        GroupedDataset([_rec(0, 2, 0)], ["a", "b"], ["x", "y"])
    with pytest.raises(DatasetError, match="split"):
        GroupedDataset([_rec(0, 0, 0, split="dev")], ["a", "b"], ["x", "y"])
    with pytest.raises(DatasetError, match="duplicate"):
        GroupedDataset([_rec(0, 0, 0), _rec(0, 1, 0)], ["a", "b"], ["x", "y"])
    with pytest.raises(DatasetError):
        GroupedDataset([_rec(0, 0, 0)], ["a", "b"], ["x", "y"]).split("dev")


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(tiny_spec(split_sizes={"train": 4, "val": 4, "test": 4}))
    ds = GroupedDataset(ds.records[:10], ds.class_names, ds.attribute_names)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert [(r.id, r.label, r.attribute, r.split) for r in back.records] == [
        (r.id, r.label, r.attribute, r.split) for r in ds.records
    ]
    for a, b in zip(ds.records, back.records):
        assert np.abs(a.image - b.image).max() <= 1 / 255 + 1e-7
        assert np.array_equal(a.foreground_mask, b.foreground_mask)
    assert back.class_names == ds.class_names


def _saved(tmp_path):
    ds = generate_synthetic(tiny_spec(split_sizes={"train": 4, "val": 4, "test": 4}))
    save_dataset(ds, tmp_path)
    return tmp_path / "metadata.csv"


def test_load_missing_image_names_file(tmp_path):
    _saved(tmp_path)
    os.remove(tmp_path / "images" / "val000001.png")
    with pytest.raises(DatasetError, match="val000001.png"):
        load_dataset(tmp_path)


def test_load_unknown_split_token(tmp_path):
    meta = _saved(tmp_path)
    text = meta.read_text().replace(",val,", ",dev,", 1)
    meta.write_text(text)
    with pytest.raises(DatasetError, match="dev"):
        load_dataset(tmp_path)


def test_load_label_out_of_range(tmp_path):
    meta = _saved(tmp_path)
    lines = meta.read_text().splitlines()
    parts = lines[1].split(",")
    parts[2] = "7"
    lines[1] = ",".join(parts)
    meta.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="label"):
        load_dataset(tmp_path)


def test_load_schema_errors(tmp_path):
    with pytest.raises(DatasetError, match="metadata"):
        load_dataset(tmp_path)
    (tmp_path / "metadata.csv").write_text("id,file\n")
    with pytest.raises(DatasetError, match="header"):
        load_dataset(tmp_path)


def test_from_mapping():
    spec = SpuriousSpec.from_mapping({"correlation_ratio": "0.9", "train_size": "10", "seed": "4"})
    assert spec.correlation_ratio == 0.9 and spec.split_sizes["train"] == 10 and spec.seed == 4
    with pytest.raises(DatasetError, match="unknown"):
        SpuriousSpec.from_mapping({"rho": "0.9"})
