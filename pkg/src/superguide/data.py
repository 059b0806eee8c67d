"""Grouped datasets with controllable spurious correlations.

Every sample belongs to a group ``(label, attribute)``.  The synthetic
generator fills a random foreground rectangle with a class-specific
grating (stripe orientation or layout) and injects
the spurious attribute through one of three channels (background colour,
a corner patch, or a tint of the foreground itself).
"""

import csv
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPURIOUS_MODES = ("background_color", "corner_patch", "foreground_tint")
METADATA_HEADER = ["id", "filename", "label", "attribute", "split", "mask_filename"]

# Attribute palette; index i is attribute i (cycled when n_attributes > len).
PALETTE = np.array(
    [
        [0.15, 0.35, 0.85],  # blue
        [0.25, 0.65, 0.20],  # green
        [0.85, 0.25, 0.20],  # red
        [0.90, 0.75, 0.15],  # yellow
        [0.60, 0.25, 0.75],  # purple
        [0.20, 0.75, 0.75],  # cyan
    ],
    dtype=np.float32,
)
NEUTRAL_BACKGROUND = np.array([0.45, 0.45, 0.45], dtype=np.float32)
NEUTRAL_FOREGROUND = np.array([0.92, 0.92, 0.92], dtype=np.float32)

DARK_STRIPE = 0.6 * NEUTRAL_BACKGROUND

PATTERN_NAMES = ("horizontal", "vertical", "diagonal", "antidiagonal", "checker", "dots")


class DatasetError(ValueError):
    """Raised for invalid dataset specs, schema violations or missing files."""


@dataclass
class SampleRecord:
    """One image with its label, spurious attribute and split.

    ``image`` is a float32 array of shape (3, H, W) with values in [0, 1].
    ``foreground_mask`` is a bool array of shape (H, W) or None.
    """

    id: str
    image: np.ndarray
    label: int
    attribute: int
    split: str
    foreground_mask: np.ndarray | None = None

    @property
    def group(self):
        return (self.label, self.attribute)


@dataclass
class GroupedDataset:
    records: list
    class_names: list
    attribute_names: list

    def __post_init__(self):
        n_y, n_z = len(self.class_names), len(self.attribute_names)
        seen = set()
        for r in self.records:
            if r.split not in SPLITS:
                raise DatasetError(f"record {r.id}: unknown split {r.split!r}")
            if not 0 <= r.label < n_y:
                raise DatasetError(f"record {r.id}: label {r.label} out of range [0, {n_y})")
            if not 0 <= r.attribute < n_z:
                raise DatasetError(f"record {r.id}: attribute {r.attribute} out of range [0, {n_z})")
            if r.foreground_mask is not None and r.foreground_mask.shape != r.image.shape[1:]:
                raise DatasetError(f"record {r.id}: mask shape {r.foreground_mask.shape} != image {r.image.shape[1:]}")
            if r.id in seen:
                raise DatasetError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_attributes(self):
        return len(self.attribute_names)

    @property
    def group_counts(self):
        return Counter((r.label, r.attribute, r.split) for r in self.records)

    @property
    def image_shape(self):
        if not self.records:
            return None
        return self.records[0].image.shape

    def split(self, name):
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def by_id(self):
        return {r.id: r for r in self.records}


@dataclass
class SpuriousSpec:
    """Recipe for :func:`generate_synthetic`.

    ``split_sizes`` are totals per split.  In the train split each class gets
    ``train // n_classes`` samples of which ``round(rho * n)`` carry the
    class's majority attribute; val and test are balanced over all
    ``n_classes * n_attributes`` groups.
    """

    n_classes: int = 2
    n_attributes: int = 2
    correlation_ratio: float = 0.95
    split_sizes: dict = field(default_factory=lambda: {"train": 2000, "val": 400, "test": 800})
    image_size: int = 16
    spurious_mode: str = "background_color"
    seed: int = 0
    noise: float = 0.6
    contrast: float = 0.3

    def validate(self):
        if not (isinstance(self.correlation_ratio, (int, float)) and 0.0 <= self.correlation_ratio <= 1.0):
            raise DatasetError(f"correlation_ratio must lie in [0, 1], got {self.correlation_ratio}")
        if not 2 <= self.n_classes <= len(PATTERN_NAMES):
            raise DatasetError(f"n_classes must be in [2, {len(PATTERN_NAMES)}], got {self.n_classes}")
        if self.n_attributes < 2:
            raise DatasetError(f"n_attributes must be >= 2, got {self.n_attributes}")
        if self.image_size < 16:
            raise DatasetError(f"image_size must be >= 16, got {self.image_size}")
        if self.spurious_mode not in SPURIOUS_MODES:
            raise DatasetError(f"spurious_mode must be one of {SPURIOUS_MODES}, got {self.spurious_mode!r}")
        if set(self.split_sizes) != set(SPLITS):
            raise DatasetError(f"split_sizes needs exactly the keys {SPLITS}")
        if self.split_sizes["train"] < self.n_classes:
            raise DatasetError("train split smaller than the number of classes")
        n_groups = self.n_classes * self.n_attributes
        for s in ("val", "test"):
            if self.split_sizes[s] < n_groups:
                raise DatasetError(
                    f"{s} size {self.split_sizes[s]} leaves some of the {n_groups} groups empty"
                )
        if self.noise < 0:
            raise DatasetError("noise must be nonnegative")
        if not 0.0 < self.contrast <= 1.0:
            raise DatasetError(f"contrast must lie in (0, 1], got {self.contrast}")

    @classmethod
    def from_mapping(cls, kv):
        """Build from flat string key/values (the ``key=value`` spec file)."""
        kw = {}
        sizes = {"train": 2000, "val": 400, "test": 800}
        for key, value in kv.items():
            if key in ("n_classes", "n_attributes", "image_size", "seed"):
                kw[key] = int(value)
            elif key in ("correlation_ratio", "noise", "contrast"):
                kw[key] = float(value)
            elif key == "spurious_mode":
                kw[key] = value
            elif key in ("train_size", "val_size", "test_size"):
                sizes[key[: -len("_size")]] = int(value)
            else:
                raise DatasetError(f"unknown spec key {key!r}")
        return cls(split_sizes=sizes, **kw)


def majority_attribute(label, n_attributes):
    return label % n_attributes


def _foreground_region(size, rng):
    """Randomly sized and placed rectangle, at least one pixel from the border."""
    h = int(rng.integers(size // 2, (3 * size) // 4 + 1))
    w = int(rng.integers(size // 2, (3 * size) // 4 + 1))
    top = int(rng.integers(1, size - h))
    left = int(rng.integers(1, size - w))
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + h, left : left + w] = True
    return mask


def _pattern(label, size, phase):
    """Two-tone grating whose orientation/layout identifies the class."""
    yy, xx = np.mgrid[0:size, 0:size]
    name = PATTERN_NAMES[label]
    if name == "horizontal":
        return (yy + phase) % 2 == 0
    if name == "vertical":
        return (xx + phase) % 2 == 0
    if name == "diagonal":
        return (yy + xx + phase) % 4 < 2
    if name == "antidiagonal":
        return (yy - xx + phase) % 4 < 2
    if name == "checker":
        return ((yy // 2) + (xx // 2) + phase) % 2 == 0
    return ((yy + phase) % 3 == 0) & ((xx + phase) % 3 == 0)  # dots


def _render(label, attribute, spec, rng):
    size = spec.image_size
    mask = _foreground_region(size, rng)
    phase = int(rng.integers(0, 2))
    color = PALETTE[attribute % len(PALETTE)]
    bg = np.broadcast_to(NEUTRAL_BACKGROUND, (size, size, 3)).copy()
    light = NEUTRAL_FOREGROUND
    if spec.spurious_mode == "background_color":
        bg[:] = color
    elif spec.spurious_mode == "corner_patch":
        p = max(3, size // 5)
        corners = [(0, 0), (0, size - p), (size - p, 0), (size - p, size - p)]
        r0, c0 = corners[attribute % 4]
        patch = np.zeros((size, size), dtype=bool)
        patch[r0 : r0 + p, c0 : c0 + p] = True
        # the patch may only occupy background pixels
        mask &= ~patch
        bg[patch] = color
    else:  # foreground_tint
        light = 0.5 * NEUTRAL_FOREGROUND + 0.5 * color
    # contrast < 1 pulls the light stripes toward the neutral grey
    light = NEUTRAL_BACKGROUND + spec.contrast * (light - NEUTRAL_BACKGROUND)
    fg = np.where(_pattern(label, size, phase)[..., None], light, DARK_STRIPE)
    img = np.where(mask[..., None], fg, bg)
    img = img + spec.noise * rng.standard_normal(img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    # quantize so the 8-bit on-disk form round-trips exactly
    img = np.round(img * 255.0) / 255.0
    return img.transpose(2, 0, 1).astype(np.float32), mask


def _balanced_counts(total, n_groups):
    base, extra = divmod(total, n_groups)
    return [base + (1 if i < extra else 0) for i in range(n_groups)]


def generate_synthetic(spec):
    """Generate a :class:`GroupedDataset` from a :class:`SpuriousSpec`.

    Deterministic in ``spec.seed``: each record draws from its own
    ``SeedSequence`` child, so the result does not depend on generation order.
    """
    spec.validate()
    n_y, n_z = spec.n_classes, spec.n_attributes
    plan = []  # (split, label, attribute)

    per_class = _balanced_counts(spec.split_sizes["train"], n_y)
    assign_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919]))
    for y in range(n_y):
        n = per_class[y]
        n_major = int(round(spec.correlation_ratio * n))
        maj = majority_attribute(y, n_z)
        others = [a for a in range(n_z) if a != maj]
        minority = assign_rng.choice(others, size=n - n_major) if n > n_major else []
        plan += [("train", y, maj)] * n_major
        plan += [("train", y, int(a)) for a in minority]

    groups = [(y, a) for y in range(n_y) for a in range(n_z)]
    for split in ("val", "test"):
        for (y, a), c in zip(groups, _balanced_counts(spec.split_sizes[split], len(groups))):
            plan += [(split, y, a)] * c

    records = []
    counters = Counter()
    root = np.random.SeedSequence(spec.seed)
    children = root.spawn(len(plan))
    for (split, y, a), ss in zip(plan, children):
        rng = np.random.default_rng(ss)
        image, mask = _render(y, a, spec, rng)
        idx = counters[split]
        counters[split] += 1
        records.append(
            SampleRecord(
                id=f"{split}{idx:06d}", image=image, label=y, attribute=a, split=split, foreground_mask=mask
            )
        )
    class_names = [PATTERN_NAMES[i] for i in range(n_y)]
    if spec.spurious_mode == "corner_patch":
        attribute_names = [f"corner{i % 4}_{i}" for i in range(n_z)]
    else:
        attribute_names = [f"color{i}" for i in range(n_z)]
    return GroupedDataset(records, class_names, attribute_names)


def group_table(ds):
    """Counts per ``(split, label, attribute)`` ordered by split, label, attribute."""
    order = {s: i for i, s in enumerate(SPLITS)}
    counts = ds.group_counts
    keys = sorted(counts, key=lambda k: (order[k[2]], k[0], k[1]))
    return [(split, y, z, counts[(y, z, split)]) for (y, z, split) in keys]


def format_group_table(ds):
    lines = ["split,label,attribute,count"]
    for split, y, z, n in group_table(ds):
        lines.append(f"{split},{y},{z},{n}")
    return "\n".join(lines)


def save_dataset(ds, root):
    """Write ``metadata.csv``, ``dataset.json`` and PNG images/masks under ``root``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    rows = []
    for r in ds.records:
        fname = f"images/{r.id}.png"
        arr = np.round(np.clip(r.image, 0, 1).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(os.path.join(root, fname))
        mname = ""
        if r.foreground_mask is not None:
            mname = f"masks/{r.id}.png"
            Image.fromarray(r.foreground_mask.astype(np.uint8) * 255, mode="L").save(os.path.join(root, mname))
        rows.append([r.id, fname, r.label, r.attribute, r.split, mname])
    with open(os.path.join(root, "metadata.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        w.writerows(rows)
    with open(os.path.join(root, "dataset.json"), "w", encoding="utf-8") as f:
        json.dump({"class_names": ds.class_names, "attribute_names": ds.attribute_names}, f, indent=2)
        f.write("\n")


def load_dataset(root):
    meta_path = os.path.join(root, "metadata.csv")
    if not os.path.isfile(meta_path):
        raise DatasetError(f"missing metadata file: {meta_path}")
    names = None
    names_path = os.path.join(root, "dataset.json")
    if os.path.isfile(names_path):
        with open(names_path, encoding="utf-8") as f:
            names = json.load(f)

    with open(meta_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != METADATA_HEADER:
            raise DatasetError(f"metadata header {header} != expected {METADATA_HEADER}")
        raw = list(reader)

    records = []
    for lineno, row in enumerate(raw, start=2):
        if len(row) != len(METADATA_HEADER):
            raise DatasetError(f"metadata line {lineno}: expected {len(METADATA_HEADER)} fields, got {len(row)}")
        rid, fname, label, attr, split, mname = row
        if split not in SPLITS:
            raise DatasetError(f"metadata line {lineno}: unknown split token {split!r}")
        try:
            label, attr = int(label), int(attr)
        except ValueError as e:
            raise DatasetError(f"metadata line {lineno}: non-integer label/attribute") from e
        img_path = os.path.join(root, fname)
        if not os.path.isfile(img_path):
            raise DatasetError(f"missing image file: {fname}")
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        mask = None
        if mname:
            mask_path = os.path.join(root, mname)
            if not os.path.isfile(mask_path):
                raise DatasetError(f"missing mask file: {mname}")
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("L")) > 127
        records.append(SampleRecord(rid, np.ascontiguousarray(image), label, attr, split, mask))

    if names is not None:
        class_names, attribute_names = names["class_names"], names["attribute_names"]
    else:
        n_y = 1 + max((r.label for r in records), default=-1)
        n_z = 1 + max((r.attribute for r in records), default=-1)
        class_names = [f"class{i}" for i in range(n_y)]
        attribute_names = [f"attr{i}" for i in range(n_z)]
    return GroupedDataset(records, class_names, attribute_names)


def realized_correlation(ds, label):
    """Fraction of train samples of ``label`` that carry the majority attribute."""
    rows = [r for r in ds.split("train") if r.label == label]
    if not rows:
        return math.nan
    maj = majority_attribute(label, ds.n_attributes)
    return sum(r.attribute == maj for r in rows) / len(rows)


def stack_split(records):
    """Stack records into ``(images, labels, attributes)`` numpy arrays."""
    images = np.stack([r.image for r in records]).astype(np.float32)
    labels = np.array([r.label for r in records], dtype=np.int64)
    attrs = np.array([r.attribute for r in records], dtype=np.int64)
    return images, labels, attrs
