"""Datasets, manifests, synthetic data, augmentation, and CIL scenario building."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import read_pgm, write_pgm
from .seeding import derive_rng

CROP_SIZE = 32
NET_INPUT_SIZE = 70


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # 2-D float64, values in [0,1]
    label: str
    split: str  # "train" | "test"

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"image must be 2-D and non-empty, got shape {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0 or px.max() > 1:
            raise DataError("pixel values must be finite and in [0,1]")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train|test, got {self.split!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Dataset:
    name: str
    classes: list  # ordered class identifiers
    samples: list  # of LabeledImage

    def __post_init__(self):
        known = set(self.classes)
        seen = {(c, s): 0 for c in self.classes for s in ("train", "test")}
        for im in self.samples:
            if im.label not in known:
                raise DataError(f"sample label {im.label!r} not in dataset classes")
            seen[(im.label, im.split)] += 1
        missing = [k for k, v in seen.items() if v == 0]
        if missing:
            raise DataError(f"classes missing samples for (class, split): {missing}")

    def by_class(self, split: str) -> dict:
        out = {c: [] for c in self.classes}
        for im in self.samples:
            if im.split == split:
                out[im.label].append(im)
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    schedule: list  # per-task class counts
    class_order: list  # permutation of class identifiers
    portion: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(int(k) < 1 for k in self.schedule):
            raise DataError("every schedule entry must be >= 1")
        if sum(self.schedule) != len(self.class_order):
            raise DataError(
                f"schedule sums to {sum(self.schedule)} but class_order has "
                f"{len(self.class_order)} classes"
            )
        if len(set(self.class_order)) != len(self.class_order):
            raise DataError("class_order contains duplicates")
        if not (0 < self.portion <= 1):
            raise DataError(f"portion must be in (0,1], got {self.portion}")


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple  # label space of this task
    train: tuple  # of LabeledImage, labels within self.classes
    test: tuple


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple  # of Task

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def seen_classes(self, t: int) -> list:
        out = []
        for task in self.tasks[: t + 1]:
            out.extend(task.classes)
        return out

    def eval_set(self, t: int) -> list:
        """Union of test samples over all classes seen up to task t."""
        out = []
        for task in self.tasks[: t + 1]:
            out.extend(task.test)
        return out


# ---------------------------------------------------------------------------
# manifest I/O

def load_dataset(manifest_path) -> Dataset:
    """Load a dataset from a CSV manifest (`path,label,split`) + sibling JSON header."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    header_path = manifest_path.with_suffix(".json")
    if not header_path.exists():
        raise DataError(f"manifest header not found: {header_path}")
    try:
        header = json.loads(header_path.read_text())
        name = header["name"]
        classes = list(header["classes"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest header {header_path}: {exc}") from exc
    expect_size = header.get("image_size")  # optional [height, width]

    samples = []
    with open(manifest_path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows or rows[0] != ["path", "label", "split"]:
        raise DataError(f"{manifest_path}: first row must be header 'path,label,split'")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{manifest_path}:{lineno}: expected 3 fields, got {len(row)}")
        rel, label, split = row
        img_path = manifest_path.parent / rel
        if not img_path.exists():
            raise DataError(f"{manifest_path}:{lineno}: image not found: {img_path}")
        pixels = read_pgm(img_path)
        if expect_size is not None and list(pixels.shape) != list(expect_size):
            raise DataError(
                f"{img_path}: image is {pixels.shape[0]}x{pixels.shape[1]}, "
                f"manifest declares {expect_size[0]}x{expect_size[1]}"
            )
        samples.append(LabeledImage(pixels=pixels, label=label, split=split))
    return Dataset(name=name, classes=classes, samples=samples)


def save_dataset(dataset: Dataset, out_dir, maxval: int = 255) -> Path:
    """Write PGM images plus manifest.csv / manifest.json; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    counters = {}
    for im in dataset.samples:
        k = (im.label, im.split)
        counters[k] = counters.get(k, 0) + 1
        rel = f"{im.label}_{im.split}_{counters[k]:04d}.pgm"
        write_pgm(out_dir / rel, im.pixels, maxval=maxval)
        rows.append([rel, im.label, im.split])
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    (out_dir / "manifest.json").write_text(
        json.dumps({"name": dataset.name, "classes": dataset.classes}, indent=2) + "\n"
    )
    return manifest


# ---------------------------------------------------------------------------
# synthetic data

def _lowrank_clean(rng: np.random.Generator, size: int) -> np.ndarray:
    """Rank-2 smooth image in [0,1]; the class template before any noise."""
    t = np.linspace(0, 1, size)
    freqs = rng.uniform(1.0, 4.0, size=4)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    u1 = np.sin(2 * np.pi * freqs[0] * t + phases[0])
    v1 = np.cos(2 * np.pi * freqs[1] * t + phases[1])
    u2 = np.sin(2 * np.pi * freqs[2] * t + phases[2])
    v2 = np.cos(2 * np.pi * freqs[3] * t + phases[3])
    img = np.outer(u1, v1) + 0.5 * np.outer(u2, v2)
    img = (img - img.min()) / (img.max() - img.min())
    return img


def synth_dataset(kind: str, num_classes: int, per_class_train: int,
                  per_class_test: int, image_size: int, seed: int) -> Dataset:
    """Deterministic synthetic dataset: `blobs` (Gaussian clusters rendered as
    images) or `lowrank_speckle` (rank-2 class templates under multiplicative
    speckle plus sparse spikes)."""
    if kind not in ("blobs", "lowrank_speckle"):
        raise DataError(f"unknown synthetic kind {kind!r}")
    if num_classes < 2:
        raise DataError("num_classes must be >= 2")
    if per_class_train < 1 or per_class_test < 1 or image_size < 1:
        raise DataError("per-class counts and image_size must be >= 1")

    rng = derive_rng(seed, "synth")
    classes = [f"c{i:02d}" for i in range(num_classes)]
    samples = []
    d = image_size * image_size
    for ci, label in enumerate(classes):
        if kind == "blobs":
            mean = rng.normal(0.0, 1.0, size=d)
        else:
            clean = _lowrank_clean(rng, image_size)
        for split, count in (("train", per_class_train), ("test", per_class_test)):
            for _ in range(count):
                if kind == "blobs":
                    vec = mean + 0.1 * rng.normal(size=d)
                    px = np.clip(0.5 + 0.15 * vec, 0.0, 1.0).reshape(image_size, image_size)
                else:
                    # unit-mean gamma speckle, then 5% uniform spikes
                    speckle = rng.gamma(shape=4.0, scale=0.25, size=(image_size, image_size))
                    px = clean * speckle
                    mask = rng.random((image_size, image_size)) < 0.05
                    px = np.where(mask, rng.random((image_size, image_size)), px)
                    px = np.clip(px, 0.0, 1.0)
                samples.append(LabeledImage(pixels=px, label=label, split=split))
    return Dataset(name=f"synth-{kind}", classes=classes, samples=samples)


# ---------------------------------------------------------------------------
# scenario construction

def make_scenario(datasets, spec: ScenarioSpec) -> TaskSequence:
    """Partition classes into tasks per the schedule, subsampling train data
    per class to `spec.portion` (ceil, min 1). Test sets are never subsampled."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    train_pool, test_pool = {}, {}
    for ds in datasets:
        for c in ds.classes:
            if c in train_pool:
                raise DataError(f"class {c!r} appears in more than one dataset")
        tr, te = ds.by_class("train"), ds.by_class("test")
        train_pool.update(tr)
        test_pool.update(te)
    unknown = [c for c in spec.class_order if c not in train_pool]
    if unknown:
        raise DataError(f"classes in class_order not found in datasets: {unknown}")

    tasks = []
    cursor = 0
    for t, width in enumerate(spec.schedule):
        task_classes = tuple(spec.class_order[cursor : cursor + width])
        cursor += width
        train, test = [], []
        for c in task_classes:
            pool = train_pool[c]
            keep = max(1, math.ceil(spec.portion * len(pool)))
            order = derive_rng(spec.seed, "scenario", spec.class_order.index(c)).permutation(len(pool))
            train.extend(pool[i] for i in sorted(order[:keep]))
            test.extend(test_pool[c])
        tasks.append(Task(index=t, classes=task_classes, train=tuple(train), test=tuple(test)))
    return TaskSequence(tasks=tuple(tasks))


# ---------------------------------------------------------------------------
# augmentation

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers."""
    in_h, in_w = image.shape

    def coords(n_out, n_in):
        scale = n_in / n_out
        c = (np.arange(n_out) + 0.5) * scale - 0.5
        return np.clip(c, 0, n_in - 1)

    ys, xs = coords(out_h, in_h), coords(out_w, in_w)
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    wy = (ys - y0)[:, None]
    rows = image[y0] * (1 - wy) + image[y1] * wy
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wx = xs - x0
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def augment_array(px: np.ndarray, mode: str, seed: int) -> np.ndarray:
    """Center-crop to 32x32 and bilinear-resize to 70x70; `cnn_train` adds a
    seeded horizontal flip with probability 0.5, `cnn_eval` never flips.
    Works on raw arrays (no [0,1] requirement) so filtered residuals pass
    through unclamped."""
    if mode not in ("cnn_train", "cnn_eval"):
        raise DataError(f"unknown augment mode {mode!r}")
    h, w = px.shape
    if h < CROP_SIZE or w < CROP_SIZE:
        raise DataError(f"image {h}x{w} smaller than {CROP_SIZE}x{CROP_SIZE} crop")
    top, left = (h - CROP_SIZE) // 2, (w - CROP_SIZE) // 2
    px = px[top : top + CROP_SIZE, left : left + CROP_SIZE]
    px = bilinear_resize(px, NET_INPUT_SIZE, NET_INPUT_SIZE)
    if mode == "cnn_train" and derive_rng(seed, "augment").random() < 0.5:
        px = px[:, ::-1]
    return np.ascontiguousarray(px)


def augment(image: LabeledImage, mode: str, seed: int) -> LabeledImage:
    px = np.clip(augment_array(image.pixels, mode, seed), 0.0, 1.0)
    return LabeledImage(pixels=px, label=image.label, split=image.split)
