"""Masked image datasets: a seeded synthetic benchmark, an on-disk loader, stratified folds.

Synthetic images carry one class-determined shape over clutter; the shape
is tinted around a class hue. With probability ``spurious_correlation`` a
saturated corner tag in the label's colour is stamped onto the training
image. Every sample also keeps a test rendering in which the tag (when
present) takes the colour of a random class, so the shortcut never pays
off at evaluation time.
"""
from __future__ import annotations

import colorsys
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DegenerateMaskError,
    FormatError,
    GenerationError,
    PairingError,
    StratificationError,
)

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)
SHAPES = ("disc", "triangle", "cross", "square", "ring", "diamond")
MASK_TOLERANCE = 32  # {0,255} masks may deviate this much before thresholding at 128


@dataclass
class MaskedSample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    label: int
    sample_id: str
    test_image: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise FormatError(f"{self.sample_id}: image {self.image.shape} and mask {self.mask.shape} differ in size")
        check_mask(self.mask, self.sample_id)

    @property
    def eval_image(self):
        return self.image if self.test_image is None else self.test_image


@dataclass
class SyntheticSpec:
    image_size: tuple[int, int] = (64, 64)
    n_classes: int = 3
    samples_per_class: int = 60
    clutter_density: float = 0.3
    spurious_correlation: float = 1.0
    seed: int = 7
    rotate: bool = False
    # std of the per-sample hue around the class hue; None renders class-independent colours
    hue_jitter: float | None = 0.15

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("clutter_density", "spurious_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 2 <= self.n_classes <= len(SHAPES):
            raise ConfigError(f"n_classes must be between 2 and {len(SHAPES)}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")


class MaskedDataset:
    def __init__(self, samples, n_classes=None, name="dataset", class_names=None):
        self.samples = sorted(samples, key=lambda s: s.sample_id)
        self.name = name
        self.n_classes = n_classes if n_classes is not None else 1 + max(s.label for s in self.samples)
        self.class_names = class_names or [str(c) for c in range(self.n_classes)]
        self._by_id = {s.sample_id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise FormatError("duplicate sample ids")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self._by_id[key]
        return self.samples[key]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.sample_id for s in self.samples]

    @property
    def labels(self):
        return np.array([s.label for s in self.samples])

    @property
    def image_size(self):
        return self.samples[0].mask.shape

    def subset(self, ids):
        return MaskedDataset([self._by_id[i] for i in ids], self.n_classes, self.name, self.class_names)

    def arrays(self, ids=None, split="train"):
        """Stack (images, masks, labels) as numpy arrays; ``split='test'`` uses the test renderings."""
        samples = self.samples if ids is None else [self._by_id[i] for i in ids]
        pick = (lambda s: s.image) if split == "train" else (lambda s: s.eval_image)
        images = np.stack([pick(s) for s in samples]).astype(np.float32)
        masks = np.stack([s.mask for s in samples]).astype(np.float32)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return images, masks, labels


def check_mask(mask, name="mask"):
    n = int(mask.sum())
    if n == 0 or n == mask.size:
        raise DegenerateMaskError(f"{name}: mask is {'empty' if n == 0 else 'full'}")


def normalize_images(images, mean=IMAGE_MEAN, std=IMAGE_STD):
    """Channel-wise standardization of a B x 3 x H x W batch in [0, 1]."""
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (np.asarray(images, dtype=np.float32) - mean) / std


# ---------------------------------------------------------------------------
# synthetic generation


def shape_footprint(kind, size, center, radius, angle):
    """Boolean H x W footprint of a shape; pure geometry, no rendering."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - center[0], xx + 0.5 - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disc":
        return dx**2 + dy**2 <= radius**2
    if kind == "ring":
        r2 = dx**2 + dy**2
        return (r2 <= radius**2) & (r2 >= (0.55 * radius) ** 2)
    if kind == "square":
        return (np.abs(u) <= 0.8 * radius) & (np.abs(v) <= 0.8 * radius)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= radius
    if kind == "cross":
        arm = 0.35 * radius
        return ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | ((np.abs(v) <= arm) & (np.abs(u) <= radius))
    if kind == "triangle":
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            t = angle + 2 * math.pi * k / 3
            # half-plane facing each edge of an equilateral triangle with circumradius `radius`
            inside &= (math.cos(t) * dx + math.sin(t) * dy) <= 0.5 * radius
        return inside
    raise GenerationError(f"unknown shape {kind!r}")


def _corner_slices(corner, size, tag):
    h, w = size
    rows = slice(1, 1 + tag) if corner in (0, 1) else slice(h - 1 - tag, h - 1)
    cols = slice(1, 1 + tag) if corner in (0, 2) else slice(w - 1 - tag, w - 1)
    return rows, cols


def _tag_color(label, n_classes):
    return colorsys.hsv_to_rgb(label / n_classes, 1.0, 1.0)


def _render(rng, spec, label):
    h, w = spec.image_size
    tag = max(2, round(min(h, w) / 8))
    background = rng.uniform(0.05, 0.25, size=3)
    image = np.empty((3, h, w))
    image[:] = background[:, None, None]
    image += rng.normal(0.0, 0.03, size=image.shape)

    cell = max(4, min(h, w) // 8)
    for cy in range(0, h, cell):
        for cx in range(0, w, cell):
            if rng.random() < spec.clutter_density:
                sz = int(rng.integers(1, max(2, cell // 2) + 1))
                y0 = cy + int(rng.integers(0, max(1, cell - sz)))
                x0 = cx + int(rng.integers(0, max(1, cell - sz)))
                image[:, y0 : y0 + sz, x0 : x0 + sz] = rng.uniform(0.2, 0.8, size=3)[:, None, None]

    lo, hi = 0.16 * min(h, w), 0.25 * min(h, w)
    radius = rng.uniform(lo, hi)
    margin = tag + 2 + radius
    if margin >= min(h, w) - margin:
        raise GenerationError(f"image size {spec.image_size} too small for a shape of radius {radius:.1f}")
    center = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))
    angle = rng.uniform(0, 2 * math.pi) if spec.rotate else 0.0
    footprint = shape_footprint(SHAPES[label], (h, w), center, radius, angle)
    if footprint.sum() == 0 or footprint.all():
        raise GenerationError(f"degenerate footprint for class {label} at size {spec.image_size}")
    if spec.hue_jitter is None:
        color = rng.uniform(0.55, 0.95, size=3)
    else:
        hue = (label / spec.n_classes + rng.normal(0.0, spec.hue_jitter)) % 1.0
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 0.8), rng.uniform(0.75, 0.95)))
    image[:, footprint] = color[:, None] + rng.normal(0.0, 0.03, size=(3, int(footprint.sum())))

    has_tag = rng.random() < spec.spurious_correlation
    train_corner, test_corner = int(rng.integers(0, 4)), int(rng.integers(0, 4))
    test_label = int(rng.integers(0, spec.n_classes))
    train = image.copy()
    test = image.copy()
    if has_tag:
        for img, corner, cls in ((train, train_corner, label), (test, test_corner, test_label)):
            rows, cols = _corner_slices(corner, (h, w), tag)
            img[:, rows, cols] = np.array(_tag_color(cls, spec.n_classes))[:, None, None]

    def quantize(x):
        # stored as 8-bit PNG; quantizing here keeps disk round trips exact
        return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)

    meta = {"has_tag": bool(has_tag), "shape": SHAPES[label]}
    if has_tag:
        meta.update(train_corner=train_corner, test_corner=test_corner, test_tag_label=test_label)
    return quantize(train), quantize(test), footprint.astype(np.uint8), meta


def generate_synthetic(spec=None):
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    samples = []
    for label in range(spec.n_classes):
        for i in range(spec.samples_per_class):
            train, test, mask, meta = _render(rng, spec, label)
            samples.append(MaskedSample(train, mask, label, f"c{label}_{i:04d}", test, meta))
    return MaskedDataset(samples, spec.n_classes, name="synthetic", class_names=list(SHAPES[: spec.n_classes]))


# ---------------------------------------------------------------------------
# on-disk layout


def _to_uint8(x):
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def export_directory(dataset, root):
    """Write ``images/``, ``masks/``, ``labels.csv`` (and ``images_test/`` when present)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    has_test = any(s.test_image is not None for s in dataset)
    if has_test:
        (root / "images_test").mkdir(exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stem", "label"])
        for s in dataset:
            Image.fromarray(_to_uint8(s.image.transpose(1, 2, 0))).save(root / "images" / f"{s.sample_id}.png")
            Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(root / "masks" / f"{s.sample_id}.png")
            if has_test:
                Image.fromarray(_to_uint8(s.eval_image.transpose(1, 2, 0))).save(
                    root / "images_test" / f"{s.sample_id}.png"
                )
            writer.writerow([s.sample_id, s.label])
    meta = {"name": dataset.name, "n_classes": dataset.n_classes, "class_names": dataset.class_names,
            "image_size": list(dataset.image_size), "count": len(dataset)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root


def _resize_crop(img, resize, crop, resample):
    if resize is not None and img.size != (resize, resize):
        img = img.resize((resize, resize), resample)
    if crop is not None:
        w, h = img.size
        if crop > min(w, h):
            raise ConfigError(f"crop {crop} exceeds image size {w}x{h}")
        left, top = (w - crop) // 2, (h - crop) // 2
        img = img.crop((left, top, left + crop, top + crop))
    return img


def load_image(path, resize=None, crop=None):
    img = _resize_crop(Image.open(path).convert("RGB"), resize, crop, Image.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_mask(path, resize=None, crop=None):
    img = Image.open(path)
    if img.mode not in ("L", "1", "P", "I", "I;16"):
        raise FormatError(f"{path}: mask must be single-channel, got mode {img.mode}")
    raw = np.asarray(img.convert("L"))
    bad = (raw > MASK_TOLERANCE) & (raw < 255 - MASK_TOLERANCE)
    if bad.any():
        raise FormatError(f"{path}: mask values must be 0 or 255, found {sorted(set(raw[bad].tolist()))[:5]}")
    img = _resize_crop(Image.fromarray(raw, mode="L"), resize, crop, Image.NEAREST)
    return (np.asarray(img) >= 128).astype(np.uint8)


def _stems(directory):
    return {p.stem: p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")}


def _read_labels(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    raw = {r["stem"]: r["label"] for r in rows}
    try:
        labels = {k: int(v) for k, v in raw.items()}
        names = None
    except ValueError:
        names = sorted(set(raw.values()))
        labels = {k: names.index(v) for k, v in raw.items()}
    return labels, names


def load_directory(root, resize=None, crop=None):
    """Load ``root/images``, ``root/masks`` and ``root/labels.csv`` into a dataset.

    Images are resized bilinearly then centre-cropped; masks go through the
    same geometry with nearest-neighbour sampling and are thresholded at 128.
    """
    root = Path(root)
    images, masks = _stems(root / "images"), _stems(root / "masks")
    for stem in sorted(set(images) ^ set(masks)):
        side = "mask" if stem in images else "image"
        raise PairingError(f"{stem}: no matching {side} file")
    labels, names = _read_labels(root / "labels.csv")
    tests = _stems(root / "images_test") if (root / "images_test").is_dir() else {}
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
    samples = []
    for stem in sorted(images):
        if stem not in labels:
            raise PairingError(f"{stem}: missing from labels.csv")
        mask = load_mask(masks[stem], resize, crop)
        try:
            check_mask(mask, stem)
        except DegenerateMaskError as exc:
            raise DegenerateMaskError(f"rejected {stem}: {exc}") from None
        test = load_image(tests[stem], resize, crop) if stem in tests else None
        samples.append(MaskedSample(load_image(images[stem], resize, crop), mask, labels[stem], stem, test))
    n_classes = meta.get("n_classes") or (len(names) if names else None)
    return MaskedDataset(samples, n_classes, name=meta.get("name", root.name),
                         class_names=meta.get("class_names") or names)


def load_pseudo_masks(directory, dataset, resize=None, crop=None):
    """Externally supplied reference masks keyed by sample id (the Prior baseline)."""
    directory = Path(directory)
    if (directory / "masks").is_dir():
        directory = directory / "masks"
    files = _stems(directory)
    out = {}
    for sid in dataset.ids:
        if sid not in files:
            raise PairingError(f"{sid}: no pseudo-mask in {directory}")
        mask = load_mask(files[sid], resize, crop)
        check_mask(mask, f"pseudo-mask {sid}")
        out[sid] = mask
    return out


def box_pseudo_masks(dataset, pad=3):
    """Bounding box of each mask grown by ``pad`` pixels.

    A coarse stand-in for the region proposals of an external prior, used
    when no real pseudo-mask directory is available.
    """
    out = {}
    for s in dataset:
        ys, xs = np.nonzero(s.mask)
        h, w = s.mask.shape
        box = np.zeros_like(s.mask)
        box[max(ys.min() - pad, 0) : min(ys.max() + pad + 1, h), max(xs.min() - pad, 0) : min(xs.max() + pad + 1, w)] = 1
        check_mask(box, f"pseudo-mask {s.sample_id}")
        out[s.sample_id] = box
    return out


def export_masks(masks, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, m in sorted(masks.items()):
        Image.fromarray((np.asarray(m) * 255).astype(np.uint8), mode="L").save(directory / f"{sid}.png")
    return directory


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: dict
    seed: int

    def test_ids(self, fold):
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold):
        return sorted(i for i, f in self.assignments.items() if f != fold)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["k"], d["assignments"], d["seed"])


def make_folds(dataset, k=10, seed=0):
    """Deterministic stratified k-fold partition."""
    if k < 2:
        raise StratificationError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for s in dataset:
        by_class.setdefault(s.label, []).append(s.sample_id)
    assignments = {}
    offset = 0
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < k:
            raise StratificationError(f"class {label} has {len(ids)} samples, fewer than k={k}")
        for i, j in enumerate(rng.permutation(len(ids))):
            assignments[ids[j]] = (offset + i) % k
        offset += len(ids)
    return FoldPlan(k, dict(sorted(assignments.items())), seed)
