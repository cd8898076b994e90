"""Synthetic dataset generation, labeled/unlabeled partitioning, augmentation,
and the dataset file format.

Images are single-channel float32 in [0, 1]; masks are uint8 class ids with
255 marking "no label". Each image holds up to three foreground structures
(disk = 1, surrounding ring = 2, offset crescent = 3) over background 0, with
per-class intensities jittered per image and Gaussian pixel noise on top, so
class identity is not decidable from a single pixel value.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, GenerationError
from .seeding import (
    STREAM_AUGMENT,
    STREAM_DATA,
    STREAM_SPLIT,
    STREAM_TEST_DATA,
    derive_seed,
    rng_from,
)

SENTINEL = 255
DATA_MAGIC = b"UASEGDAT"
DATA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLIT_FILES = ("labeled_1", "labeled_2", "unlabeled", "test")

# Base gray level per class (background, disk, ring, crescent) and the
# per-image jitter applied to each. Gaps sit at 2.5 sigma of the default
# pixel noise: wide enough that a model past warm-up gets the gross regions
# right, narrow enough that boundaries and the crescent stay contested.
CLASS_INTENSITY = (0.15, 0.40, 0.65, 0.90)
INTENSITY_JITTER = 0.04

_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int
    seed: int
    height: int = 32
    width: int = 32
    num_classes: int = 4
    noise_std: float = 0.1

    def validate(self) -> "SyntheticSpec":
        if self.n_images < 0:
            raise ConfigurationError("n_images must be >= 0")
        if not 2 <= self.num_classes <= 4:
            raise ConfigurationError(
                f"num_classes must be in [2, 4] (background, disk, ring, crescent), got {self.num_classes}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("canvas dims must be >= 1")
        return self


@dataclass(frozen=True)
class SplitSpec:
    label_ratio: float
    split_seed: int

    def validate(self) -> "SplitSpec":
        if not 0 < self.label_ratio <= 1:
            raise ConfigurationError(f"label_ratio must be in (0, 1], got {self.label_ratio}")
        return self


@dataclass
class DatasetBundle:
    labeled_1: list[tuple[np.ndarray, np.ndarray]]
    labeled_2: list[tuple[np.ndarray, np.ndarray]]
    unlabeled: list[np.ndarray]
    test: list[tuple[np.ndarray, np.ndarray]]
    num_classes: int
    seeds: dict[str, int] = field(default_factory=dict)

    def validate(self) -> "DatasetBundle":
        for pairs in (self.labeled_1, self.labeled_2, self.test):
            for _, mask in pairs:
                bad = (mask != SENTINEL) & (mask >= self.num_classes)
                if bad.any():
                    raise ConfigurationError("mask value out of range for num_classes")
        seen = {img.tobytes() for img, _ in self.labeled_1}
        if any(img.tobytes() in seen for img, _ in self.labeled_2):
            raise ConfigurationError("labeled subsets must be disjoint")
        return self


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _try_layout(rng: np.random.Generator, spec: SyntheticSpec, yy, xx) -> np.ndarray | None:
    h, w, k = spec.height, spec.width, spec.num_classes
    mind = min(h, w)
    mask = np.zeros((h, w), dtype=np.uint8)

    r1 = rng.uniform(0.13, 0.18) * mind
    ring_width = rng.uniform(0.08, 0.13) * mind if k >= 3 else 0.0
    r2 = r1 + ring_width
    margin = r2 + 1.0
    if h - margin <= margin or w - margin <= margin:
        raise GenerationError(f"canvas {h}x{w} too small for the shape menu")
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    if k >= 3:
        mask[_disk(yy, xx, cy, cx, r2)] = 2
    mask[_disk(yy, xx, cy, cx, r1)] = 1

    if k >= 4:
        # The crescent must stay resolvable after two 2x poolings: its body
        # keeps a thickness of several pixels, the bite only thins one side.
        r3 = rng.uniform(0.15, 0.21) * mind
        m3 = r3 + 1.0
        if h - m3 <= m3 or w - m3 <= m3:
            raise GenerationError(f"canvas {h}x{w} too small for the shape menu")
        c3y = rng.uniform(m3, h - m3)
        c3x = rng.uniform(m3, w - m3)
        if np.hypot(c3y - cy, c3x - cx) <= r2 + r3 + 0.5:
            return None
        angle = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.55, 0.75) * r3
        r_cut = 0.8 * r3
        cut = _disk(yy, xx, c3y + off * np.sin(angle), c3x + off * np.cos(angle), r_cut)
        crescent = _disk(yy, xx, c3y, c3x, r3) & ~cut
        if crescent.sum() < 3:
            return None
        mask[crescent] = 3

    counts = np.bincount(mask.ravel(), minlength=k)
    if (counts[:k] == 0).any():
        return None
    return mask


def _generate_one(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    h, w, k = spec.height, spec.width, spec.num_classes
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = None
    for _ in range(_PLACEMENT_TRIES):
        mask = _try_layout(rng, spec, yy, xx)
        if mask is not None:
            break
    if mask is None:
        raise GenerationError("could not place non-overlapping shapes with every class present")

    levels = np.array(CLASS_INTENSITY[:k])
    levels = levels + rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER, size=k)
    img = levels[mask].astype(np.float64)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, mask


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seed-deterministic list of (image, mask) pairs; per-image RNG streams,
    so the set is stable under changes to n_images."""
    spec.validate()
    out = []
    for i in range(spec.n_images):
        rng = rng_from(derive_seed(spec.seed, STREAM_DATA, i))
        out.append(_generate_one(rng, spec))
    return out


def apply_label_ratio(full: list, split: SplitSpec) -> tuple[list, list]:
    """Keep masks on a seeded permutation prefix of ceil(l_a * n) items; the
    rest are stripped to bare images."""
    split.validate()
    n = len(full)
    n_labeled = int(np.ceil(split.label_ratio * n))
    perm = rng_from(derive_seed(split.split_seed, STREAM_SPLIT, 0)).permutation(n)
    labeled = [full[i] for i in perm[:n_labeled]]
    unlabeled = [full[i][0] for i in perm[n_labeled:]]
    return labeled, unlabeled


def split_labeled(labeled: list, seed: int) -> tuple[list, list]:
    """Disjoint halves of sizes ceil(m/2) and floor(m/2), seeded shuffle."""
    m = len(labeled)
    perm = rng_from(derive_seed(seed, STREAM_SPLIT, 1)).permutation(m)
    half = (m + 1) // 2
    return [labeled[i] for i in perm[:half]], [labeled[i] for i in perm[half:]]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape
    y = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    x = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    img = img.astype(np.float64)
    top = (1 - wx) * img[np.ix_(y0c, x0c)] + wx * img[np.ix_(y0c, x1c)]
    bot = (1 - wx) * img[np.ix_(y1c, x0c)] + wx * img[np.ix_(y1c, x1c)]
    return ((1 - wy) * top + wy * bot).astype(np.float32)


def _resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = mask.shape
    yi = np.clip(np.floor((np.arange(out_h) + 0.5) * (in_h / out_h)).astype(np.int64), 0, in_h - 1)
    xi = np.clip(np.floor((np.arange(out_w) + 0.5) * (in_w / out_w)).astype(np.int64), 0, in_w - 1)
    return mask[np.ix_(yi, xi)]


def augment(image: np.ndarray, mask, seed: int, *, with_crop: bool = True):
    """Random horizontal flip, k*90-degree rotation, and an 87.5% crop resized
    back (bilinear for the image, nearest for the mask). The same geometric
    transform hits image and mask.

    The crop's bilinear resize blends intensities across region boundaries;
    pass with_crop=False for the exactly mask-preserving flip/rotate subset.
    """
    rng = rng_from(derive_seed(seed, STREAM_AUGMENT))
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"augment expects a single (H, W) image, got shape {img.shape}")
    msk = None if mask is None else np.asarray(mask)
    if rng.random() < 0.5:
        img = img[:, ::-1]
        msk = None if msk is None else msk[:, ::-1]
    k = int(rng.integers(0, 4))
    img = np.rot90(img, k)
    msk = None if msk is None else np.rot90(msk, k)
    if with_crop:
        h, w = img.shape
        ch = max(1, round(0.875 * h))
        cw = max(1, round(0.875 * w))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = _resize_bilinear(img[top:top + ch, left:left + cw], h, w)
        msk = None if msk is None else _resize_nearest(msk[top:top + ch, left:left + cw], h, w)
    img = np.ascontiguousarray(img, dtype=np.float32)
    msk = None if msk is None else np.ascontiguousarray(msk)
    return img, msk


def _write_split(path, images: list[np.ndarray], masks: list[np.ndarray] | None, k: int) -> None:
    n = len(images)
    if n:
        h, w = images[0].shape
    else:
        h = w = 0
    out = bytearray()
    out += DATA_MAGIC
    out += struct.pack("<IIIII", DATA_VERSION, n, h, w, k)
    out += struct.pack("<B", 1 if masks is not None else 0)
    for img in images:
        if img.shape != (h, w):
            raise DimensionError("all images in a split must share one shape")
        out += np.ascontiguousarray(img, dtype="<f4").tobytes()
    if masks is not None:
        for m in masks:
            if m.shape != (h, w):
                raise DimensionError("mask shape differs from image shape")
            out += np.ascontiguousarray(m, dtype=np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def _read_split(path) -> tuple[list[np.ndarray], list[np.ndarray] | None, int]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated while reading {what}", off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    magic = need(len(DATA_MAGIC), "magic")
    if magic != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    version, n, h, w, k = struct.unpack("<IIIII", need(20, "header"))
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", len(DATA_MAGIC))
    has_masks = struct.unpack("<B", need(1, "has_masks flag"))[0]
    if has_masks not in (0, 1):
        raise FormatError(f"{path}: has_masks must be 0 or 1, got {has_masks}", off - 1)
    images = []
    for i in range(n):
        raw = need(4 * h * w, f"image {i}")
        images.append(np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32))
    masks = None
    if has_masks:
        masks = []
        for i in range(n):
            raw = need(h * w, f"mask {i}")
            masks.append(np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy())
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes", off)
    return images, masks, k


def save_dataset(bundle: DatasetBundle, path) -> None:
    """Write the four split files plus a JSON manifest into a directory."""
    bundle.validate()
    os.makedirs(path, exist_ok=True)
    files = {name: f"{name}.dat" for name in SPLIT_FILES}
    k = bundle.num_classes
    _write_split(os.path.join(path, files["labeled_1"]),
                 [p[0] for p in bundle.labeled_1], [p[1] for p in bundle.labeled_1], k)
    _write_split(os.path.join(path, files["labeled_2"]),
                 [p[0] for p in bundle.labeled_2], [p[1] for p in bundle.labeled_2], k)
    _write_split(os.path.join(path, files["unlabeled"]), list(bundle.unlabeled), None, k)
    _write_split(os.path.join(path, files["test"]),
                 [p[0] for p in bundle.test], [p[1] for p in bundle.test], k)
    manifest = {
        "format": "uaseg-dataset",
        "version": DATA_VERSION,
        "num_classes": k,
        "files": files,
        "seeds": {key: int(v) for key, v in bundle.seeds.items()},
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> DatasetBundle:
    man_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(man_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{man_path}: manifest not found")
    except json.JSONDecodeError as e:
        raise FormatError(f"{man_path}: bad manifest JSON: {e}")
    if manifest.get("format") != "uaseg-dataset":
        raise FormatError(f"{man_path}: not a dataset manifest")
    files = manifest["files"]
    parts = {}
    for name in SPLIT_FILES:
        images, masks, k = _read_split(os.path.join(path, files[name]))
        if k != manifest["num_classes"]:
            raise FormatError(f"{files[name]}: class count {k} disagrees with manifest")
        parts[name] = (images, masks)
    def pairs(name):
        images, masks = parts[name]
        if masks is None:
            raise FormatError(f"{files[name]}: split must carry masks")
        return list(zip(images, masks))
    bundle = DatasetBundle(
        labeled_1=pairs("labeled_1"),
        labeled_2=pairs("labeled_2"),
        unlabeled=parts["unlabeled"][0],
        test=pairs("test"),
        num_classes=manifest["num_classes"],
        seeds={key: int(v) for key, v in manifest.get("seeds", {}).items()},
    )
    return bundle.validate()


def make_bundle(spec: SyntheticSpec, split: SplitSpec, n_test: int) -> DatasetBundle:
    """Generate train + test data and partition the training set."""
    train = generate_synthetic(spec)
    test_spec = SyntheticSpec(
        n_images=n_test,
        seed=derive_seed(spec.seed, STREAM_TEST_DATA),
        height=spec.height, width=spec.width,
        num_classes=spec.num_classes, noise_std=spec.noise_std,
    )
    test = generate_synthetic(test_spec)
    labeled, unlabeled = apply_label_ratio(train, split)
    l1, l2 = split_labeled(labeled, split.split_seed)
    bundle = DatasetBundle(
        labeled_1=l1, labeled_2=l2, unlabeled=unlabeled, test=test,
        num_classes=spec.num_classes,
        seeds={"data_seed": int(spec.seed), "split_seed": int(split.split_seed)},
    )
    return bundle.validate()
