"""Dataset ingestion, preprocessing and patch sampling.

On disk a dataset is ``root/{train,test}/<class-name>/<id>.png``; class ids
follow the lexicographic order of the class directory names.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")
INPUT_HEIGHT = 32
PATCH_SOURCE_HEIGHT = 40
PATCH_SIDE_RANGE = (25, 40)
PATCH_SIZE = 32
PATCH_STRIDE = 16

SIW10_CLASSES = ("Arabic", "Chinese", "English", "Greek", "Hebrew",
                 "Japanese", "Korean", "Russian", "Thai", "Tibetan")
SIW10_TRAIN_COUNTS = (503, 809, 725, 522, 770, 717, 1064, 532, 1726, 677)
SIW10_TEST_COUNTS = (500,) * 10


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: int
    source: str = ""

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetManifest:
    class_names: list
    counts: dict = field(default_factory=dict)  # split -> per-class counts
    root: str = ""
    skipped: int = 0
    siw10_verified: bool = False

    def total(self, split: str) -> int:
        return sum(self.counts.get(split, ()))


# -- image operations ----------------------------------------------------------

def _to_pil(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.ascontiguousarray(image, dtype=np.float32))


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D float image."""
    if image.shape == (height, width):
        return np.array(image, dtype=np.float32)
    out = _to_pil(image).resize((width, height), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32)


def resize_to_height(image: np.ndarray, target_h: int = INPUT_HEIGHT) -> np.ndarray:
    """Scale to ``target_h`` rows keeping the aspect ratio (width rounded half up)."""
    h, w = image.shape
    if h == 0 or w == 0:
        raise ConfigError("cannot resize an empty image")
    new_w = max(1, math.floor(w * target_h / h + 0.5))
    return resize(image, target_h, new_w)


def pad_to_min_width(image: np.ndarray, min_w: int) -> np.ndarray:
    """Right-pad by repeating the last column until the image is ``min_w`` wide."""
    w = image.shape[1]
    if w >= min_w:
        return image
    return np.pad(image, ((0, 0), (0, min_w - w)), mode="edge")


def preprocess(image: np.ndarray, height: int = INPUT_HEIGHT, min_width: int | None = 26):
    image = resize_to_height(image, height)
    if min_width:
        image = pad_to_min_width(image, min_width)
    return image


def read_image(path) -> np.ndarray:
    """Decode a PNG/PGM file to a float32 grayscale array scaled to [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float32) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return arr


def write_image(path, image: np.ndarray) -> None:
    """Write ``image`` (values in [0, 1]) as an 8-bit grayscale PNG."""
    arr = np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


# -- directory datasets --------------------------------------------------------

def _class_dirs(split_dir: Path) -> list:
    return sorted(p for p in split_dir.iterdir() if p.is_dir())


def _image_files(class_dir: Path) -> list:
    return sorted(p for p in class_dir.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_counts(root) -> dict:
    """Per-split, per-class image file counts without decoding anything."""
    root = Path(root)
    counts = {}
    for split in ("train", "test"):
        split_dir = root / split
        if split_dir.is_dir():
            counts[split] = {d.name: len(_image_files(d)) for d in _class_dirs(split_dir)}
    return counts


def is_siw10(counts: dict) -> bool:
    train, test = counts.get("train"), counts.get("test")
    if not train or not test or len(train) != 10 or list(train) != list(test):
        return False
    return (tuple(train.values()) == SIW10_TRAIN_COUNTS
            and tuple(test.values()) == SIW10_TEST_COUNTS)


def load_dataset(root, split: str, height: int | None = INPUT_HEIGHT,
                 min_width: int | None = 26):
    """Load ``root/<split>`` into samples plus a manifest.

    Images are converted to grayscale, resized to ``height`` rows (skipped
    when ``height`` is None) and right-padded to ``min_width``.  Files that
    cannot be decoded are skipped and counted in ``manifest.skipped``.
    """
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise ConfigError(f"dataset split directory {split_dir} does not exist")
    class_dirs = _class_dirs(split_dir)
    if not class_dirs:
        raise ConfigError(f"no class directories under {split_dir}")
    samples, skipped = [], 0
    for label, class_dir in enumerate(class_dirs):
        files = _image_files(class_dir)
        if not files:
            raise ConfigError(f"class directory {class_dir.name!r} in {split_dir} has no images")
        for path in files:
            try:
                image = read_image(path)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            if height:
                image = resize_to_height(image, height)
            if min_width:
                image = pad_to_min_width(image, min_width)
            samples.append(Sample(image, label, str(path.relative_to(root))))
    counts = {s: list(c.values()) for s, c in scan_counts(root).items()}
    manifest = DatasetManifest(
        class_names=[d.name for d in class_dirs], counts=counts, root=str(root),
        skipped=skipped, siw10_verified=is_siw10(scan_counts(root)))
    if skipped:
        log.warning("%d unreadable images skipped in %s", skipped, split_dir)
    return samples, manifest


def save_dataset(samples, class_names, root, split: str) -> None:
    """Write samples in the directory layout understood by :func:`load_dataset`."""
    split_dir = Path(root) / split
    for name in class_names:
        (split_dir / name).mkdir(parents=True, exist_ok=True)
    per_class = {}
    for s in samples:
        idx = per_class.get(s.label, 0)
        per_class[s.label] = idx + 1
        write_image(split_dir / class_names[s.label] / f"{idx:06d}.png", s.image)


def stratified_split(samples, fraction: float = 0.1, seed: int = 0):
    """Hold out ``fraction`` of each class (at least one sample when a class
    has two or more).  Returns ``(train, held_out)``, both in input order."""
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    held = set()
    for label in sorted(by_class):
        idx = by_class[label]
        n_held = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_held = min(max(n_held, 1), len(idx) - 1)
        else:
            n_held = 0
        held.update(rng.permutation(idx)[:n_held].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    val = [s for i, s in enumerate(samples) if i in held]
    return train, val


# -- patch sampling for the patch-classifier baseline ---------------------------

def n_patches(width: int, stride: int = PATCH_STRIDE) -> int:
    return max(1, width // stride)


def sample_patches(image: np.ndarray, rng: np.random.Generator,
                   count: int | None = None) -> list:
    """Random square crops rescaled to 32x32.

    The image is first brought to height 40.  Each crop has a side drawn
    uniformly from [25, 40] and a uniformly random position.  Images narrower
    than the drawn side are edge-padded on both sides and cropped centrally.
    """
    if image.shape[0] != PATCH_SOURCE_HEIGHT:
        image = resize_to_height(image, PATCH_SOURCE_HEIGHT)
    h, w = image.shape
    lo, hi = PATCH_SIDE_RANGE
    patches = []
    for _ in range(count if count is not None else n_patches(w)):
        side = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, h - side + 1))
        if w < side:
            extra = side - w
            padded = np.pad(image, ((0, 0), (extra // 2, extra - extra // 2)), mode="edge")
            crop = padded[top:top + side, :]
        else:
            left = int(rng.integers(0, w - side + 1))
            crop = image[top:top + side, left:left + side]
        patches.append(resize(crop, PATCH_SIZE, PATCH_SIZE))
    return patches
