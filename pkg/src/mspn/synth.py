"""Synthetic text-line corpus with controllable alphabet overlap.

Every class owns a random alphabet of 8x8 binary glyphs; a fixed pool of
glyphs is shared by all classes, so lines built only from shared glyphs are
ambiguous, as with real scripts that borrow characters from each other.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Sample, save_dataset
from .errors import ConfigError

GLYPH = 8
CANVAS_HEIGHT = 32
SPEC_FILE = "synth_spec.json"


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    alphabet_size: int = 10
    shared_frac: float = 0.3
    min_len: int = 3
    max_len: int = 12
    noise: float = 0.05
    seed: int = 0
    train_per_class: int = 200
    test_per_class: int = 50
    scale_x: int = 2
    scale_y: int = 3
    max_gap: int = 2
    margin: int = 4

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if not 0 <= self.shared_frac < 1:
            raise ConfigError(f"shared_frac must lie in [0, 1), got {self.shared_frac}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad line length range [{self.min_len}, {self.max_len}]")
        if self.alphabet_size <= self.n_shared:
            raise ConfigError(
                f"alphabet of {self.alphabet_size} glyphs is not larger than the "
                f"shared pool of {self.n_shared}")
        if GLYPH * self.scale_y > CANVAS_HEIGHT - 2:
            raise ConfigError("glyphs do not fit the 32-pixel canvas")
        if self.train_per_class < 0 or self.test_per_class < 0 or self.noise < 0:
            raise ConfigError("sample counts and noise must be non-negative")

    @property
    def n_shared(self) -> int:
        return int(round(self.shared_frac * self.alphabet_size))

    @property
    def glyph_width(self) -> int:
        return GLYPH * self.scale_x

    @property
    def pitch(self) -> int:
        return self.glyph_width + self.max_gap

    def width_for(self, n_glyphs: int) -> int:
        return 2 * self.margin + n_glyphs * self.pitch

    @property
    def width_bounds(self) -> tuple:
        return self.width_for(self.min_len), self.width_for(self.max_len)

    @property
    def class_names(self) -> list:
        return [f"script{i:02d}" for i in range(self.n_classes)]


def _random_glyphs(rng, count: int) -> np.ndarray:
    glyphs, seen = [], set()
    while len(glyphs) < count:
        g = rng.random((GLYPH, GLYPH)) < 0.45
        if not 16 <= g.sum() <= 40:
            continue
        key = g.tobytes()
        if key not in seen:
            seen.add(key)
            glyphs.append(g)
    return np.stack(glyphs)


def build_alphabets(spec: SynthSpec, rng) -> tuple:
    """Return ``(glyphs, alphabets)``: the glyph bank and, per class, the
    indices of the glyphs it may draw.  Indices below ``n_shared`` are the
    shared pool."""
    n_own = spec.alphabet_size - spec.n_shared
    glyphs = _random_glyphs(rng, spec.n_shared + spec.n_classes * n_own)
    shared = list(range(spec.n_shared))
    alphabets = []
    for c in range(spec.n_classes):
        start = spec.n_shared + c * n_own
        alphabets.append(shared + list(range(start, start + n_own)))
    return glyphs, alphabets


def render_line(spec: SynthSpec, glyphs, alphabet, rng) -> np.ndarray:
    """Render one line as an 8-bit image (height 32) scaled to [0, 1]."""
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    width = spec.width_for(n)
    ink_h = GLYPH * spec.scale_y
    base_top = (CANVAS_HEIGHT - ink_h) // 2
    mask = np.zeros((CANVAS_HEIGHT, width), dtype=bool)
    for k, gi in enumerate(rng.choice(alphabet, size=n)):
        big = np.kron(glyphs[gi], np.ones((spec.scale_y, spec.scale_x), dtype=bool))
        left = spec.margin + k * spec.pitch + int(rng.integers(0, spec.max_gap + 1))
        top = base_top + int(rng.integers(-1, 2))
        mask[top:top + ink_h, left:left + spec.glyph_width] |= big
    background = rng.uniform(0.05, 0.45)
    contrast = rng.uniform(0.35, 0.55)
    image = background + contrast * mask + rng.normal(0.0, spec.noise, mask.shape)
    pixels = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return pixels.astype(np.float32) / 255.0


def synth_generate(spec: SynthSpec = SynthSpec()):
    """Generate ``(train, test, record)`` deterministically from ``spec.seed``.

    Train and test draw from independent child generators of the seed, so
    the two splits never share a rendered sample.
    """
    spec.validate()
    glyph_rng, train_rng, test_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    glyphs, alphabets = build_alphabets(spec, glyph_rng)

    def split(rng, per_class, tag):
        return [Sample(render_line(spec, glyphs, alphabets[c], rng), c, f"{tag}-{c}-{i}")
                for c in range(spec.n_classes) for i in range(per_class)]

    train = split(train_rng, spec.train_per_class, "train")
    test = split(test_rng, spec.test_per_class, "test")
    record = {
        "spec": asdict(spec),
        "class_names": spec.class_names,
        "shared_glyphs": list(range(spec.n_shared)),
        "alphabets": alphabets,
        "glyphs": [["".join("1" if b else "0" for b in row) for row in g] for g in glyphs],
    }
    return train, test, record


def write_corpus(out_dir, spec: SynthSpec = SynthSpec()) -> dict:
    """Generate a corpus and write it in the standard directory layout."""
    train, test, record = synth_generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, spec.class_names, out, "train")
    save_dataset(test, spec.class_names, out, "test")
    (out / SPEC_FILE).write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")
    return record
