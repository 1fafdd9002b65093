"""Patch-classifier baseline.

A fixed 32x32-input network with the same convolution chain as MSPN, whose
conv4 output (1x1 spatially) is flattened straight into the fully connected
head.  A whole text line is classified by averaging the softmax rows of
randomly sampled patches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import optim
from .data import PATCH_SIZE, Sample, sample_patches, stratified_split
from .errors import ConfigError, ContractError
from .graph import Network, NodeSpec, _conv_trunk, _fc_head, trunk_heights
from .layers import Flatten

EVAL_SEED = 20150601


@dataclass(frozen=True)
class PatchNetConfig:
    channels: tuple = (96, 256, 384, 512)
    fc: tuple = (1024, 1024)
    patch_size: int = PATCH_SIZE
    n_classes: int = 10
    input_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "fc", tuple(int(f) for f in self.fc))
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"need four positive conv channel counts, got {self.channels}")
        if len(self.fc) != 2 or min(self.fc) < 1:
            raise ConfigError(f"need two positive fc widths, got {self.fc}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if min(trunk_heights(self.patch_size)) < 1:
            raise ConfigError(f"patch size {self.patch_size} collapses in the conv chain")

    @property
    def input_height(self) -> int:
        return self.patch_size

    @property
    def min_width(self) -> int:
        return self.patch_size

    @property
    def flat_dim(self) -> int:
        side = trunk_heights(self.patch_size)[-1]
        return self.channels[-1] * side * side

    def check_width(self, width: int):
        if width != self.patch_size:
            raise ContractError(
                f"patch network accepts exactly {self.patch_size}x{self.patch_size} inputs, "
                f"got width {width}")


def build_patchnet(cfg: PatchNetConfig | None = None, seed=0, dtype=np.float32,
                   class_names=None) -> Network:
    cfg = cfg or PatchNetConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nodes, layers, prev = _conv_trunk(cfg.channels, rng, dtype, cfg.input_norm)
    layers["flatten"] = Flatten()
    nodes.append(NodeSpec("flatten", "flatten", (prev,)))
    _fc_head(nodes, layers, "flatten", cfg.flat_dim, cfg.fc, cfg.n_classes, rng, dtype)
    return Network(nodes, layers, cfg, kind="patchnet", class_names=class_names, dtype=dtype)


@dataclass
class PatchPrediction:
    """One softmax row per patch of a single image."""

    probs: np.ndarray  # (n_patches, n_classes)

    def __len__(self):
        return len(self.probs)


def predict_patches(net: Network, patches) -> PatchPrediction:
    if len(patches) == 0:
        return PatchPrediction(np.zeros((0, net.config.n_classes)))
    for p in patches:
        if np.shape(p) != (net.config.patch_size, net.config.patch_size):
            raise ContractError(
                f"patches must be {net.config.patch_size}x{net.config.patch_size}, got {np.shape(p)}")
    return PatchPrediction(net.forward(np.stack(patches)).probs)


def average_probs(pred: PatchPrediction):
    """Mean of the patch rows and the arg-max class (lowest index on ties)."""
    if len(pred) == 0:
        raise ContractError("cannot average an empty patch prediction")
    score = pred.probs.mean(axis=0)
    return score, int(np.argmax(score))


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_patch_samples(samples, seed: int = 0) -> list:
    """Sample patches from every image; each patch keeps its parent's label."""
    out = []
    for i, s in enumerate(samples):
        for j, patch in enumerate(sample_patches(s.image, image_rng(seed, i))):
            out.append(Sample(patch, s.label, f"{s.source}#{j}"))
    return out


def baseline_train(train_samples, cfg: optim.TrainConfig = optim.TrainConfig(),
                   net_cfg: PatchNetConfig | None = None, class_names=None,
                   val_fraction: float = 0.1, dtype=np.float32):
    """Train a patch network on patches drawn from ``train_samples``.

    The validation split is taken over whole images before sampling, so no
    image contributes patches to both sides.  Returns ``(net, history)``.
    """
    if not train_samples:
        raise ConfigError("training set is empty")
    net_cfg = net_cfg or PatchNetConfig()
    images_train, images_val = stratified_split(train_samples, val_fraction, cfg.seed)
    patches_train = make_patch_samples(images_train, seed=cfg.seed)
    patches_val = make_patch_samples(images_val, seed=cfg.seed + 1)
    net = build_patchnet(net_cfg, seed=cfg.seed, dtype=dtype, class_names=class_names)
    return optim.train(net, patches_train, patches_val, cfg)


class PatchClassifier:
    """Whole-image classifier: average patch probabilities per image.

    Patch positions for image ``i`` come from a generator seeded with
    ``(eval_seed, i)``, so predictions are reproducible and independent of
    batching.
    """

    def __init__(self, net: Network, eval_seed: int = EVAL_SEED, chunk: int = 256):
        self.net = net
        self.eval_seed = eval_seed
        self.chunk = chunk

    @property
    def class_names(self):
        return self.net.class_names

    def predict_proba(self, images) -> np.ndarray:
        patches, owner = [], []
        for i, image in enumerate(images):
            ps = sample_patches(image, image_rng(self.eval_seed, i))
            patches += ps
            owner += [i] * len(ps)
        rows = np.concatenate([
            predict_patches(self.net, patches[k:k + self.chunk]).probs
            for k in range(0, len(patches), self.chunk)])
        owner = np.array(owner)
        return np.stack([average_probs(PatchPrediction(rows[owner == i]))[0]
                         for i in range(len(images))])

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=1)
