"""MSPN network assembly and a small DAG executor.

The executor runs nodes in a fixed topological order.  During the backward
pass a node consumed by several layers receives the sum of their gradients,
which is how the multi-stage taps train the middle convolutions.
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, MinWidthError
from .layers import (
    SSP, Concat, Conv, Flatten, FullyConnected, MaxPool, ReLU, Standardize,
    softmax, softmax_xent_backward, softmax_xent_forward,
)
from .tensor import FeatureMapStack

SSP_STAGES = ("ssp-1", "ssp-2", "ssp-3")
# Each SSP stage reads the post-pooling output of conv2 / conv3 and the
# rectified output of conv4.
SSP_TAPS = {"ssp-1": "pool2", "ssp-2": "pool3", "ssp-3": "relu4"}
# (kernel, pad) per convolution; stride 1 throughout, giving heights
# 32 -> 15 -> 7 -> 3 -> 1 with 2x2 pooling after the first three.
CONV_CHAIN = ((3, 0), (3, 1), (3, 1), (3, 0))
PARAM_ORDER = ("conv1", "conv2", "conv3", "conv4", "fc1", "fc2", "out")

VARIANTS = OrderedDict([
    ("Variant-1", ("ssp-1",)),
    ("Variant-2", ("ssp-2",)),
    ("Variant-3", ("ssp-3",)),
    ("Variant-4", ("ssp-2", "ssp-3")),
    ("Variant-5", ("ssp-1", "ssp-2")),
    ("MSPN", SSP_STAGES),
])
STARRED_VARIANT = "Variant-3"
STARRED_FC2 = 512


@dataclass(frozen=True)
class MSPNConfig:
    channels: tuple = (96, 256, 384, 512)
    fc: tuple = (1024, 1024)
    ssp_mode: str = "max"
    ssp: tuple = SSP_STAGES
    input_height: int = 32
    n_classes: int = 10
    # per-image zero-mean/unit-variance normalization ahead of conv1
    input_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "fc", tuple(int(f) for f in self.fc))
        # keep the canonical ssp-1, ssp-2, ssp-3 order whatever the input order
        object.__setattr__(self, "ssp", tuple(s for s in SSP_STAGES if s in set(self.ssp)))
        self.validate(requested=len(set(self.ssp)))

    def validate(self, requested=None):
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"need four positive conv channel counts, got {self.channels}")
        if len(self.fc) != 2 or min(self.fc) < 1:
            raise ConfigError(f"need two positive fc widths, got {self.fc}")
        if self.ssp_mode not in ("max", "average"):
            raise ConfigError(f"ssp_mode must be 'max' or 'average', got {self.ssp_mode!r}")
        if not self.ssp:
            raise ConfigError("at least one of ssp-1, ssp-2, ssp-3 must be enabled")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        heights = trunk_heights(self.input_height)
        if min(heights) < 1:
            raise ConfigError(
                f"input height {self.input_height} collapses in the conv chain {heights}"
            )

    def stage_heights(self) -> tuple:
        return trunk_heights(self.input_height)

    def ssp_dims(self) -> dict:
        heights = dict(zip(SSP_STAGES, self.stage_heights()[1:]))
        chans = dict(zip(SSP_STAGES, self.channels[1:]))
        return {s: chans[s] * heights[s] for s in self.ssp}

    @property
    def concat_dim(self) -> int:
        return sum(self.ssp_dims().values())

    @property
    def min_width(self) -> int:
        return trunk_min_width()

    def check_width(self, width: int):
        if width < self.min_width:
            raise MinWidthError(width, self.min_width)

    def replace(self, **changes) -> "MSPNConfig":
        fields = dict(self.__dict__)
        fields.update(changes)
        return MSPNConfig(**fields)


def _trunk_sizes(size: int) -> tuple:
    """Spatial extent after each of the four stages along one axis."""
    out = []
    for i, (k, pad) in enumerate(CONV_CHAIN):
        size = size + 2 * pad - k + 1
        if size < 1:
            return tuple(out) + (0,) * (4 - len(out))
        if i < 3:
            size //= 2
        out.append(size)
    return tuple(out)


def trunk_heights(height: int) -> tuple:
    return _trunk_sizes(height)


def trunk_widths(width: int) -> tuple:
    return _trunk_sizes(width)


def trunk_min_width() -> int:
    w = 1
    while min(_trunk_sizes(w)) < 1:
        w += 1
    return w


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kind: str
    inputs: tuple = ()


def _conv_trunk(channels, rng, dtype, input_norm=True):
    nodes = [NodeSpec("input", "input")]
    layers = {}
    prev, in_maps = "input", 1
    if input_norm:
        layers["norm"] = Standardize()
        nodes.append(NodeSpec("norm", "standardize", ("input",)))
        prev = "norm"
    for i, ((k, pad), out_maps) in enumerate(zip(CONV_CHAIN, channels), start=1):
        layers[f"conv{i}"] = Conv.create(rng, in_maps, out_maps, (k, k), (pad, pad), dtype)
        layers[f"relu{i}"] = ReLU()
        nodes += [NodeSpec(f"conv{i}", "conv", (prev,)),
                  NodeSpec(f"relu{i}", "relu", (f"conv{i}",))]
        prev = f"relu{i}"
        if i < 4:
            layers[f"pool{i}"] = MaxPool()
            nodes.append(NodeSpec(f"pool{i}", "maxpool", (prev,)))
            prev = f"pool{i}"
        in_maps = out_maps
    return nodes, layers, prev


def _fc_head(nodes, layers, prev, in_dim, fc, n_classes, rng, dtype):
    for i, width in enumerate(fc, start=1):
        layers[f"fc{i}"] = FullyConnected.create(rng, in_dim, width, dtype)
        layers[f"fc{i}_relu"] = ReLU()
        nodes += [NodeSpec(f"fc{i}", "fc", (prev,)),
                  NodeSpec(f"fc{i}_relu", "relu", (f"fc{i}",))]
        prev, in_dim = f"fc{i}_relu", width
    layers["out"] = FullyConnected.create(rng, in_dim, n_classes, dtype)
    nodes.append(NodeSpec("out", "fc", (prev,)))


@dataclass
class BackwardResult:
    params: dict
    nodes: dict


@dataclass
class Pass:
    """Cached state of one forward evaluation over a same-width batch."""

    network: "Network"
    activations: dict
    caches: dict
    logits: np.ndarray
    probs: np.ndarray
    labels: np.ndarray | None = None
    losses: np.ndarray | None = None

    @property
    def loss(self):
        if self.losses is None:
            return None
        return float(self.losses.mean())

    @property
    def descriptor(self):
        return self.activations.get("concat")

    def backward(self, grad_logits=None, scale=None, blocked: Iterable = ()):
        """Back-propagate from the logits.

        Without ``grad_logits`` the gradient of ``scale * sum(losses)`` is
        used; ``scale`` defaults to ``1/N`` (mean loss).  ``blocked`` is a set
        of ``(producer, consumer)`` edges whose gradient is discarded.
        """
        if grad_logits is None:
            if self.labels is None:
                raise ContractError("backward needs labels or an explicit logit gradient")
            if scale is None:
                scale = 1.0 / len(self.labels)
            grad_logits = softmax_xent_backward(self.probs, self.labels, scale)
        return self.network._backward(self, np.asarray(grad_logits, dtype=self.logits.dtype),
                                      set(blocked))


class Network:
    """A fixed DAG of layers ending in a node named ``out`` (the logits)."""

    def __init__(self, nodes: Sequence[NodeSpec], layers: dict, config,
                 kind: str = "mspn", class_names=None, dtype=np.float32):
        self.nodes = list(nodes)
        self.layers = layers
        self.config = config
        self.kind = kind
        self.dtype = np.dtype(dtype)
        self.class_names = list(class_names) if class_names else [
            f"class{i}" for i in range(config.n_classes)]
        self._last_pass = None
        self._check_topology()

    def _check_topology(self):
        seen = set()
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigError("node names must be unique")
        if names.count("out") != 1:
            raise ConfigError("graph needs exactly one node named 'out'")
        for node in self.nodes:
            for src in node.inputs:
                if src not in seen:
                    raise ConfigError(f"node {node.name} reads {src!r} before it is defined")
            if node.kind != "input" and node.name not in self.layers:
                raise ConfigError(f"node {node.name} has no layer")
            seen.add(node.name)
        self.consumers = {n: [] for n in names}
        for node in self.nodes:
            for src in node.inputs:
                self.consumers[src].append(node.name)

    # -- parameters ------------------------------------------------------

    def params(self) -> "OrderedDict[str, dict]":
        out = OrderedDict()
        for name in PARAM_ORDER:
            if name in self.layers:
                out[name] = self.layers[name].params()
        return out

    def n_params(self) -> int:
        return sum(a.size for p in self.params().values() for a in p.values())

    def copy(self) -> "Network":
        clone = copy.deepcopy(self)
        clone._last_pass = None
        return clone

    def astype(self, dtype) -> "Network":
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        for layer in clone.layers.values():
            if hasattr(layer, "weight"):
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        return clone

    # -- execution -------------------------------------------------------

    @property
    def input_height(self):
        return self.config.input_height

    def prepare(self, images) -> np.ndarray:
        """Coerce images to a ``(N, 1, H, W)`` array in the network dtype."""
        if isinstance(images, FeatureMapStack):
            images = images.data
        if isinstance(images, (list, tuple)):
            images = np.stack([np.asarray(im) for im in images])
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1:
            raise ContractError(f"expected grayscale images, got shape {np.shape(images)}")
        if x.shape[2] != self.input_height:
            raise ContractError(f"expected height {self.input_height}, got {x.shape[2]}")
        self.config.check_width(x.shape[3])
        return x

    def forward(self, images, labels=None) -> Pass:
        x = self.prepare(images)
        acts, caches = {"input": x}, {}
        for node in self.nodes[1:]:
            y, caches[node.name] = self.layers[node.name].forward(
                *[acts[src] for src in node.inputs])
            acts[node.name] = y
        logits = acts["out"]
        if labels is not None:
            labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
            probs, losses = softmax_xent_forward(logits, labels)
        else:
            probs, losses = softmax(logits), None
        result = Pass(self, acts, caches, logits, probs, labels, losses)
        self._last_pass = result
        return result

    def backward(self, grad_logits=None, scale=None, blocked=()):
        """Back-propagate through the most recent :meth:`forward`."""
        if self._last_pass is None:
            raise ContractError("backward called before forward")
        return self._last_pass.backward(grad_logits, scale, blocked)

    def _backward(self, fwd: Pass, grad_logits, blocked) -> BackwardResult:
        grads = {"out": grad_logits}
        param_grads = {}
        for node in reversed(self.nodes[1:]):
            g = grads.get(node.name)
            if g is None:
                g = np.zeros_like(fwd.activations[node.name])
                grads[node.name] = g
            layer = self.layers[node.name]
            grad_in, pg = layer.backward(g, fwd.caches[node.name])
            if pg:
                param_grads[node.name] = pg
            if not isinstance(grad_in, tuple):
                grad_in = (grad_in,)
            for src, gi in zip(node.inputs, grad_in):
                if (src, node.name) in blocked:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        ordered = OrderedDict((n, param_grads[n]) for n in PARAM_ORDER if n in param_grads)
        return BackwardResult(ordered, grads)

    def descriptor(self, images) -> np.ndarray:
        return self.forward(images).descriptor

    def predict_proba(self, images) -> np.ndarray:
        """Class probabilities for a list of 2-D images of any valid widths."""
        out = np.empty((len(images), self.config.n_classes), dtype=self.dtype)
        for idx in width_buckets(images):
            out[idx] = self.forward([images[i] for i in idx]).probs
        return out

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=1)


def width_buckets(images) -> list:
    """Indices of ``images`` grouped by width, in ascending width order."""
    groups = {}
    for i, im in enumerate(images):
        groups.setdefault(np.shape(im)[-1], []).append(i)
    return [np.array(groups[w]) for w in sorted(groups)]


def build_mspn(cfg: MSPNConfig | None = None, seed=0, dtype=np.float32,
               class_names=None) -> Network:
    """Assemble the multi-stage pooling network for ``cfg``."""
    cfg = cfg or MSPNConfig()
    if not isinstance(cfg, MSPNConfig):
        raise ConfigError("build_mspn needs an MSPNConfig")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nodes, layers, _ = _conv_trunk(cfg.channels, rng, dtype, cfg.input_norm)
    for stage in cfg.ssp:
        layers[stage] = SSP(cfg.ssp_mode)
        nodes.append(NodeSpec(stage, "ssp", (SSP_TAPS[stage],)))
    layers["concat"] = Concat()
    nodes.append(NodeSpec("concat", "concat", tuple(cfg.ssp)))
    _fc_head(nodes, layers, "concat", cfg.concat_dim, cfg.fc, cfg.n_classes, rng, dtype)
    return Network(nodes, layers, cfg, kind="mspn", class_names=class_names, dtype=dtype)


def variant_config(name: str, base: MSPNConfig | None = None,
                   starred_fc2: int | None = STARRED_FC2,
                   starred: str = STARRED_VARIANT) -> MSPNConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    base = base or MSPNConfig()
    cfg = base.replace(ssp=VARIANTS[name])
    if name == starred and starred_fc2:
        cfg = cfg.replace(fc=(cfg.fc[0], starred_fc2))
    return cfg


def build_variant(name: str, base: MSPNConfig | None = None, seed=0, dtype=np.float32,
                  class_names=None, starred_fc2: int | None = STARRED_FC2) -> Network:
    """Build one of the ablation networks (``Variant-1`` .. ``Variant-5``, ``MSPN``)."""
    cfg = variant_config(name, base, starred_fc2)
    return build_mspn(cfg, seed=seed, dtype=dtype, class_names=class_names)
