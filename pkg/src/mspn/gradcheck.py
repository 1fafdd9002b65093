"""Central finite-difference checks of every backward pass.

Layer checks use a random upstream gradient ``G`` and the scalar
``sum(G * layer(x))``.  Inputs to piecewise-linear layers are drawn away from
their kinks (distinct values for max reductions, no values near zero for the
rectifier).  The whole-network check instead skips any coordinate whose
perturbation flips a rectifier mask or a max-pooling winner, because the
finite difference is meaningless across such a switch.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .graph import MSPNConfig, build_mspn
from .tensor import RowReduceCache, row_reduce, row_reduce_backward

EPS = 1e-5
TOLERANCE = 1e-4
# Central differences of a loss near 2.3 carry about 5e-11 of round-off at
# EPS, so whole-network gradients smaller than this are compared on an
# absolute scale.
GRAPH_FLOOR = 1e-6
LAYER_KINDS = ("conv", "maxpool", "relu", "fc", "ssp-max", "ssp-average", "softmax-xent",
               "standardize")
ALL_KINDS = LAYER_KINDS + ("mspn-graph",)


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def numeric_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of
    ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def _distinct(rng, shape, spacing=0.05):
    size = int(np.prod(shape))
    return ((rng.permutation(size) - size / 2) * spacing).reshape(shape)


def _check_conv(rng):
    n, c_in, c_out = (int(v) for v in rng.integers(1, [3, 4, 4]))
    k_h, k_w = (int(v) for v in rng.integers(1, 4, size=2))
    pad = tuple(int(v) for v in rng.integers(0, 2, size=2))
    h = int(rng.integers(max(1, k_h - 2 * pad[0]), 7))
    w = int(rng.integers(max(1, k_w - 2 * pad[1]), 8))
    x = rng.normal(size=(n, c_in, h, w))
    weight = rng.normal(size=(c_out, c_in, k_h, k_w))
    bias = rng.normal(size=c_out)
    y, cache = L.conv_forward(x, weight, bias, pad)
    g = rng.normal(size=y.shape)
    gx, gw, gb = L.conv_backward(g, cache, weight)
    f = lambda: float(np.sum(g * L.conv_forward(x, weight, bias, pad)[0]))
    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, weight)),
               rel_error(gb, numeric_grad(f, bias)))


def _check_maxpool(rng):
    shape = tuple(int(v) for v in rng.integers([1, 1, 2, 2], [3, 4, 8, 10]))
    x = _distinct(rng, shape)
    y, cache = L.maxpool_forward(x)
    g = rng.normal(size=y.shape)
    f = lambda: float(np.sum(g * L.maxpool_forward(x)[0]))
    return rel_error(L.maxpool_backward(g, cache), numeric_grad(f, x))


def _check_relu(rng):
    shape = tuple(int(v) for v in rng.integers(1, [3, 4, 6, 8]))
    x = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 1.0, size=shape)
    y, mask = L.relu_forward(x)
    g = rng.normal(size=y.shape)
    f = lambda: float(np.sum(g * L.relu_forward(x)[0]))
    return rel_error(L.relu_backward(g, mask), numeric_grad(f, x))


def _check_fc(rng):
    n, d_in, d_out = (int(v) for v in rng.integers(1, [4, 9, 9]))
    x = rng.normal(size=(n, d_in))
    weight, bias = rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
    y, cache = L.fc_forward(x, weight, bias)
    g = rng.normal(size=y.shape)
    gx, gw, gb = L.fc_backward(g, cache, weight)
    f = lambda: float(np.sum(g * L.fc_forward(x, weight, bias)[0]))
    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, weight)),
               rel_error(gb, numeric_grad(f, bias)))


def _check_ssp(rng, mode):
    shape = tuple(int(v) for v in rng.integers(1, [3, 5, 6, 10]))
    x = _distinct(rng, shape) if mode == "max" else rng.normal(size=shape)
    y, cache = row_reduce(x, mode)
    g = rng.normal(size=y.shape)
    f = lambda: float(np.sum(g * row_reduce(x, mode)[0]))
    return rel_error(row_reduce_backward(g, cache), numeric_grad(f, x))


def _check_softmax(rng):
    n, k = int(rng.integers(1, 4)), int(rng.integers(2, 11))
    logits = rng.normal(scale=3.0, size=(n, k))
    labels = rng.integers(0, k, size=n)
    probs, _ = L.softmax_xent_forward(logits, labels)
    f = lambda: float(np.sum(L.softmax_xent_forward(logits, labels)[1]))
    return rel_error(L.softmax_xent_backward(probs, labels), numeric_grad(f, logits))


def _check_standardize(rng):
    shape = tuple(int(v) for v in rng.integers([1, 1, 2, 1], [3, 3, 7, 8]))
    x = rng.normal(loc=0.5, scale=0.3, size=shape)
    y, cache = L.standardize_forward(x)
    g = rng.normal(size=y.shape)
    f = lambda: float(np.sum(g * L.standardize_forward(x)[0]))
    return rel_error(L.standardize_backward(g, cache), numeric_grad(f, x))


_LAYER_CHECKS = {
    "conv": _check_conv,
    "maxpool": _check_maxpool,
    "relu": _check_relu,
    "fc": _check_fc,
    "ssp-max": lambda rng: _check_ssp(rng, "max"),
    "ssp-average": lambda rng: _check_ssp(rng, "average"),
    "softmax-xent": _check_softmax,
    "standardize": _check_standardize,
}


def check_layer(kind: str, rng) -> float:
    """Max relative error of one randomly shaped trial of ``kind``."""
    return _LAYER_CHECKS[kind](rng)


def _switch_state(fwd):
    """Every discrete choice made by the forward pass."""
    state = []
    for name, cache in fwd.caches.items():
        if name.startswith("relu") or name.endswith("_relu"):
            state.append(cache)
        elif name.startswith("pool"):
            state.append(cache[0])
        elif isinstance(cache, RowReduceCache) and cache.argmax is not None:
            state.append(cache.argmax)
    return state


def _same_switches(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _spread(total: int, sizes) -> list:
    """Split ``total`` draws as evenly as possible over tensors of ``sizes``
    without asking any tensor for more entries than it has."""
    quota = [0] * len(sizes)
    left = min(total, sum(sizes))
    while left:
        open_ = [i for i, n in enumerate(sizes) if quota[i] < n]
        share = max(1, left // len(open_))
        for i in open_:
            take = min(share, sizes[i] - quota[i], left)
            quota[i] += take
            left -= take
            if not left:
                break
    return quota


@dataclass
class GraphCheck:
    max_error: float
    checked: int
    skipped: int
    per_param: dict


def check_graph(rng, width: int | None = None, cfg: MSPNConfig | None = None,
                coords: int = 210, eps: float = EPS) -> GraphCheck:
    """Finite-difference check of the whole network at 64-bit precision.

    Coordinates are spread evenly over all parameter tensors, so the
    multi-consumer convolutions conv2 and conv3 are always covered.
    """
    if cfg is None:
        chans = tuple(int(c) for c in rng.integers(2, 6, size=4))
        cfg = MSPNConfig(channels=chans, fc=(int(rng.integers(4, 9)), int(rng.integers(4, 9))),
                         ssp_mode=str(rng.choice(["max", "average"])))
    width = width or int(rng.integers(cfg.min_width, cfg.min_width + 20))
    net = build_mspn(cfg, seed=rng, dtype=np.float64)
    for p in net.params().values():
        p["bias"][...] = rng.normal(scale=0.1, size=p["bias"].shape)
    image = rng.uniform(0.0, 1.0, size=(1, cfg.input_height, width))
    label = [int(rng.integers(cfg.n_classes))]
    base = net.forward(image, label)
    grads = base.backward().params
    switches = _switch_state(base)

    tensors = [(layer, key) for layer, p in net.params().items() for key in p]
    quota = _spread(coords, [net.params()[l][k].size for l, k in tensors])
    errors, per_param, checked, skipped = [], {}, 0, 0
    for (layer, key), want in zip(tensors, quota):
        arr = net.params()[layer][key].reshape(-1)
        analytic = grads[layer][key].reshape(-1)
        errs = []
        for i in rng.permutation(arr.size):
            if len(errs) == want:
                break
            orig = arr[i]
            arr[i] = orig + eps
            up = net.forward(image, label)
            arr[i] = orig - eps
            down = net.forward(image, label)
            arr[i] = orig
            if not (_same_switches(switches, _switch_state(up))
                    and _same_switches(switches, _switch_state(down))):
                skipped += 1
                continue
            numeric = (up.losses[0] - down.losses[0]) / (2 * eps)
            errs.append(rel_error(analytic[i], numeric, GRAPH_FLOOR))
        per_param[f"{layer}.{key}"] = max(errs) if errs else 0.0
        errors += errs
        checked += len(errs)
    return GraphCheck(max(errors), checked, skipped, per_param)


def run_gradcheck(trials: int = 20, seed: int = 0, report=None) -> dict:
    """Run ``trials`` random shapes per layer kind plus the whole network.

    Returns ``{kind: max relative error}``; ``report`` (if given) receives one
    formatted line per kind.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for kind in ALL_KINDS:
        start = time.perf_counter()
        if kind == "mspn-graph":
            worst = max(check_graph(rng).max_error for _ in range(trials))
        else:
            worst = max(check_layer(kind, rng) for _ in range(trials))
        results[kind] = worst
        if report:
            status = "ok" if worst < TOLERANCE else "FAIL"
            report(f"{kind:<14} max rel error {worst:.3e}  "
                   f"({trials} trials, {time.perf_counter() - start:.1f}s)  {status}")
    return results
