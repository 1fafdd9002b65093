"""SGD with momentum, the plateau learning-rate schedule, and the training loop."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from decimal import Decimal
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, ContractError
from .graph import Network, width_buckets

log = logging.getLogger(__name__)

CONTINUE, DECAYED, TERMINATE = "continue", "decayed", "terminate"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_floor: float = 1e-5
    batch_size: int = 64
    patience: int = 3
    max_epochs: int = 500
    seed: int = 0
    # stop as soon as the epoch's mean training loss falls below this
    target_train_loss: float | None = None
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("lr, batch_size must be positive and max_epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class ScheduleState:
    """Plateau-schedule bookkeeping.

    The learning rate is derived from the decay count in decimal arithmetic,
    so after k decays it is exactly ``initial_lr * factor**k`` as written in
    base ten rather than an accumulated floating-point product.
    """

    initial_lr: float = 0.01
    decay_factor: float = 0.1
    lr_floor: float = 1e-5
    patience: int = 3
    best: float = math.inf
    since_improvement: int = 0
    decay_count: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ScheduleState":
        return cls(cfg.lr, cfg.lr_decay_factor, cfg.lr_floor, cfg.patience)

    @property
    def lr(self) -> float:
        return float(Decimal(repr(self.initial_lr))
                     * Decimal(repr(self.decay_factor)) ** self.decay_count)


def schedule_update(state: ScheduleState, val_error: float):
    """Advance the schedule by one epoch; returns ``(new_state, action)``."""
    if val_error < 0:
        raise ContractError("validation error must be non-negative")
    if val_error < state.best:
        return replace(state, best=val_error, since_improvement=0), CONTINUE
    waited = state.since_improvement + 1
    if waited < state.patience:
        return replace(state, since_improvement=waited), CONTINUE
    state = replace(state, since_improvement=0, decay_count=state.decay_count + 1)
    return state, TERMINATE if state.lr < state.lr_floor else DECAYED


def sgd_step(params: Mapping, grads: Mapping, velocity: dict, lr: float, momentum: float):
    """Classical momentum, in place: ``v = momentum*v - lr*g``; ``w = w + v``.

    ``params`` and ``grads`` are matching (possibly nested) mappings of arrays.
    ``velocity`` is filled with zeros on first use.
    """
    for key, p in params.items():
        if key not in grads:
            raise ContractError(f"no gradient for parameter {key!r}")
        g = grads[key]
        if isinstance(p, Mapping):
            sgd_step(p, g, velocity.setdefault(key, {}), lr, momentum)
            continue
        if np.shape(g) != p.shape:
            raise ContractError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} for {key!r}")
        v = velocity.get(key)
        if v is None:
            v = velocity[key] = np.zeros_like(p)
        v *= momentum
        v -= lr * np.asarray(g, dtype=p.dtype)
        p += v
    return params, velocity


def _add_into(total: dict, part: Mapping):
    for key, g in part.items():
        if isinstance(g, Mapping):
            _add_into(total.setdefault(key, {}), g)
        elif key in total:
            total[key] += g
        else:
            total[key] = np.array(g, copy=True)


def batch_gradients(net: Network, samples, pool: ThreadPoolExecutor | None = None):
    """Mean-loss gradient over ``samples``.

    Samples are grouped by width; each group runs as one batched pass and the
    group gradients are summed in ascending-width order, so the result does
    not depend on how many workers computed them.  Returns
    ``(grads, loss_sum)``.
    """
    scale = 1.0 / len(samples)

    def one(idx):
        fwd = net.forward([samples[i].image for i in idx], [samples[i].label for i in idx])
        return fwd.backward(scale=scale).params, float(fwd.losses.sum())

    buckets = width_buckets([s.image for s in samples])
    results = pool.map(one, buckets) if pool else map(one, buckets)
    total, loss_sum = {}, 0.0
    for grads, loss in results:
        _add_into(total, grads)
        loss_sum += loss
    return total, loss_sum


def error_rate(net: Network, samples) -> float:
    if not samples:
        raise ConfigError("cannot measure error on an empty set")
    pred = net.predict([s.image for s in samples])
    truth = np.array([s.label for s in samples])
    return float(np.mean(pred != truth))


def train(net: Network, train_set, val_set, cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[dict], None] | None = None):
    """Train ``net`` in place with minibatch SGD and the plateau schedule.

    Returns ``(best, history)``: a copy of the network at its lowest
    validation error and one record per epoch with keys ``epoch``,
    ``train_loss``, ``val_error`` and ``lr``.
    """
    if not train_set or not val_set:
        raise ConfigError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    state = ScheduleState.from_config(cfg)
    velocity: dict = {}
    history: list = []
    best, best_error = net.copy(), math.inf
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            lr = state.lr
            order = rng.permutation(len(train_set))
            loss_total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                grads, loss_sum = batch_gradients(net, batch, pool)
                sgd_step(net.params(), grads, velocity, lr, cfg.momentum)
                loss_total += loss_sum
            record = {"epoch": epoch, "train_loss": loss_total / len(train_set),
                      "val_error": error_rate(net, val_set), "lr": lr}
            history.append(record)
            if record["val_error"] < best_error:
                best, best_error = net.copy(), record["val_error"]
            state, action = schedule_update(state, record["val_error"])
            log.info("epoch %d loss %.5f val_error %.4f lr %g%s", epoch,
                     record["train_loss"], record["val_error"], lr,
                     "" if action == CONTINUE else f" ({action})")
            if on_epoch:
                on_epoch(record)
            if action == TERMINATE:
                break
            if cfg.target_train_loss is not None and record["train_loss"] < cfg.target_train_loss:
                break
    finally:
        if pool:
            pool.shutdown()
    return best, history


def write_history(history, path) -> None:
    """One JSON object per line, one line per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
