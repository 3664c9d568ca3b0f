"""Seeded minibatch training of the prompting parameters.

AdamW with decoupled weight decay and bias correction, a linear warmup to
the base learning rate over the first tenth of the step budget and constant
afterwards, shuffled minibatches with the last partial batch kept. Only the
parameters the model exposes as trainable are ever touched; encoders stay
frozen by construction.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Parameter, Tape
from .errors import ContractError, NumericError

__all__ = ["TrainConfig", "AdamW", "lr_at", "train", "TrainResult",
           "default_epochs"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    batch_size: int = 32
    max_epochs: int | None = None   # resolved per mode/shots when None
    lam: float = 1.0
    seed: int = 0
    decay_prototypes: bool = False  # weight decay normally skips prototypes

    def __post_init__(self):
        if min(self.lr, self.beta1, self.beta2, self.eps, self.batch_size) <= 0:
            raise ContractError("training hyper-parameters must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ContractError("warmup fraction must lie in [0, 1)")


def default_epochs(mode: str, shots: int) -> int:
    """Published epoch budgets: separate-tower runs train 200 epochs at
    16/8 shots and 100 below; fused-tower runs train 1000/500."""
    if mode == "single":
        return 1000 if shots >= 8 else 500
    return 200 if shots >= 8 else 100


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear ramp to the base rate over ceil(warmup_frac * total) steps.

    The first step already uses one ramp increment (base/W), so no step
    runs at a zero rate; after the ramp the rate stays at base.
    """
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warmup = max(1, math.ceil(config.warmup_frac * total_steps))
    return config.lr * min(1.0, max(step, 1) / warmup)


class AdamW(object):
    """Decoupled-weight-decay Adam with bias correction."""

    def __init__(self, params: list[Parameter], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.tensor.data) for p in self.params}

    def step(self, grads: dict, lr: float) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            g = grads.get(p.tensor)
            if g is None:
                g = np.zeros_like(p.tensor.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient for {p.name!r} at step {t}"
                )
            m = self._m[p.name]
            v = self._v[p.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            update = lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
            if p.weight_decay or cfg.decay_prototypes:
                update = update + lr * cfg.weight_decay * p.tensor.data
            p.tensor.data = p.tensor.data - update


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)   # one dict per epoch
    steps: int = 0
    wall_ms: float = 0.0


def train(model, episode, config: TrainConfig) -> TrainResult:
    """Run the full seeded schedule on one few-shot episode.

    The loss is the model's mode-appropriate objective with the clustering
    regularizers evaluated on each minibatch. Returns the per-epoch trace
    of mean loss and components; the model is updated in place.
    """
    support = episode.support
    n = len(support)
    if n == 0:
        raise ContractError("empty episode support")
    if config.max_epochs is None:
        raise ContractError("max_epochs must be resolved before training")

    params = model.trainable_parameters()
    optimizer = AdamW(params, config)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.max_epochs * steps_per_epoch

    result = TrainResult()
    started = time.perf_counter()
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "ce_or_bce": 0.0, "r1": 0.0, "r2": 0.0}
        for b in range(steps_per_epoch):
            rows = order[b * config.batch_size:(b + 1) * config.batch_size]
            ids = support.ids[rows]
            labels = support.labels[rows]
            with Tape() as tape:
                loss, parts = model.loss_on_batch(ids, labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"trace so far: {result.trace[-3:]}"
                    )
                grads = tape.backward(loss)
            optimizer.step(grads, lr_at(step, total_steps, config))
            step += 1
            sums["loss"] += value
            for key in ("ce_or_bce", "r1", "r2"):
                sums[key] += parts[key]
        result.trace.append({
            "epoch": epoch,
            "mean_loss": sums["loss"] / steps_per_epoch,
            "r1": sums["r1"] / steps_per_epoch,
            "r2": sums["r2"] / steps_per_epoch,
            "ce_or_bce": sums["ce_or_bce"] / steps_per_epoch,
        })
    result.steps = step
    result.wall_ms = (time.perf_counter() - started) * 1000.0
    return result


def resolve_config(config: TrainConfig, mode: str, shots: int) -> TrainConfig:
    if config.max_epochs is not None:
        return config
    return replace(config, max_epochs=default_epochs(mode, shots))
