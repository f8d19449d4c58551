"""Adam training loop with early stopping and a data-parallel
gradient-averaging contract.

Workers are logical shards: each batch is split into K contiguous
shards, per-shard masked gradients are combined weighted by their
unmasked-entry counts, and a single Adam update is applied. The reduced
gradient is algebraically identical to the single-shard gradient, so
final parameters are invariant to K up to float summation order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import swin
from .catalog import build_mask
from .losses import masked_bce, masked_bce_grad


class TrainingError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    early_stop_patience: int = 2
    early_stop_min_delta: float = 1e-4
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise TrainingError("beta1 and beta2 must be in (0, 1)")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.workers < 1:
            raise TrainingError("workers must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, cfg: TrainConfig
              ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; pure in its inputs."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k!r}; step rejected")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = cfg.beta1 * state.m[k] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1 - cfg.beta2) * g**2
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        new_params[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[k], new_v[k] = m, v
    return new_params, OptimizerState(new_m, new_v, t)


def parallel_gradient_reduce(shard_grads: list[dict[str, np.ndarray]],
                             shard_counts: list[int]
                             ) -> tuple[dict[str, np.ndarray], int]:
    """Count-weighted combination of per-shard masked-loss gradients.

    Equals the gradient the masked loss would produce on the concatenated
    batch. Returns (gradient, total unmasked count); all-zero counts give
    a zero gradient with count 0 (empty-mask batch).
    """
    if len(shard_grads) != len(shard_counts) or not shard_grads:
        raise TrainingError("shard gradients and counts must be nonempty and aligned")
    total = int(sum(shard_counts))
    keys = shard_grads[0].keys()
    if total == 0:
        return {k: np.zeros_like(shard_grads[0][k]) for k in keys}, 0
    out = {}
    for k in keys:
        acc = np.zeros_like(shard_grads[0][k])
        for g, c in zip(shard_grads, shard_counts):
            acc += c * g[k]
        out[k] = acc / total
    return out, total


def early_stop_check(val_losses: list[float], patience: int,
                     min_delta: float) -> bool:
    """True (stop) iff the best loss has gone `patience` epochs without
    improving by more than min_delta."""
    if not val_losses:
        raise TrainingError("validation history is empty")
    best = np.inf
    stale = 0
    for loss in val_losses:
        if loss < best - min_delta:
            best = loss
            stale = 0
        else:
            stale += 1
    return stale >= patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    unmasked_count: int
    wall_ms: float
    stopped_early: bool

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def _shard_gradients(images, labels, masks, params, model_config):
    logits = swin.forward(images, params, model_config)
    loss = masked_bce(logits, labels, masks)
    if loss.empty_mask:
        return None, loss
    dlogits = masked_bce_grad(logits, labels, masks)
    grads = swin.backward(images, params, dlogits, model_config)
    return grads, loss


def evaluate_loss(images, labels, params, model_config, batch_size=64) -> float:
    total, count = 0.0, 0
    masks = build_mask(labels)
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        lv = masked_bce(swin.forward(images[sl], params, model_config),
                        labels[sl], masks[sl])
        total += lv.value * lv.unmasked_count
        count += lv.unmasked_count
    return total / count if count else 0.0


def train(model_config: swin.ModelConfig, params: dict[str, np.ndarray],
          train_set: tuple[np.ndarray, np.ndarray],
          val_set: tuple[np.ndarray, np.ndarray],
          cfg: TrainConfig,
          log_path=None) -> tuple[dict[str, np.ndarray], list[EpochRecord]]:
    """Run the full loop; returns final parameters and the epoch log.

    train_set / val_set are (images (N, H, W, C), ternary labels (N, 18)).
    """
    images, labels = train_set
    if len(images) == 0:
        raise TrainingError("training set is empty")
    labels = np.asarray(labels)
    masks = build_mask(labels)
    if masks.sum() == 0:
        raise TrainingError("all training labels are masked; no learnable signal")

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.zeros_like(params)
    history: list[EpochRecord] = []
    val_losses: list[float] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.monotonic()
            perm = rng.permutation(len(images))
            epoch_loss, epoch_count = 0.0, 0
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                # contiguous shards; np.array_split keeps order and handles
                # batches smaller than the worker count
                shards = [s for s in np.array_split(idx, cfg.workers) if len(s)]
                shard_grads, shard_counts = [], []
                for s in shards:
                    grads, lv = _shard_gradients(images[s], labels[s], masks[s],
                                                 params, model_config)
                    epoch_loss += lv.value * lv.unmasked_count
                    epoch_count += lv.unmasked_count
                    if grads is not None:
                        shard_grads.append(grads)
                        shard_counts.append(lv.unmasked_count)
                if not shard_grads:
                    continue  # empty-mask batch: nothing to learn from
                reduced, _ = parallel_gradient_reduce(shard_grads, shard_counts)
                params, state = adam_step(params, reduced, state, cfg)
            if epoch_count == 0:
                raise TrainingError("epoch saw only masked labels; no learnable signal")

            val_loss = evaluate_loss(val_set[0], val_set[1], params, model_config)
            val_losses.append(val_loss)
            stop = early_stop_check(val_losses, cfg.early_stop_patience,
                                    cfg.early_stop_min_delta)
            rec = EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / epoch_count,
                val_loss=val_loss,
                unmasked_count=epoch_count,
                wall_ms=(time.monotonic() - t0) * 1e3,
                stopped_early=stop,
            )
            history.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()
    return params, history
