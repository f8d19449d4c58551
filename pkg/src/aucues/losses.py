"""Masked sigmoid binary cross-entropy over partially labeled batches.

Entries whose mask is 0 contribute exactly zero loss and zero gradient,
so dummy (-1) labels from datasets that do not annotate an AU never
backpropagate. The loss is evaluated in logit space via softplus, which
stays finite for arbitrarily saturated logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskMismatchError(ValueError):
    """Mask and label arrays disagree (mask must be 0 exactly at -1 labels)."""


@dataclass(frozen=True)
class LossValue:
    value: float
    unmasked_count: int

    @property
    def empty_mask(self) -> bool:
        return self.unmasked_count == 0


def _check(logits, labels, mask):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    if not (logits.shape == labels.shape == mask.shape):
        raise MaskMismatchError(
            f"shape mismatch: logits {logits.shape}, labels {labels.shape}, mask {mask.shape}"
        )
    if not np.isfinite(logits).all():
        raise MaskMismatchError("logits must be finite")
    if not np.isin(mask, (0, 1)).all():
        raise MaskMismatchError("mask entries must be 0 or 1")
    if ((labels == -1) != (mask == 0)).any():
        raise MaskMismatchError("mask must be 0 exactly where the label is -1")
    if not np.isin(labels[mask == 1], (0, 1)).all():
        raise MaskMismatchError("unmasked labels must be 0 or 1")
    return logits, labels, mask


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) without overflow: max(z, 0) + log1p(e^{-|z|})
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def masked_bce(logits, labels, mask) -> LossValue:
    """Mean BCE over unmasked entries only.

    Per entry: softplus(z) - y*z  ==  -(y log σ(z) + (1-y) log(1-σ(z))).
    Reduction divides by the unmasked count, not the batch size, so the
    scale is independent of per-dataset label coverage.
    """
    logits, labels, mask = _check(logits, labels, mask)
    count = int(mask.sum())
    if count == 0:
        return LossValue(0.0, 0)
    y = np.where(mask == 1, labels, 0).astype(np.float64)
    per_entry = _softplus(logits) - y * logits
    total = float((per_entry * mask).sum())
    return LossValue(total / count, count)


def masked_bce_grad(logits, labels, mask) -> np.ndarray:
    """Gradient of masked_bce w.r.t. the logits: m*(σ(z) - y)/Σm.

    Masked entries are exactly zero (multiplied out, not merely small).
    """
    logits, labels, mask = _check(logits, labels, mask)
    count = int(mask.sum())
    if count == 0:
        return np.zeros_like(logits)
    y = np.where(mask == 1, labels, 0).astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-logits))
    return mask * (sig - y) / count
