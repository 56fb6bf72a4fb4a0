"""Training objectives: weighted CE, per-label CE, and soft Dice.

All three accept raw logits and reduce to a scalar. Implementations lean on
``torch.nn.functional`` where it matches the required reduction exactly; the
test suite pins each one against independent scalar and finite-difference
oracles.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError

DICE_EPS = 1e-6


def weighted_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                           weights: torch.Tensor) -> torch.Tensor:
    """Class-weighted cross-entropy, normalized by the mean applied weight.

    loss = sum_i w[y_i] * nll_i / sum_i w[y_i]

    so uniform weights reduce to plain cross-entropy.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DataError(f"expected B x C logits with C >= 2, got {tuple(logits.shape)}")
    weights = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if weights.ndim != 1 or weights.shape[0] != logits.shape[1]:
        raise ConfigError(
            f"need one weight per class: {weights.shape[0]} weights, "
            f"{logits.shape[1]} classes")
    if (weights <= 0).any():
        raise ConfigError("class weights must be strictly positive")
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DataError("targets must be a vector of B class indices")
    # F.cross_entropy with reduction="mean" divides by the summed applied
    # weights, which is exactly the normalization above.
    return F.cross_entropy(logits, targets.long(), weight=weights)


def per_label_cross_entropy(logits: torch.Tensor,
                            targets: torch.Tensor) -> torch.Tensor:
    """Independent sigmoid cross-entropy per label, averaged over B x L."""
    if logits.shape != targets.shape:
        raise DataError(
            f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ")
    tvals = targets.detach()
    if not bool(((tvals == 0) | (tvals == 1)).all()):
        raise DataError("multi-hot targets must be 0/1")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def dice_loss(logit_map: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss on sigmoid probabilities, averaged over the batch.

    Per sample: 1 - (2 * sum(p * m) + eps) / (sum(p) + sum(m) + eps).
    """
    if logit_map.shape != masks.shape:
        raise DataError(
            f"logit map {tuple(logit_map.shape)} and masks "
            f"{tuple(masks.shape)} differ")
    if logit_map.ndim < 2:
        raise DataError("expected at least B x spatial dimensions")
    mvals = masks.detach()
    if not bool(((mvals == 0) | (mvals == 1)).all()):
        raise DataError("masks must be binary")
    probs = torch.sigmoid(logit_map)
    m = masks.to(logit_map.dtype)
    dims = tuple(range(1, logit_map.ndim))
    inter = (probs * m).sum(dim=dims)
    denom = probs.sum(dim=dims) + m.sum(dim=dims)
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return (1.0 - dice).mean()


def inverse_prevalence_weights(class_counts) -> np.ndarray:
    """Per-class weights proportional to 1/prevalence, scaled so the
    prevalence-weighted mean is 1 (i.e. w_c = (1 / p_c) / C).

    With an 8:2 split this gives (0.625, 2.5).
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.shape[0] < 2:
        raise ConfigError("need counts for at least two classes")
    if (counts < 0).any():
        raise DataError("class counts must be non-negative")
    total = counts.sum()
    if (counts == 0).any() or total == 0:
        raise DataError("every class needs at least one example to weight it")
    prevalence = counts / total
    return 1.0 / (prevalence * counts.shape[0])
