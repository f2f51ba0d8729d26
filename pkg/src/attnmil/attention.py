"""Explicitly learned attention over instance features.

A single linear head scores every lattice location; the scores feed
three consumers: a sigmoid turns them into per-location probabilities
supervised by voxel masks, a softmax turns them into pooling weights
for the image-level classifier, and the probabilities drive the
foreground/background separation of unlabeled volumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeatureMap
from .errors import ShapeMismatchError


@dataclass
class AttentionField:
    """The three views of one volume's attention: scores, probabilities,
    pooling weights, with the lattice extents they are laid out on."""

    raw: Tensor
    prob: Tensor
    weight: Tensor
    dims: tuple  # (depth, height, width) of the sampled lattice

    def export_arrays(self) -> dict:
        """Flat float64 arrays plus lattice dims, for report emitters."""
        return {
            "dims": tuple(self.dims),
            "raw": np.asarray(self.raw.data, dtype=np.float64).ravel().copy(),
            "prob": np.asarray(self.prob.data, dtype=np.float64).ravel().copy(),
            "weight": np.asarray(self.weight.data, dtype=np.float64).ravel().copy(),
        }


def attention_values(fm: FeatureMap, attention_head: Tensor) -> Tensor:
    """Raw attention score of every instance: the head dotted with each row."""
    if attention_head.data.shape != (fm.channels,):
        raise ShapeMismatchError(
            f"attention_values: head {attention_head.data.shape} vs "
            f"features [*, {fm.channels}]"
        )
    return ad.rows_dot(fm.features, attention_head)


def attention_probs(values: Tensor) -> Tensor:
    """Probability-like attention: elementwise sigmoid of the raw scores."""
    return ad.sigmoid(values)


def attention_weights(values: Tensor) -> Tensor:
    """Pooling weights: max-shifted softmax over the lattice, summing to 1."""
    return ad.softmax(values)


def summed_cross_entropy(probs: Tensor, targets) -> Tensor:
    """-sum_x [y log p + (1-y) log(1-p)] with clamped logs, as a scalar tensor."""
    y = np.asarray(targets, dtype=np.float64).ravel()
    if probs.data.shape != y.shape:
        raise ShapeMismatchError(
            f"cross entropy: probs {probs.data.shape} vs targets {y.shape}"
        )
    pos = ad.mul(ad.log(probs), Tensor(y))
    neg = ad.mul(ad.log(ad.sub(1.0, probs)), Tensor(1.0 - y))
    return ad.neg(ad.total(ad.add(pos, neg)))


def attention_loss(probs: Tensor, mask) -> Tensor:
    """Per-location cross entropy of the attention probabilities vs the mask."""
    return summed_cross_entropy(probs, mask)


def compute_attention_field(fm: FeatureMap, attention_head: Tensor) -> AttentionField:
    """All three attention views for one feature map."""
    raw = attention_values(fm, attention_head)
    return AttentionField(
        raw=raw,
        prob=attention_probs(raw),
        weight=attention_weights(raw),
        dims=(fm.depth, fm.height, fm.width),
    )
