"""Image-level classification stream.

The bag representation is an attention-weighted average of the
instance features; a linear head plus sigmoid turns it into the
probability that the volume is positive.  Hard max and plain average
pooling over the raw attention scores are available as ablation
variants of the same image-level probability.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeatureMap
from .errors import ShapeMismatchError

POOLING_MODES = ("attention", "max", "average")


def pool_bag_feature(fm: FeatureMap, weights: Tensor) -> Tensor:
    """Weighted sum of instance features; weights are expected to sum to 1."""
    if weights.data.shape != (fm.num_locations,):
        raise ShapeMismatchError(
            f"pool_bag_feature: weights {weights.data.shape} vs lattice "
            f"of {fm.num_locations} locations"
        )
    return ad.weighted_row_sum(fm.features, weights)


def global_prob(pooled: Tensor, global_head: Tensor) -> Tensor:
    """Probability that the volume is positive: sigmoid of the bag logit."""
    if pooled.data.shape != global_head.data.shape:
        raise ShapeMismatchError(
            f"global_prob: pooled {pooled.data.shape} vs head "
            f"{global_head.data.shape}"
        )
    return ad.sigmoid(ad.dot(global_head, pooled))


def global_loss(prob: Tensor, label) -> Tensor:
    """Binary cross entropy of one image-level prediction."""
    y = float(label)
    on = ad.mul(ad.log(prob), y)
    off = ad.mul(ad.log(ad.sub(1.0, prob)), 1.0 - y)
    return ad.neg(ad.add(on, off))


def global_loss_dataset(probs, labels) -> Tensor:
    """Mean image-level loss over a batch, every sample included."""
    probs = list(probs)
    labels = list(labels)
    if not probs:
        raise ShapeMismatchError("global_loss_dataset: empty batch")
    if len(probs) != len(labels):
        raise ShapeMismatchError(
            f"global_loss_dataset: {len(probs)} probs vs {len(labels)} labels"
        )
    acc = global_loss(probs[0], labels[0])
    for p, y in zip(probs[1:], labels[1:]):
        acc = ad.add(acc, global_loss(p, y))
    return ad.mul(acc, 1.0 / len(probs))


def pool_score_ablation(values: Tensor, mode: str) -> Tensor:
    """Image-level logit from raw attention scores: hard max or plain mean.

    The max routes its gradient to the first maximal instance only.
    """
    if mode == "max":
        return ad.max_elem(values)
    if mode == "average":
        return ad.mean(values)
    raise ValueError(f"unknown pooling mode {mode!r}; expected 'max' or 'average'")
