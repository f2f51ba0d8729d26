"""Voxel-level classification stream.

On voxel-annotated volumes the local head is supervised per location;
on unlabeled positives it is supervised at bag level: the separated
foreground and background groups are averaged into bag features whose
probabilities are pushed toward pseudo-labels 1 and 0.  Because head
and pooling are both linear, the bag logit equals the mean of its
member instance logits exactly, which is what lets the same head score
single instances at test time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import summed_cross_entropy
from .backbone import FeatureMap
from .errors import ShapeMismatchError


@dataclass
class SupervisionCounts:
    """Positive-sample counts of the training split, fixed for a whole run."""

    labeled_positives: int
    unlabeled_positives: int


@dataclass
class LocalScores:
    """Per-sample pieces of the local objective, whichever branch applies."""

    attention_term: Tensor | None = None  # voxel loss through the attention head
    labeled_term: Tensor | None = None    # voxel loss through the local head
    unlabeled_term: Tensor | None = None  # bag loss on the separated groups
    reliability: float | None = None      # adaptive weight of the unlabeled term


def bag_feature(fm: FeatureMap, members) -> Tensor:
    """Mean of the member instance features; membership is not differentiated."""
    members = np.asarray(members, dtype=np.intp)
    if members.size and members.max() >= fm.num_locations:
        raise ShapeMismatchError(
            f"bag_feature: member index {members.max()} outside lattice "
            f"of {fm.num_locations}"
        )
    return ad.rows_mean(fm.features, members)


def bag_prob(bag_vec: Tensor, local_head: Tensor) -> Tensor:
    """Probability that a bag is foreground: sigmoid of the bag logit."""
    if bag_vec.data.shape != local_head.data.shape:
        raise ShapeMismatchError(
            f"bag_prob: bag {bag_vec.data.shape} vs head {local_head.data.shape}"
        )
    return ad.sigmoid(ad.dot(local_head, bag_vec))


def instance_prob(fm: FeatureMap, local_head: Tensor) -> Tensor:
    """Per-location foreground probability from the same local head."""
    if local_head.data.shape != (fm.channels,):
        raise ShapeMismatchError(
            f"instance_prob: head {local_head.data.shape} vs features "
            f"[*, {fm.channels}]"
        )
    return ad.sigmoid(ad.rows_dot(fm.features, local_head))


def unlabeled_mil_loss(fg_prob: Tensor, bg_prob: Tensor) -> Tensor:
    """Bag-level loss with pseudo-labels substituted: -[log P_f + log(1 - P_b)]."""
    return ad.neg(ad.add(ad.log(fg_prob), ad.log(ad.sub(1.0, bg_prob))))


def labeled_instance_loss(inst_probs: Tensor, mask) -> Tensor:
    """Per-voxel cross entropy of the local head on an annotated volume."""
    return summed_cross_entropy(inst_probs, mask)


def adaptive_lambda(att_probs) -> float:
    """Reliability of the unlabeled term: the peak attention probability.

    Returned as a plain float so it stays constant during the backward
    pass.
    """
    values = att_probs.data if isinstance(att_probs, Tensor) else np.asarray(att_probs)
    if values.size == 0:
        raise ShapeMismatchError("adaptive_lambda: empty probability field")
    return float(values.max())


def local_loss(image_label: int, has_voxel_labels: bool, scores: LocalScores,
               counts: SupervisionCounts) -> Tensor:
    """Per-sample contribution to the local objective.

    Negatives contribute nothing.  Voxel-annotated positives contribute
    their attention and instance losses scaled by 1/(labeled positive
    count); unlabeled positives contribute the bag loss scaled by
    reliability/(unlabeled positive count).  A missing unlabeled term
    (degenerate separation, or no unlabeled positives in the split)
    contributes zero for the iteration.
    """
    if int(image_label) == 0:
        return Tensor(0.0)
    if has_voxel_labels:
        terms = [t for t in (scores.attention_term, scores.labeled_term)
                 if t is not None]
        if not terms:
            raise ShapeMismatchError("local_loss: labeled branch missing its terms")
        if counts.labeled_positives < 1:
            raise ShapeMismatchError(
                "local_loss: labeled positive present but labeled count is 0"
            )
        combined = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
        return ad.mul(combined, 1.0 / counts.labeled_positives)
    if scores.unlabeled_term is None or counts.unlabeled_positives < 1:
        return Tensor(0.0)
    if scores.reliability is None:
        raise ShapeMismatchError("local_loss: unlabeled branch missing reliability")
    return ad.mul(
        scores.unlabeled_term,
        scores.reliability / counts.unlabeled_positives,
    )
