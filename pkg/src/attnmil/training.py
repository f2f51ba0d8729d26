"""Joint training loop: one random sample per iteration, plain SGD.

Every iteration computes the image-level loss; voxel-annotated
positives add their attention and instance losses, unlabeled positives
add the bag loss on groups separated by the current attention field.
The combined objective is global + beta * local.  The learning rate
decays exponentially on a fixed cadence.  Identical configuration and
seed reproduce the whole parameter trajectory bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import attention_loss, attention_probs, attention_values, \
    attention_weights
from .autodiff import Tape, Tensor
from .backbone import BackboneConfig, FeatureMap, ModelParams, extract_features, \
    init_params
from .data import VolumeSample
from .errors import DegenerateFieldError, NumericError
from .global_stream import global_loss, global_prob, pool_bag_feature, \
    pool_score_ablation
from .local_stream import LocalScores, SupervisionCounts, adaptive_lambda, \
    bag_feature, bag_prob, instance_prob, local_loss, unlabeled_mil_loss, \
    labeled_instance_loss
from .separation import separate_regions
from .variants import LossAssembly, VariantConfig, apply_variant

log = logging.getLogger(__name__)

# Stable across seeds for the default synthetic task; the summed
# per-voxel losses under beta=20 make anything much hotter collapse the
# attention field.
DEFAULT_LR = 5e-5


@dataclass
class TrainConfig:
    max_iters: int = 3000
    lr: float = DEFAULT_LR
    beta: float = 20.0
    decay_gamma: float = 0.99
    decay_interval: int | None = None  # default: max_iters // 100
    seed: int = 0
    slice_interval_range: tuple = (1, 5)
    variant: VariantConfig = field(default_factory=VariantConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def validate(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.decay_gamma <= 1.0:
            raise ValueError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be nonnegative, got {self.max_iters}")
        lo, hi = self.slice_interval_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad slice interval range {self.slice_interval_range}")
        self.variant.validate()
        self.backbone.validate()

    def resolved_decay_interval(self) -> int:
        if self.decay_interval is not None:
            return max(1, int(self.decay_interval))
        return max(1, self.max_iters // 100)


@dataclass
class IterationRecord:
    iteration: int
    global_loss: float
    labeled_local_loss: float
    unlabeled_local_loss: float
    lr: float


@dataclass
class TrainState:
    params: ModelParams
    history: list[IterationRecord]
    counts: SupervisionCounts
    config: TrainConfig
    unlabeled_branch_visits: int = 0
    degenerate_skips: int = 0


@dataclass
class VolumeForward:
    features: FeatureMap
    raw: Tensor
    att_probs: Tensor
    global_probability: Tensor | None
    inst_probs: Tensor | None


def sample_slices(depth: int, rng, interval_range=(1, 5)) -> list[int]:
    """Pick slices 0, k, 2k, ... with k drawn uniformly from the range."""
    if depth < 1:
        raise ValueError(f"depth must be positive, got {depth}")
    lo, hi = interval_range
    k = int(rng.integers(lo, hi + 1))
    return list(range(0, depth, k))


def overall_loss(global_term: Tensor, local_term: Tensor, beta: float) -> Tensor:
    """Combined objective: global + beta * local."""
    return ad.add(global_term, ad.mul(local_term, float(beta)))


def sgd_step(params: ModelParams, lr: float) -> None:
    """In-place gradient-descent update p <- p - lr * grad for every tensor."""
    updates = []
    for name, t in params.named_tensors():
        if t.grad is None:
            raise NumericError(f"sgd_step: missing gradient for {name}")
        updates.append((t, t.grad))
    for t, g in updates:
        t.data -= lr * g


def forward_volume(sample: VolumeSample, params: ModelParams, slice_indices,
                   pooling: str = "attention", need_global: bool = True,
                   need_instances: bool = True) -> VolumeForward:
    """Shared forward pass: features, attention fields, and head outputs."""
    fm = extract_features(sample, params, slice_indices)
    raw = attention_values(fm, params.attention_head)
    probs = attention_probs(raw)
    gp = None
    if need_global:
        if pooling == "attention":
            weights = attention_weights(raw)
            gp = global_prob(pool_bag_feature(fm, weights), params.global_head)
        else:
            gp = ad.sigmoid(pool_score_ablation(raw, pooling))
    q = instance_prob(fm, params.local_head) if need_instances else None
    return VolumeForward(fm, raw, probs, gp, q)


def count_positives(samples) -> SupervisionCounts:
    labeled = sum(1 for s in samples if s.image_label == 1 and s.has_voxel_labels)
    unlabeled = sum(
        1 for s in samples if s.image_label == 1 and not s.has_voxel_labels
    )
    return SupervisionCounts(labeled, unlabeled)


def _iteration_loss(sample: VolumeSample, params: ModelParams, slice_idx,
                    assembly: LossAssembly, counts: SupervisionCounts,
                    beta: float):
    """One sample's objective; returns (loss, record pieces, visited, skipped)."""
    labeled_branch = (
        assembly.local_enabled()
        and sample.image_label == 1
        and sample.has_voxel_labels
    )
    fwd = forward_volume(
        sample, params, slice_idx,
        pooling=assembly.pooling,
        need_global=assembly.include_global,
        need_instances=labeled_branch and assembly.include_labeled_instance,
    )
    global_term = (
        global_loss(fwd.global_probability, sample.image_label)
        if assembly.include_global
        else Tensor(0.0)
    )
    scores = LocalScores()
    labeled_val = 0.0
    unlabeled_val = 0.0
    visited_unlabeled = False
    skipped_degenerate = False

    if assembly.local_enabled() and sample.image_label == 1:
        if labeled_branch:
            mask_flat = sample.mask[slice_idx].reshape(-1).astype(np.float64)
            if assembly.include_attention:
                scores.attention_term = attention_loss(fwd.att_probs, mask_flat)
                labeled_val += float(scores.attention_term.data)
            if assembly.include_labeled_instance:
                scores.labeled_term = labeled_instance_loss(fwd.inst_probs, mask_flat)
                labeled_val += float(scores.labeled_term.data)
        elif assembly.include_unlabeled:
            visited_unlabeled = True
            try:
                split = separate_regions(fwd.att_probs.data)
            except DegenerateFieldError:
                skipped_degenerate = True
                log.debug("degenerate attention field on %s; unlabeled term skipped",
                          sample.id)
            else:
                fg = bag_prob(bag_feature(fwd.features, split.foreground),
                              params.local_head)
                bg = bag_prob(bag_feature(fwd.features, split.background),
                              params.local_head)
                scores.unlabeled_term = unlabeled_mil_loss(fg, bg)
                scores.reliability = (
                    adaptive_lambda(fwd.att_probs)
                    if assembly.lambda_mode == "adaptive"
                    else assembly.lambda_const
                )
                unlabeled_val = float(scores.unlabeled_term.data)

    local_term = local_loss(sample.image_label, labeled_branch, scores, counts)
    loss = overall_loss(global_term, local_term, beta)
    g_val = float(global_term.data)
    return loss, (g_val, labeled_val, unlabeled_val), visited_unlabeled, \
        skipped_degenerate


def train(dataset, config: TrainConfig,
          assembly: LossAssembly | None = None) -> TrainState:
    """Run the per-sample training loop and return parameters plus history.

    ``assembly`` defaults to the resolution of ``config.variant``; the
    self-training baseline passes its stage assembly explicitly.
    """
    config.validate()
    if assembly is None:
        assembly = apply_variant(config.variant)
    samples = [s for s in dataset if assembly.keep_sample(s)]
    if not samples:
        raise ValueError("train: dataset is empty after variant filtering")
    counts = count_positives(samples)
    if assembly.local_enabled() and assembly.include_attention \
            and counts.labeled_positives == 0:
        raise ValueError(
            "train: local stream is active but no labeled positives are present"
        )

    rng = np.random.default_rng(config.seed)
    tape = Tape()
    params = init_params(config.backbone, rng=rng, tape=tape)
    lr = config.lr
    decay_every = config.resolved_decay_interval()

    history: list[IterationRecord] = []
    visits = 0
    skips = 0
    for it in range(config.max_iters):
        sample = samples[int(rng.integers(len(samples)))]
        slice_idx = sample_slices(sample.depth, rng, config.slice_interval_range)
        params.zero_grad()
        loss, parts, visited, skipped = _iteration_loss(
            sample, params, slice_idx, assembly, counts, config.beta
        )
        visits += int(visited)
        skips += int(skipped)
        if not np.isfinite(loss.data):
            raise NumericError(
                f"non-finite loss at iteration {it} on sample {sample.id}: "
                f"global={parts[0]}, labeled={parts[1]}, unlabeled={parts[2]}"
            )
        if loss.tape is not None:
            loss.backward()
        else:
            tape.clear()
        sgd_step(params, lr)
        history.append(IterationRecord(it, parts[0], parts[1], parts[2], lr))
        if (it + 1) % decay_every == 0:
            lr *= config.decay_gamma

    return TrainState(params, history, counts, config, visits, skips)


def write_history_csv(state: TrainState, path) -> None:
    """Loss history as CSV; components are raw per-sample values."""
    lines = ["iteration,global_loss,labeled_local_loss,unlabeled_local_loss,lr"]
    for r in state.history:
        lines.append(
            f"{r.iteration},{r.global_loss!r},{r.labeled_local_loss!r},"
            f"{r.unlabeled_local_loss!r},{r.lr!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_history_csv(path) -> list[IterationRecord]:
    lines = Path(path).read_text().strip().splitlines()
    records = []
    for line in lines[1:]:
        it, g, lab, unl, lr = line.split(",")
        records.append(IterationRecord(int(it), float(g), float(lab), float(unl),
                                       float(lr)))
    return records
