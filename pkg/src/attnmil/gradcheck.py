"""Whole-objective gradient verification against central finite differences.

Builds a tiny three-sample dataset (annotated positive, unlabeled
positive, negative), assembles the full training objective with the
group assignment and reliability weight frozen at the base point
(matching their stop-gradient role in training), and compares the
reverse-mode gradient of every parameter with a central difference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import attention_loss
from .autodiff import Tape, Tensor
from .backbone import BackboneConfig, ModelParams, init_params
from .data import VolumeSample
from .global_stream import global_loss
from .local_stream import (
    LocalScores,
    SupervisionCounts,
    adaptive_lambda,
    bag_feature,
    bag_prob,
    local_loss,
    labeled_instance_loss,
    unlabeled_mil_loss,
)
from .separation import separate_regions
from .training import forward_volume, overall_loss

REL_ERROR_FLOOR = 1e-4


@dataclass
class GradientCheckResult:
    max_rel_error: float
    per_tensor: dict
    parameters_checked: int
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def build_toy_dataset(dims=(4, 8, 8), seed: int = 0) -> list[VolumeSample]:
    """One annotated positive, one unlabeled positive, one negative."""
    rng = np.random.default_rng(seed)
    d, h, w = dims

    def blob_mask():
        mask = np.zeros(dims, dtype=np.uint8)
        cz = int(rng.integers(1, d - 1))
        cy = int(rng.integers(2, h - 2))
        cx = int(rng.integers(2, w - 2))
        mask[max(0, cz - 1) : cz + 1, cy - 1 : cy + 2, cx - 1 : cx + 2] = 1
        return mask

    def voxels():
        return rng.uniform(0.0, 1.0, size=dims).astype(np.float32)

    return [
        VolumeSample("toy_labeled", voxels(), blob_mask(), 1, True),
        VolumeSample("toy_unlabeled", voxels(), blob_mask(), 1, False),
        VolumeSample("toy_negative", voxels(), np.zeros(dims, np.uint8), 0, False),
    ]


def assembled_loss(samples, params: ModelParams, counts: SupervisionCounts,
                   beta: float, frozen: dict | None = None):
    """Sum of per-sample objectives over the toy set.

    When ``frozen`` is None the separation and reliability of unlabeled
    positives are computed here and returned for reuse, so finite
    difference probes evaluate the same piecewise branch as the base
    point.
    """
    capture = frozen is None
    if capture:
        frozen = {}
    total = Tensor(0.0)
    for s in samples:
        fwd = forward_volume(
            s, params, range(s.depth),
            need_instances=(s.image_label == 1 and s.has_voxel_labels),
        )
        scores = LocalScores()
        if s.image_label == 1 and s.has_voxel_labels:
            mask_flat = s.mask.reshape(-1).astype(np.float64)
            scores.attention_term = attention_loss(fwd.att_probs, mask_flat)
            scores.labeled_term = labeled_instance_loss(fwd.inst_probs, mask_flat)
        elif s.image_label == 1:
            if capture:
                split = separate_regions(fwd.att_probs.data)
                frozen[s.id] = (
                    split.foreground,
                    split.background,
                    adaptive_lambda(fwd.att_probs),
                )
            fg_idx, bg_idx, lam = frozen[s.id]
            fg = bag_prob(bag_feature(fwd.features, fg_idx), params.local_head)
            bg = bag_prob(bag_feature(fwd.features, bg_idx), params.local_head)
            scores.unlabeled_term = unlabeled_mil_loss(fg, bg)
            scores.reliability = lam
        sample_loss = overall_loss(
            global_loss(fwd.global_probability, s.image_label),
            local_loss(s.image_label, s.has_voxel_labels, scores, counts),
            beta,
        )
        total = ad.add(total, sample_loss)
    return total, frozen


def run_gradient_check(dims=(4, 8, 8), channels: int = 4, seed: int = 0,
                       beta: float = 20.0, step: float = 1e-5) -> GradientCheckResult:
    """Compare analytic and finite-difference gradients for every parameter."""
    started = time.perf_counter()
    samples = build_toy_dataset(dims, seed)
    counts = SupervisionCounts(labeled_positives=1, unlabeled_positives=1)
    config = BackboneConfig(channels=channels)

    tape = Tape()
    params = init_params(config, seed=seed, tape=tape)
    params.zero_grad()
    loss, frozen = assembled_loss(samples, params, counts, beta)
    loss.backward()

    probe = init_params(config, seed=seed)

    def loss_at() -> float:
        value, _ = assembled_loss(samples, probe, counts, beta, frozen=frozen)
        return float(value.data)

    per_tensor = {}
    checked = 0
    worst = 0.0
    for (name, analytic_t), (_, probe_t) in zip(
        params.named_tensors(), probe.named_tensors()
    ):
        analytic = analytic_t.grad
        flat = probe_t.data.reshape(-1)
        rel_max = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at()
            flat[i] = orig - step
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            rel_max = max(rel_max, abs(a - numeric) / denom)
            checked += 1
        per_tensor[name] = rel_max
        worst = max(worst, rel_max)
    return GradientCheckResult(
        max_rel_error=worst,
        per_tensor=per_tensor,
        parameters_checked=checked,
        seconds=time.perf_counter() - started,
    )
