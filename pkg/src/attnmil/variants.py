"""Training variants: loss-path ablations and the self-training baseline.

``apply_variant`` maps a variant name onto the exact set of loss paths
it enables; every other computation is untouched, so runs with the
same seed match the full model bitwise up to the first divergent
operation.  The per-voxel pseudo-label baseline (``pvpl``) is a
two-stage teacher/student pipeline with its own entry point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import VolumeSample

VARIANTS = (
    "full",
    "global_only",
    "local_only",
    "max_pool",
    "avg_pool",
    "const_lambda",
    "pvpl",
    "labeled_only",
)


@dataclass
class VariantConfig:
    """Which training variant a run uses; exactly one per run."""

    variant: str = "full"
    lambda_const: float = 1.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )


@dataclass
class LossAssembly:
    """Resolved loss paths for the training loop."""

    include_global: bool = True
    include_attention: bool = True
    include_labeled_instance: bool = True
    include_unlabeled: bool = True
    pooling: str = "attention"
    lambda_mode: str = "adaptive"  # or "constant"
    lambda_const: float = 1.0
    drop_unlabeled_positives: bool = False

    def local_enabled(self) -> bool:
        return (
            self.include_attention
            or self.include_labeled_instance
            or self.include_unlabeled
        )

    def keep_sample(self, sample: VolumeSample) -> bool:
        if self.drop_unlabeled_positives:
            return not (sample.image_label == 1 and not sample.has_voxel_labels)
        return True


def apply_variant(config: VariantConfig) -> LossAssembly:
    """Resolve a variant into its loss assembly; unknown names are rejected."""
    config.validate()
    v = config.variant
    if v == "full":
        return LossAssembly()
    if v == "global_only":
        return LossAssembly(
            include_attention=False,
            include_labeled_instance=False,
            include_unlabeled=False,
        )
    if v == "local_only":
        return LossAssembly(include_global=False)
    if v == "max_pool":
        return LossAssembly(pooling="max")
    if v == "avg_pool":
        return LossAssembly(pooling="average")
    if v == "const_lambda":
        return LossAssembly(lambda_mode="constant", lambda_const=config.lambda_const)
    if v == "labeled_only":
        return LossAssembly(include_unlabeled=False, drop_unlabeled_positives=True)
    raise ValueError(
        "the pvpl variant is a two-stage pipeline; train it through "
        "pvpl_self_training"
    )


PVPL_TEACHER_FRACTION = 0.4
PVPL_PSEUDO_THRESHOLD = 0.5
_STUDENT_SEED_OFFSET = 1000003


def pvpl_assembly() -> LossAssembly:
    """Stage assembly of the self-training baseline: image-level supervision
    plus the per-voxel attention loss, no local head."""
    return LossAssembly(
        include_labeled_instance=False,
        include_unlabeled=False,
    )


@dataclass
class PvplResult:
    teacher: "TrainState"
    student: "TrainState"
    pseudo_masks: dict = field(default_factory=dict)


def mint_pseudo_masks(prob_field: np.ndarray,
                      threshold: float = PVPL_PSEUDO_THRESHOLD) -> np.ndarray:
    """Binarize a probability field into a per-voxel pseudo mask."""
    return (np.asarray(prob_field) >= threshold).astype(np.uint8)


def pvpl_self_training(dataset, config) -> PvplResult:
    """Teacher/student self-training on per-voxel pseudo-labels.

    Stage 1 trains the attention and global streams (voxel supervision
    only where real masks exist).  Stage 2 thresholds the teacher's
    attention probabilities on the unlabeled positives to mint
    per-voxel pseudo masks.  Stage 3 retrains from scratch with real
    and pseudo masks pooled.  The iteration budget splits 40/60
    between the stages.
    """
    from .training import forward_volume, train

    labeled = [s for s in dataset if s.image_label == 1 and s.has_voxel_labels]
    if not labeled:
        raise ValueError("pvpl_self_training: no labeled positives in the dataset")
    unlabeled_pos = [
        s for s in dataset if s.image_label == 1 and not s.has_voxel_labels
    ]

    teacher_iters = int(round(PVPL_TEACHER_FRACTION * config.max_iters))
    student_iters = config.max_iters - teacher_iters

    # Image-level supervision covers the whole set in both stages; the
    # attention loss only ever touches samples with voxel masks.
    teacher_cfg = replace(config, max_iters=teacher_iters)
    teacher = train(dataset, teacher_cfg, assembly=pvpl_assembly())

    pseudo_masks = {}
    eval_params = teacher.params.detached()
    student_data = [s for s in dataset if s.has_voxel_labels or s.image_label == 0]
    for s in unlabeled_pos:
        fwd = forward_volume(
            s, eval_params, range(s.depth), need_global=False, need_instances=False
        )
        probs = fwd.att_probs.data.reshape(s.voxels.shape)
        mask = mint_pseudo_masks(probs)
        pseudo_masks[s.id] = mask
        student_data.append(
            VolumeSample(s.id, s.voxels, mask, s.image_label, True)
        )

    student_cfg = replace(
        config,
        max_iters=student_iters,
        seed=config.seed + _STUDENT_SEED_OFFSET,
    )
    student = train(student_data, student_cfg, assembly=pvpl_assembly())
    return PvplResult(teacher=teacher, student=student, pseudo_masks=pseudo_masks)
