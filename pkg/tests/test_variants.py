"""Tests for variant resolution and the self-training baseline."""

import numpy as np
import pytest

from attnmil import training as tr
from attnmil.autodiff import Tape
from attnmil.backbone import BackboneConfig, init_params
from attnmil.data import synthesize_samples
from attnmil.local_stream import SupervisionCounts
from attnmil.variants import (
    VariantConfig,
    apply_variant,
    mint_pseudo_masks,
    pvpl_assembly,
    pvpl_self_training,
)

TINY = BackboneConfig(channels=4)


def tiny_dataset(seed=3):
    return synthesize_samples(2, 2, 1, dims=(10, 12, 12), seed=seed)


class TestApplyVariant:
    def test_full_enables_everything(self):
        asm = apply_variant(VariantConfig("full"))
        assert asm.include_global and asm.include_attention
        assert asm.include_labeled_instance and asm.include_unlabeled
        assert asm.pooling == "attention" and asm.lambda_mode == "adaptive"

    def test_global_only_disables_local_paths(self):
        asm = apply_variant(VariantConfig("global_only"))
        assert asm.include_global and not asm.local_enabled()

    def test_local_only_disables_global(self):
        asm = apply_variant(VariantConfig("local_only"))
        assert not asm.include_global and asm.local_enabled()

    def test_pooling_swaps(self):
        assert apply_variant(VariantConfig("max_pool")).pooling == "max"
        assert apply_variant(VariantConfig("avg_pool")).pooling == "average"

    def test_const_lambda_propagates_value(self):
        asm = apply_variant(VariantConfig("const_lambda", lambda_const=0.7))
        assert asm.lambda_mode == "constant" and asm.lambda_const == 0.7

    def test_labeled_only_drops_unlabeled_positives(self):
        asm = apply_variant(VariantConfig("labeled_only"))
        samples = tiny_dataset()
        kept = [s for s in samples if asm.keep_sample(s)]
        assert all(s.has_voxel_labels or s.image_label == 0 for s in kept)
        assert len(kept) == 3

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown variant"):
            apply_variant(VariantConfig("bogus"))

    def test_pvpl_is_not_a_loss_assembly(self):
        with pytest.raises(ValueError, match="pvpl"):
            apply_variant(VariantConfig("pvpl"))


class TestVariantLossPaths:
    def test_global_only_zeroes_local_contribution(self):
        samples = tiny_dataset()
        labeled = next(s for s in samples if s.has_voxel_labels)
        params = init_params(TINY, seed=1, tape=Tape())
        counts = SupervisionCounts(1, 1)
        loss, parts, _, _ = tr._iteration_loss(
            labeled, params, [0, 1], apply_variant(VariantConfig("global_only")),
            counts, 20.0,
        )
        assert float(loss.data) == parts[0]
        assert parts[1] == 0.0 and parts[2] == 0.0

    def test_const_lambda_changes_unlabeled_weight(self):
        samples = tiny_dataset()
        unlabeled = next(
            s for s in samples if s.image_label == 1 and not s.has_voxel_labels
        )
        counts = SupervisionCounts(1, 1)

        def run(variant):
            params = init_params(TINY, seed=2, tape=Tape())
            loss, parts, _, _ = tr._iteration_loss(
                unlabeled, params, [0, 1], apply_variant(variant), counts, 1.0
            )
            return float(loss.data) - parts[0], parts[2]

        adaptive_term, raw = run(VariantConfig("full"))
        const_term, raw2 = run(VariantConfig("const_lambda", lambda_const=1.0))
        assert raw == raw2  # same forward, same bag loss
        # adaptive weight is max_x p_x < 1, so the constant-1 term is larger
        assert const_term == pytest.approx(raw, rel=1e-12)
        assert 0.0 < adaptive_term < const_term

    def test_labeled_only_run_never_visits_unlabeled_branch(self):
        samples = tiny_dataset()
        config = tr.TrainConfig(
            max_iters=40, lr=1e-4, seed=5, backbone=TINY,
            variant=VariantConfig("labeled_only"),
        )
        state = tr.train(samples, config)
        assert state.unlabeled_branch_visits == 0
        assert state.counts.unlabeled_positives == 0

    def test_full_run_visits_unlabeled_branch(self):
        samples = tiny_dataset()
        config = tr.TrainConfig(max_iters=40, lr=1e-4, seed=5, backbone=TINY)
        state = tr.train(samples, config)
        assert state.unlabeled_branch_visits > 0


class TestMintPseudoMasks:
    def test_threshold_convention(self):
        probs = np.array([0.49, 0.5, 0.51, 0.1])
        np.testing.assert_array_equal(mint_pseudo_masks(probs), [0, 1, 1, 0])

    def test_perfect_probabilities_reproduce_truth(self):
        truth = np.zeros((4, 5), dtype=np.uint8)
        truth[1:3, 2:4] = 1
        probs = np.where(truth == 1, 0.9, 0.1)
        np.testing.assert_array_equal(mint_pseudo_masks(probs), truth)


class TestPvpl:
    def test_assembly_has_no_local_head_paths(self):
        asm = pvpl_assembly()
        assert asm.include_global and asm.include_attention
        assert not asm.include_labeled_instance and not asm.include_unlabeled

    def test_requires_labeled_positives(self):
        samples = [s for s in tiny_dataset() if not s.has_voxel_labels]
        config = tr.TrainConfig(max_iters=10, seed=1, backbone=TINY)
        with pytest.raises(ValueError, match="labeled positives"):
            pvpl_self_training(samples, config)

    def test_stage_budget_split(self):
        samples = tiny_dataset()
        config = tr.TrainConfig(max_iters=50, lr=1e-4, seed=1, backbone=TINY)
        result = pvpl_self_training(samples, config)
        assert len(result.teacher.history) == 20
        assert len(result.student.history) == 30

    def test_pseudo_masks_cover_unlabeled_positives(self):
        samples = tiny_dataset()
        config = tr.TrainConfig(max_iters=20, lr=1e-4, seed=1, backbone=TINY)
        result = pvpl_self_training(samples, config)
        unlabeled_ids = {
            s.id for s in samples if s.image_label == 1 and not s.has_voxel_labels
        }
        assert set(result.pseudo_masks) == unlabeled_ids
        for s in samples:
            if s.id in result.pseudo_masks:
                assert result.pseudo_masks[s.id].shape == s.voxels.shape

    def test_empty_unlabeled_set_degenerates_to_retraining(self):
        samples = [s for s in tiny_dataset()
                   if s.has_voxel_labels or s.image_label == 0]
        config = tr.TrainConfig(max_iters=20, lr=1e-4, seed=1, backbone=TINY)
        result = pvpl_self_training(samples, config)
        assert result.pseudo_masks == {}
        assert result.student.counts.labeled_positives == 1
        assert result.student.counts.unlabeled_positives == 0

    def test_student_counts_include_pseudo_labeled(self):
        samples = tiny_dataset()
        config = tr.TrainConfig(max_iters=20, lr=1e-4, seed=1, backbone=TINY)
        result = pvpl_self_training(samples, config)
        assert result.student.counts.labeled_positives == 2
        assert result.student.counts.unlabeled_positives == 0
