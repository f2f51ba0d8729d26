"""Seed-sweep harness: generate data, train a variant, score it.

Used by the ablation command and the acceptance suite.  Each seed gets
its own train/test split; the test split's generator seed is offset so
train and test volumes never coincide.  Results aggregate per variant
across seeds into a plain table that serializes to CSV.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .backbone import BackboneConfig
from .data import synthesize_samples
from .evaluation import MetricsReport, evaluate_model
from .training import TrainConfig, TrainState, train
from .variants import VariantConfig, pvpl_self_training

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 90001

# Pooling used at evaluation time must match what the variant trained with.
_EVAL_POOLING = {"max_pool": "max", "avg_pool": "average"}
# The self-training baseline has no local head; it decodes from the
# attention field alone.
_EVAL_DECODE = {"pvpl": "attention"}


@dataclass
class SplitSpec:
    """Composition of one train/test split."""

    labeled: int = 8
    unlabeled: int = 8
    negatives: int = 16
    test_pos: int = 8
    test_neg: int = 8
    dims: tuple = (12, 24, 24)


@dataclass
class RunResult:
    seed: int
    variant: str
    mean_dsc: float | None
    median_dsc: float | None
    sensitivity: float | None
    specificity: float | None
    train_seconds: float
    report: MetricsReport
    state: TrainState | None = None


def default_train_config(**overrides) -> TrainConfig:
    """Training configuration the sweeps use unless told otherwise."""
    merged = dict(
        max_iters=8000,
        lr=5e-5,
        beta=20.0,
        backbone=BackboneConfig(channels=8),
    )
    merged.update(overrides)
    return TrainConfig(**merged)


def build_split(seed: int, spec: SplitSpec):
    """Deterministic train and test sample lists for one seed."""
    train_samples = synthesize_samples(
        spec.labeled + spec.unlabeled,
        spec.negatives,
        spec.labeled,
        dims=spec.dims,
        seed=seed,
        id_prefix="train",
    )
    test_samples = synthesize_samples(
        spec.test_pos,
        spec.test_neg,
        0,
        dims=spec.dims,
        seed=seed + TEST_SEED_OFFSET,
        id_prefix="test",
    )
    return train_samples, test_samples


def run_variant(train_samples, test_samples, variant: str, seed: int,
                base_config: TrainConfig, keep_state: bool = False) -> RunResult:
    """Train one variant on a prepared split and score it on the test set."""
    config = replace(
        base_config,
        seed=seed,
        variant=VariantConfig(
            variant=variant, lambda_const=base_config.variant.lambda_const
        ),
    )
    started = time.perf_counter()
    if variant == "pvpl":
        result = pvpl_self_training(train_samples, config)
        state = result.student
    else:
        state = train(train_samples, config)
    elapsed = time.perf_counter() - started

    report = evaluate_model(
        test_samples,
        state.params,
        pooling=_EVAL_POOLING.get(variant, "attention"),
        decode=_EVAL_DECODE.get(variant, "combined"),
        config_echo={"variant": variant, "seed": seed},
    )
    log.info(
        "seed=%d variant=%s: mean_dsc=%s sens=%s spec=%s (%.1fs)",
        seed, variant, report.mean_dsc, report.sensitivity, report.specificity,
        elapsed,
    )
    return RunResult(
        seed=seed,
        variant=variant,
        mean_dsc=report.mean_dsc,
        median_dsc=report.median_dsc,
        sensitivity=report.sensitivity,
        specificity=report.specificity,
        train_seconds=elapsed,
        report=report,
        state=state if keep_state else None,
    )


def run_sweep(variants, seeds, spec: SplitSpec | None = None,
              base_config: TrainConfig | None = None) -> list[RunResult]:
    """All (variant, seed) combinations, sharing splits within a seed."""
    spec = spec or SplitSpec()
    base_config = base_config or default_train_config()
    results = []
    for seed in seeds:
        train_samples, test_samples = build_split(seed, spec)
        for variant in variants:
            results.append(
                run_variant(train_samples, test_samples, variant, seed, base_config)
            )
    return results


def mean_over_seeds(results, variant: str, attr: str = "mean_dsc") -> float:
    values = [getattr(r, attr) for r in results if r.variant == variant]
    values = [v for v in values if v is not None]
    if not values:
        raise ValueError(f"no {attr} values recorded for variant {variant}")
    return sum(values) / len(values)


def write_results_csv(results, path) -> None:
    lines = ["seed,variant,mean_dsc,median_dsc,sensitivity,specificity,"
             "train_seconds"]
    for r in results:
        def cell(v):
            return "" if v is None else repr(v)

        lines.append(
            f"{r.seed},{r.variant},{cell(r.mean_dsc)},{cell(r.median_dsc)},"
            f"{cell(r.sensitivity)},{cell(r.specificity)},{r.train_seconds:.3f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
