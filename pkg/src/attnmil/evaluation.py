"""Test-time decision rules, segmentation/classification metrics, reports.

A volume is called positive when its image-level probability reaches
0.5.  For predicted positives, a voxel is called foreground when the
attention probability and the instance probability sum to at least 1.
Overlap is scored per case on ground-truth-positive volumes only (the
coefficient is undefined on empty truth); classification counts cover
every case.  Reports are a JSON summary plus a per-case CSV from which
every aggregate is recomputable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ModelParams
from .errors import ShapeMismatchError, UndefinedMetricError
from .training import forward_volume

IMAGE_THRESHOLD = 0.5
VOXEL_SUM_THRESHOLD = 1.0
DECODE_MODES = ("combined", "attention")


def predict_image(global_probability: float) -> int:
    """Image-level decision: positive iff the probability reaches 0.5."""
    return 1 if global_probability >= IMAGE_THRESHOLD else 0


def predict_voxels(att_probs: np.ndarray, inst_probs: np.ndarray) -> np.ndarray:
    """Voxel decision: foreground iff the two probabilities sum to >= 1."""
    att_probs = np.asarray(att_probs)
    inst_probs = np.asarray(inst_probs)
    if att_probs.shape != inst_probs.shape:
        raise ShapeMismatchError(
            f"predict_voxels: fields {att_probs.shape} vs {inst_probs.shape}"
        )
    return (att_probs + inst_probs >= VOXEL_SUM_THRESHOLD).astype(np.uint8)


def dsc(pred, truth) -> float:
    """Overlap coefficient 2|A&B| / (|A|+|B|); undefined when both are empty."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"dsc: masks {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        raise UndefinedMetricError("dsc: both masks are empty")
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


@dataclass
class ClassificationMetrics:
    sensitivity: float | None
    specificity: float | None
    tp: int
    fp: int
    tn: int
    fn: int


def classification_metrics(pred_labels, true_labels) -> ClassificationMetrics:
    """Sensitivity and specificity from confusion counts.

    A truth list with a single class yields a partial result: the
    metric without a defined denominator comes back as None.
    """
    pred = np.asarray(pred_labels, dtype=int)
    true = np.asarray(true_labels, dtype=int)
    if pred.shape != true.shape:
        raise ShapeMismatchError(
            f"classification_metrics: {pred.shape} vs {true.shape}"
        )
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    specificity = tn / (tn + fp) if (tn + fp) > 0 else None
    return ClassificationMetrics(sensitivity, specificity, tp, fp, tn, fn)


@dataclass
class CaseResult:
    case_id: str
    true_label: int
    pred_label: int
    global_probability: float
    dsc: float | None  # None for cases with empty ground truth


@dataclass
class MetricsReport:
    cases: list[CaseResult]
    mean_dsc: float | None
    std_dsc: float | None
    max_dsc: float | None
    median_dsc: float | None
    sensitivity: float | None
    specificity: float | None
    confusion: dict
    config: dict = field(default_factory=dict)

    @property
    def has_dsc_section(self) -> bool:
        return self.mean_dsc is not None


def aggregate_cases(cases, config=None) -> MetricsReport:
    """Build the report aggregates from per-case rows."""
    scored = [c.dsc for c in cases if c.dsc is not None]
    if scored:
        arr = np.asarray(scored, dtype=np.float64)
        stats = (
            float(arr.mean()),
            float(arr.std()),
            float(arr.max()),
            float(np.median(arr)),
        )
    else:
        stats = (None, None, None, None)
    cls = classification_metrics(
        [c.pred_label for c in cases], [c.true_label for c in cases]
    )
    return MetricsReport(
        cases=list(cases),
        mean_dsc=stats[0],
        std_dsc=stats[1],
        max_dsc=stats[2],
        median_dsc=stats[3],
        sensitivity=cls.sensitivity,
        specificity=cls.specificity,
        confusion={"tp": cls.tp, "fp": cls.fp, "tn": cls.tn, "fn": cls.fn},
        config=dict(config or {}),
    )


def evaluate_model(samples, params: ModelParams, pooling: str = "attention",
                   decode: str = "combined", config_echo=None) -> MetricsReport:
    """Score a model on a list of samples using the full slice lattice."""
    if decode not in DECODE_MODES:
        raise ValueError(f"unknown decode mode {decode!r}; expected {DECODE_MODES}")
    frozen = params.detached()
    cases = []
    for s in samples:
        fwd = forward_volume(
            s, frozen, range(s.depth), pooling=pooling,
            need_instances=(decode == "combined"),
        )
        prob = float(fwd.global_probability.data)
        label = predict_image(prob)
        score = None
        if s.mask.any():
            if label == 1:
                att = fwd.att_probs.data.reshape(s.voxels.shape)
                inst = (
                    fwd.inst_probs.data.reshape(s.voxels.shape)
                    if decode == "combined"
                    else att
                )
                pred_mask = predict_voxels(att, inst)
            else:
                pred_mask = np.zeros(s.voxels.shape, dtype=np.uint8)
            score = dsc(pred_mask, s.mask)
        cases.append(CaseResult(s.id, int(s.image_label), label, prob, score))
    echo = dict(config_echo or {})
    echo.setdefault("pooling", pooling)
    echo.setdefault("decode", decode)
    return aggregate_cases(cases, echo)


# ---------------------------------------------------------------------------
# report files


def emit_report(report: MetricsReport, out_dir) -> dict:
    """Write summary.json and cases.csv; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.json"
    cases_path = out / "cases.csv"

    summary = {
        "version": 1,
        "num_cases": len(report.cases),
        "num_scored_cases": sum(1 for c in report.cases if c.dsc is not None),
        "dsc_section_present": report.has_dsc_section,
        "mean_dsc": report.mean_dsc,
        "std_dsc": report.std_dsc,
        "max_dsc": report.max_dsc,
        "median_dsc": report.median_dsc,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "confusion": report.confusion,
        "config": report.config,
    }
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")

    lines = ["case_id,true_label,pred_label,global_prob,dsc"]
    for c in report.cases:
        score = "" if c.dsc is None else repr(c.dsc)
        lines.append(
            f"{c.case_id},{c.true_label},{c.pred_label},"
            f"{c.global_probability!r},{score}"
        )
    cases_path.write_text("\n".join(lines) + "\n")
    return {"summary": summary_path, "cases": cases_path}


def read_report(out_dir) -> MetricsReport:
    """Parse an emitted report back; aggregates come from summary.json."""
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text())
    cases = read_cases_csv(out / "cases.csv")
    return MetricsReport(
        cases=cases,
        mean_dsc=summary["mean_dsc"],
        std_dsc=summary["std_dsc"],
        max_dsc=summary["max_dsc"],
        median_dsc=summary["median_dsc"],
        sensitivity=summary["sensitivity"],
        specificity=summary["specificity"],
        confusion=summary["confusion"],
        config=summary.get("config", {}),
    )


def read_cases_csv(path) -> list[CaseResult]:
    lines = Path(path).read_text().strip().splitlines()
    cases = []
    for line in lines[1:]:
        case_id, true_label, pred_label, prob, score = line.split(",")
        cases.append(
            CaseResult(
                case_id,
                int(true_label),
                int(pred_label),
                float(prob),
                float(score) if score else None,
            )
        )
    return cases
