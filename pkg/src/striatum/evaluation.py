"""Stratified k-fold cross-validation and the six report metrics.

Out-of-fold predictions from all folds are pooled into a single confusion
matrix (early-PD positive, laid out [[TP, FN], [FP, TN]]) and a single set
of score-based metrics, so the matrix total always equals the dataset
size. AUC uses the Mann-Whitney formulation with half credit for ties;
average precision is the stepwise sum over descending-score groups.

SWEDD hold-out evaluation scores models trained without SWEDD data against
the convention that a SWEDD scan is ground-truth negative.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import models as models_mod
from .errors import ConfigError, TrainingError
from .ingest import HOLDOUT, Label, LabeledSample
from .models import ModelSpec, TrainConfig, TrainedModel
from .rng import Xoshiro256pp, derive_seed

REPORT_SCHEMA_VERSION = 1


@dataclass
class FoldPlan:
    """Sample-to-fold assignment; per-class counts across folds differ by <= 1."""

    k: int
    assignments: np.ndarray
    seed: int

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)


@dataclass
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def as_rows(self) -> list[list[int]]:
        return [[self.tp, self.fn], [self.fp, self.tn]]


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: Optional[float]
    auc: Optional[float]
    apr: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    folds: list[dict] = field(default_factory=list)
    predictions: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def stratified_kfold(labels: Sequence, k: int, seed: int) -> FoldPlan:
    """Shuffle each class with its own substream, then deal round-robin."""
    labels = list(labels)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    values = [getattr(l, "value", l) for l in labels]
    classes = sorted(set(values))
    assignments = np.full(len(labels), -1, dtype=int)
    for ci, cls in enumerate(classes):
        members = np.flatnonzero(np.array(values, dtype=object) == cls)
        if len(members) < k:
            raise ConfigError(
                f"k={k} exceeds the {len(members)} samples of class {cls!r}"
            )
        rng = Xoshiro256pp(derive_seed(seed, ci))
        shuffled = members[rng.permutation(len(members))]
        for j, idx in enumerate(shuffled):
            assignments[idx] = j % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def metrics_from_confusion(cm: ConfusionMatrix) -> dict[str, Optional[float]]:
    """Accuracy, precision, recall, specificity; None where a divisor is zero."""

    def ratio(num: int, den: int) -> Optional[float]:
        return num / den if den > 0 else None

    return {
        "accuracy": ratio(cm.tp + cm.tn, cm.total),
        "precision": ratio(cm.tp, cm.tp + cm.fp),
        "recall": ratio(cm.tp, cm.tp + cm.fn),
        "specificity": ratio(cm.tn, cm.tn + cm.fp),
    }


def _check_binary(labels: np.ndarray) -> None:
    if labels.min() == labels.max():
        raise ValueError("need both classes present, got a single class")


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    # midranks handle ties exactly
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Stepwise AP over descending scores with tied scores grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive sample")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    ap = 0.0
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        prev_recall = tp / n_pos
        tp += int((y_sorted[i : j + 1] == 1).sum())
        fp += int((y_sorted[i : j + 1] != 1).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        i = j + 1
    return float(ap)


def confusion_from_predictions(
    predicted_positive: np.ndarray, actual_positive: np.ndarray
) -> ConfusionMatrix:
    pp = np.asarray(predicted_positive, dtype=bool)
    ap = np.asarray(actual_positive, dtype=bool)
    return ConfusionMatrix(
        tp=int((pp & ap).sum()),
        fn=int((~pp & ap).sum()),
        fp=int((pp & ~ap).sum()),
        tn=int((~pp & ~ap).sum()),
    )


Fitter = Callable[[ModelSpec, TrainConfig, Sequence[LabeledSample]], TrainedModel]
Scorer = Callable[[TrainedModel, Sequence[LabeledSample]], np.ndarray]


def _default_scorer(model: TrainedModel, samples: Sequence[LabeledSample]) -> np.ndarray:
    pixels = np.stack([s.image.pixels for s in samples])
    return models_mod.score_batch(model, pixels)


def _run_fold(args):
    spec, cfg, samples, plan, fold, fitter, scorer = args
    test_idx = plan.fold_indices(fold)
    train_idx = np.flatnonzero(plan.assignments != fold)
    train = [samples[i] for i in train_idx]
    test = [samples[i] for i in test_idx]
    try:
        model = fitter(spec, cfg, train)
    except Exception as e:
        raise TrainingError(f"fold {fold}: training failed: {e}") from e
    return fold, test_idx, np.asarray(scorer(model, test), dtype=np.float64), model


def crossval(
    spec: ModelSpec,
    cfg: TrainConfig,
    samples: Sequence[LabeledSample],
    plan: FoldPlan,
    jobs: int = 1,
    fitter: Fitter = models_mod.fit,
    scorer: Scorer = _default_scorer,
) -> EvalReport:
    """Fit on k-1 folds, score the held-out fold, pool all out-of-fold scores.

    Per-fold model seeds are derived from (spec.seed, fold) so folds are
    independent and the whole run is reproducible. ``jobs`` > 1 trains folds
    in parallel processes (only with the default fitter/scorer).
    """
    samples = list(samples)
    if any(s.cohort_role == HOLDOUT for s in samples):
        raise ValueError("cross-validation data must not contain hold-out samples")
    if len(plan.assignments) != len(samples):
        raise ValueError("fold plan size does not match the dataset")

    fold_args = []
    for fold in range(plan.k):
        fold_spec = dataclasses.replace(spec, seed=derive_seed(spec.seed, fold))
        fold_args.append((fold_spec, cfg, samples, plan, fold, fitter, scorer))

    results = []
    if jobs > 1 and fitter is models_mod.fit and scorer is _default_scorer:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, fold_args))
    else:
        results = [_run_fold(a) for a in fold_args]

    n = len(samples)
    scores = np.zeros(n)
    fold_rows = []
    first_model = None
    for fold, test_idx, fold_scores, model in sorted(results, key=lambda r: r[0]):
        scores[test_idx] = fold_scores
        if first_model is None:
            first_model = model
        actual = np.array([samples[i].label == Label.EARLY_PD for i in test_idx])
        threshold = 0.0 if models_mod.is_margin_score(model) else 0.5
        predicted = fold_scores > threshold
        cm = confusion_from_predictions(predicted, actual)
        fold_rows.append(
            {
                "fold": fold,
                "n": int(len(test_idx)),
                "accuracy": metrics_from_confusion(cm)["accuracy"],
                "confusion": {"tp": cm.tp, "fn": cm.fn, "fp": cm.fp, "tn": cm.tn},
            }
        )

    actual = np.array([s.label == Label.EARLY_PD for s in samples])
    threshold = 0.0 if models_mod.is_margin_score(first_model) else 0.5
    predicted = scores > threshold
    cm = confusion_from_predictions(predicted, actual)
    basics = metrics_from_confusion(cm)
    labels01 = actual.astype(int)
    report = EvalReport(
        confusion=cm,
        accuracy=basics["accuracy"],
        auc=auc(scores, labels01),
        apr=average_precision(scores, labels01),
        precision=basics["precision"],
        recall=basics["recall"],
        specificity=basics["specificity"],
        folds=fold_rows,
        predictions=[
            {
                "id": s.image.source_id,
                "score": float(scores[i]),
                "label": s.label.value,
                "predicted": (Label.EARLY_PD if predicted[i] else Label.NORMAL).value,
            }
            for i, s in enumerate(samples)
        ],
        config={
            "family": spec.family,
            "model_seed": spec.seed,
            "plan_seed": plan.seed,
            "k": plan.k,
            "train_seed": cfg.seed,
            "n_samples": n,
            **({"reg_c": spec.reg_c} if spec.reg_c is not None else {}),
        },
    )
    return report


def evaluate_holdout(
    models: Sequence[TrainedModel], swedd_samples: Sequence[LabeledSample]
) -> list[dict]:
    """Score SWEDD hold-outs as ground-truth negatives; TN/FP per model."""
    swedd_samples = list(swedd_samples)
    if not swedd_samples:
        raise ValueError("hold-out evaluation needs at least one SWEDD sample")
    out = []
    for model in models:
        trained_on = model.train_meta.get("trained_labels")
        if trained_on and Label.SWEDD.value in trained_on:
            raise ValueError("model was trained on SWEDD samples; hold-out is invalid")
        pixels = np.stack([s.image.pixels for s in swedd_samples])
        for s in swedd_samples:
            models_mod._check_image(model, s.image)
        scores = models_mod.score_batch(model, pixels)
        threshold = 0.0 if models_mod.is_margin_score(model) else 0.5
        fp = int((scores > threshold).sum())
        tn = len(swedd_samples) - fp
        out.append(
            {
                "family": model.spec.family,
                "tn": tn,
                "fp": fp,
                "accuracy": tn / (tn + fp),
            }
        )
    return out


def report_to_dict(report: EvalReport, timestamp: Optional[str] = None) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "timestamp": timestamp
        if timestamp is not None
        else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": report.config,
        "confusion": {
            "tp": report.confusion.tp,
            "fn": report.confusion.fn,
            "fp": report.confusion.fp,
            "tn": report.confusion.tn,
        },
        "metrics": {
            "accuracy": report.accuracy,
            "auc": report.auc,
            "apr": report.apr,
            "precision": report.precision,
            "recall": report.recall,
            "specificity": report.specificity,
        },
        "folds": report.folds,
        "predictions": report.predictions,
    }


def emit_report(report: EvalReport, path, timestamp: Optional[str] = None) -> None:
    """Write the report JSON; everything but the timestamp field is reproducible."""
    doc = report_to_dict(report, timestamp)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def write_scores_csv(report: EvalReport, path) -> None:
    """Dump pooled (id, score, label) rows for external plotting."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("id,score,label\n")
        for p in report.predictions:
            f.write(f"{p['id']},{p['score']!r},{p['label']}\n")


def report_from_dict(doc: dict) -> EvalReport:
    cm = ConfusionMatrix(**doc["confusion"])
    m = doc["metrics"]
    return EvalReport(
        confusion=cm,
        accuracy=m["accuracy"],
        auc=m["auc"],
        apr=m["apr"],
        precision=m["precision"],
        recall=m["recall"],
        specificity=m["specificity"],
        folds=doc.get("folds", []),
        predictions=doc.get("predictions", []),
        config=doc.get("config", {}),
    )
