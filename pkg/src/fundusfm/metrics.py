"""Evaluation mathematics: AUC, DeLong comparison, thresholds, overlap metrics,
and cross-validation aggregation.

AUC uses the midrank (Mann-Whitney) formulation, so ties between a positive and
a negative score contribute 0.5 to the pair count. The DeLong test is computed
from structural components via midranks in O(n log n); the variance of the AUC
difference accounts for the covariance between the two paired classifiers:

    var(AUC_a - AUC_b) = var_a + var_b - 2 * cov(a, b)

All functions here are pure and thread-safe.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.stats

from .errors import DegenerateCaseError, MetricUndefinedError

_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ScoredSet:
    """Per-sample scores with binary ground-truth labels."""

    scores: np.ndarray
    labels: np.ndarray
    group_key: str | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        labels = np.asarray(self.labels)
        if scores.ndim != 1 or labels.ndim != 1 or scores.shape != labels.shape:
            raise ValueError("scores and labels must be 1-D arrays of equal length")
        if scores.size < 1:
            raise ValueError("ScoredSet requires at least one sample")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary (0/1)")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(int))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


@dataclass(frozen=True)
class DeLongResult:
    """Paired AUC comparison between two classifiers on the same cases."""

    auc_a: float
    auc_b: float
    variance_a: float
    variance_b: float
    covariance: float
    z_statistic: float
    p_value: float
    label_a: str | None = None
    label_b: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _require_both_classes(scored: ScoredSet) -> None:
    if scored.n_pos == 0 or scored.n_neg == 0:
        raise MetricUndefinedError(
            "AUC needs at least one positive and one negative label "
            f"(got {scored.n_pos} pos / {scored.n_neg} neg)"
        )


def auc(scored: ScoredSet) -> float:
    """Area under the ROC curve via midranks.

    Equals the Mann-Whitney pair statistic: the fraction of (positive,
    negative) pairs where the positive outscores the negative, ties counting
    one half.
    """
    _require_both_classes(scored)
    m, n = scored.n_pos, scored.n_neg
    ranks = scipy.stats.rankdata(scored.scores)  # midranks, 1-based
    pos_rank_sum = ranks[scored.labels == 1].sum()
    return float((pos_rank_sum - m * (m + 1) / 2.0) / (m * n))


def delong_components(scored: ScoredSet) -> tuple[float, np.ndarray, np.ndarray]:
    """Structural components of the AUC for one classifier.

    Returns (auc, v10, v01) where v10[i] is the fraction of negatives scored
    below positive i (ties half) and v01[j] the fraction of positives scored
    above negative j (ties half). The mean of either vector is the AUC.
    """
    _require_both_classes(scored)
    pos = scored.scores[scored.labels == 1]
    neg = scored.scores[scored.labels == 0]
    m, n = pos.size, neg.size
    tz = scipy.stats.rankdata(np.concatenate([pos, neg]))
    tx = scipy.stats.rankdata(pos)
    ty = scipy.stats.rankdata(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return float(v10.mean()), v10, v01


def delong_test(scored_a: ScoredSet, scored_b: ScoredSet,
                label_a: str | None = None, label_b: str | None = None) -> DeLongResult:
    """DeLong test for the difference of two correlated AUCs.

    The two score vectors must be paired: same cases, identical labels in
    identical order. Two-sided p-value from the normal tail of z.
    """
    if scored_a.labels.shape != scored_b.labels.shape or \
            not np.array_equal(scored_a.labels, scored_b.labels):
        raise ValueError("delong_test requires paired inputs with identical label vectors")
    auc_a, v10_a, v01_a = delong_components(scored_a)
    auc_b, v10_b, v01_b = delong_components(scored_b)
    m = v10_a.size
    n = v01_a.size
    if m < 2 or n < 2:
        raise MetricUndefinedError("DeLong variance needs >= 2 samples per class")

    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    s = s10 / m + s01 / n

    var_a, var_b, cov = float(s[0, 0]), float(s[1, 1]), float(s[0, 1])
    var_diff = var_a + var_b - 2.0 * cov
    delta = auc_a - auc_b

    if var_diff <= _VARIANCE_FLOOR:
        if delta == 0.0:
            z, p = 0.0, 1.0
        else:
            raise DegenerateCaseError(
                f"zero variance with nonzero AUC difference ({delta:.6g})"
            )
    else:
        z = delta / math.sqrt(var_diff)
        p = float(2.0 * scipy.stats.norm.sf(abs(z)))

    return DeLongResult(auc_a=auc_a, auc_b=auc_b, variance_a=var_a,
                        variance_b=var_b, covariance=cov,
                        z_statistic=float(z), p_value=p,
                        label_a=label_a, label_b=label_b)


def jaccard_index(pred: np.ndarray, truth: np.ndarray) -> float:
    """|P intersect T| / |P union T| for binary arrays. Both empty -> 0."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch between prediction and truth")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, truth).sum() / union)


def select_threshold_jaccard(scored: ScoredSet, grid) -> tuple[float, float]:
    """Pick the grid threshold maximizing the Jaccard index of binarized scores.

    Ties break toward the smallest threshold. Scores >= threshold predict
    positive.
    """
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("threshold grid must be non-empty")
    if any(not (0.0 < t < 1.0) for t in grid):
        raise ValueError("thresholds must lie in (0, 1)")
    if scored.n_pos == 0:
        raise MetricUndefinedError("threshold selection needs at least one positive label")

    best_t, best_j = None, -1.0
    for t in sorted(grid):
        j = jaccard_index(scored.scores >= t, scored.labels)
        if j > best_j:
            best_t, best_j = t, j
    return best_t, best_j


def select_shared_threshold_jaccard(scores: np.ndarray, labels: np.ndarray, grid,
                                    per_class: bool = False):
    """Threshold selection over an N x L multi-label score matrix.

    Default returns one shared threshold maximizing the mean Jaccard across
    classes that have positives; ``per_class=True`` returns one threshold per
    class (classes without positives fall back to the smallest grid value).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError("scores and labels must both be N x L")
    grid = sorted(float(t) for t in grid)
    if not grid:
        raise ValueError("threshold grid must be non-empty")
    n_classes = scores.shape[1]
    has_pos = labels.sum(axis=0) > 0

    if per_class:
        out = np.full(n_classes, grid[0])
        for c in range(n_classes):
            if has_pos[c]:
                t, _ = select_threshold_jaccard(
                    ScoredSet(scores[:, c], labels[:, c]), grid)
                out[c] = t
        return out

    if not has_pos.any():
        raise MetricUndefinedError("no class has positive labels")
    best_t, best_j = None, -1.0
    for t in grid:
        js = [jaccard_index(scores[:, c] >= t, labels[:, c])
              for c in range(n_classes) if has_pos[c]]
        j = float(np.mean(js))
        if j > best_j:
            best_t, best_j = t, j
    return best_t, best_j


def default_threshold_grid(step: float = 0.01) -> np.ndarray:
    """Grid of candidate thresholds over [0.01, 0.99]."""
    return np.round(np.arange(step, 1.0, step), 10)


def f1_per_class(scores: np.ndarray, labels: np.ndarray,
                 threshold) -> tuple[np.ndarray, np.ndarray]:
    """Per-class F1 of thresholded multi-label scores.

    ``threshold`` may be one real (shared) or a length-L vector. A class with
    zero predicted and zero actual positives gets F1 = 0 and is flagged in the
    returned degenerate mask, so downstream aggregation never sees NaN.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError("scores and labels must both be N x L")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be multi-hot (0/1)")
    n_classes = scores.shape[1]
    thr = np.broadcast_to(np.asarray(threshold, dtype=float), (n_classes,))

    preds = scores >= thr[None, :]
    truth = labels.astype(bool)
    tp = np.logical_and(preds, truth).sum(axis=0).astype(float)
    fp = np.logical_and(preds, ~truth).sum(axis=0).astype(float)
    fn = np.logical_and(~preds, truth).sum(axis=0).astype(float)

    denom = 2 * tp + fp + fn
    degenerate = denom == 0
    f1 = np.zeros(n_classes)
    np.divide(2 * tp, denom, out=f1, where=~degenerate)
    return f1, degenerate


def dice_coefficient(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """2|P intersect T| / (|P| + |T|). Both masks empty -> 1.0 (with warning)."""
    pred = np.asarray(pred_mask)
    truth = np.asarray(true_mask)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch between prediction and truth masks")
    if not np.isin(pred, (0, 1)).all() or not np.isin(truth, (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    total = pred.sum() + truth.sum()
    if total == 0:
        warnings.warn("dice of two empty masks: returning 1.0 by convention")
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / total)


@dataclass
class MetricReport:
    """Per-fold metrics with aggregated mean/std, thresholds, and test results."""

    per_fold: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    tests: list[DeLongResult] = field(default_factory=list)
    dataset: str | None = None

    def to_dict(self) -> dict:
        return {
            "per_fold": self.per_fold,
            "mean": self.mean,
            "std": self.std,
            "thresholds": self.thresholds,
            "tests": [t.to_dict() for t in self.tests],
            "dataset": self.dataset,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(per_fold=list(d.get("per_fold", [])),
                   mean=dict(d.get("mean", {})),
                   std=dict(d.get("std", {})),
                   thresholds=dict(d.get("thresholds", {})),
                   tests=[DeLongResult(**t) for t in d.get("tests", [])],
                   dataset=d.get("dataset"))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        """Check the cached mean/std against a recount from per_fold."""
        mean, std = _aggregate_entries(self.per_fold)
        for key in self.mean:
            if abs(self.mean[key] - mean[key]) > 1e-12 or abs(self.std[key] - std[key]) > 1e-12:
                raise ValueError(f"stored aggregate for {key!r} disagrees with per-fold recount")


def _aggregate_entries(per_fold: list[dict]) -> tuple[dict, dict]:
    keys = set(per_fold[0])
    for entry in per_fold[1:]:
        if set(entry) != keys:
            missing = keys.symmetric_difference(entry)
            raise ValueError(f"per-fold metric keys disagree: {sorted(missing)}")
    mean = {k: float(np.mean([e[k] for e in per_fold])) for k in keys}
    std = {k: float(np.std([e[k] for e in per_fold])) for k in keys}  # population std
    return mean, std


def aggregate_cv(per_fold_reports: list[dict], thresholds: dict | None = None,
                 tests: list[DeLongResult] | None = None,
                 dataset: str | None = None) -> MetricReport:
    """Aggregate per-fold metric maps into mean/std (population std)."""
    if len(per_fold_reports) < 2:
        raise ValueError("aggregation needs at least two folds")
    mean, std = _aggregate_entries(per_fold_reports)
    return MetricReport(per_fold=list(per_fold_reports), mean=mean, std=std,
                        thresholds=dict(thresholds or {}),
                        tests=list(tests or []), dataset=dataset)


def format_mean_std(mean: float, std: float) -> str:
    """Table cell in the conventional 'm.mmm ± s.sss' form."""
    return f"{mean:.3f} ± {std:.3f}"


def report_table_rows(reports: dict[str, MetricReport], metric: str = "auc") -> list[tuple[str, str]]:
    """(row label, formatted cell) pairs for a set of named reports."""
    rows = []
    for name in sorted(reports):
        rep = reports[name]
        if metric not in rep.mean:
            raise ValueError(f"metric {metric!r} missing from report {name!r}")
        rows.append((name, format_mean_std(rep.mean[metric], rep.std[metric])))
    return rows


def render_markdown_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def render_csv_table(header: list[str], rows: list[list[str]]) -> str:
    out = [",".join(header)]
    out += [",".join(str(c) for c in r) for r in rows]
    return "\n".join(out) + "\n"
