"""Binary classification metrics, ID/OOD gaps and seed aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("auc", "f1", "accuracy", "recall", "specificity")
DEFAULT_SEEDS = (73, 7, 46, 24, 49, 94, 29, 34, 8, 25)
DEFAULT_THRESHOLD = 0.5


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank (always a multiple of 0.5)."""
    n = len(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    new_group = np.empty(n, dtype=bool)
    new_group[:1] = True
    np.not_equal(xs[1:], xs[:-1], out=new_group[1:])
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], n)
    ranks = np.empty(n)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with label 1 as the positive class; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = int(np.count_nonzero(labels == 0))
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    # rank sums are exact in float64: every rank is a multiple of 0.5
    u = average_ranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with prediction 1 iff score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


@dataclass(frozen=True)
class MetricsRecord:
    auc: float
    accuracy: float
    f1: float
    recall: float
    specificity: float
    n_samples: int
    n_pos: int = 0
    n_neg: int = 0
    degenerate: tuple[str, ...] = ()

    def value(self, name: str) -> float:
        return getattr(self, name)


def derive_metrics(counts: tuple[int, int, int, int], auc_value: float = float("nan")) -> MetricsRecord:
    """Accuracy, F1, recall and specificity from (TP, FP, TN, FN).

    A zero denominator yields 0.0 and adds the metric name to ``degenerate``.
    """
    tp, fp, tn, fn = counts
    n = tp + fp + tn + fn
    if n < 1:
        raise ValueError("derive_metrics needs at least one sample")
    degenerate = []

    def ratio(name, num, den):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    recall = ratio("recall", tp, tp + fn)
    specificity = ratio("specificity", tn, tn + fp)
    f1 = ratio("f1", 2 * tp, 2 * tp + fp + fn)
    return MetricsRecord(
        auc=auc_value,
        accuracy=(tp + tn) / n,
        f1=f1,
        recall=recall,
        specificity=specificity,
        n_samples=n,
        n_pos=tp + fn,
        n_neg=tn + fp,
        degenerate=tuple(degenerate),
    )


def score_metrics(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricsRecord:
    rec = derive_metrics(confusion(scores, labels, threshold), auc(scores, labels))
    # accuracy must decompose into the per-class rates
    recomposed = (rec.recall * rec.n_pos + rec.specificity * rec.n_neg) / rec.n_samples
    assert abs(recomposed - rec.accuracy) <= 1e-12, (recomposed, rec.accuracy)
    return rec


def evaluate(model, bank, dataset, threshold: float = DEFAULT_THRESHOLD) -> MetricsRecord:
    """Score clean images with the model's head and compute all five metrics.

    ``model`` may be a ``TrainedModel`` or a bare ``HeadParams``.
    """
    from .data import stack
    from .features import extract_array
    from .trainer import forward

    head = getattr(model, "head", model)
    imgs, labels = stack(list(dataset))
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    scores = forward(head, extract_array(bank, imgs))
    return score_metrics(scores, labels, threshold)


@dataclass(frozen=True)
class GapRecord:
    id_values: dict[str, float]
    ood_values: dict[str, float]

    @property
    def diff(self) -> dict[str, float]:
        return {m: self.id_values[m] - self.ood_values[m] for m in METRIC_NAMES}


def gap(id_rec: MetricsRecord, ood_rec: MetricsRecord) -> GapRecord:
    return GapRecord(
        {m: float(id_rec.value(m)) for m in METRIC_NAMES},
        {m: float(ood_rec.value(m)) for m in METRIC_NAMES},
    )


PARTS = ("id", "ood", "diff", "absdiff")


@dataclass
class SeedAggregate:
    """Per-metric mean and sample std of the ID value, OOD value, signed and absolute diff."""

    seeds: list[int]
    mean: dict[str, dict[str, float]] = field(default_factory=dict)
    std: dict[str, dict[str, float]] = field(default_factory=dict)


def _sample_std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def aggregate(records: list[GapRecord], seeds: list[int]) -> SeedAggregate:
    if len(records) != len(seeds):
        raise ValueError(f"{len(records)} records for {len(seeds)} seeds")
    if not records:
        raise ValueError("aggregate needs at least one record")
    agg = SeedAggregate(list(seeds))
    for m in METRIC_NAMES:
        ids = np.array([r.id_values[m] for r in records])
        oods = np.array([r.ood_values[m] for r in records])
        values = {"id": ids, "ood": oods, "diff": ids - oods, "absdiff": np.abs(ids - oods)}
        agg.mean[m] = {p: float(np.mean(v)) for p, v in values.items()}
        agg.std[m] = {p: _sample_std(v) for p, v in values.items()}
        identity = agg.mean[m]["id"] - agg.mean[m]["ood"]
        assert abs(identity - agg.mean[m]["diff"]) <= 1e-12, (m, identity, agg.mean[m]["diff"])
    return agg
