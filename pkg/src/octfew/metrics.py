"""Multiclass evaluation: accuracy, Cohen's kappa, RCI, MCC, balanced accuracy, per-class TPR."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dataset import ClassLabel


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion matrix entries must be nonnegative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tolist(self):
        return self.counts.tolist()


def _as_cm(cm) -> np.ndarray:
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    c = np.asarray(c, dtype=np.float64)
    if c.sum() <= 0:
        raise UndefinedMetricError("confusion matrix is empty")
    return c


def confusion(y_true: Sequence[int], y_pred: Sequence[int], k: int = 9) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true vs {p.size} predicted labels")
    if t.size == 0:
        raise ValueError("cannot build a confusion matrix from empty label sequences")
    bad = (t < 0) | (t >= k) | (p < 0) | (p >= k)
    if bad.any():
        raise ValueError(f"label out of range 0..{k - 1}")
    return ConfusionMatrix(np.bincount(t * k + p, minlength=k * k).reshape(k, k))


def accuracy(cm) -> float:
    c = _as_cm(cm)
    return float(np.trace(c) / c.sum())


def per_class_tpr(cm) -> list[float | None]:
    """Recall per class; ``None`` where the class has no true samples."""
    c = _as_cm(cm)
    rows = c.sum(axis=1)
    return [float(c[i, i] / rows[i]) if rows[i] > 0 else None for i in range(c.shape[0])]


def cohens_kappa(cm) -> float:
    c = _as_cm(cm)
    n = c.sum()
    po = np.trace(c) / n
    pe = float(np.dot(c.sum(axis=1), c.sum(axis=0)) / (n * n))
    if pe >= 1.0:
        raise UndefinedMetricError("Cohen's kappa is undefined: chance agreement equals 1")
    return float((po - pe) / (1.0 - pe))


def mcc_multiclass(cm) -> float:
    c = _as_cm(cm)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    n = c.sum()
    cov_tp = np.trace(c) * n - np.dot(t, p)
    cov_pp = n * n - np.dot(p, p)
    cov_tt = n * n - np.dot(t, t)
    if cov_pp == 0 or cov_tt == 0:
        return 0.0
    return float(cov_tp / math.sqrt(cov_tt * cov_pp))


def _entropy(probs: np.ndarray) -> float:
    probs = probs[probs > 0]
    return float(-np.sum(probs * np.log(probs)))


def rci(cm) -> float:
    """Relative classifier information, I(T;P) / H(T)."""
    c = _as_cm(cm)
    joint = c / c.sum()
    pt = joint.sum(axis=1)
    pp = joint.sum(axis=0)
    ht = _entropy(pt)
    if ht == 0:
        raise UndefinedMetricError("RCI is undefined when only one true class is present")
    mi = _entropy(pt) + _entropy(pp) - _entropy(joint.ravel())
    return float(min(1.0, max(0.0, mi / ht)))


def balanced_accuracy(cm) -> float:
    defined = [t for t in per_class_tpr(cm) if t is not None]
    if not defined:
        raise UndefinedMetricError("no class has a defined true positive rate")
    return float(np.mean(defined))


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    kappa: float
    rci: float
    mcc: float
    balanced_accuracy: float
    per_class_tpr: tuple

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class_tpr"] = list(self.per_class_tpr)
        return d

    @classmethod
    def from_json(cls, d) -> "MetricReport":
        return cls(d["accuracy"], d["kappa"], d["rci"], d["mcc"], d["balanced_accuracy"],
                   tuple(d["per_class_tpr"]))


SCALAR_METRICS = ("accuracy", "kappa", "rci", "mcc", "balanced_accuracy")


def evaluate(cm) -> MetricReport:
    return MetricReport(accuracy=accuracy(cm), kappa=cohens_kappa(cm), rci=rci(cm), mcc=mcc_multiclass(cm),
                        balanced_accuracy=balanced_accuracy(cm), per_class_tpr=tuple(per_class_tpr(cm)))


@dataclass(frozen=True)
class AggregateReport:
    mean: dict
    std: dict
    n_folds: int
    tpr_mean: tuple

    def to_json(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std), "n_folds": self.n_folds,
                "tpr_mean": list(self.tpr_mean)}

    @classmethod
    def from_json(cls, d) -> "AggregateReport":
        return cls(d["mean"], d["std"], d["n_folds"], tuple(d["tpr_mean"]))


def aggregate_folds(reports: Sequence[MetricReport]) -> AggregateReport:
    """Sample mean and (n-1) standard deviation of every scalar metric."""
    if len(reports) < 2:
        raise ValueError(f"need at least 2 fold reports to aggregate, got {len(reports)}")
    mean, std = {}, {}
    for name in SCALAR_METRICS:
        v = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        mean[name] = float(v.mean())
        std[name] = float(v.std(ddof=1))
    k = len(reports[0].per_class_tpr)
    tpr = []
    for i in range(k):
        vals = [r.per_class_tpr[i] for r in reports if r.per_class_tpr[i] is not None]
        tpr.append(float(np.mean(vals)) if vals else None)
    return AggregateReport(mean, std, len(reports), tuple(tpr))


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

TABLE1_COLUMNS = ("Accuracy (%)", "Cohen's κ", "RCI", "MCC", "BA")
UNDEFINED = "—"


def format_pm(mean: float, std: float, percent: bool = False) -> str:
    if percent:
        return f"{mean * 100:.2f} ± {std * 100:.2f}"
    return f"{mean:.3f} ± {std:.3f}"


def _table1_cells(agg: AggregateReport) -> list[str]:
    return [format_pm(agg.mean[name], agg.std[name], percent=(name == "accuracy")) for name in SCALAR_METRICS]


def _tpr_cell(v) -> str:
    return UNDEFINED if v is None else f"{v * 100:.2f}"


def _fixed_width(header, rows) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(x).ljust(w) for x, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_table(aggregates: dict[str, AggregateReport] | None = None,
                 per_class: dict[str, Sequence] | None = None) -> dict[str, str]:
    """Render summary and per-class TPR tables as fixed-width text and CSV.

    ``aggregates`` maps a method name to its fold aggregate; ``per_class``
    maps a method name to a TPR vector (fractions, ``None`` for undefined).
    """
    out = {}
    if aggregates:
        header = ["Method", *TABLE1_COLUMNS]
        rows = [[name, *_table1_cells(agg)] for name, agg in aggregates.items()]
        out["summary_text"] = _fixed_width(header, rows)
        out["summary_csv"] = _csv(header, rows)
    if per_class:
        header = ["Method", *(c.name for c in ClassLabel)]
        rows = [[name, *(_tpr_cell(v) for v in tpr)] for name, tpr in per_class.items()]
        out["tpr_text"] = _fixed_width(header, rows)
        out["tpr_csv"] = _csv(header, rows)
    return out
