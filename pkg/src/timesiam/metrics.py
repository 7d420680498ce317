"""Forecasting and classification metrics, plus the report container."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def mse(pred, true) -> float:
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    return float(np.mean((pred - true) ** 2))


def mae(pred, true) -> float:
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    return float(np.mean(np.abs(pred - true)))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """``cm[i, j]`` counts examples of class ``i`` predicted as ``j``."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _safe_div(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def per_class_prf(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def precision_recall_f1(y_true, y_pred, n_classes: int, average: str | None = None):
    """Precision, recall, F1.

    ``average="binary"`` reports the positive class (label 1) and is the
    default for two classes; ``"macro"`` is the unweighted mean over classes
    and the default otherwise. Undefined ratios count as 0.
    """
    if average is None:
        average = "binary" if n_classes == 2 else "macro"
    p, r, f = per_class_prf(confusion_matrix(y_true, y_pred, n_classes))
    if average == "binary":
        if n_classes != 2:
            raise ValueError("binary averaging needs exactly two classes")
        return float(p[1]), float(r[1]), float(f[1])
    if average == "macro":
        return float(p.mean()), float(r.mean()), float(f.mean())
    raise ValueError(f"unknown average {average!r}")


def roc_auc(y_true, scores) -> float | None:
    """Area under the ROC curve from the Mann-Whitney rank statistic (ties get average ranks).

    Returns ``None`` when only one class is present.
    """
    y = np.asarray(y_true).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(y_true, scores) -> float | None:
    """Area under the precision-recall curve as the step-wise average precision.

    Examples are ranked by descending score; tied scores form one threshold.
    """
    y = np.asarray(y_true).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        return None
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def _ovr(metric, y_true, scores, n_classes: int):
    y_true = np.asarray(y_true)
    scores = np.asarray(scores)
    if n_classes == 2:
        return metric(y_true == 1, scores[:, 1])
    vals = [metric(y_true == k, scores[:, k]) for k in range(n_classes)]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def classification_metrics(y_true, scores, n_classes: int) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.argmax(scores, axis=1)  # first maximum wins ties
    precision, recall, f1 = precision_recall_f1(y_true, y_pred, n_classes)
    return {
        "accuracy": float(np.mean(y_pred == y_true)),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auroc": _ovr(roc_auc, y_true, scores, n_classes),
        "auprc": _ovr(average_precision, y_true, scores, n_classes),
    }


@dataclass
class MetricsReport:
    task: str
    forecast: dict = field(default_factory=dict)  # horizon -> {"mse", "mae"}
    classify: dict = field(default_factory=dict)

    @property
    def avg_mse(self) -> float | None:
        vals = [v["mse"] for v in self.forecast.values()]
        return float(np.mean(vals)) if vals else None

    @property
    def avg_mae(self) -> float | None:
        vals = [v["mae"] for v in self.forecast.values()]
        return float(np.mean(vals)) if vals else None

    def as_dict(self) -> dict:
        out = {"task": self.task}
        if self.task == "forecast":
            for h in sorted(self.forecast):
                out[f"mse_{h}"] = self.forecast[h]["mse"]
                out[f"mae_{h}"] = self.forecast[h]["mae"]
            out["mse_avg"] = self.avg_mse
            out["mae_avg"] = self.avg_mae
        else:
            out.update(self.classify)
        return out

    def to_text(self) -> str:
        """``key=value`` lines; undefined metrics are written as ``absent``."""
        lines = []
        for k, v in self.as_dict().items():
            if v is None:
                v = "absent"
            elif isinstance(v, float):
                v = f"{v:.6f}"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Per-horizon MSE/MAE rows followed by an ``Avg`` row."""
        if self.task != "forecast":
            return self.to_text()
        rows = ["horizon,mse,mae"]
        for h in sorted(self.forecast):
            rows.append(f"{h},{self.forecast[h]['mse']:.6f},{self.forecast[h]['mae']:.6f}")
        rows.append(f"Avg,{self.avg_mse:.6f},{self.avg_mae:.6f}")
        return "\n".join(rows) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in self.as_dict().values()
        )
        return buf.getvalue()
