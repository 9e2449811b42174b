"""Attack evaluation: target success, hidden-class removal, background preservation, IoU.

Dataset-level rates are pooled over pixels (sum of numerators over sum of
denominators).  Per-image values are kept alongside for diagnostics.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks, segnet
from .targets import TargetSpec


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def success_rate(pred_adv: np.ndarray, y_target: np.ndarray) -> float:
    _same_shape(pred_adv, y_target, "success_rate")
    return float(np.mean(np.asarray(pred_adv) == np.asarray(y_target)))


def _hidden_counts(pred_clean, pred_adv, o):
    fg = np.asarray(pred_clean) == o
    return int((fg & (np.asarray(pred_adv) != o)).sum()), int(fg.sum())


def hidden_rate(pred_clean: np.ndarray, pred_adv: np.ndarray, o: int) -> float | None:
    """Share of clean ``o`` pixels no longer predicted as ``o``; None if there were none."""
    _same_shape(pred_clean, pred_adv, "hidden_rate")
    num, den = _hidden_counts(pred_clean, pred_adv, o)
    return num / den if den else None


def _background_counts(pred_clean, pred_adv, o):
    pred_clean = np.asarray(pred_clean)
    bg = pred_clean != o
    # on background pixels the dynamic target equals the clean prediction
    return int((bg & (np.asarray(pred_adv) == pred_clean)).sum()), int(bg.sum())


def background_preserved(pred_clean: np.ndarray, pred_adv: np.ndarray, o: int) -> float | None:
    _same_shape(pred_clean, pred_adv, "background_preserved")
    num, den = _background_counts(pred_clean, pred_adv, o)
    return num / den if den else None


def iou_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    inter = np.bincount(truth[pred == truth], minlength=num_classes)[:num_classes]
    area_p = np.bincount(pred, minlength=num_classes)[:num_classes]
    area_t = np.bincount(truth, minlength=num_classes)[:num_classes]
    return inter, area_p + area_t - inter


def mean_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> tuple[float, list[float | None]]:
    """Mean IoU over classes present in ``pred`` or ``truth``; absent classes are None."""
    _same_shape(pred, truth, "mean_iou")
    return _iou_from_counts(*iou_counts(pred, truth, num_classes))


def _iou_from_counts(inter, union):
    per = [float(i / u) if u else None for i, u in zip(inter, union)]
    present = [v for v in per if v is not None]
    return (float(np.mean(present)) if present else math.nan), per


@dataclass
class MetricsReport:
    n: int
    success_rate: float | None = None
    hidden_rate: float | None = None
    background_preserved: float | None = None
    mean_iou: float | None = None
    per_class_iou: list = field(default_factory=list)
    clean_mean_iou: float | None = None
    rows: list[dict] = field(default_factory=list)

    @property
    def iou_drop(self) -> float | None:
        if self.mean_iou is None or self.clean_mean_iou is None:
            return None
        return self.clean_mean_iou - self.mean_iou

    def summary(self) -> dict:
        keys = ("n", "success_rate", "hidden_rate", "background_preserved", "mean_iou",
                "clean_mean_iou", "iou_drop")
        return {k: getattr(self, k) for k in keys}

    def to_csv(self) -> str:
        cols = ["image", "success_rate", "hidden_rate", "background_preserved", "mean_iou"]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for row in self.rows:
            wr.writerow([_fmt(row.get(c)) for c in cols])
        wr.writerow(["aggregate"] + [_fmt(getattr(self, c)) for c in cols[1:]])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate(pred_clean: np.ndarray, pred_adv: np.ndarray, *, truth: np.ndarray | None = None,
             static_target: np.ndarray | None = None, o: int | None = None,
             num_classes: int = 5) -> MetricsReport:
    """Pooled report over a batch of label maps (N, H, W).

    ``static_target`` enables the success rate, ``o`` the hidden/background
    rates and ``truth`` the IoU columns.
    """
    _same_shape(pred_clean, pred_adv, "evaluate")
    n = len(pred_adv)
    rows = [{"image": k} for k in range(n)]
    rep = MetricsReport(n, rows=rows)
    if static_target is not None:
        hits = pred_adv == np.asarray(static_target)
        rep.success_rate = float(hits.mean())
        for k in range(n):
            rows[k]["success_rate"] = float(hits[k].mean())
    if o is not None:
        hn = hd = bn = bd = 0
        for k in range(n):
            a, b = _hidden_counts(pred_clean[k], pred_adv[k], o)
            c, d = _background_counts(pred_clean[k], pred_adv[k], o)
            hn, hd, bn, bd = hn + a, hd + b, bn + c, bd + d
            rows[k]["hidden_rate"] = a / b if b else None
            rows[k]["background_preserved"] = c / d if d else None
        rep.hidden_rate = hn / hd if hd else None
        rep.background_preserved = bn / bd if bd else None
    if truth is not None:
        inter = np.zeros(num_classes, np.int64)
        union = np.zeros(num_classes, np.int64)
        inter_c = np.zeros(num_classes, np.int64)
        union_c = np.zeros(num_classes, np.int64)
        for k in range(n):
            i, u = iou_counts(pred_adv[k], truth[k], num_classes)
            inter, union = inter + i, union + u
            rows[k]["mean_iou"] = _iou_from_counts(i, u)[0]
            i, u = iou_counts(pred_clean[k], truth[k], num_classes)
            inter_c, union_c = inter_c + i, union_c + u
        rep.mean_iou, rep.per_class_iou = _iou_from_counts(inter, union)
        rep.clean_mean_iou = _iou_from_counts(inter_c, union_c)[0]
    return rep


def evaluate_perturbation(model: segnet.Checkpoint, images: np.ndarray, pert: attacks.Perturbation | None,
                          *, truth=None, static_target=None, o=None) -> MetricsReport:
    """Predict clean and perturbed images with ``model`` and pool the metrics."""
    images = np.asarray(images)
    pred_clean = segnet.predict_labels(model, images)
    adv = images if pert is None else attacks.apply(pert, images)
    pred_adv = pred_clean if pert is None else segnet.predict_labels(model, adv)
    return evaluate(pred_clean, pred_adv, truth=truth, static_target=static_target, o=o,
                    num_classes=model.config.num_classes)


def transfer_eval(pert: attacks.Perturbation, victim: segnet.Checkpoint, images: np.ndarray,
                  truth: np.ndarray, target: TargetSpec | np.ndarray | None = None,
                  o: int | None = None) -> MetricsReport:
    """Evaluate a perturbation crafted on one model against ``victim``.

    Reports untargeted damage (``clean_mean_iou`` vs ``mean_iou`` against the
    ground truth) and, for a static target, the targeted success rate.
    """
    if tuple(victim.config.image_size) != tuple(pert.image_size):
        raise ValueError(f"perturbation size {pert.image_size} incompatible with model input "
                         f"{victim.config.image_size}")
    y = target.y_target if isinstance(target, TargetSpec) else target
    return evaluate_perturbation(victim, images, pert, truth=truth, static_target=y, o=o)
