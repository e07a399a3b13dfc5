"""Detection, localization and attribute metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .taxonomy import NUM_LEVELS, TaxonomyTree

THRESHOLD = 0.5


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"auc: {s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: both classes must be present")
    ranks = rankdata(s)  # average ranks: multiples of 1/2, exact in float64
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_binary(pred, gt) -> float:
    """2TP / (2TP + FP + FN); 0 when there are no positives at all."""
    p = np.asarray(pred).ravel().astype(bool)
    g = np.asarray(gt).ravel().astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"f1_binary: length mismatch {p.size} vs {g.size}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def iou_pbca(pred_mask, gt_mask) -> tuple[float, float]:
    """Forged-region IoU (1.0 when both masks are empty) and pixel accuracy."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"iou_pbca: shape mismatch {p.shape} vs {g.shape}")
    union = int(np.sum(p | g))
    iou = int(np.sum(p & g)) / union if union else 1.0
    return float(iou), float(np.mean(p == g))


@dataclass
class AttributeReport:
    level_accuracy: list[float]
    confusion: np.ndarray
    macro_f1: float
    class_names: list[str]


def attribute_report(pred_leaves: Sequence[int], gt_leaves: Sequence[int], tree: TaxonomyTree) -> AttributeReport:
    """Per-level accuracy (leaves mapped through their taxonomy paths),
    level-4 confusion matrix (rows = ground truth) and macro F1.

    The ``real`` leaf has no label at levels 1-3; two real-rooted paths agree
    there, so a coarse level is never scored worse than a finer one.  Macro
    F1 averages over classes present in either predictions or ground truth.
    """
    pred = np.asarray(pred_leaves, dtype=np.int64)
    gt = np.asarray(gt_leaves, dtype=np.int64)
    k = len(tree.leaves)
    if pred.shape != gt.shape:
        raise ValueError("attribute_report: prediction/ground-truth length mismatch")
    if pred.size and (pred.min() < 0 or gt.min() < 0 or pred.max() >= k or gt.max() >= k):
        raise IndexError("attribute_report: leaf index out of range")
    paths = [tree.path_of(i).per_level for i in range(k)]
    acc = []
    for b in range(NUM_LEVELS):
        hits = [paths[p][b] == paths[g][b] for p, g in zip(pred, gt)]
        acc.append(float(np.mean(hits)) if hits else 0.0)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (gt, pred), 1)
    f1s = []
    for c in range(k):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp + fn:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return AttributeReport(acc, conf, float(np.mean(f1s)) if f1s else 0.0, list(tree.leaves))


def localization_auc(scores: np.ndarray, gt: np.ndarray, pooling: str = "per_image") -> float:
    """Pixel AUC.  ``per_image`` averages over images containing both real
    and forged pixels; ``global`` pools every pixel."""
    s = np.asarray(scores).reshape(len(scores), -1)
    g = np.asarray(gt).reshape(len(gt), -1).astype(bool)
    if pooling == "global":
        return auc(s.ravel(), g.ravel())
    if pooling != "per_image":
        raise ValueError(f"unknown pooling {pooling!r}")
    vals = [auc(si, gi) for si, gi in zip(s, g) if 0 < gi.sum() < gi.size]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    detection: dict
    localization: dict
    attributes: dict
    counts: dict
    threshold: float = THRESHOLD
    confusion: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + self.class_names)
        for name, row in zip(self.class_names, self.confusion):
            w.writerow([name] + list(row))
        return buf.getvalue()

    def table(self) -> str:
        lines = [
            f"{'metric':<28}{'value':>10}",
            f"{'detection AUC':<28}{self.detection['auc']:>10.4f}",
            f"{'detection F1':<28}{self.detection['f1']:>10.4f}",
            f"{'localization AUC':<28}{self.localization['auc']:>10.4f}",
            f"{'localization F1':<28}{self.localization['f1']:>10.4f}",
            f"{'localization IoU':<28}{self.localization['iou']:>10.4f}",
            f"{'localization PBCA':<28}{self.localization['pbca']:>10.4f}",
        ]
        for b, a in enumerate(self.attributes["level_accuracy"], start=1):
            lines.append(f"{f'level-{b} accuracy':<28}{a:>10.4f}")
        lines.append(f"{'level-4 macro F1':<28}{self.attributes['macro_f1']:>10.4f}")
        return "\n".join(lines) + "\n"


def _safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except ValueError:
        return float("nan")


def build_report(tree: TaxonomyTree, gt_leaves, pred_leaves, det_scores, mask_scores, gt_masks,
                 pooling: str = "per_image") -> EvalReport:
    """Assemble an :class:`EvalReport` from per-image predictions.

    Localization F1, IoU and PBCA pool all pixels of all images at the fixed
    0.5 threshold.
    """
    gt_leaves = np.asarray(gt_leaves)
    pred_leaves = np.asarray(pred_leaves)
    is_forged = gt_leaves != tree.real_index
    pred_forged = pred_leaves != tree.real_index
    mask_scores = np.asarray(mask_scores)
    gt_masks = np.asarray(gt_masks)
    bin_pred = mask_scores >= THRESHOLD
    iou, pbca = iou_pbca(bin_pred, gt_masks)
    try:
        loc_auc = localization_auc(mask_scores, gt_masks, pooling)
    except ValueError:
        loc_auc = float("nan")
    attrs = attribute_report(pred_leaves, gt_leaves, tree)
    return EvalReport(
        detection={"auc": _safe_auc(det_scores, is_forged), "f1": f1_binary(pred_forged, is_forged)},
        localization={"auc": loc_auc, "f1": f1_binary(bin_pred, gt_masks), "iou": iou, "pbca": pbca,
                      "pooling": pooling},
        attributes={"level_accuracy": attrs.level_accuracy, "macro_f1": attrs.macro_f1},
        counts={"images": int(len(gt_leaves)), "forged": int(is_forged.sum()),
                "real": int((~is_forged).sum())},
        confusion=attrs.confusion.tolist(),
        class_names=attrs.class_names,
    )


def paired_comparison(reports: dict[str, EvalReport], baseline: str) -> str:
    """CSV rows comparing runs against ``baseline``: level accuracies,
    macro F1 and the level-4 accuracy difference."""
    if baseline not in reports:
        raise KeyError(f"baseline {baseline!r} not among {sorted(reports)}")
    base4 = reports[baseline].attributes["level_accuracy"][3]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "acc1", "acc2", "acc3", "acc4", "macro_f1", "delta_acc4"])
    for name, rep in reports.items():
        acc = rep.attributes["level_accuracy"]
        w.writerow([name, *(repr(float(a)) for a in acc), repr(float(rep.attributes["macro_f1"])),
                    repr(float(acc[3] - base4))])
    return buf.getvalue()
