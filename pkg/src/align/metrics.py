"""Prediction and explanation metrics, the background-perturbation study and
the held-out-domain harness."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.stats import rankdata

from .data import apply_background_perturbation
from .gradcam import explain
from .models import ClassifierNet, MaskerNet
from .tensor import Tensor, no_grad


@dataclass
class MetricsReport:
    accuracy: float = float("nan")
    auc_macro: float = float("nan")
    sufficiency: float = float("nan")
    comprehensiveness: float = float("nan")
    mask_iou: float = float("nan")
    n: int = 0
    per_domain: dict = field(default_factory=dict)
    skipped_auc_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_domain"] = {str(k): (v.to_dict() if isinstance(v, MetricsReport) else v)
                           for k, v in self.per_domain.items()}
        # JSON has no NaN; metrics that were not computed are written as null
        for k, v in list(d.items()):
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def rows(self, name: str = "all") -> list[dict]:
        cols = ("accuracy", "auc_macro", "sufficiency", "comprehensiveness", "mask_iou", "n")
        out = [{"split": name, **{c: getattr(self, c) for c in cols}}]
        for k, v in self.per_domain.items():
            out.extend(v.rows(f"domain{k}"))
        return out

    def write_csv(self, path, name: str = "all") -> None:
        rows = self.rows(name)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})


# -- prediction metrics ------------------------------------------------------------


def accuracy(probs, labels) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(probs) != len(labels):
        raise ValueError(f"length mismatch: {len(probs)} predictions, {len(labels)} labels")
    return float(np.mean(np.argmax(probs, axis=1) == labels))  # argmax picks the lowest index on ties


def binary_auc(scores, positive) -> float:
    """ROC-AUC via average ranks; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_macro_ovr(probs, labels, return_skipped: bool = False):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(probs) != len(labels):
        raise ValueError(f"length mismatch: {len(probs)} predictions, {len(labels)} labels")
    aucs, skipped = [], []
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        aucs.append(binary_auc(probs[:, c], pos))
    if not aucs:
        raise ValueError("no class has both positive and negative samples")
    value = float(np.mean(aucs))
    return (value, skipped) if return_skipped else value


# -- explanation metrics ------------------------------------------------------------


@dataclass
class TopKSelector:
    keep_fraction: float = 0.2
    fill_policy: str = "zero"

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.fill_policy not in ("zero", "mean"):
            raise ValueError(f"fill_policy must be 'zero' or 'mean', got {self.fill_policy!r}")

    def count(self, h: int, w: int) -> int:
        return int(math.ceil(self.keep_fraction * h * w - 1e-9))

    def select(self, saliency: np.ndarray) -> np.ndarray:
        """Boolean (N,1,H,W) marking the top pixels; ties go to the earlier row-major index."""
        s = np.asarray(saliency, dtype=np.float64)
        n, _, h, w = s.shape
        k = self.count(h, w)
        order = np.argsort(-s.reshape(n, -1), axis=1, kind="stable")[:, :k]
        keep = np.zeros((n, h * w), dtype=bool)
        np.put_along_axis(keep, order, True, axis=1)
        return keep.reshape(n, 1, h, w)

    def fill(self, x: np.ndarray, keep: np.ndarray) -> np.ndarray:
        """Keep pixels where ``keep`` is set and fill the rest per the policy."""
        keep = np.broadcast_to(keep, x.shape)
        filler = np.zeros_like(x) if self.fill_policy == "zero" else \
            np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape)
        return np.where(keep, x, filler)


def _as_np(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def _class_prob(classifier: ClassifierNet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return classifier.predict_proba(x)[np.arange(len(y)), y]


def sufficiency(classifier, x, y, saliency, selector: TopKSelector | None = None) -> float:
    """100 * mean(f_y(x) - f_y(top pixels only))."""
    selector = selector or TopKSelector()
    x, y, s = _as_np(x), np.asarray(y), _as_np(saliency)
    kept = selector.fill(x, selector.select(s))
    return float(100 * np.mean(_class_prob(classifier, x, y) - _class_prob(classifier, kept, y)))


def comprehensiveness(classifier, x, y, saliency, selector: TopKSelector | None = None) -> float:
    """100 * mean(f_y(x) - f_y(x with the top pixels removed))."""
    selector = selector or TopKSelector()
    x, y, s = _as_np(x), np.asarray(y), _as_np(saliency)
    removed = selector.fill(x, ~selector.select(s))
    return float(100 * np.mean(_class_prob(classifier, x, y) - _class_prob(classifier, removed, y)))


def mask_iou(mask, gt_mask, threshold: float = 0.5) -> float:
    """IoU of ``mask > threshold`` with ``gt_mask == 1``; 1.0 when both are empty.

    Batched (N,1,H,W) inputs give the mean of per-sample IoUs.
    """
    m, g = _as_np(mask), _as_np(gt_mask)
    if m.shape != g.shape:
        raise ValueError(f"mask {m.shape} and ground truth {g.shape} differ in shape")
    if m.ndim == 4:
        return float(np.mean([mask_iou(a, b, threshold) for a, b in zip(m, g)]))
    pred, truth = m > threshold, g == 1
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


# -- mask sources / evaluation protocols ---------------------------------------------


def masker_masks(masker: MaskerNet, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    masker.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(masker(Tensor(x[i:i + batch_size])).data)
    return np.concatenate(out)


def degrade_masks(gt: np.ndarray, seed: int = 0, max_shift: float = 0.25, dilation: int | None = None) -> np.ndarray:
    """Translate each mask by up to ``max_shift`` of the image size and dilate it:
    a stand-in for segmentation that is imprecise and not tuned to the task."""
    rng = np.random.default_rng(seed)
    gt = np.asarray(gt)
    n, _, h, w = gt.shape
    if dilation is None:
        dilation = max(1, round(min(h, w) / 16))
    out = np.zeros_like(gt, dtype=np.float64)
    for i in range(n):
        dy = int(rng.integers(-int(max_shift * h), int(max_shift * h) + 1))
        dx = int(rng.integers(-int(max_shift * w), int(max_shift * w) + 1))
        shifted = np.zeros((h, w), dtype=bool)
        src = gt[i, 0] > 0.5
        ys, ye = max(0, dy), min(h, h + dy)
        xs, xe = max(0, dx), min(w, w + dx)
        shifted[ys:ye, xs:xe] = src[ys - dy:ye - dy, xs - dx:xe - dx]
        out[i, 0] = binary_dilation(shifted, iterations=dilation)
    return out


def evaluate(classifier: ClassifierNet, masker: MaskerNet | None, x, y, gt_masks=None,
             selector: TopKSelector | None = None, explain_batch: int = 64) -> MetricsReport:
    """Clean-input metrics: Acc, macro AUC, Suff, Comp, and mask IoU when masks are given."""
    x, y = _as_np(x), np.asarray(y)
    probs = classifier.predict_proba(x)
    auc, skipped = auc_macro_ovr(probs, y, return_skipped=True) if len(np.unique(y)) > 1 else (float("nan"), [])
    sal = np.concatenate([explain(classifier, x[i:i + explain_batch], y[i:i + explain_batch]).normalized.data
                          for i in range(0, len(x), explain_batch)])
    report = MetricsReport(
        accuracy=accuracy(probs, y), auc_macro=auc,
        sufficiency=sufficiency(classifier, x, y, sal, selector),
        comprehensiveness=comprehensiveness(classifier, x, y, sal, selector),
        n=len(y), skipped_auc_classes=skipped,
    )
    if masker is not None and gt_masks is not None:
        report.mask_iou = mask_iou(masker_masks(masker, x), gt_masks)
    return report


def perturbation_eval(classifier: ClassifierNet, x, y, mask_source: str = "learned_masker", sigma: float = 5.0,
                      masker: MaskerNet | None = None, gt_masks=None, seed: int = 0,
                      masks: np.ndarray | None = None) -> MetricsReport:
    """Blur everything outside the chosen mask, then score Acc / AUC.

    ``mask_source`` is one of ``learned_masker``, ``gt_mask``, ``degraded_mask``,
    ``ones`` (keep every pixel) or ``given`` (use ``masks`` as passed).
    """
    x, y = _as_np(x), np.asarray(y)
    if mask_source == "learned_masker":
        if masker is None:
            raise ValueError("learned_masker source needs a masker")
        m = masker_masks(masker, x)
    elif mask_source == "gt_mask":
        m = _as_np(gt_masks)
    elif mask_source == "degraded_mask":
        m = degrade_masks(_as_np(gt_masks), seed)
    elif mask_source == "ones":
        m = np.ones((len(x), 1) + x.shape[2:])
    elif mask_source == "given":
        m = _as_np(masks)
    else:
        raise ValueError(f"unknown mask source {mask_source!r}")
    xp = apply_background_perturbation(x, m, sigma)
    probs = classifier.predict_proba(xp)
    auc = auc_macro_ovr(probs, y) if len(np.unique(y)) > 1 else float("nan")
    return MetricsReport(accuracy=accuracy(probs, y), auc_macro=auc, n=len(y))


def ood_eval(classifier: ClassifierNet, masker: MaskerNet | None, datasets_by_domain: dict, source_domain: int,
             selector: TopKSelector | None = None, explanations: bool = False) -> MetricsReport:
    """Clean metrics on every held-out domain; the model is only read.

    ``datasets_by_domain`` maps domain id to ``(x, y)`` or ``(x, y, gt_masks)``.
    The returned report averages accuracy/AUC over target domains and holds
    one entry per domain in ``per_domain``.
    """
    if source_domain in datasets_by_domain:
        raise ValueError(f"source domain {source_domain} cannot be evaluated as a target")
    per = {}
    for d, data in sorted(datasets_by_domain.items()):
        x, y = _as_np(data[0]), np.asarray(data[1])
        gt = data[2] if len(data) > 2 else None
        if explanations:
            per[d] = evaluate(classifier, masker, x, y, gt, selector)
        else:
            probs = classifier.predict_proba(x)
            auc = auc_macro_ovr(probs, y) if len(np.unique(y)) > 1 else float("nan")
            per[d] = MetricsReport(accuracy=accuracy(probs, y), auc_macro=auc, n=len(y))
            if masker is not None and gt is not None:
                per[d].mask_iou = mask_iou(masker_masks(masker, x), gt)
    return MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in per.values()])),
        auc_macro=float(np.nanmean([r.auc_macro for r in per.values()])),
        n=int(sum(r.n for r in per.values())),
        per_domain=per,
    )
