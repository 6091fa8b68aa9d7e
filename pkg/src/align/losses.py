"""Masker and classifier objectives.

All L1-type terms are per-pixel means so the default weights do not depend
on image resolution.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import numpy as np

from .gradcam import SaliencyMap, saliency_from_forward
from .models import ClassifierNet, MaskerNet, frozen
from .tensor import Tensor, broadcast_channels, no_grad


@dataclass
class LossConfig:
    lambda1: float = 10.0   # sparsity
    lambda2: float = 1.0    # smoothness
    lambda3: float = 0.1    # explanation alignment
    lambda4: float = 0.1    # mixup regulariser
    beta_alpha: float = 1.0
    bce_epsilon: float = 1e-6
    cam_root: str = "prob"
    divergence: str = "bce"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.beta_alpha <= 0:
            raise ValueError(f"beta_alpha must be > 0, got {self.beta_alpha}")
        if not 0 < self.bce_epsilon < 0.1:
            raise ValueError(f"bce_epsilon must be in (0, 0.1), got {self.bce_epsilon}")
        if self.cam_root not in ("prob", "logit"):
            raise ValueError(f"cam_root must be 'prob' or 'logit', got {self.cam_root!r}")
        if self.divergence not in ("bce", "l1"):
            raise ValueError(f"divergence must be 'bce' or 'l1', got {self.divergence!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"batch size mismatch: {n} inputs but {y.shape[0]} labels")
    return y


# -- masker side -------------------------------------------------------------


def dist(classifier: ClassifierNet, masker: MaskerNet | None, x: Tensor, y, mask: Tensor | None = None) -> Tensor:
    """f_y(x * M(x)) - f_y(x * (1 - M(x))) per sample."""
    y = _labels(y, x.shape[0])
    if mask is None:
        mask = masker(x)
    if mask.shape[0] != x.shape[0]:
        raise ValueError(f"batch size mismatch: mask {mask.shape}, input {x.shape}")
    m = broadcast_channels(mask, x.shape[1])
    _, p_keep, _ = classifier(x * m)
    _, p_drop, _ = classifier(x * (1.0 - m))
    return p_keep.pick(y) - p_drop.pick(y)


def loss_dist(dist_values: Tensor) -> Tensor:
    d = dist_values - 1.0
    return (d * d).mean()


def loss_sparsity(mask: Tensor) -> Tensor:
    return mask.abs().mean()


def loss_smooth(mask: Tensor) -> Tensor:
    n, _, h, w = mask.shape
    if h < 2 or w < 2:
        raise ValueError(f"smoothness needs H, W >= 2, got {h}x{w}")
    vertical = (mask[:, :, 1:, :] - mask[:, :, :-1, :]).abs().sum((1, 2, 3))
    horizontal = (mask[:, :, :, 1:] - mask[:, :, :, :-1]).abs().sum((1, 2, 3))
    return ((vertical + horizontal) * (1.0 / (h * w))).mean()


def loss_mask_total(x: Tensor, y, classifier: ClassifierNet, masker: MaskerNet, cfg: LossConfig,
                    return_parts: bool = False):
    """L_dist + lambda1 * L_sparsity + lambda2 * L_smooth; the classifier is held constant."""
    with frozen(classifier):
        mask = masker(x)
        d = dist(classifier, None, x, y, mask=mask)
        parts = {
            "L_dist": loss_dist(d),
            "L_sparsity": loss_sparsity(mask),
            "L_smooth": loss_smooth(mask),
        }
        total = parts["L_dist"] + cfg.lambda1 * parts["L_sparsity"] + cfg.lambda2 * parts["L_smooth"]
    if return_parts:
        return total, {k: v.item() for k, v in parts.items()}
    return total


# -- classifier side ---------------------------------------------------------


def loss_cls(probs: Tensor, y, eps: float = 1e-6) -> Tensor:
    y = _labels(y, probs.shape[0])
    if np.any(y < 0) or np.any(y >= probs.shape[1]):
        raise ValueError(f"label out of range for {probs.shape[1]} classes")
    return -(probs.pick(y).clamp(eps, 1.0).log()).mean()


def loss_egl(cam: Tensor, mask: Tensor, eps: float = 1e-6, divergence: str = "bce") -> Tensor:
    """Pixel-mean BCE with the CAM as prediction and a detached mask as target."""
    if cam.shape != mask.shape:
        raise ValueError(f"cam {cam.shape} and mask {mask.shape} must have the same shape")
    target = Tensor(mask.data)
    if divergence == "l1":
        return (cam - target).abs().mean()
    c = cam.clamp(eps, 1.0 - eps)
    return -(target * c.log() + (1.0 - target) * (1.0 - c).log()).mean()


def mixup_sample(xi, xj, beta_alpha: float, rng: np.random.Generator, yi=None, yj=None, beta=None):
    """Convex combination beta*xi + (1-beta)*xj of two same-class inputs.

    Batched (4-d) inputs get one beta per row; ``beta`` overrides the draw.
    """
    a = xi.data if isinstance(xi, Tensor) else np.asarray(xi, dtype=np.float64)
    b = xj.data if isinstance(xj, Tensor) else np.asarray(xj, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mixup inputs differ in shape: {a.shape} vs {b.shape}")
    if yi is not None and yj is not None and np.any(np.asarray(yi) != np.asarray(yj)):
        raise ValueError("mixup pairs must share a label")
    batched = a.ndim == 4
    if beta is None:
        beta = rng.beta(beta_alpha, beta_alpha, size=a.shape[0]) if batched else float(rng.beta(beta_alpha, beta_alpha))
    bshape = (-1,) + (1,) * (a.ndim - 1) if batched else ()
    bb = np.reshape(beta, bshape) if batched else beta
    return Tensor(bb * a + (1.0 - bb) * b), beta


def same_class_partners(y, rng: np.random.Generator) -> np.ndarray:
    """For each row pick a random row with the same label (itself if it is alone)."""
    y = np.asarray(y)
    partner = np.arange(len(y))
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        partner[idx] = idx[rng.integers(0, len(idx), size=len(idx))]
    return partner


def _beta_map(beta, like: Tensor) -> Tensor:
    n = like.shape[0]
    b = np.broadcast_to(np.asarray(beta, dtype=np.float64), (n,))
    return Tensor(b.reshape(n, 1, 1, 1)).expand(like.shape)


def loss_reg(classifier: ClassifierNet, xi: Tensor, xj: Tensor, x_mix: Tensor, beta, y, cfg: LossConfig,
             sal_i: SaliencyMap | None = None, sal_j: SaliencyMap | None = None, return_parts: bool = False):
    """|beta*Phi(xi) + (1-beta)*Phi(xj) - Phi(x_mix)| + CE(f(x_mix), y) + |Phi(x_mix)|.

    Phi is the class-y normalised Grad-CAM map; both L1 terms are pixel means.
    Saliencies already computed for xi / xj can be passed in to avoid recomputation.
    """
    y = _labels(y, xi.shape[0])
    target = xi.shape[2:]
    if sal_i is None:
        sal_i = saliency_from_forward(*classifier(xi), y, target, cfg.cam_root, create_graph=True)
    if sal_j is None:
        sal_j = saliency_from_forward(*classifier(xj), y, target, cfg.cam_root, create_graph=True)
    logits_m, probs_m, act_m = classifier(x_mix)
    sal_m = saliency_from_forward(logits_m, probs_m, act_m, y, target, cfg.cam_root, create_graph=True)
    b = _beta_map(beta, sal_i.normalized)
    consistency = (b * sal_i.normalized + (1.0 - b) * sal_j.normalized - sal_m.normalized).abs().mean()
    ce = loss_cls(probs_m, y, cfg.bce_epsilon)
    sparsity = sal_m.normalized.abs().mean()
    total = consistency + ce + sparsity
    if return_parts:
        return total, {"consistency": consistency.item(), "ce": ce.item(), "sparsity": sparsity.item()}
    return total


@contextlib.contextmanager
def _batch_stats_without_update(masker: MaskerNet):
    prev = (masker.training, masker.update_stats)
    masker.training, masker.update_stats = True, False
    try:
        yield
    finally:
        masker.training, masker.update_stats = prev


def masker_target(masker: MaskerNet, x: Tensor) -> Tensor:
    """Constant mask used as the alignment target (batch statistics, no running-stat update)."""
    with no_grad(), _batch_stats_without_update(masker):
        return Tensor(masker(x).data)


def loss_clf_total(batch, classifier: ClassifierNet, masker: MaskerNet | None, cfg: LossConfig,
                   rng: np.random.Generator | None = None, use_egl: bool = True, mask: Tensor | None = None,
                   return_parts: bool = False):
    """L_cls + lambda3 * L_egl + lambda4 * L_reg with the masker held constant.

    ``use_egl=False`` (warm-up) drops the alignment term and never evaluates the masker.
    """
    x, y = batch
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = _labels(y, x.shape[0])
    rng = rng if rng is not None else np.random.default_rng(0)
    want_egl = use_egl and cfg.lambda3 > 0
    want_reg = cfg.lambda4 > 0
    logits, probs, act = classifier(x)
    parts = {"L_cls": loss_cls(probs, y, cfg.bce_epsilon)}
    total = parts["L_cls"]
    sal = None
    if want_egl or want_reg:
        sal = saliency_from_forward(logits, probs, act, y, x.shape[2:], cfg.cam_root, create_graph=True)
    if want_egl:
        if mask is None:
            if masker is None:
                raise ValueError("alignment term needs a masker or an explicit mask")
            mask = masker_target(masker, x)
        parts["L_egl"] = loss_egl(sal.normalized, mask, cfg.bce_epsilon, cfg.divergence)
        total = total + cfg.lambda3 * parts["L_egl"]
    if want_reg:
        partner = same_class_partners(y, rng)
        xj = Tensor(x.data[partner])
        x_mix, beta = mixup_sample(x, xj, cfg.beta_alpha, rng, y, y[partner])
        sal_j = SaliencyMap(_take(sal.raw, partner), _take(sal.normalized, partner), y[partner])
        parts["L_reg"] = loss_reg(classifier, x, xj, x_mix, beta, y, cfg, sal_i=sal, sal_j=sal_j)
        total = total + cfg.lambda4 * parts["L_reg"]
    if return_parts:
        out = {"L_cls": 0.0, "L_egl": 0.0, "L_reg": 0.0}
        out.update({k: v.item() for k, v in parts.items()})
        return total, out
    return total


def _take(t: Tensor, rows: np.ndarray) -> Tensor:
    """Differentiable row gather for a batch tensor."""
    n = t.shape[0]
    sel = np.zeros((n, n))
    sel[np.arange(n), rows] = 1.0
    flat = t.reshape(n, -1)
    return (Tensor(sel) @ flat).reshape(t.shape)
