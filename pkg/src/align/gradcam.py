"""Grad-CAM attributions.

Channel weights are the spatial mean of d f_y / d A over the cached
activation A; the raw map is ReLU of the weighted channel sum. Maps are then
divided by their per-sample max and upsampled (align-corners) to the input
resolution so they can be compared pixel-for-pixel with masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, bilinear_upsample, enable_grad, grad

EPS_MAX = 1e-12


@dataclass
class SaliencyMap:
    raw: Tensor
    normalized: Tensor
    class_index: np.ndarray


def channel_weights(activation: Tensor, grads: Tensor) -> Tensor:
    if activation.shape != grads.shape or activation.ndim != 4:
        raise ValueError(f"activation {activation.shape} and grads {grads.shape} must be equal (N,K,h,w)")
    return grads.mean((2, 3))


def gradcam_map(activation: Tensor, weights: Tensor) -> Tensor:
    n, k, h, w = activation.shape
    if weights.shape != (n, k):
        raise ValueError(f"weights {weights.shape} do not match activation channels {(n, k)}")
    weighted = activation * weights.reshape(n, k, 1, 1).expand(activation.shape)
    return weighted.sum(1, keepdims=True).relu()


def normalize_and_upsample(raw: Tensor, target: tuple[int, int], eps: float = EPS_MAX) -> Tensor:
    peak = raw.max((1, 2, 3), keepdims=True).clamp(lo=eps)
    return bilinear_upsample(raw / peak.expand(raw.shape), target)


def _check_labels(y, n: int, num_classes: int) -> np.ndarray:
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)).copy()
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"class index out of range for {num_classes} classes: {y}")
    return y


def saliency_from_forward(logits: Tensor, probs: Tensor, activation: Tensor, y,
                          target: tuple[int, int], cam_root: str = "prob",
                          create_graph: bool = False) -> SaliencyMap:
    """Grad-CAM from an already-computed forward pass.

    Samples in a batch are independent in the classifier, so differentiating
    the sum of per-sample scores yields every sample's own gradient at once.
    """
    y = _check_labels(y, probs.shape[0], probs.shape[1])
    if cam_root == "prob":
        score = probs.pick(y).sum()
    elif cam_root == "logit":
        score = logits.pick(y).sum()
    else:
        raise ValueError(f"cam_root must be 'prob' or 'logit', got {cam_root!r}")
    (dA,) = grad(score, [activation], create_graph=create_graph, retain_graph=True)
    raw = gradcam_map(activation, channel_weights(activation, dA))
    return SaliencyMap(raw=raw, normalized=normalize_and_upsample(raw, target), class_index=y)


def explain(classifier, x: Tensor, y, cam_root: str = "prob", create_graph: bool = False) -> SaliencyMap:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not (isinstance(x, Tensor) and x.requires_grad):
        # a graph must exist even when the parameters are frozen
        x = Tensor(data, requires_grad=True)
    y = _check_labels(y, x.shape[0], classifier.num_classes)
    with enable_grad():
        logits, probs, act = classifier(x)
        sal = saliency_from_forward(logits, probs, act, y, x.shape[2:], cam_root, create_graph)
    if not create_graph:
        sal = SaliencyMap(sal.raw.detach(), sal.normalized.detach(), sal.class_index)
    return sal
