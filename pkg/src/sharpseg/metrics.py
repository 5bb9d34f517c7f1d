"""Segmentation metrics, prediction post-processing, and Grad-CAM.

Jaccard is intersection over union of binary masks; Dice is twice the
intersection over the summed areas.  When both masks are empty the score is
defined as 1 (perfect agreement).  Multi-class scores are unweighted means
over per-class binary scores, with absent classes contributing 1 under the
same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .autograd import Tape
from .ops import relu


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Label 1 where probability >= threshold, else 0 (float32 mask)."""
    return (np.asarray(probs) >= threshold).astype(np.float32)


def argmax_channels(probs: np.ndarray) -> np.ndarray:
    """(n,C,h,w) probabilities -> (n,1,h,w) label mask; ties go to the
    lowest class index."""
    return np.argmax(probs, axis=1, keepdims=True).astype(np.float32)


def _binary_counts(g: np.ndarray, p: np.ndarray) -> tuple[int, int, int, int]:
    if g.shape != p.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {p.shape}")
    gb = np.asarray(g) != 0
    pb = np.asarray(p) != 0
    inter = int(np.count_nonzero(gb & pb))
    union = int(np.count_nonzero(gb | pb))
    return int(np.count_nonzero(gb)), int(np.count_nonzero(pb)), inter, union


def jaccard(g: np.ndarray, p: np.ndarray) -> float:
    """|G n P| / |G u P|; 1 when both masks are empty."""
    _, _, inter, union = _binary_counts(g, p)
    return 1.0 if union == 0 else inter / union


def dice(g: np.ndarray, p: np.ndarray) -> float:
    """2|G n P| / (|G| + |P|); 1 when both masks are empty."""
    ng, npred, inter, _ = _binary_counts(g, p)
    return 1.0 if ng + npred == 0 else 2.0 * inter / (ng + npred)


def _check_labels(arr: np.ndarray, num_classes: int, name: str) -> np.ndarray:
    labels = np.asarray(arr)
    if labels.size and (labels.min() < 0 or labels.max() > num_classes - 1):
        raise ValueError(f"{name} contains labels outside 0..{num_classes - 1}")
    return labels


def mean_iou(g: np.ndarray, p: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class Jaccard over all classes."""
    g = _check_labels(g, num_classes, "ground truth")
    p = _check_labels(p, num_classes, "prediction")
    return float(np.mean([jaccard(g == c, p == c) for c in range(num_classes)]))


def mean_dice(g: np.ndarray, p: np.ndarray, num_classes: int) -> float:
    g = _check_labels(g, num_classes, "ground truth")
    p = _check_labels(p, num_classes, "prediction")
    return float(np.mean([dice(g == c, p == c) for c in range(num_classes)]))


@dataclass
class MetricsRecord:
    """Per-class and mean scores plus the raw pixel counts behind them."""

    per_class_jaccard: list[float]
    per_class_dice: list[float]
    mean_jaccard: float
    mean_dice: float
    counts: list[dict]  # per class: {"g", "p", "intersection", "union"}


def compute_metrics(g: np.ndarray, p: np.ndarray, num_classes: int) -> MetricsRecord:
    g = _check_labels(g, num_classes, "ground truth")
    p = _check_labels(p, num_classes, "prediction")
    per_j, per_d, counts = [], [], []
    for c in range(num_classes):
        ng, npred, inter, union = _binary_counts(g == c, p == c)
        per_j.append(1.0 if union == 0 else inter / union)
        per_d.append(1.0 if ng + npred == 0 else 2.0 * inter / (ng + npred))
        counts.append({"g": ng, "p": npred, "intersection": inter,
                       "union": union})
    return MetricsRecord(per_j, per_d, float(np.mean(per_j)),
                         float(np.mean(per_d)), counts)


# ----------------------------------------------------------------- gradcam

def grad_cam(model, image: np.ndarray, layer: int, target_class: int = 0
             ) -> np.ndarray:
    """Gradient-weighted class activation map at a skip-fusion layer.

    ``layer`` indexes the four concatenation points by the encoder level
    they fuse: 1 is the full-resolution fusion, 4 the deepest.  The target
    score is the sum of the target class's logits over all pixels; channel
    weights are the spatial means of the score's gradient at the chosen
    concatenation, and the heatmap is the ReLU of the weighted activation
    sum, nearest-neighbour upsampled to the input size and min-max
    normalized into [0, 1].  An all-zero map is returned unchanged.
    """
    if layer not in (1, 2, 3, 4):
        raise ValueError(f"layer must be 1..4, got {layer}")
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"grad_cam expects a single (1,c,h,w) image, got "
                         f"{getattr(image, 'shape', None)}")
    if not 0 <= target_class < model.config.num_classes:
        raise ValueError(f"target class {target_class} out of range for "
                         f"{model.config.num_classes} classes")
    tape = Tape()
    trace = model_mod.run_forward(model, image, tape)
    fusion_id = trace.fusion_ids[layer]
    score = tape.class_score(trace.logits_id, target_class)
    grads = tape.backward(score)

    activation = tape.value(fusion_id).astype(np.float64)
    grad = grads[fusion_id].astype(np.float64)
    weights = grad.mean(axis=(2, 3), keepdims=True)
    cam = relu((weights * activation).sum(axis=1, keepdims=True))

    scale = image.shape[2] // cam.shape[2]
    cam = cam.repeat(scale, axis=2).repeat(scale, axis=3)
    lo, hi = cam.min(), cam.max()
    if hi == 0.0:
        return cam.astype(np.float32)
    if hi == lo:
        return np.ones_like(cam, dtype=np.float32)
    return ((cam - lo) / (hi - lo)).astype(np.float32)
