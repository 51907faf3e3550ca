"""
Segmentation quality metrics.

Per-class DSC, precision and recall are computed from hard (argmax)
predictions. The overall DSC and the generalized dice score (GDS) are
computed from the soft probability map.

Tensors follow the ``(batch, classes, *spatial)`` layout unless a different
``class_dim`` is passed. Everything except the class axis is reduced, so a
batch is scored as if it were a single large image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch

from .exceptions import ContractError

CLASS_NAMES = ("background", "artery", "catheter")
WEIGHT_EPS = 1e-6


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float64)
    return torch.as_tensor(arr)


def _reduce_dims(t: torch.Tensor, class_dim: int):
    class_dim = class_dim % t.ndim
    return class_dim, tuple(d for d in range(t.ndim) if d != class_dim)


def _check_pair(g: torch.Tensor, p: torch.Tensor):
    if g.shape != p.shape:
        raise ContractError(f"ground truth shape {tuple(g.shape)} != prediction shape {tuple(p.shape)}")


def one_hot(labels, num_classes: int, class_dim: int = 1) -> torch.Tensor:
    """Encode an integer label map as a one-hot float tensor.

    The class axis is inserted at ``class_dim`` (default 1, giving
    ``(batch, classes, H, W)`` for a ``(batch, H, W)`` label map).
    """
    labels = _as_tensor(labels).long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels outside [0, {num_classes})")
    oh = torch.nn.functional.one_hot(labels, num_classes).to(torch.float64)
    return torch.movedim(oh, -1, class_dim)


def class_areas(g, class_dim: int = 1) -> torch.Tensor:
    g = _as_tensor(g)
    cd, dims = _reduce_dims(g, class_dim)
    return g.sum(dim=dims)


def inverse_area_weights(g, class_dim: int = 1, eps: float = WEIGHT_EPS) -> torch.Tensor:
    """Per-class weights ``1 / (area**2 + eps)``; absent classes get 0."""
    area = class_areas(g, class_dim).to(torch.float64)
    w = 1.0 / (area * area + eps)
    return torch.where(area > 0, w, torch.zeros_like(w))


def generalized_dice_score(g, p, weights=None, class_dim: int = 1) -> torch.Tensor:
    """Weighted dice overlap between a one-hot target and a probability map.

    ``2 * sum_c w_c sum_i g_ci p_ci / sum_c w_c sum_i (g_ci + p_ci)``.
    With ``weights=None`` every class weighs 1 and the result is the
    overall soft DSC. Differentiable with respect to ``p``.
    """
    g = _as_tensor(g)
    p = _as_tensor(p)
    _check_pair(g, p)
    cd, dims = _reduce_dims(p, class_dim)
    g = g.to(p.dtype)
    n_classes = p.shape[cd]
    if weights is None:
        w = torch.ones(n_classes, dtype=p.dtype, device=p.device)
    else:
        w = _as_tensor(weights).to(dtype=p.dtype, device=p.device)
        if w.shape != (n_classes,):
            raise ContractError(f"expected {n_classes} class weights, got shape {tuple(w.shape)}")
    intersect = (g * p).sum(dim=dims)
    total = (g + p).sum(dim=dims)
    numerator = (w * intersect).sum()
    denominator = (w * total).sum()
    if denominator.detach() == 0:
        # every weighted class is empty in both maps
        return torch.ones((), dtype=p.dtype, device=p.device)
    return 2.0 * numerator / denominator


def confusion_counts(g, pred, class_dim: int = 1):
    """True positive, false positive and false negative counts per class."""
    g = _as_tensor(g)
    cd, dims = _reduce_dims(g, class_dim)
    n_classes = g.shape[cd]
    pred_oh = one_hot(pred, n_classes, class_dim=cd).to(g.device)
    if pred_oh.shape != g.shape:
        raise ContractError(f"prediction shape {tuple(pred_oh.shape)} does not match target {tuple(g.shape)}")
    g = g.to(torch.float64) > 0.5
    pred_oh = pred_oh > 0.5
    tp = (g & pred_oh).sum(dim=dims)
    fp = (~g & pred_oh).sum(dim=dims)
    fn = (g & ~pred_oh).sum(dim=dims)
    return tp.long(), fp.long(), fn.long()


def _ratio(num: int, den: int, empty: float) -> float:
    return float(num) / float(den) if den > 0 else empty


def dice_per_class(g, pred, class_dim: int = 1) -> Dict[str, np.ndarray]:
    """Hard DSC, precision and recall for each class.

    A class that is empty in both target and prediction scores 1.0 on every
    metric. Precision with no predicted pixels (or recall with no target
    pixels) is 1.0 only if the other set is also empty, else 0.0.
    """
    tp, fp, fn = confusion_counts(g, pred, class_dim)
    dsc, prec, rec = [], [], []
    for t, f_p, f_n in zip(tp.tolist(), fp.tolist(), fn.tolist()):
        dsc.append(_ratio(2 * t, 2 * t + f_p + f_n, 1.0))
        prec.append(_ratio(t, t + f_p, 1.0 if f_n == 0 else 0.0))
        rec.append(_ratio(t, t + f_n, 1.0 if f_p == 0 else 0.0))
    return {"dsc": np.array(dsc), "precision": np.array(prec), "recall": np.array(rec)}


@dataclass
class MetricReport:
    dsc: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    dsc_overall: float
    gds: float
    class_names: Sequence[str] = field(default=CLASS_NAMES)

    def as_record(self) -> Dict[str, float]:
        """Flatten to ``dsc_<class>``, ``precision_<class>``, ``recall_<class>``, ``dsc_overall``, ``gds``."""
        names = _names(self.class_names, len(self.dsc))
        rec: Dict[str, float] = {}
        for key in ("dsc", "precision", "recall"):
            for name, value in zip(names, getattr(self, key)):
                rec[f"{key}_{name}"] = float(value)
        rec["dsc_overall"] = float(self.dsc_overall)
        rec["gds"] = float(self.gds)
        return rec


def _names(class_names: Sequence[str], n: int):
    if len(class_names) >= n:
        return list(class_names[:n])
    return list(class_names) + [f"class{c}" for c in range(len(class_names), n)]


def evaluate_image(g, p, class_dim: int = 1, class_names: Sequence[str] = CLASS_NAMES) -> MetricReport:
    """Full report for one image (or a batch treated as one image)."""
    g = _as_tensor(g).to(torch.float64)
    p = _as_tensor(p).detach().to(torch.float64)
    _check_pair(g, p)
    pred = p.argmax(dim=class_dim)
    hard = dice_per_class(g, pred, class_dim)
    gds = generalized_dice_score(g, p, inverse_area_weights(g, class_dim), class_dim)
    dsc = generalized_dice_score(g, p, None, class_dim)
    return MetricReport(
        dsc=hard["dsc"],
        precision=hard["precision"],
        recall=hard["recall"],
        dsc_overall=float(dsc),
        gds=float(gds),
        class_names=tuple(_names(class_names, p.shape[class_dim])),
    )


def mean_record(records: Sequence[Mapping[str, float]]) -> Dict[str, float]:
    """Unweighted mean of per-image records, key by key."""
    if not records:
        raise ContractError("cannot average an empty set of records")
    keys = list(records[0])
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def record_fields(num_classes: int = 3, class_names: Optional[Sequence[str]] = None):
    names = _names(class_names or CLASS_NAMES, num_classes)
    out = []
    for key in ("dsc", "precision", "recall"):
        out.extend(f"{key}_{n}" for n in names)
    return out + ["dsc_overall", "gds"]
