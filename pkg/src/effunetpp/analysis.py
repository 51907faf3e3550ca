"""
Parameter and FLOP accounting, Pareto frontiers and summary reports.

FLOPs follow one convention everywhere: 2 FLOPs per multiply-accumulate,
counted for ``Conv2d`` and ``Linear`` layers only. Batch norm, activations,
pooling and interpolation are free. Absolute numbers are therefore not
comparable with tools that count differently; orderings and ratios are.
"""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .exceptions import ContractError


class ParamCount(NamedTuple):
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


def count_params(model: nn.Module) -> ParamCount:
    trainable = frozen = 0
    for p in model.parameters():
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    return ParamCount(trainable, frozen)


@dataclass
class CostReport:
    params: int
    flops: int
    breakdown: Dict[str, int] = field(default_factory=dict)
    input_size: Tuple[int, int] = (0, 0)

    def subtotal(self, prefix: str) -> int:
        """FLOPs of every layer whose qualified name starts with ``prefix``."""
        dotted = prefix.rstrip(".") + "."
        return sum(v for k, v in self.breakdown.items() if k == prefix or k.startswith(dotted))


def layer_flops(module: nn.Module, out: torch.Tensor) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        per_out = (module.in_channels // module.groups) * kh * kw
        return 2 * out.numel() * per_out
    if isinstance(module, nn.Linear):
        return 2 * out.numel() * module.in_features
    return 0


def count_flops(model: nn.Module, input_size: Union[int, Tuple[int, int]], in_channels: Optional[int] = None) -> CostReport:
    """Analytic FLOPs for one image of ``input_size``.

    Shapes are propagated on a meta-device copy, so no arithmetic runs and
    the result does not depend on hardware.
    """
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    if in_channels is None:
        in_channels = getattr(model, "in_channels", None)
        if in_channels is None:
            first = next((m for m in model.modules() if isinstance(m, nn.Conv2d)), None)
            if first is None:
                raise ContractError("cannot infer input channels; pass in_channels")
            in_channels = first.in_channels
    ghost = copy.deepcopy(model).to("meta").eval()
    breakdown: Dict[str, int] = {}
    handles = []
    for name, m in ghost.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            def hook(mod, _inp, out, name=name):
                breakdown[name] = breakdown.get(name, 0) + layer_flops(mod, out)
            handles.append(m.register_forward_hook(hook))
    try:
        with torch.no_grad():
            ghost(torch.empty(1, in_channels, *input_size, device="meta"))
    finally:
        for h in handles:
            h.remove()
    return CostReport(
        params=count_params(model).total,
        flops=sum(breakdown.values()),
        breakdown=breakdown,
        input_size=tuple(input_size),
    )


def decoder_cost(model: nn.Module, input_size=512) -> Tuple[int, int]:
    """(params, FLOPs) of the decoder and head of a ``SegmentationModel``."""
    report = count_flops(model, input_size)
    params = sum(p.numel() for p in model.decoder_parameters())
    return params, report.subtotal("decoder") + report.subtotal("head")


@dataclass
class ParetoPoint:
    label: str
    gds: float
    flops: float
    params: float = 0.0

    def __post_init__(self):
        for name in ("gds", "flops", "params"):
            if not math.isfinite(float(getattr(self, name))):
                raise ContractError(f"{self.label}: {name} is not finite")


def pareto_frontier(points: Sequence[ParetoPoint], cost: str = "flops", score: str = "gds") -> List[ParetoPoint]:
    """Points not dominated in (``cost`` ascending, ``score`` descending).

    A point is dominated when another has cost <= and score >= with at
    least one strict. Exact duplicates dominate neither each other, so all
    copies survive. Output is sorted by cost.
    """
    if not points:
        raise ContractError("pareto_frontier needs at least one point")
    ordered = sorted(points, key=lambda p: (getattr(p, cost), -getattr(p, score)))
    frontier = []
    best_below = -math.inf
    i = 0
    while i < len(ordered):
        c = getattr(ordered[i], cost)
        j = i
        while j < len(ordered) and getattr(ordered[j], cost) == c:
            j += 1
        group = ordered[i:j]
        top = getattr(group[0], score)
        if top > best_below:
            frontier.extend(p for p in group if getattr(p, score) == top)
            best_below = top
        i = j
    return frontier


SUMMARY_FIELDS = [
    "label",
    "encoder",
    "decoder",
    "attention",
    "runs",
    "gds_mean",
    "gds_std",
    "params",
    "flops",
]


def read_summary(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def points_from_rows(rows: Iterable[Dict]) -> List[ParetoPoint]:
    pts = []
    for r in rows:
        if str(r.get("status", "ok")) != "ok" or r.get("gds_mean") in (None, ""):
            continue
        pts.append(ParetoPoint(r["label"], float(r["gds_mean"]), float(r["flops"]), float(r.get("params") or 0)))
    return pts


def _atomic_write_csv(path, fieldnames, rows):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    os.replace(tmp, path)


def _plot(points, frontier, axis, path_stem):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    if points:
        ax.scatter([p.gds for p in points], [getattr(p, axis) for p in points], s=18)
        for p in points:
            ax.annotate(p.label, (p.gds, getattr(p, axis)), fontsize=6)
    if frontier:
        ax.plot([p.gds for p in frontier], [getattr(p, axis) for p in frontier], "k--", lw=1, label="Pareto frontier")
        ax.legend(loc="best", fontsize=7)
    ax.set_xlabel("generalized dice score")
    ax.set_ylabel("FLOPs" if axis == "flops" else "parameters")
    fig.tight_layout()
    paths = []
    for ext in ("svg", "png"):
        out = f"{path_stem}.{ext}"
        fig.savefig(out)
        paths.append(out)
    plt.close(fig)
    return paths


def emit_report(rows: Sequence[Dict], out_dir) -> Dict[str, List[str]]:
    """Write ``summary.csv``, ``frontier.csv`` and the GDS-vs-cost plots.

    ``rows`` carry at least the columns in ``SUMMARY_FIELDS``; extra
    metric columns are kept in ``summary.csv``.
    """
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    rows = list(rows)
    extra = []
    for r in rows:
        extra.extend(k for k in r if k not in SUMMARY_FIELDS and k not in extra)
    columns = SUMMARY_FIELDS + extra
    written = {"csv": [], "plots": []}
    summary = os.path.join(out_dir, "summary.csv")
    _atomic_write_csv(summary, columns, rows)
    written["csv"].append(summary)
    points = points_from_rows(rows)
    frontier_flops = pareto_frontier(points, "flops") if points else []
    frontier_params = pareto_frontier(points, "params") if points else []
    frontier_csv = os.path.join(out_dir, "frontier.csv")
    _atomic_write_csv(
        frontier_csv,
        ["label", "gds", "flops", "params"],
        [{"label": p.label, "gds": p.gds, "flops": p.flops, "params": p.params} for p in frontier_flops],
    )
    written["csv"].append(frontier_csv)
    written["plots"] += _plot(points, frontier_flops, "flops", os.path.join(out_dir, "gds_vs_flops"))
    written["plots"] += _plot(points, frontier_params, "params", os.path.join(out_dir, "gds_vs_params"))
    return written
