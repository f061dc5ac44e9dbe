"""IoU-based referring segmentation metrics: gIoU, cIoU and Pr@X."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
TABLE_COLUMNS = tuple(f"Pr@{t}" for t in PR_THRESHOLDS) + ("cIoU", "gIoU")


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask.detach().cpu() if hasattr(mask, "detach") else mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
        arr = arr.astype(bool)
    return arr


def intersection_union(pred, gt) -> tuple[int, int]:
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return int(np.logical_and(p, g).sum()), int(np.logical_or(p, g).sum())


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match (1.0)."""
    inter, union = intersection_union(pred, gt)
    return 1.0 if union == 0 else inter / union


def giou(ious: Sequence[float]) -> float:
    if len(ious) == 0:
        raise ValueError("gIoU of an empty list")
    return math.fsum(ious) / len(ious)


def ciou(pairs: Iterable[tuple]) -> float:
    total_i = total_u = 0
    n = 0
    for pred, gt in pairs:
        i, u = intersection_union(pred, gt)
        total_i += i
        total_u += u
        n += 1
    if n == 0:
        raise ValueError("cIoU of an empty set")
    return 1.0 if total_u == 0 else total_i / total_u


def precision_at(ious: Sequence[float], threshold: float) -> float:
    """Percentage (0-100) of samples with IoU >= ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if len(ious) == 0:
        raise ValueError("precision of an empty list")
    arr = np.asarray(ious, dtype=np.float64)
    return 100.0 * float((arr >= threshold).sum()) / len(arr)


@dataclass
class EvalReport:
    giou: float
    ciou: float
    pr: dict[float, float]
    per_image_iou: list[float] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_image_iou)

    def row(self) -> list[float]:
        """Values in table column order, all as percentages."""
        return [self.pr[t] for t in PR_THRESHOLDS] + [100 * self.ciou, 100 * self.giou]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr"] = {f"{t:.1f}": v for t, v in self.pr.items()}
        d["n"] = self.n
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            giou=d["giou"],
            ciou=d["ciou"],
            pr={float(k): v for k, v in d["pr"].items()},
            per_image_iou=list(d.get("per_image_iou", [])),
            ids=list(d.get("ids", [])),
        )


def evaluate_pairs(pairs: Sequence[tuple], ids: Sequence[str] | None = None) -> EvalReport:
    pairs = list(pairs)
    ious = [iou(p, g) for p, g in pairs]
    return EvalReport(
        giou=giou(ious),
        ciou=ciou(pairs),
        pr={t: precision_at(ious, t) for t in PR_THRESHOLDS},
        per_image_iou=ious,
        ids=list(ids or []),
    )


def format_table(rows: Sequence[tuple[Sequence[str], Sequence[float]]], lead: Sequence[str] = ("Method",)) -> str:
    """Pipe-delimited plain-text table with the metric columns in fixed order.

    ``rows`` holds ``(leading_cells, metric_values)`` pairs; metrics print
    with two decimals.
    """
    header = list(lead) + list(TABLE_COLUMNS)
    body = [list(cells) + [f"{v:.2f}" for v in values] for cells, values in rows]
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(str(c).rjust(w) for c, w in zip(r, widths))  # noqa: E731
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"
