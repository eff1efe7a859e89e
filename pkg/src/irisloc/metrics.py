"""Evaluation metrics: pixel confusion, EI, P/R/F1, Dice, and the
maximum-normalised-error protocol with hit rates at d <= 0.25 / 0.10 / 0.05.

Conventions, fixed here so aggregates stay defined on degenerate inputs:
0/0 ratios evaluate to 0; a missing detection contributes d = +inf (a miss
at every threshold) instead of being dropped. EI is the fraction of pixels
on which the two masks disagree, averaged over images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .localise import PixelPoint

D_THRESHOLDS = (0.25, 0.10, 0.05)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float]:
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def dice_coefficient(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def segmentation_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of disagreeing pixels for one image pair."""
    c = confusion(pred, gt)
    return (c.fp + c.fn) / c.total


def max_normalized_error(
    pred_left: PixelPoint | None,
    pred_right: PixelPoint | None,
    gt_left: PixelPoint,
    gt_right: PixelPoint,
    interocular: float,
) -> float:
    """max of the two eye-centre errors over the interocular distance.

    A missing prediction on either eye yields +inf.
    """
    if not interocular > 0:
        raise ValueError(f"interocular distance must be positive, got {interocular}")
    if pred_left is None or pred_right is None:
        return math.inf
    el = math.hypot(pred_left.x - gt_left.x, pred_left.y - gt_left.y)
    er = math.hypot(pred_right.x - gt_right.x, pred_right.y - gt_right.y)
    return max(el, er) / interocular


def hit_rates(ds: list[float]) -> dict[float, float]:
    """Percentage of faces with d <= threshold (inclusive), per threshold."""
    if not ds:
        raise ValueError("hit_rates needs at least one d value")
    return {t: 100.0 * sum(1 for d in ds if d <= t) / len(ds) for t in D_THRESHOLDS}


@dataclass
class EvalReport:
    """Per-dataset metric table; None marks a metric the run could not
    produce (e.g. no complete face pairs for d)."""

    dataset: str
    n_samples: int
    model_id: str = ""
    sigma: float | None = None
    threshold: float | None = None
    ei: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    dice: float | None = None
    per_image: dict[str, list[float]] = field(default_factory=dict)
    hit_rates: dict[float, float] | None = None
    d_values: list[float] | None = None
    mean_pixel_error: float | None = None
    pixel_errors: list[float] | None = None

    def __post_init__(self):
        if self.hit_rates is not None:
            rates = [self.hit_rates[t] for t in D_THRESHOLDS]
            if any(not 0.0 <= r <= 100.0 for r in rates):
                raise ValueError(f"hit rates out of [0, 100]: {rates}")
            if not (rates[0] >= rates[1] >= rates[2]):
                raise ValueError(f"hit rates must be monotone over {D_THRESHOLDS}: {rates}")


def _num(v: float) -> float | str:
    return "inf" if v == math.inf else v


def _denum(v) -> float:
    return math.inf if v == "inf" else float(v)


def render_report(report: EvalReport, fmt: str = "text-table") -> bytes:
    """Deterministic serialisation; text columns follow d<=0.25, 0.10, 0.05."""
    if fmt == "json":
        doc = {
            "dataset": report.dataset,
            "n_samples": report.n_samples,
            "model_id": report.model_id,
            "config": {"sigma": report.sigma, "threshold": report.threshold},
            "segmentation": None,
            "localisation": None,
        }
        if report.ei is not None:
            doc["segmentation"] = {
                "ei": report.ei,
                "precision": report.precision,
                "recall": report.recall,
                "f1": report.f1,
                "dice": report.dice,
                "per_image": report.per_image,
            }
        if report.hit_rates is not None or report.pixel_errors is not None:
            loc = {
                "hit_rates": None
                if report.hit_rates is None
                else {f"{t}": report.hit_rates[t] for t in D_THRESHOLDS},
                "d_values": None
                if report.d_values is None
                else [_num(d) for d in report.d_values],
                "mean_pixel_error": report.mean_pixel_error,
                "pixel_errors": report.pixel_errors,
            }
            doc["localisation"] = loc
        return (json.dumps(doc, indent=2) + "\n").encode("utf-8")
    if fmt == "text-table":
        lines = [
            f"dataset: {report.dataset}   samples: {report.n_samples}   model: {report.model_id}",
            f"config: sigma={report.sigma}   threshold={report.threshold}",
        ]
        if report.ei is not None:
            lines.append(
                "segmentation:  EI={:.6f}  precision={:.4f}  recall={:.4f}  F1={:.4f}  Dice={:.4f}".format(
                    report.ei, report.precision, report.recall, report.f1, report.dice
                )
            )
        else:
            lines.append("segmentation:  -")
        if report.hit_rates is not None:
            lines.append(
                "localisation (% of faces):  d<=0.25: {:6.2f}   d<=0.10: {:6.2f}   d<=0.05: {:6.2f}".format(
                    *(report.hit_rates[t] for t in D_THRESHOLDS)
                )
            )
        else:
            lines.append("localisation:  -")
        if report.mean_pixel_error is not None:
            lines.append(f"pixel error (px):  mean={report.mean_pixel_error:.4f}")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def report_from_json(blob: bytes | str) -> EvalReport:
    doc = json.loads(blob)
    seg = doc.get("segmentation") or {}
    loc = doc.get("localisation") or {}
    rates = loc.get("hit_rates")
    return EvalReport(
        dataset=doc["dataset"],
        n_samples=doc["n_samples"],
        model_id=doc.get("model_id", ""),
        sigma=doc["config"]["sigma"],
        threshold=doc["config"]["threshold"],
        ei=seg.get("ei"),
        precision=seg.get("precision"),
        recall=seg.get("recall"),
        f1=seg.get("f1"),
        dice=seg.get("dice"),
        per_image=seg.get("per_image", {}),
        hit_rates=None if rates is None else {float(k): v for k, v in rates.items()},
        d_values=None
        if loc.get("d_values") is None
        else [_denum(d) for d in loc["d_values"]],
        mean_pixel_error=loc.get("mean_pixel_error"),
        pixel_errors=loc.get("pixel_errors"),
    )
