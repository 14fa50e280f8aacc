"""Fat areas, volumes and segmentation agreement metrics."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from .errors import CardiacFatError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: float
    tn: float
    fp: float
    fn: float

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise CardiacFatError("confusion counts must be non-negative")

    @property
    def total(self) -> float:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def to_json(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def _dec(v) -> Decimal:
    # spacings are decimal quantities; repr gives the shortest round-tripping literal
    return Decimal(repr(float(v)))


def fat_area(mask, pixel_spacing: float) -> float:
    """Area in mm^2 covered by the mask's true pixels."""
    if not pixel_spacing > 0:
        raise CardiacFatError("pixel_spacing must be positive")
    ps = _dec(pixel_spacing)
    return float(int(np.count_nonzero(mask)) * ps * ps)


def fat_volume(masks, pixel_spacing: float, slice_spacing: float) -> float:
    """Volume in ml by trapezoidal interpolation of per-slice areas along z."""
    areas = [fat_area(m, pixel_spacing) for m in masks]
    return volume_from_areas(areas, slice_spacing)


def volume_from_areas(areas, slice_spacing: float) -> float:
    """Trapezoidal volume in ml from per-slice areas in mm^2 spaced ``slice_spacing`` mm apart."""
    if not areas:
        raise CardiacFatError("volume needs at least one slice")
    a = [_dec(v) for v in areas]
    gap = _dec(slice_spacing)
    if len(a) == 1:
        return float(a[0] * gap / 1000)
    mm3 = sum(((x + y) / 2 * gap for x, y in zip(a[:-1], a[1:])), Decimal(0))
    return float(mm3 / 1000)


@dataclass(frozen=True)
class VolumeReport:
    epicardial_ml: float
    mediastinal_ml: float
    epicardial_areas: list
    mediastinal_areas: list
    slice_spacing: float
    pixel_spacing: float

    def to_json(self) -> dict:
        return {
            "epicardial_ml": self.epicardial_ml,
            "mediastinal_ml": self.mediastinal_ml,
            "epicardial_areas_mm2": self.epicardial_areas,
            "mediastinal_areas_mm2": self.mediastinal_areas,
            "slice_spacing_mm": self.slice_spacing,
            "pixel_spacing_mm": self.pixel_spacing,
        }


def volume_report(epicardial_masks, mediastinal_masks, pixel_spacing: float, slice_spacing: float) -> VolumeReport:
    epi = [fat_area(m, pixel_spacing) for m in epicardial_masks]
    med = [fat_area(m, pixel_spacing) for m in mediastinal_masks]
    return VolumeReport(
        volume_from_areas(epi, slice_spacing),
        volume_from_areas(med, slice_spacing),
        epi,
        med,
        slice_spacing,
        pixel_spacing,
    )


def confusion(pred, truth, domain=None) -> ConfusionMatrix:
    """2x2 counts over ``domain`` (all pixels when None; normally the fat pixels)."""
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise CardiacFatError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if domain is not None:
        domain = np.asarray(domain, bool)
        if domain.shape != pred.shape:
            raise CardiacFatError("domain shape differs from the masks")
        pred, truth = pred[domain], truth[domain]
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionMatrix(tp, tn, fp, fn)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total <= 0:
        raise CardiacFatError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def rates(cm: ConfusionMatrix) -> tuple[float, float, float, float]:
    """(tp_rate, tn_rate, fp_rate, fn_rate); fp_rate = 1 - tn_rate, fn_rate = 1 - tp_rate."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise CardiacFatError("undefined rate: a truth class is absent")
    tpr = cm.tp / (cm.tp + cm.fn)
    tnr = cm.tn / (cm.tn + cm.fp)
    return tpr, tnr, 1.0 - tnr, 1.0 - tpr


def dice(pred, truth, domain=None) -> float:
    """2 tp / (2 tp + fp + fn); 1.0 when both masks are empty."""
    cm = confusion(pred, truth, domain)
    den = 2 * cm.tp + cm.fp + cm.fn
    return 1.0 if den == 0 else 2 * cm.tp / den


def kappa(cm: ConfusionMatrix) -> float:
    n = cm.total
    if n <= 0:
        raise CardiacFatError("kappa of an empty confusion matrix")
    po = (cm.tp + cm.tn) / n
    pe = ((cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn)) / (n * n)
    if pe == 1:
        raise CardiacFatError("undefined kappa: both raters use a single category")
    return (po - pe) / (1 - pe)


def class_report(cm: ConfusionMatrix) -> dict:
    """Accuracy, rates and kappa for one class; undefined entries are None."""
    out = {"accuracy": accuracy(cm), **cm.to_json()}
    try:
        out.update(zip(("tp_rate", "tn_rate", "fp_rate", "fn_rate"), rates(cm)))
    except CardiacFatError:
        out.update(tp_rate=None, tn_rate=None, fp_rate=None, fn_rate=None)
    try:
        out["kappa"] = kappa(cm)
    except CardiacFatError:
        out["kappa"] = None
    return out


_MEAN_KEYS = ("accuracy", "tp_rate", "tn_rate", "fp_rate", "fn_rate", "kappa", "dice")


def mean_class_report(reports) -> dict:
    """Unweighted mean of each metric over the classes that define it."""
    reports = list(reports.values()) if isinstance(reports, dict) else list(reports)
    if not reports:
        raise CardiacFatError("mean of zero class reports")
    out = {}
    for key in _MEAN_KEYS:
        vals = [r[key] for r in reports if r.get(key) is not None]
        if vals:
            out[key] = sum(vals) / len(vals)
    return out


def format_table(reports: dict) -> str:
    """Aligned text table with one row per class, in percent."""
    header = ["Class", "Accuracy %", "TP rate %", "TN rate %", "FP rate %", "FN rate %", "Kappa", "Dice %"]
    rows = [header]

    def pct(v):
        return "-" if v is None else f"{100 * v:.1f}"

    for name, r in reports.items():
        rows.append(
            [
                name,
                pct(r.get("accuracy")),
                pct(r.get("tp_rate")),
                pct(r.get("tn_rate")),
                pct(r.get("fp_rate")),
                pct(r.get("fn_rate")),
                "-" if r.get("kappa") is None else f"{r['kappa']:.3f}",
                pct(r.get("dice")),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
        for row in rows
    )
