"""Segmentation evaluation: Dice overlap, exact Hausdorff distance, per-class
reports, and the two ensemble readings (metric averaging vs soft voting).

Distances are in pixel units; an optional spacing multiplier rescales them
for data with a physical resolution. Empty-mask conventions are explicit
because both metrics are undefined on empty sets: two empty masks agree
perfectly (DSC 1, HD 0), while exactly one empty mask scores DSC 0 and an HD
penalty equal to the image diagonal.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError


@dataclass
class MetricsReport:
    per_class_dsc: dict[int, float]  # percent
    per_class_hd: dict[int, float]   # pixels (times spacing)
    mean_dsc: float
    mean_hd: float
    mode: str = ""
    seed_stats: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "per_class_dsc": {str(c): v for c, v in self.per_class_dsc.items()},
            "per_class_hd": {str(c): v for c, v in self.per_class_hd.items()},
            "mean_dsc": self.mean_dsc,
            "mean_hd": self.mean_hd,
            "mode": self.mode,
        }
        if self.seed_stats is not None:
            d["seed_stats"] = self.seed_stats
        return d


def dsc(s, g) -> float:
    """Dice overlap 2|S∩G| / (|S|+|G|) with the empty-mask conventions."""
    s = np.asarray(s, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if s.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {s.shape} vs {g.shape}")
    ns, ng = int(s.sum()), int(g.sum())
    if ns == 0 and ng == 0:
        return 1.0
    if ns == 0 or ng == 0:
        return 0.0
    inter = int(np.logical_and(s, g).sum())
    return 2.0 * inter / (ns + ng)


def _diagonal(shape) -> float:
    return float(np.hypot(shape[-2], shape[-1]))


def hd(s, g) -> float:
    """Exact symmetric Hausdorff distance over foreground pixel coordinates."""
    s = np.asarray(s, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if s.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {s.shape} vs {g.shape}")
    ns, ng = int(s.sum()), int(g.sum())
    if ns == 0 and ng == 0:
        return 0.0
    if ns == 0 or ng == 0:
        return _diagonal(s.shape)
    a = np.argwhere(s).astype(np.float64)
    b = np.argwhere(g).astype(np.float64)
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def per_class_report(pred, gt, num_classes: int, mode: str = "", spacing: float = 1.0) -> MetricsReport:
    """Binary DSC (percent) and HD per foreground class 1..K-1, plus their
    means; background is excluded."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    per_dsc: dict[int, float] = {}
    per_hd: dict[int, float] = {}
    for c in range(1, num_classes):
        per_dsc[c] = 100.0 * dsc(pred == c, gt == c)
        per_hd[c] = spacing * hd(pred == c, gt == c)
    return MetricsReport(
        per_class_dsc=per_dsc,
        per_class_hd=per_hd,
        mean_dsc=float(np.mean(list(per_dsc.values()))),
        mean_hd=float(np.mean(list(per_hd.values()))),
        mode=mode,
    )


def ensemble_vote(p1, p2) -> np.ndarray:
    """Argmax of the mean probability map; ties resolve to the lowest class."""
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    if p1.shape != p2.shape:
        raise DimensionError(f"probability shapes differ: {p1.shape} vs {p2.shape}")
    mean = 0.5 * (p1.astype(np.float64) + p2.astype(np.float64))
    axis = 0 if mean.ndim == 3 else 1
    return np.argmax(mean, axis=axis).astype(np.uint8)


def avg_individual(reports: list[MetricsReport], mode: str = "") -> MetricsReport:
    """Fieldwise arithmetic mean of several reports (same class set)."""
    if not reports:
        raise DimensionError("no reports to average")
    classes = list(reports[0].per_class_dsc)
    if any(list(r.per_class_dsc) != classes for r in reports):
        raise DimensionError("reports cover different class sets")
    per_dsc = {c: float(np.mean([r.per_class_dsc[c] for r in reports])) for c in classes}
    per_hd = {c: float(np.mean([r.per_class_hd[c] for r in reports])) for c in classes}
    return MetricsReport(
        per_class_dsc=per_dsc,
        per_class_hd=per_hd,
        mean_dsc=float(np.mean([r.mean_dsc for r in reports])),
        mean_hd=float(np.mean([r.mean_hd for r in reports])),
        mode=mode,
    )


def seed_summary(reports: list[MetricsReport], mode: str = "") -> MetricsReport:
    """Across-run aggregate: values are means, seed_stats carries the
    population standard deviations (zero for a single run)."""
    agg = avg_individual(reports, mode=mode)
    classes = list(reports[0].per_class_dsc)
    agg.seed_stats = {
        "n_runs": len(reports),
        "mean_dsc_std": float(np.std([r.mean_dsc for r in reports])),
        "mean_hd_std": float(np.std([r.mean_hd for r in reports])),
        "per_class_dsc_std": {str(c): float(np.std([r.per_class_dsc[c] for r in reports])) for c in classes},
        "per_class_hd_std": {str(c): float(np.std([r.per_class_hd[c] for r in reports])) for c in classes},
    }
    return agg


def fmt_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f}({std:.2f})"


def report_rows(report: MetricsReport, run_seed: int, method: str) -> list[tuple]:
    """CSV rows (run_seed, method, mode, class, dsc, hd); per class plus a
    'mean' row."""
    rows = []
    for c in report.per_class_dsc:
        rows.append((run_seed, method, report.mode, str(c),
                     f"{report.per_class_dsc[c]:.4f}", f"{report.per_class_hd[c]:.4f}"))
    rows.append((run_seed, method, report.mode, "mean",
                 f"{report.mean_dsc:.4f}", f"{report.mean_hd:.4f}"))
    return rows


def write_metrics_csv(path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run_seed", "method", "mode", "class", "dsc", "hd"])
        writer.writerows(rows)


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
