"""Angular error metrics for normal maps: mean / median / MSE and delta accuracies."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

THRESHOLDS_DEG = (5.0, 7.5, 11.5, 22.5, 30.0)
CSV_HEADER = ("Mean", "Median", "MSE", "d5", "d7.5", "d11.5", "d22.5", "d30", "valid_pixels")
EPS = 1e-8


def _to_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def angular_error_map(pred, gt, mask=None) -> np.ndarray:
    """Per-pixel angle in degrees between ``(3, H, W)`` normal maps.

    Invalid pixels (mask false or zero-norm ground truth) are NaN.
    """
    pred = _to_numpy(pred)
    gt = _to_numpy(gt)
    if pred.shape != gt.shape or pred.shape[0] != 3:
        raise ValueError(f"expected matching (3, H, W) maps, got {pred.shape} and {gt.shape}")
    gn = np.linalg.norm(gt, axis=0)
    valid = gn > EPS
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    p = pred / (np.linalg.norm(pred, axis=0) + EPS)
    g = gt / (gn + EPS)
    cross = np.linalg.norm(np.cross(p, g, axis=0), axis=0)
    dot = np.sum(p * g, axis=0)
    err = np.degrees(np.arctan2(cross, dot))
    return np.where(valid, err, np.nan)


@dataclass(frozen=True)
class MetricReport:
    mean_deg: float
    median_deg: float
    mse_deg2: float
    delta: tuple
    valid_pixel_count: int

    def as_row(self) -> list:
        return [self.mean_deg, self.median_deg, self.mse_deg2, *self.delta, self.valid_pixel_count]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerow([f"{x:.6f}" for x in self.as_row()[:-1]] + [self.valid_pixel_count])
        return buf.getvalue()

    def pretty(self, name: str = "") -> str:
        head = f"{'Method':<16}{'Mean':>10}{'Median':>10}{'MSE':>12}" + "".join(
            f"{'<' + format(t, 'g') + 'deg':>10}" for t in THRESHOLDS_DEG)
        row = f"{name:<16}{self.mean_deg:>10.4f}{self.median_deg:>10.4f}{self.mse_deg2:>12.4f}" + "".join(
            f"{100 * d:>10.2f}" for d in self.delta)
        return head + "\n" + row


def aggregate(error_maps) -> MetricReport:
    """Pool every valid pixel of every map and summarise.

    The median is dataset-wide; with an even count it is the midpoint of the
    two central values.
    """
    if isinstance(error_maps, np.ndarray):
        error_maps = [error_maps]
    vals = [np.asarray(e, dtype=np.float64).ravel() for e in error_maps]
    if not vals:
        raise ValueError("no error maps to aggregate")
    e = np.concatenate(vals)
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise ValueError("no valid pixels to aggregate")
    delta = tuple(float(np.count_nonzero(e < t)) / e.size for t in THRESHOLDS_DEG)
    return MetricReport(
        mean_deg=float(e.mean()),
        median_deg=float(np.median(e)),
        mse_deg2=float(np.mean(e * e)),
        delta=delta,
        valid_pixel_count=int(e.size),
    )


def compare_reports(ours: MetricReport, baseline: MetricReport) -> dict:
    """Improvement of ``ours`` over ``baseline``.

    Error metrics: relative reduction in percent, ``(b - a) / b * 100``.
    Delta accuracies: difference in percentage points.
    """
    out = {}
    for key in ("mean_deg", "median_deg", "mse_deg2"):
        b = getattr(baseline, key)
        if b == 0:
            raise ZeroDivisionError(f"baseline {key} is zero")
        out[key] = (b - getattr(ours, key)) / b * 100.0
    for t, a, b in zip(THRESHOLDS_DEG, ours.delta, baseline.delta):
        out[f"delta_{t:g}"] = (a - b) * 100.0
    return out


def format_comparison(rows: dict) -> str:
    """Tab-style text table for ``{name: MetricReport}``."""
    lines = [f"{'Variant':<24}{'Mean':>10}{'Median':>10}{'MSE':>12}"]
    for name, r in rows.items():
        lines.append(f"{name:<24}{r.mean_deg:>10.3f}{r.median_deg:>10.3f}{r.mse_deg2:>12.3f}")
    return "\n".join(lines)
