"""Scene-flow evaluation metrics: EPE, thresholded accuracy, angle deviation, outliers."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Tuple

import numpy as np

from .geometry import FlowField

_ANGLE_EPS = 1e-8


@dataclass
class MetricReport:
    epe: float
    acc_strict: float
    acc_relaxed: float
    ade_degrees: float
    outlier_ratio: float
    n_points: int
    n_skipped_angle: int

    def to_kv_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(MetricReport))

    def to_csv_row(self) -> str:
        return ",".join(repr(getattr(self, f.name)) for f in fields(self))


def compute_metrics(
    pred: FlowField,
    gt: FlowField,
    thresholds: Tuple[float, float] = (0.05, 0.10),
    outlier_threshold: float = 0.3,
) -> MetricReport:
    """Compare a predicted flow field against ground truth.

    EPE is the mean per-point Euclidean error. Accuracy at threshold t counts
    points whose error is below t absolutely OR below t relative to the
    ground-truth length (relative branch skipped for near-zero ground truth).
    The angle deviation is arccos of the mean cosine similarity, in degrees,
    skipping points where either vector is near zero. The outlier ratio counts
    errors above ``outlier_threshold``.
    """
    if len(pred) != len(gt):
        raise ValueError(f"flow length mismatch: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValueError("empty flow field")
    t1, t2 = thresholds
    v = pred.vectors
    g = gt.vectors
    err = np.linalg.norm(v - g, axis=1)
    n = len(err)

    ng = np.linalg.norm(g, axis=1)
    rel_ok = ng >= _ANGLE_EPS
    rel_err = np.full(n, np.inf)
    rel_err[rel_ok] = err[rel_ok] / ng[rel_ok]

    def acc(t: float) -> float:
        return float(np.mean((err < t) | (rel_err < t)))

    nv = np.linalg.norm(v, axis=1)
    angle_ok = (nv >= _ANGLE_EPS) & (ng >= _ANGLE_EPS)
    n_skipped = int(n - angle_ok.sum())
    if angle_ok.any():
        cos = np.einsum("ij,ij->i", v[angle_ok], g[angle_ok]) / (nv[angle_ok] * ng[angle_ok])
        # fsum keeps the mean correctly rounded and independent of point order
        mean_cos = min(1.0, max(-1.0, math.fsum(cos) / len(cos)))
        ade = math.degrees(math.acos(mean_cos))
    else:
        ade = 0.0

    return MetricReport(
        epe=math.fsum(err) / n,
        acc_strict=acc(t1),
        acc_relaxed=acc(t2),
        ade_degrees=ade,
        outlier_ratio=float(np.mean(err > outlier_threshold)),
        n_points=n,
        n_skipped_angle=n_skipped,
    )
