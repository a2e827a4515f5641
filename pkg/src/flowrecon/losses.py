"""Geometric training-loss terms and their analytic gradients.

Three terms: mean Euclidean error (length), squared point-to-plane residual
against the nearest target point (surface consistency), and 1 - cosine
similarity (direction). All losses reduce by the mean so values stay
comparable across cloud sizes; all gradients are taken with respect to the
predicted flow vectors with nearest-neighbor assignments held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import FlowField, NeighborIndex, PointCloud, nearest_many

DEFAULT_EPS = 1e-8


@dataclass
class LossWeights:
    """Weights balancing the point-to-plane and cosine terms against L2."""

    lambda_pp: float = 1.3
    lambda_cos: float = 0.9

    def __post_init__(self):
        if not (np.isfinite(self.lambda_pp) and np.isfinite(self.lambda_cos)):
            raise ValueError("loss weights must be finite")
        if self.lambda_pp < 0 or self.lambda_cos < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    l2: float
    point_to_plane: float
    cosine: float
    combined: float
    gradient: FlowField


def _check_lengths(pred: FlowField, gt: FlowField):
    if len(pred) != len(gt):
        raise ValueError(f"flow length mismatch: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValueError("empty flow field")


def l2_loss(pred: FlowField, gt: FlowField) -> Tuple[float, np.ndarray]:
    """Mean Euclidean norm of the per-point flow error and its gradient."""
    _check_lengths(pred, gt)
    err = pred.vectors - gt.vectors
    norms = np.linalg.norm(err, axis=1)
    n = len(err)
    grad = np.zeros_like(err)
    nz = norms > 0.0
    grad[nz] = err[nz] / (n * norms[nz, None])
    return float(norms.mean()), grad


def point_to_plane_loss(
    source: PointCloud,
    pred: FlowField,
    target: PointCloud,
    index: NeighborIndex,
) -> Tuple[float, np.ndarray]:
    """Mean squared distance from warped source points to their nearest target plane.

    Each source point is displaced by its predicted vector, matched to the
    nearest target point, and the residual is projected onto that target's
    normal. Points matched to degenerate-normal targets are skipped.
    """
    if len(source) != len(pred):
        raise ValueError("pred length does not match source cloud")
    if not target.has_normals():
        raise ValueError("target cloud has no normals")
    if target.degenerate is not None and target.degenerate.all():
        raise ValueError("all target normals are degenerate")

    warped = source.points + pred.vectors
    idx, _ = nearest_many(index, warped)
    normals = target.normals[idx]
    diff = warped - target.points[idx]
    if target.degenerate is not None:
        keep = ~target.degenerate[idx]
    else:
        keep = np.ones(len(idx), dtype=bool)
    n_used = int(keep.sum())
    if n_used == 0:
        raise ValueError("all target normals are degenerate")
    r = np.einsum("ij,ij->i", normals, diff)
    loss = float(np.sum(np.where(keep, r * r, 0.0)) / n_used)
    grad = np.zeros_like(warped)
    grad[keep] = (2.0 / n_used) * r[keep, None] * normals[keep]
    return loss, grad


def cosine_loss(
    pred: FlowField, gt: FlowField, eps: float = DEFAULT_EPS
) -> Tuple[float, np.ndarray, bool]:
    """Mean (1 - cos) misalignment between predicted and ground-truth vectors.

    Points where either vector is shorter than ``eps`` contribute neither loss
    nor gradient. Returns (loss, gradient, degenerate); degenerate is True
    when every point was skipped.
    """
    _check_lengths(pred, gt)
    v = pred.vectors
    g = gt.vectors
    nv = np.linalg.norm(v, axis=1)
    ng = np.linalg.norm(g, axis=1)
    keep = (nv >= eps) & (ng >= eps)
    m = int(keep.sum())
    grad = np.zeros_like(v)
    if m == 0:
        return 0.0, grad, True
    vk, gk = v[keep], g[keep]
    nvk, ngk = nv[keep], ng[keep]
    dots = np.einsum("ij,ij->i", vk, gk)
    cos = dots / (nvk * ngk)
    loss = float((1.0 - cos).mean())
    # d(1 - cos)/dv = (v.g) v / (|v|^3 |g|) - g / (|v| |g|)
    grad[keep] = (dots / (nvk**3 * ngk))[:, None] * vk - gk / (nvk * ngk)[:, None]
    grad[keep] /= m
    return loss, grad, False


def combined_loss(
    source: PointCloud,
    pred: FlowField,
    gt: FlowField,
    target: PointCloud,
    index: NeighborIndex,
    weights: LossWeights,
) -> LossReport:
    """Weighted sum of the three loss terms with the summed gradient."""
    l2, g_l2 = l2_loss(pred, gt)
    pp, g_pp = point_to_plane_loss(source, pred, target, index)
    cos, g_cos, _ = cosine_loss(pred, gt)
    combined = l2 + weights.lambda_pp * pp + weights.lambda_cos * cos
    grad = g_l2 + weights.lambda_pp * g_pp + weights.lambda_cos * g_cos
    return LossReport(
        l2=l2,
        point_to_plane=pp,
        cosine=cos,
        combined=combined,
        gradient=FlowField(grad),
    )
