"""Depth/normal losses, the affine-invariant evaluation protocol, depth
preprocessing, normals from depth and ensembling.

Angles are radians internally; degrees appear only in ``MetricsReport``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateAlignment, DomainError, EmptyMask

DELTA1_THRESHOLD = 1.25
NORMAL_THRESHOLD_DEG = 11.25


@dataclass
class DepthMap:
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise DomainError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")


@dataclass
class NormalMap:
    vectors: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 3:
            raise DomainError(f"normals must be H x W x 3, got {self.vectors.shape}")
        if self.mask is None:
            self.mask = np.all(np.isfinite(self.vectors), axis=-1)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.vectors.shape[:2]:
            raise DomainError("mask shape does not match normal map")


@dataclass(frozen=True)
class AlignmentParams:
    scale: float
    shift: float

    @property
    def positive(self) -> bool:
        return self.scale > 0

    def apply(self, d):
        return self.scale * np.asarray(d, dtype=np.float64) + self.shift


def _shared_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    m = a & b
    if not m.any():
        raise EmptyMask("no valid pixels in shared mask")
    return m


def align_affine(pred: DepthMap, gt: DepthMap) -> AlignmentParams:
    """Least-squares (scale, shift) mapping ``pred`` onto ``gt`` over the shared mask."""
    m = _shared_mask(pred.mask, gt.mask)
    d = pred.values[m]
    g = gt.values[m]
    d_mean = d.mean()
    g_mean = g.mean()
    dc = d - d_mean
    var = np.dot(dc, dc)
    if var <= 1e-24 * max(1.0, np.dot(d, d)):
        raise DegenerateAlignment("prediction is constant over the mask")
    s = float(np.dot(dc, g - g_mean) / var)
    return AlignmentParams(s, float(g_mean - s * d_mean))


def _aligned(pred: DepthMap, gt: DepthMap, align: bool):
    m = _shared_mask(pred.mask, gt.mask)
    if align:
        params = align_affine(pred, gt)
    else:
        params = AlignmentParams(1.0, 0.0)
    return params.apply(pred.values[m]), gt.values[m], params


def loss_depth_affine_invariant(
    pred: DepthMap, gt: DepthMap, alignment: AlignmentParams | None = None
) -> float:
    """Mean absolute error between ``gt`` and the aligned prediction.

    The mean runs over valid pixels only. Passing ``alignment`` freezes the
    scale/shift instead of refitting them.
    """
    m = _shared_mask(pred.mask, gt.mask)
    if alignment is None:
        alignment = align_affine(pred, gt)
    return float(np.mean(np.abs(gt.values[m] - alignment.apply(pred.values[m]))))


def _check_positive_gt(g: np.ndarray):
    if np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise DomainError("ground-truth depth must be finite and > 0 inside the mask")


def metric_absrel(pred: DepthMap, gt: DepthMap, align: bool = True) -> float:
    d_hat, g, _ = _aligned(pred, gt, align)
    _check_positive_gt(g)
    return float(np.mean(np.abs(g - d_hat) / g))


def metric_delta1(pred: DepthMap, gt: DepthMap, align: bool = True) -> float:
    """Percentage of pixels with ``max(d/g, g/d) < 1.25``; ``d <= 0`` fails."""
    d_hat, g, _ = _aligned(pred, gt, align)
    _check_positive_gt(g)
    ok = d_hat > 0
    ratio = np.full(d_hat.shape, np.inf)
    ratio[ok] = np.maximum(d_hat[ok] / g[ok], g[ok] / d_hat[ok])
    return float(100.0 * np.count_nonzero(ratio < DELTA1_THRESHOLD) / d_hat.size)


def angular_errors(pred: NormalMap, gt: NormalMap):
    """Per-pixel angle (radians) over the shared mask.

    Returns ``(angles, n_degenerate)``; zero-length predictions score pi.
    """
    m = _shared_mask(pred.mask, gt.mask)
    p = pred.vectors[m]
    g = gt.vectors[m]
    pn = np.linalg.norm(p, axis=-1)
    gn = np.linalg.norm(g, axis=-1)
    bad = (pn == 0) | (gn == 0)
    # atan2 of (|p x g|, p . g) stays accurate near 0 and pi, unlike arccos
    ang = np.arctan2(np.linalg.norm(np.cross(p, g), axis=-1), np.sum(p * g, axis=-1))
    ang[bad] = np.pi
    return ang, int(np.count_nonzero(bad))


def loss_normals_angular(pred: NormalMap, gt: NormalMap) -> float:
    ang, _ = angular_errors(pred, gt)
    return float(ang.mean())


def metric_normals(pred: NormalMap, gt: NormalMap) -> tuple[float, float]:
    """``(mean angular error in degrees, % of pixels strictly below 11.25 deg)``."""
    ang, _ = angular_errors(pred, gt)
    deg = np.degrees(ang)
    return float(deg.mean()), float(100.0 * np.count_nonzero(deg < NORMAL_THRESHOLD_DEG) / deg.size)


def preprocess_depth(raw: DepthMap, far_plane: float | None = None) -> DepthMap:
    """Clip to the 2nd/98th percentile of valid depth and map linearly to [-1, 1].

    Non-finite values and values beyond ``far_plane`` are masked out; masked
    pixels are filled with 0.
    """
    v = raw.values
    mask = raw.mask & np.isfinite(v)
    if far_plane is not None:
        mask &= v <= far_plane
    if not mask.any():
        raise EmptyMask("depth map has no valid pixels")
    valid = v[mask]
    lo, hi = np.percentile(valid, [2.0, 98.0])
    out = np.zeros_like(v)
    if hi > lo:
        c = np.clip(valid, lo, hi)
        out[mask] = np.clip(2.0 * (c - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return DepthMap(out, mask)


def _axis_gradient(d: np.ndarray, m: np.ndarray, axis: int, jump: float):
    """Discontinuity-aware derivative of ``d`` along ``axis``.

    Central differences are used where both neighbours are valid and the
    one-sided differences agree to within ``jump``; otherwise the candidate
    of smallest magnitude among in-mask stencils wins.
    """
    d = np.moveaxis(d, axis, 0)
    m = np.moveaxis(m, axis, 0)
    n = d.shape[0]
    fwd = np.full(d.shape, np.nan)
    bwd = np.full(d.shape, np.nan)
    fwd_ok = np.zeros(d.shape, dtype=bool)
    bwd_ok = np.zeros(d.shape, dtype=bool)
    if n > 1:
        fwd_ok[:-1] = m[:-1] & m[1:]
        bwd_ok[1:] = m[1:] & m[:-1]
        fwd[:-1] = d[1:] - d[:-1]
        bwd[1:] = d[1:] - d[:-1]
    both = fwd_ok & bwd_ok
    cen = np.where(both, 0.5 * (np.nan_to_num(fwd) + np.nan_to_num(bwd)), np.nan)

    big = np.inf
    cands = np.stack([
        np.where(fwd_ok, fwd, np.nan),
        np.where(bwd_ok, bwd, np.nan),
        cen,
    ])
    mags = np.where(np.isnan(cands), big, np.abs(cands))
    pick = np.argmin(mags, axis=0)
    g = np.take_along_axis(cands, pick[None], axis=0)[0]
    smooth = both & (np.abs(np.nan_to_num(fwd) - np.nan_to_num(bwd)) <= jump)
    g = np.where(smooth, cen, g)
    ok = (fwd_ok | bwd_ok) & m
    return np.moveaxis(g, 0, axis), np.moveaxis(ok, 0, axis)


def normals_from_depth(
    depth: DepthMap, fx: float = 1.0, fy: float = 1.0, jump_threshold: float = 0.1
) -> NormalMap:
    """Unit normals ``normalize(-gx*fx, -gy*fy, 1)`` from a depth map.

    x runs along columns, y along rows (down); +z faces the camera.
    ``jump_threshold`` is the largest change in slope between neighbouring
    one-sided differences still treated as smooth surface.
    """
    if fx <= 0 or fy <= 0:
        raise DomainError("fx and fy must be positive")
    d = depth.values
    m = depth.mask & np.isfinite(d)
    gx, okx = _axis_gradient(d, m, axis=1, jump=jump_threshold)
    gy, oky = _axis_gradient(d, m, axis=0, jump=jump_threshold)
    ok = okx & oky
    n = np.stack([-np.nan_to_num(gx) * fx, -np.nan_to_num(gy) * fy, np.ones_like(d)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[~ok] = 0.0
    return NormalMap(n, ok)


ENSEMBLE_ROUNDS = 3


def ensemble(predictions: Sequence[DepthMap], rounds: int = ENSEMBLE_ROUNDS) -> DepthMap:
    """Median of affine-realigned members (3 rounds of median -> realign)."""
    if len(predictions) == 0:
        raise DomainError("ensemble needs at least one prediction")
    if len(predictions) == 1:
        return predictions[0]
    shape = predictions[0].values.shape
    if any(p.values.shape != shape for p in predictions):
        raise DomainError("ensemble members must share a shape")
    mask = np.logical_and.reduce([p.mask for p in predictions])
    members = [p.values for p in predictions]
    for _ in range(rounds):
        ref = DepthMap(np.median(np.stack(members), axis=0), mask)
        survivors = []
        for v in members:
            try:
                survivors.append(align_affine(DepthMap(v, mask), ref).apply(v))
            except DegenerateAlignment:
                continue
        if not survivors:
            raise DegenerateAlignment("every ensemble member is degenerate")
        members = survivors
    return DepthMap(np.median(np.stack(members), axis=0), mask)


REPORT_FIELDS = (
    "absrel", "delta1", "mean_angular_deg", "pct_below_11_25",
    "n_valid_pixels", "scale", "shift",
)


@dataclass
class MetricsReport:
    absrel: float | None = None
    delta1: float | None = None
    mean_angular_deg: float | None = None
    pct_below_11_25: float | None = None
    n_valid_pixels: int = 0
    alignment: AlignmentParams | None = None

    def __post_init__(self):
        if self.n_valid_pixels <= 0:
            raise DomainError("a metrics report needs at least one valid pixel")

    def as_dict(self) -> dict:
        a = self.alignment
        return {
            "absrel": self.absrel,
            "delta1": self.delta1,
            "mean_angular_deg": self.mean_angular_deg,
            "pct_below_11_25": self.pct_below_11_25,
            "n_valid_pixels": int(self.n_valid_pixels),
            "scale": None if a is None else a.scale,
            "shift": None if a is None else a.shift,
        }

    def to_json(self, **extra) -> str:
        d = self.as_dict()
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        align = None
        if d.get("scale") is not None:
            align = AlignmentParams(float(d["scale"]), float(d["shift"]))
        return cls(d.get("absrel"), d.get("delta1"), d.get("mean_angular_deg"),
                   d.get("pct_below_11_25"), int(d["n_valid_pixels"]), align)

    def csv_row(self) -> list[str]:
        return ["" if v is None else repr(v) for v in self.as_dict().values()]


def reports_to_csv(reports: Sequence[MetricsReport], ids: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["sample"] if ids is not None else []) + list(REPORT_FIELDS))
    for i, r in enumerate(reports):
        w.writerow(([ids[i]] if ids is not None else []) + r.csv_row())
    return buf.getvalue()


def evaluate_depth(pred: DepthMap, gt: DepthMap) -> MetricsReport:
    align = align_affine(pred, gt)
    d_hat_full = align.apply(pred.values)
    aligned = DepthMap(d_hat_full, pred.mask)
    m = _shared_mask(pred.mask, gt.mask)
    return MetricsReport(
        absrel=metric_absrel(aligned, gt, align=False),
        delta1=metric_delta1(aligned, gt, align=False),
        n_valid_pixels=int(m.sum()),
        alignment=align,
    )


def evaluate_normals(pred: NormalMap, gt: NormalMap) -> MetricsReport:
    mean_deg, pct = metric_normals(pred, gt)
    m = _shared_mask(pred.mask, gt.mask)
    return MetricsReport(mean_angular_deg=mean_deg, pct_below_11_25=pct, n_valid_pixels=int(m.sum()))


def summarize(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-sample average of each metric; pixel counts are summed."""

    def avg(name):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        return float(math.fsum(vals) / len(vals)) if vals else None

    return MetricsReport(
        absrel=avg("absrel"),
        delta1=avg("delta1"),
        mean_angular_deg=avg("mean_angular_deg"),
        pct_below_11_25=avg("pct_below_11_25"),
        n_valid_pixels=sum(r.n_valid_pixels for r in reports),
    )
