"""Quantitative readouts: area densities, predicted-vs-real regression, MSE, extravasation distances."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import DegenerateInput, EmptyMask, EmptyRegion, ShapeMismatch
from .slide_io import Role, SlideImage

DEFAULT_THRESHOLD = 10
DEFAULT_BIN_UM = 2.0


@dataclass(frozen=True)
class Roi:
    x_px: int
    y_px: int
    width_px: int
    height_px: int

    def check(self, shape) -> None:
        h, w = shape
        if self.width_px <= 0 or self.height_px <= 0:
            raise EmptyRegion(f"{self} has no area")
        if self.x_px < 0 or self.y_px < 0 or self.x_px + self.width_px > w \
                or self.y_px + self.height_px > h:
            raise EmptyRegion(f"{self} lies outside a {w}x{h} slide")

    def slice(self, arr: np.ndarray) -> np.ndarray:
        return arr[self.y_px:self.y_px + self.height_px, self.x_px:self.x_px + self.width_px]


def grid_rois(height_px: int, width_px: int, rows: int, cols: int) -> list:
    """Non-overlapping ROIs tiling the slide on a rows x cols grid (remainders dropped)."""
    h, w = height_px // rows, width_px // cols
    return [Roi(c * w, r * h, w, h) for r in range(rows) for c in range(cols)]


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    p_value: float
    n: int


@dataclass
class DistanceStats:
    q1_um: float
    median_um: float
    mean_um: float
    q3_um: float
    histogram: tuple        # (bin edges in um, counts)
    n_pixels: int
    empty: bool = False

    def summary(self) -> dict:
        return {"q1": self.q1_um, "median": self.median_um, "mean": self.mean_um,
                "q3": self.q3_um, "n_pixels": self.n_pixels, "empty": self.empty,
                "histogram": {"edges_um": [float(e) for e in self.histogram[0]],
                              "counts": [int(c) for c in self.histogram[1]]}}


@dataclass
class DensityReport:
    regions: list           # dicts: region, cell, vessel, np
    threshold: dict


def _threshold_for(threshold, role) -> int:
    if isinstance(threshold, dict):
        return int(threshold.get(role, threshold.get(Role(role).value, DEFAULT_THRESHOLD)))
    return int(threshold)


def positive_mask(channel: np.ndarray, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError("threshold must be in [0, 255]")
    return np.asarray(channel) > threshold


def density(channel: np.ndarray, region: Roi | None = None,
            threshold: int = DEFAULT_THRESHOLD) -> float:
    """Fraction of positive pixels inside ``region`` (whole raster when None)."""
    channel = np.asarray(channel)
    if region is not None:
        region.check(channel.shape)
        channel = region.slice(channel)
    if channel.size == 0:
        raise EmptyRegion("region has no pixels")
    return float(np.count_nonzero(positive_mask(channel, threshold))) / channel.size


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def residual_map(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    return np.abs(a - b)


def linear_regression(x, y) -> RegressionResult:
    """OLS fit of y on x with a two-sided t-test on the slope (n - 2 dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch("x and y must be 1D and the same length")
    n = len(x)
    if n < 3:
        raise DegenerateInput("need at least 3 points")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise DegenerateInput("x is constant")
    sxy = float(np.sum((x - xm) * (y - ym)))
    slope = sxy / sxx
    intercept = ym - slope * xm
    ss_res = float(np.sum((y - (intercept + slope * x)) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    dof = n - 2
    se = math.sqrt(ss_res / dof / sxx)
    if se == 0.0:
        p = 0.0 if slope != 0.0 else 1.0
    else:
        p = float(2.0 * stats.t.sf(abs(slope / se), dof))
    return RegressionResult(float(slope), float(intercept), float(r2), min(p, 1.0), n)


def euclidean_distance_transform(mask: np.ndarray, pixel_size_um: float = 1.0) -> np.ndarray:
    """Distance (um) from every pixel to the nearest True pixel; 0 on True pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("distance transform of an empty mask is undefined")
    return ndimage.distance_transform_edt(~mask) * float(pixel_size_um)


def distance_stats(distances_um, bin_um: float = DEFAULT_BIN_UM) -> DistanceStats:
    d = np.asarray(distances_um, dtype=np.float64).ravel()
    if d.size == 0:
        return DistanceStats(0.0, 0.0, 0.0, 0.0, (np.array([0.0, bin_um]), np.array([0])),
                             0, empty=True)
    q1, med, q3 = np.percentile(d, [25, 50, 75], method="linear")
    top = max(bin_um, math.ceil(d.max() / bin_um) * bin_um)
    if top <= d.max():
        top += bin_um
    edges = np.arange(0.0, top + bin_um / 2, bin_um)
    counts, _ = np.histogram(d, bins=edges)
    return DistanceStats(float(q1), float(med), float(d.mean()), float(q3),
                         (edges, counts), int(d.size))


def extravasation_stats(np_mask, vessel_mask, pixel_size_um: float = 1.0,
                        bin_um: float = DEFAULT_BIN_UM) -> DistanceStats:
    """Distances from NP-positive pixels to the nearest vessel pixel."""
    np_mask = np.asarray(np_mask, dtype=bool)
    vessel_mask = np.asarray(vessel_mask, dtype=bool)
    if np_mask.shape != vessel_mask.shape:
        raise ShapeMismatch(f"{np_mask.shape} vs {vessel_mask.shape}")
    edt = euclidean_distance_transform(vessel_mask, pixel_size_um)
    return distance_stats(edt[np_mask], bin_um)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["densities", "regression", "mse", "distance_real", "distance_pred", "config"],
    "properties": {
        "densities": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["region", "cell", "vessel", "np_real", "np_pred"],
                "properties": {
                    "region": {"type": "string"},
                    **{k: {"type": "number", "minimum": 0, "maximum": 1}
                       for k in ("cell", "vessel", "np_real", "np_pred")},
                },
            },
        },
        "regression": {
            "type": "object",
            "required": ["slope", "intercept", "r2", "p", "n"],
            "properties": {
                "slope": {"type": "number"}, "intercept": {"type": "number"},
                "r2": {"type": "number", "minimum": 0, "maximum": 1},
                "p": {"type": "number", "minimum": 0, "maximum": 1},
                "n": {"type": "integer", "minimum": 3},
            },
        },
        "mse": {"type": "number", "minimum": 0},
        "distance_real": {"$ref": "#/definitions/distance"},
        "distance_pred": {"$ref": "#/definitions/distance"},
        "config": {
            "type": "object",
            "required": ["threshold", "pixel_size_um", "bins"],
        },
    },
    "definitions": {
        "distance": {
            "type": "object",
            "required": ["q1", "median", "mean", "q3"],
            "properties": {k: {"type": "number", "minimum": 0}
                           for k in ("q1", "median", "mean", "q3")},
        },
    },
}


@dataclass
class AnalysisReport:
    densities: list
    regression: RegressionResult
    mse: float
    residual: np.ndarray = field(repr=False)
    distance_real: DistanceStats
    distance_pred: DistanceStats
    config: dict

    def to_dict(self) -> dict:
        r = self.regression
        return {
            "densities": self.densities,
            "regression": {"slope": r.slope, "intercept": r.intercept, "r2": r.r_squared,
                           "p": r.p_value, "n": r.n},
            "mse": self.mse,
            "distance_real": self.distance_real.summary(),
            "distance_pred": self.distance_pred.summary(),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def density_report(slide: SlideImage, rois, threshold=DEFAULT_THRESHOLD) -> DensityReport:
    """Cell, vessel and NP densities of the whole slide and of each ROI."""
    regions = [("whole", None)] + [(f"roi_{i:03d}", roi) for i, roi in enumerate(rois)]
    rows = []
    for name, roi in regions:
        row = {"region": name}
        for key, role in (("cell", Role.NUCLEI), ("vessel", Role.VESSEL), ("np", Role.NP)):
            if slide.has(role):
                row[key] = density(slide.channel(role), roi, _threshold_for(threshold, role))
        rows.append(row)
    th = {r.value: _threshold_for(threshold, r) for r in Role}
    return DensityReport(rows, th)


def compare_report(real_slide: SlideImage, merged_slide: SlideImage, rois,
                   threshold=DEFAULT_THRESHOLD, pixel_size_um: float | None = None,
                   bin_um: float = DEFAULT_BIN_UM) -> AnalysisReport:
    """Compare the NP channel of a merged (predicted) slide with the real one.

    Regression points are the whole slide plus every ROI (x = real, y = predicted).
    Vessels for both distance analyses come from the real slide's VESSEL channel.
    """
    if real_slide.shape != merged_slide.shape:
        raise ShapeMismatch(f"{real_slide.shape} vs {merged_slide.shape}")
    pixel_size_um = float(pixel_size_um or real_slide.pixel_size_um)
    real_np = real_slide.channel(Role.NP)
    pred_np = merged_slide.channel(Role.NP)

    real_rows = density_report(real_slide, rois, threshold).regions
    th_np = _threshold_for(threshold, Role.NP)
    densities = []
    for row, roi in zip(real_rows, [None] + list(rois)):
        densities.append({
            "region": row["region"],
            "cell": row["cell"],
            "vessel": row["vessel"],
            "np_real": row["np"],
            "np_pred": density(pred_np, roi, th_np),
        })
    reg = linear_regression([d["np_real"] for d in densities],
                            [d["np_pred"] for d in densities])

    vessel = positive_mask(real_slide.channel(Role.VESSEL), _threshold_for(threshold, Role.VESSEL))
    dist_real = extravasation_stats(positive_mask(real_np, th_np), vessel, pixel_size_um, bin_um)
    dist_pred = extravasation_stats(positive_mask(pred_np, th_np), vessel, pixel_size_um, bin_um)
    config = {"threshold": {r.value: _threshold_for(threshold, r) for r in Role},
              "pixel_size_um": pixel_size_um, "bins": {"width_um": bin_um},
              "n_rois": len(rois)}
    return AnalysisReport(densities, reg, mse(real_np, pred_np), residual_map(real_np, pred_np),
                          dist_real, dist_pred, config)
