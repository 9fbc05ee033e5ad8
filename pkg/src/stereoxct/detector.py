"""Deterministic feature detector: projection image -> binary feature mask.

Pipeline: white top-hat background suppression, multi-scale dot (negated
LoG) and oriented line (second directional derivative) filters, a squashing
normalization to [0, 1), a threshold and connected-component area filtering.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import BlockLargerThanImage, EmptyTrainingSet, ShapeMismatch
from .projector import ProjectionImage


@dataclass
class FeatureMask:
    """Binary mask ``bits[v, u]`` with an optional pre-threshold score."""

    bits: np.ndarray
    score: np.ndarray | None = None
    threshold: float | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.score is not None:
            self.score = np.asarray(self.score, dtype=np.float64)
            if self.score.shape != self.bits.shape:
                raise ShapeMismatch("score and bits differ in shape")

    @property
    def n_v(self) -> int:
        return self.bits.shape[0]

    @property
    def n_u(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class DetectorParams:
    """Decision variables of the detector.

    ``background_window`` is the radius (px) of the disk used for the
    morphological opening. ``dot_sigmas`` and ``line_widths`` are Gaussian
    scales (px) of the dot and line filters; an empty tuple disables a bank.
    ``response_scale`` is the filter response (projection units) at which the
    squashed score reaches 0.5. It is fixed rather than estimated per image so
    the score at a pixel depends only on that pixel's response.
    """

    background_window: int = 4
    dot_sigmas: tuple = (1.5, 2.0, 2.5)
    line_widths: tuple = (1.0, 1.5)
    n_orientations: int = 16
    threshold: float = 0.65
    min_component_area: int = 3
    max_component_area: int = 4096
    response_scale: float = 0.65

    def __post_init__(self):
        object.__setattr__(self, "dot_sigmas", tuple(float(s) for s in self.dot_sigmas))
        object.__setattr__(self, "line_widths", tuple(float(s) for s in self.line_widths))
        if self.background_window <= 0 or self.n_orientations <= 0:
            raise ValueError("background_window and n_orientations must be positive")
        if any(s <= 0 for s in self.dot_sigmas + self.line_widths):
            raise ValueError("filter scales must be positive")
        if not (self.dot_sigmas or self.line_widths):
            raise ValueError("at least one filter bank is required")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0 < self.min_component_area <= self.max_component_area:
            raise ValueError("component area bounds must be positive and ordered")
        if self.response_scale <= 0:
            raise ValueError("response_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "background_window": self.background_window,
            "dot_sigmas": list(self.dot_sigmas),
            "line_widths": list(self.line_widths),
            "n_orientations": self.n_orientations,
            "threshold": self.threshold,
            "min_component_area": self.min_component_area,
            "max_component_area": self.max_component_area,
            "response_scale": self.response_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorParams":
        return cls(**d)


def _disk(r: int) -> np.ndarray:
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def _as_array(image) -> np.ndarray:
    data = image.data if isinstance(image, ProjectionImage) else image
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeMismatch("detector input must be a 2D image")
    if not np.all(np.isfinite(data)):
        raise ValueError("image contains non-finite values")
    return data


def top_hat(img: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """White top-hat and the opened background (disk of radius ``window``)."""
    background = ndimage.grey_opening(img, footprint=_disk(int(window)), mode="nearest")
    return img - background, background


def dot_response(img: np.ndarray, sigma: float) -> np.ndarray:
    """Scale-normalized negated Laplacian of Gaussian."""
    return -sigma * sigma * ndimage.gaussian_laplace(img, sigma, mode="nearest")


def line_response(img: np.ndarray, sigma: float, n_orientations: int = 16) -> np.ndarray:
    """Max over orientations of the negated second directional derivative."""
    ixx = ndimage.gaussian_filter(img, sigma, order=(0, 2), mode="nearest")
    iyy = ndimage.gaussian_filter(img, sigma, order=(2, 0), mode="nearest")
    ixy = ndimage.gaussian_filter(img, sigma, order=(1, 1), mode="nearest")
    best = np.full(img.shape, -np.inf)
    for k in range(n_orientations):
        t = np.pi * k / n_orientations
        c, s = np.cos(t), np.sin(t)
        # second derivative across a line running along t
        d = s * s * ixx - 2.0 * s * c * ixy + c * c * iyy
        np.maximum(best, -sigma * sigma * d, out=best)
    return best


class _ResponseCache:
    """Per-image filter outputs shared across a parameter grid."""

    def __init__(self, img: np.ndarray, n_orientations: int):
        self.img = img
        self.n_orientations = n_orientations
        self._th = {}
        self._f = {}

    def tophat(self, window):
        if window not in self._th:
            self._th[window] = top_hat(self.img, window)
        return self._th[window]

    def filt(self, window, kind, sigma):
        key = (window, kind, sigma)
        if key not in self._f:
            th = self.tophat(window)[0]
            if kind == "dot":
                self._f[key] = dot_response(th, sigma)
            else:
                self._f[key] = line_response(th, sigma, self.n_orientations)
        return self._f[key]

    def raw_score(self, params: DetectorParams) -> np.ndarray:
        r = self.response(params)
        return r / (r + params.response_scale)

    def response(self, params: DetectorParams) -> np.ndarray:
        w = params.background_window
        r = np.zeros(self.img.shape)
        for s in params.dot_sigmas:
            np.maximum(r, self.filt(w, "dot", s), out=r)
        for s in params.line_widths:
            np.maximum(r, self.filt(w, "line", s), out=r)
        return r


def _finalize(score: np.ndarray, params: DetectorParams) -> FeatureMask:
    bits = score >= params.threshold
    labels, n = ndimage.label(bits, structure=np.ones((3, 3)))
    if n:
        areas = np.bincount(labels.ravel())
        bad = (areas < params.min_component_area) | (areas > params.max_component_area)
        bad[0] = False
        reject = bad[labels]
        if reject.any():
            score = score.copy()
            # rejected pixels sit just below threshold so bits == score >= thr
            score[reject] = np.nextafter(params.threshold, -np.inf)
            bits = bits & ~reject
    return FeatureMask(bits, score, params.threshold)


def detect(image, params: DetectorParams | None = None) -> FeatureMask:
    """Binary feature mask of ``image`` (a ProjectionImage or 2D array)."""
    params = params or DetectorParams()
    img = _as_array(image)
    score = _ResponseCache(img, params.n_orientations).raw_score(params)
    return _finalize(score, params)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationGrid:
    background_windows: tuple = (4, 6)
    dot_sigma_sets: tuple = ((1.0,), (1.5,), (2.0,), (2.5,), (3.0,), (1.5, 2.0, 2.5))
    line_width_sets: tuple = ((), (1.0,), (1.5,), (1.0, 1.5))
    thresholds: tuple = tuple(float(t) for t in np.round(np.linspace(0.05, 0.95, 19), 6))
    base: DetectorParams = field(default_factory=DetectorParams)

    def candidates(self):
        """Parameter sets in lexicographic order; thresholds run high to low."""
        for w, d, l in itertools.product(
                self.background_windows, self.dot_sigma_sets, self.line_width_sets):
            for t in sorted(self.thresholds, reverse=True):
                yield replace(self.base, background_window=w, dot_sigmas=d,
                              line_widths=l, threshold=t)


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def _pair_arrays(pair):
    image, truth = pair
    img = _as_array(image)
    bits = truth.bits if isinstance(truth, FeatureMask) else np.asarray(truth, dtype=bool)
    if bits.shape != img.shape:
        raise ShapeMismatch("truth mask does not match its image")
    return img, bits


def grid_f1(training_pairs, grid: CalibrationGrid | None = None):
    """Pooled pixelwise F1 for every grid candidate, in search order."""
    grid = grid or CalibrationGrid()
    pairs = [_pair_arrays(p) for p in training_pairs]
    if not pairs:
        raise EmptyTrainingSet("calibration needs at least one training pair")
    cands = list(grid.candidates())
    counts = np.zeros((len(cands), 3), dtype=np.int64)
    for img, truth in pairs:
        cache = _ResponseCache(img, grid.base.n_orientations)
        raw = {}
        for i, p in enumerate(cands):
            key = (p.background_window, p.dot_sigmas, p.line_widths)
            if key not in raw:
                raw[key] = cache.raw_score(p)
            bits = _finalize(raw[key], p).bits
            tp = int(np.count_nonzero(bits & truth))
            counts[i] += (tp, int(np.count_nonzero(bits)) - tp,
                          int(np.count_nonzero(truth)) - tp)
    return cands, [f1_score(*c) for c in counts]


def calibrate(training_pairs, grid: CalibrationGrid | None = None) -> DetectorParams:
    """Grid search maximizing pooled pixelwise F1.

    Ties keep the first candidate in search order, so an all-empty truth set
    returns the highest threshold of the first filter configuration.
    """
    cands, scores = grid_f1(training_pairs, grid)
    return cands[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def tile_starts(n: int, block: int, stride: int) -> list[int]:
    """Block offsets along one axis; the last block is snapped to the edge."""
    if block > n:
        raise BlockLargerThanImage(f"block {block} exceeds image size {n}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    starts = list(range(0, n - block + 1, stride))
    if starts[-1] != n - block:
        starts.append(n - block)
    return starts


def tile(image, block: int = 256, stride: int = 70):
    """Overlapping square blocks as ``((v0, u0), array)`` pairs, row-major.

    The default stride gives a 12x12 grid of 256 px blocks on a 1024 px image.
    """
    img = image.data if isinstance(image, ProjectionImage) else np.asarray(image)
    n_v, n_u = img.shape
    vs = tile_starts(n_v, block, stride)
    us = tile_starts(n_u, block, stride)
    return [((v0, u0), img[v0:v0 + block, u0:u0 + block]) for v0 in vs for u0 in us]


def stitch(blocks, shape, threshold: float = 0.5, margin: int = 0) -> FeatureMask:
    """Per-pixel maximum of overlapping block scores.

    ``blocks`` holds ``((v0, u0), score_block)`` pairs. With ``margin > 0`` only
    the interior of each block contributes, except along the image border.
    """
    out = np.full(shape, -np.inf)
    n_v, n_u = shape
    for (v0, u0), s in blocks:
        s = np.asarray(s, dtype=np.float64)
        bv, bu = s.shape
        a0 = margin if v0 > 0 else 0
        a1 = bv - margin if v0 + bv < n_v else bv
        b0 = margin if u0 > 0 else 0
        b1 = bu - margin if u0 + bu < n_u else bu
        region = out[v0 + a0:v0 + a1, u0 + b0:u0 + b1]
        np.maximum(region, s[a0:a1, b0:b1], out=region)
    if np.isneginf(out).any():
        raise ValueError("blocks do not cover the image")
    return FeatureMask(out >= threshold, out, threshold)


def detect_tiled(image, params: DetectorParams | None = None, block: int = 256,
                 stride: int = 70, margin: int = 16) -> FeatureMask:
    """Detect block by block and stitch the raw scores."""
    params = params or DetectorParams()
    img = _as_array(image)
    scale = params.response_scale
    blocks = []
    for off, b in tile(img, block, stride):
        r = _ResponseCache(b, params.n_orientations).response(params)
        blocks.append((off, r / (r + scale)))
    stitched = stitch(blocks, img.shape, params.threshold, margin)
    return _finalize(stitched.score, params)
