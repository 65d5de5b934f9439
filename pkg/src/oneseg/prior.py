"""Adaptive threshold selection over a heatmap via geometric mask scoring.

A normalized heatmap is binarized at every threshold in a fixed sweep; each
candidate is cleaned (small components dropped, interior holes filled) and
scored by area-weighted component solidity times a scale-consensus term that
penalizes masks far below a reference area. The best-scoring candidate becomes
the prior mask used to prompt the segmenter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AllCandidatesEmpty, ConfigError, EmptyForeground, MissingFixedValue

_EIGHT_CONN = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PriorConfig:
    tau_min: float = 0.4
    tau_max: float = 0.7
    stride: float = 0.05
    min_component_fraction: float = 0.2
    a_ref_mode: str = "support_scaled"  # or "fixed"
    a_ref_fixed: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau_min < self.tau_max <= 1.0):
            raise ConfigError("need 0 <= tau_min < tau_max <= 1")
        if self.stride <= 0:
            raise ConfigError("stride must be > 0")
        if not (0.0 < self.min_component_fraction <= 1.0):
            raise ConfigError("min_component_fraction must be in (0, 1]")
        if self.a_ref_mode not in ("support_scaled", "fixed"):
            raise ConfigError(f"unknown a_ref_mode {self.a_ref_mode!r}")


@dataclass(frozen=True)
class PriorCandidate:
    tau: float
    mask: np.ndarray
    components: tuple[tuple[int, int], ...]  # (area, hull_area), sorted by area desc
    score: float


def sweep_thresholds(cfg: PriorConfig) -> list[float]:
    """Inclusive threshold ladder tau_min, tau_min+stride, ..., tau_max."""
    count = int(np.floor((cfg.tau_max - cfg.tau_min) / cfg.stride + 1e-9)) + 1
    return [cfg.tau_min + i * cfg.stride for i in range(count)]


def threshold_candidates(heatmap: np.ndarray, cfg: PriorConfig = PriorConfig()) -> list[np.ndarray]:
    """One binary mask per threshold; pixel true iff heatmap >= tau."""
    h = np.asarray(heatmap)
    return [h >= tau for tau in sweep_thresholds(cfg)]


def refine_candidate(mask: np.ndarray, cfg: PriorConfig = PriorConfig()) -> np.ndarray:
    """Fill interior holes, then drop components below the area fraction of the
    largest.

    Components are 8-connected; holes are background regions with no 4-connected
    path to the raster border. Filling runs first so the area filter sees solid
    components, which makes the operation idempotent.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    filled = ndimage.binary_fill_holes(mask)
    comp, _ = ndimage.label(filled, structure=_EIGHT_CONN)
    sizes = np.bincount(comp.ravel())[1:]
    keep = sizes >= cfg.min_component_fraction * sizes.max()
    return keep[comp - 1] & filled


# ---------------------------------------------------------------------------
# convex hull rasterization (exact integer arithmetic on pixel centers)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain on integer (x, y) points, CCW order.

    Handles degenerate input: returns the single point or the two segment
    endpoints for collinear sets.
    """
    pts = np.unique(points, axis=0)  # sorted lexicographically by (x, y)
    if len(pts) <= 2:
        return pts

    def half(iterable):
        chain: list[np.ndarray] = []
        for p in iterable:
            while len(chain) >= 2:
                a, b = chain[-2], chain[-1]
                cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
                if cross <= 0:  # drop clockwise and collinear interior points
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1], dtype=np.int64)
    return hull if len(hull) >= 3 else pts[[0, -1]] if len(pts) > 1 else pts


def rasterized_hull_area(ys: np.ndarray, xs: np.ndarray) -> int:
    """Count pixels whose integer centers lie in the convex hull of (xs, ys),
    boundary inclusive."""
    pts = np.stack([np.asarray(xs, dtype=np.int64), np.asarray(ys, dtype=np.int64)], axis=1)
    hull = _convex_hull(pts)
    if len(hull) == 1:
        return 1

    x0, x1 = int(pts[:, 0].min()), int(pts[:, 0].max())
    y0, y1 = int(pts[:, 1].min()), int(pts[:, 1].max())
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1, dtype=np.int64),
                         np.arange(y0, y1 + 1, dtype=np.int64))

    if len(hull) == 2:
        a, b = hull
        d = b - a
        cross = d[0] * (gy - a[1]) - d[1] * (gx - a[0])
        return int(np.count_nonzero(cross == 0))

    inside = np.ones(gx.shape, dtype=bool)
    for i in range(len(hull)):
        a = hull[i]
        b = hull[(i + 1) % len(hull)]
        cross = (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0])
        inside &= cross >= 0
    return int(np.count_nonzero(inside))


def component_stats(mask: np.ndarray) -> list[tuple[int, int]]:
    """(area, rasterized hull area) per 8-connected component, area-descending."""
    mask = np.asarray(mask, dtype=bool)
    comp, n_comp = ndimage.label(mask, structure=_EIGHT_CONN)
    stats = []
    for c in range(1, n_comp + 1):
        ys, xs = np.nonzero(comp == c)
        stats.append((len(ys), rasterized_hull_area(ys, xs)))
    stats.sort(key=lambda t: (-t[0], t[1]))
    return stats


def _score_from_stats(stats: list[tuple[int, int]], a_ref: float) -> float:
    if not stats:
        return 0.0
    total = sum(area for area, _ in stats)
    solidity = sum((area / total) * (area / hull) for area, hull in stats)
    return solidity * min(1.0, total / a_ref)


def geometric_score(mask: np.ndarray, a_ref: float) -> float:
    """Area-weighted solidity times scale consensus, in [0, 1]; empty mask -> 0.

    score = sum_i (|C_i|/|M|) * (|C_i|/|Hull(C_i)|) * min(1, |M|/a_ref)
    """
    return _score_from_stats(component_stats(mask), a_ref)


def select_prior(
    heatmap: np.ndarray,
    cfg: PriorConfig = PriorConfig(),
    a_ref: float = 1.0,
) -> tuple[np.ndarray, PriorCandidate]:
    """Best refined candidate across the sweep; score ties go to the lower
    threshold (the more inclusive mask)."""
    best: PriorCandidate | None = None
    for tau in sweep_thresholds(cfg):
        refined = refine_candidate(np.asarray(heatmap) >= tau, cfg)
        if not refined.any():
            continue
        stats = component_stats(refined)
        score = _score_from_stats(stats, a_ref)
        if best is None or score > best.score:
            best = PriorCandidate(tau=tau, mask=refined,
                                  components=tuple(stats), score=score)
    if best is None:
        raise AllCandidatesEmpty("no threshold produced a nonempty mask")
    return best.mask, best


def reference_area(
    support_mask: np.ndarray,
    query_h: int,
    query_w: int,
    cfg: PriorConfig = PriorConfig(),
) -> float:
    """Expected mask area at query resolution.

    support_scaled mode projects the support foreground ratio onto the query
    raster; fixed mode returns the configured constant.
    """
    if cfg.a_ref_mode == "fixed":
        if cfg.a_ref_fixed is None:
            raise MissingFixedValue("a_ref_fixed is required in fixed mode")
        return float(cfg.a_ref_fixed)
    support_mask = np.asarray(support_mask, dtype=bool)
    if not support_mask.any():
        raise EmptyForeground("support mask is empty")
    return float(support_mask.mean()) * query_h * query_w
