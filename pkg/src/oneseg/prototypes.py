"""Reliability-weighted prototypes and similarity-heatmap aggregation.

Foreground/background prototypes are mean patch features per superpixel
cluster, split by the support mask. Each foreground prototype is scored by a
contrast factor (standardized foreground-vs-background similarity gap on the
support) and a reverse purity (fraction of round-trip support->query->support
matches landing back inside the support mask, area-normalized). The heatmap
aggregates weighted foreground similarities minus unweighted background
similarities, then optionally smooths it by diffusion over the query's patch
affinity matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, EmptyForeground
from .tensor_io import minmax_normalize

FOREGROUND = "foreground"
BACKGROUND = "background"


@dataclass(frozen=True)
class PrototypeConfig:
    reverse_top_n: int = 16
    diffusion_iters: int = 1
    min_patches_per_prototype: int = 1
    normalization: str = "minmax"  # or "spatial_softmax"

    def __post_init__(self) -> None:
        if self.reverse_top_n < 1:
            raise ConfigError("reverse_top_n must be >= 1")
        if self.diffusion_iters < 0:
            raise ConfigError("diffusion_iters must be >= 0")
        if self.min_patches_per_prototype < 1:
            raise ConfigError("min_patches_per_prototype must be >= 1")
        if self.normalization not in ("minmax", "spatial_softmax"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class Prototype:
    """A unit-norm mean feature vector for one cluster/role pair.

    Background prototypes carry weight 1 and no reliability scores.
    """
    vector: np.ndarray
    role: str
    cluster_id: int
    contrast: float | None = None
    purity: float | None = None
    weight: float = 1.0

    def with_scores(self, contrast: float, purity: float) -> "Prototype":
        return replace(self, contrast=contrast, purity=purity, weight=contrast * purity)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return (vec / norm if norm > 0 else vec).astype(np.float32)


def extract_prototypes(
    features: np.ndarray,
    mask_grid: np.ndarray,
    labels_grid: np.ndarray,
    cfg: PrototypeConfig = PrototypeConfig(),
) -> list[Prototype]:
    """Build one foreground and/or background prototype per superpixel cluster.

    All inputs live on the feature grid. A cluster emits a prototype for each
    side (foreground/background) that has at least min_patches_per_prototype
    patches; mixed clusters emit both.
    """
    features = np.asarray(features, dtype=np.float32)
    mask_grid = np.asarray(mask_grid, dtype=bool)
    labels_grid = np.asarray(labels_grid)
    if features.shape[:2] != mask_grid.shape or mask_grid.shape != labels_grid.shape:
        raise ValueError("features, mask, and labels must share the feature-grid dims")
    if not mask_grid.any():
        raise EmptyForeground("support mask has no foreground patch on the feature grid")

    flat = features.reshape(-1, features.shape[-1]).astype(np.float64)
    mask_flat = mask_grid.ravel()
    labels_flat = labels_grid.ravel()

    protos: list[Prototype] = []
    for cluster in np.unique(labels_flat):
        members = labels_flat == cluster
        for role, sel in ((FOREGROUND, members & mask_flat),
                          (BACKGROUND, members & ~mask_flat)):
            if np.count_nonzero(sel) >= cfg.min_patches_per_prototype:
                protos.append(Prototype(vector=_unit(flat[sel].mean(axis=0)),
                                        role=role, cluster_id=int(cluster)))
    return protos


# ---------------------------------------------------------------------------
# reliability scores


def standardized_contrast(similarities: np.ndarray, fg_mask: np.ndarray) -> float:
    """ReLU of (mean fg similarity - mean bg similarity) / population std of all."""
    sims = np.asarray(similarities, dtype=np.float64).ravel()
    fg = np.asarray(fg_mask, dtype=bool).ravel()
    if sims.shape != fg.shape:
        raise ValueError("similarities and mask must align")
    if not fg.any() or fg.all():
        raise ValueError("both foreground and background similarities are required")
    std = float(sims.std())  # population std over all patches
    if std < 1e-12:
        return 0.0
    gap = float(sims[fg].mean() - sims[~fg].mean())
    return max(0.0, gap / std)


def contrast_factor(vector: np.ndarray, features: np.ndarray, mask_grid: np.ndarray) -> float:
    """Contrast of one prototype against all support patches, split by the mask."""
    flat = np.asarray(features, dtype=np.float64).reshape(-1, np.asarray(features).shape[-1])
    sims = flat @ np.asarray(vector, dtype=np.float64)
    return standardized_contrast(sims, np.asarray(mask_grid, dtype=bool).ravel())


def normalized_purity(p: float, p0: float) -> float:
    """ReLU of (p - p0) / (1 - p0); 0 when the mask covers everything."""
    if p0 >= 1.0 - 1e-9:
        return 0.0
    return max(0.0, (p - p0) / (1.0 - p0))


def reverse_purity(
    vector: np.ndarray,
    support_features: np.ndarray,
    query_features: np.ndarray,
    mask_grid: np.ndarray,
    n: int,
) -> float:
    """Round-trip matching stability of a prototype against one query.

    The prototype's top-n query patches are averaged into a proxy vector; the
    proxy's top-n support patches are then checked against the support mask.
    """
    s_flat = np.asarray(support_features, dtype=np.float64).reshape(-1, np.asarray(support_features).shape[-1])
    q_flat = np.asarray(query_features, dtype=np.float64).reshape(-1, np.asarray(query_features).shape[-1])
    mask_flat = np.asarray(mask_grid, dtype=bool).ravel()
    if n > len(q_flat) or n > len(s_flat):
        raise ValueError("top-n exceeds the number of patches")

    q_sims = q_flat @ np.asarray(vector, dtype=np.float64)
    top_q = np.argsort(-q_sims, kind="stable")[:n]
    proxy = _unit(q_flat[top_q].mean(axis=0)).astype(np.float64)

    s_sims = s_flat @ proxy
    top_s = np.argsort(-s_sims, kind="stable")[:n]
    p = float(mask_flat[top_s].mean())
    p0 = float(mask_flat.mean())
    return normalized_purity(p, p0)


# ---------------------------------------------------------------------------
# heatmap aggregation and diffusion


def aggregate_heatmap(
    query_features: np.ndarray,
    protos: list[Prototype],
    cfg: PrototypeConfig = PrototypeConfig(),
) -> np.ndarray:
    """Weighted foreground similarity sum minus unweighted background sum.

    raw(x) = n_fg * sum_k w_k cos(f(x), p_fg_k) - sum_j cos(f(x), p_bg_j),
    normalized to [0, 1]. A constant raw map collapses to all zeros.
    """
    q = np.asarray(query_features, dtype=np.float64)
    grid_h, grid_w = q.shape[:2]
    flat = q.reshape(-1, q.shape[-1])

    fg = [p for p in protos if p.role == FOREGROUND]
    bg = [p for p in protos if p.role == BACKGROUND]
    if not fg:
        raise EmptyForeground("at least one foreground prototype is required")

    fg_vecs = np.stack([p.vector for p in fg]).astype(np.float64)
    weights = np.array([p.weight for p in fg], dtype=np.float64)
    raw = len(fg) * (flat @ fg_vecs.T) @ weights
    if bg:
        bg_vecs = np.stack([p.vector for p in bg]).astype(np.float64)
        raw = raw - (flat @ bg_vecs.T).sum(axis=1)
    raw = raw.reshape(grid_h, grid_w)

    if cfg.normalization == "spatial_softmax":
        shifted = np.exp(raw - raw.max())
        soft = shifted / shifted.sum()
        peak = soft.max()
        return (soft / peak).astype(np.float32) if peak > 0 else soft.astype(np.float32)
    return minmax_normalize(raw)


def affinity_matrix(query_features: np.ndarray) -> np.ndarray:
    """Non-negative row-stochastic patch affinity (cosine, negatives clamped)."""
    flat = np.asarray(query_features, dtype=np.float64).reshape(-1, np.asarray(query_features).shape[-1])
    aff = np.maximum(flat @ flat.T, 0.0)
    row_sums = aff.sum(axis=1)
    zero_rows = row_sums == 0
    if zero_rows.any():
        aff[zero_rows] = 0.0
        aff[zero_rows, np.nonzero(zero_rows)[0]] = 1.0
        row_sums = aff.sum(axis=1)
    return aff / row_sums[:, None]


def self_diffuse(heatmap: np.ndarray, query_features: np.ndarray, iters: int) -> np.ndarray:
    """Smooth a heatmap by repeated averaging over the patch affinity matrix.

    Each step replaces every value with a convex combination of all values
    (row-stochastic affinity), so diffusion cannot leave the value hull; the
    result is minmax-renormalized. iters=0 returns the input unchanged.
    """
    h = np.asarray(heatmap, dtype=np.float64)
    if iters == 0:
        return h.astype(np.float32)
    aff = affinity_matrix(query_features)
    vec = h.ravel().copy()
    for _ in range(iters):
        vec = aff @ vec
    return minmax_normalize(vec.reshape(h.shape))
