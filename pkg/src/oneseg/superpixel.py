"""SLIC superpixel clustering of the support image.

Clusters are formed in CIELAB + (y, x) space with distance
``d_lab + (m / S) * d_xy`` where ``S = sqrt(H*W / K)``, centers start on a
regular grid, and an optional connectivity pass relabels orphan fragments to
their dominant neighbor. Labelings are deterministic: fixed iteration order,
no RNG.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class SlicConfig:
    k_clusters: int = 10
    compactness_m: float = 20.0
    max_iters: int = 10
    enforce_connectivity: bool = True

    def __post_init__(self) -> None:
        if self.k_clusters < 1:
            raise ConfigError("k_clusters must be >= 1")
        if self.compactness_m <= 0:
            raise ConfigError("compactness_m must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert (H, W, 3) uint8 sRGB to CIELAB (D65 white point)."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    m = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = linear @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])  # D65 reference white
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _grid_centers(height: int, width: int, k: int) -> np.ndarray:
    """Regular grid of roughly k centers, returned as (n, 2) float (y, x)."""
    rows = max(1, round(np.sqrt(k * height / width)))
    cols = max(1, round(k / rows))
    ys = (np.arange(rows) + 0.5) * height / rows
    xs = (np.arange(cols) + 0.5) * width / cols
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def slic_segment(image: np.ndarray, cfg: SlicConfig = SlicConfig()) -> np.ndarray:
    """Partition an RGB image into superpixels; returns (H, W) int32 labels.

    Degenerate images with fewer pixels than k get one label per pixel.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ValueError("expected nonempty (H, W, 3) image")
    height, width = image.shape[:2]
    n_pixels = height * width
    if n_pixels <= cfg.k_clusters:
        return np.arange(n_pixels, dtype=np.int32).reshape(height, width)

    lab = rgb_to_lab(image)
    step = np.sqrt(n_pixels / cfg.k_clusters)
    ratio = cfg.compactness_m / step
    window = max(1, int(np.ceil(2 * step)))

    centers_yx = _grid_centers(height, width, cfg.k_clusters)
    n_centers = len(centers_yx)
    idx = np.minimum(centers_yx.astype(int), [height - 1, width - 1])
    centers_lab = lab[idx[:, 0], idx[:, 1]]

    ys_full = np.arange(height, dtype=np.float64)
    xs_full = np.arange(width, dtype=np.float64)
    labels = np.full((height, width), -1, dtype=np.int32)

    for _ in range(cfg.max_iters):
        best = np.full((height, width), np.inf)
        labels.fill(-1)
        for c in range(n_centers):
            cy, cx = centers_yx[c]
            y0, y1 = max(0, int(cy) - window), min(height, int(cy) + window + 1)
            x0, x1 = max(0, int(cx) - window), min(width, int(cx) + window + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            patch = lab[y0:y1, x0:x1]
            d_lab = np.sqrt(((patch - centers_lab[c]) ** 2).sum(axis=2))
            dy = ys_full[y0:y1, None] - cy
            dx = xs_full[None, x0:x1] - cx
            d_xy = np.sqrt(dy * dy + dx * dx)
            dist = d_lab + ratio * d_xy
            view = best[y0:y1, x0:x1]
            better = dist < view
            view[better] = dist[better]
            labels[y0:y1, x0:x1][better] = c

        # pixels outside every search window: assign globally
        stray = labels < 0
        if stray.any():
            sy, sx = np.nonzero(stray)
            d_lab = np.linalg.norm(lab[sy, sx][:, None, :] - centers_lab[None], axis=2)
            d_xy = np.sqrt((sy[:, None] - centers_yx[None, :, 0]) ** 2
                           + (sx[:, None] - centers_yx[None, :, 1]) ** 2)
            labels[sy, sx] = np.argmin(d_lab + ratio * d_xy, axis=1).astype(np.int32)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_centers).astype(np.float64)
        nonzero = counts > 0
        sum_y = np.bincount(flat, weights=np.repeat(ys_full, width), minlength=n_centers)
        sum_x = np.bincount(flat, weights=np.tile(xs_full, height), minlength=n_centers)
        centers_yx[nonzero, 0] = sum_y[nonzero] / counts[nonzero]
        centers_yx[nonzero, 1] = sum_x[nonzero] / counts[nonzero]
        for ch in range(3):
            sums = np.bincount(flat, weights=lab[..., ch].ravel(), minlength=n_centers)
            centers_lab[nonzero, ch] = sums[nonzero] / counts[nonzero]

    if cfg.enforce_connectivity:
        labels = _enforce_connectivity(labels)
    else:
        labels = _compact_ids(labels)
    return labels


def _compact_ids(labels: np.ndarray) -> np.ndarray:
    uniq, inverse = np.unique(labels, return_inverse=True)
    del uniq
    return inverse.reshape(labels.shape).astype(np.int32)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest 4-connected component; relabel orphan
    fragments to the most frequent neighboring finalized label."""
    height, width = labels.shape
    final = np.full((height, width), -1, dtype=np.int32)
    orphans: list[np.ndarray] = []

    for lbl in np.unique(labels):
        comp, n_comp = ndimage.label(labels == lbl, structure=_FOUR_CONN)
        if n_comp == 0:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        keeper = int(np.argmax(sizes)) + 1  # ties: first component in raster order
        final[comp == keeper] = lbl
        for c in range(1, n_comp + 1):
            if c != keeper:
                orphans.append(comp == c)

    while orphans:
        remaining = []
        progressed = False
        for region in orphans:
            ring = ndimage.binary_dilation(region, structure=_FOUR_CONN) & ~region
            neighbor_labels = final[ring]
            neighbor_labels = neighbor_labels[neighbor_labels >= 0]
            if neighbor_labels.size == 0:
                remaining.append(region)
                continue
            counts = np.bincount(neighbor_labels)
            dominant = int(np.argmax(counts))  # ties: smallest label id
            final[region] = dominant
            progressed = True
        if not progressed:
            # isolated group of orphans with no finalized neighbor; keep as-is
            for region in remaining:
                final[region] = labels[region][0]
            break
        orphans = remaining

    return _compact_ids(final)


def pool_labels_to_grid(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Downsample a labeling by per-cell majority vote, ties to the smallest id.

    Cell (i, j) covers pixel rows [floor(i*H/out_h), ceil((i+1)*H/out_h)) and
    the analogous columns, so adjacent blocks overlap when dims do not divide.
    """
    labels = np.asarray(labels)
    height, width = labels.shape
    if out_h > height or out_w > width:
        raise ValueError("output grid must not exceed label dims")
    out = np.empty((out_h, out_w), dtype=np.int32)
    for i in range(out_h):
        r0 = (i * height) // out_h
        r1 = -((-(i + 1) * height) // out_h)  # ceil division
        for j in range(out_w):
            c0 = (j * width) // out_w
            c1 = -((-(j + 1) * width) // out_w)
            block = labels[r0:r1, c0:c1].ravel()
            out[i, j] = np.argmax(np.bincount(block))
    return out


def pool_mask_to_grid(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Majority-pool a boolean mask onto a coarser grid (ties count as true)."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    if out_h > height or out_w > width:
        raise ValueError("output grid must not exceed mask dims")
    out = np.empty((out_h, out_w), dtype=bool)
    for i in range(out_h):
        r0 = (i * height) // out_h
        r1 = -((-(i + 1) * height) // out_h)
        for j in range(out_w):
            c0 = (j * width) // out_w
            c1 = -((-(j + 1) * width) // out_w)
            block = mask[r0:r1, c0:c1]
            out[i, j] = block.sum() * 2 >= block.size
    return out


def save_labels(path, labels: np.ndarray) -> None:
    """Debug export of a label map as int32 NPY."""
    from .tensor_io import write_npy

    write_npy(path, np.asarray(labels, dtype=np.int32))
