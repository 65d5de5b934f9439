import numpy as np


def plateau_blob_heatmap(rng, size=256, r_range=(18, 52), n_bumps=(1, 3)):
    """Normalized heatmap with one plateau-profile blob over low noise.

    The blob is ~0.8-1.0 inside a disk of radius r with a sharp sigmoid edge,
    plus a few small mid-intensity bumps that a component filter should drop.
    Returns (heatmap, true_support_mask).
    """
    radius = rng.uniform(*r_range)
    cy = rng.uniform(radius + 6, size - radius - 6)
    cx = rng.uniform(radius + 6, size - radius - 6)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)

    heat = rng.uniform(0.03, 0.22, (size, size))
    edge = 1.0 / (1.0 + np.exp((dist - radius) / 1.5))
    dome = 0.82 + 0.18 * np.exp(-(dist**2) / (2 * (radius / 1.5) ** 2))
    heat = np.maximum(heat, edge * dome)

    for _ in range(int(rng.integers(*n_bumps))):
        while True:
            by = rng.uniform(8, size - 8)
            bx = rng.uniform(8, size - 8)
            if np.hypot(by - cy, bx - cx) > radius + 14:
                break
        bd = np.sqrt((yy - by) ** 2 + (xx - bx) ** 2)
        heat = np.maximum(heat, 0.5 * np.exp(-(bd**2) / (2 * 2.5**2)))

    return heat.astype(np.float32), dist <= radius
