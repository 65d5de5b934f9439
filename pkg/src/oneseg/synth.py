"""Seeded synthetic datasets for offline end-to-end runs.

Scenes are colored elliptical blobs on a gray canvas. The support target
contains a whitish low-contrast blotch (a degraded region whose prototype
should be down-weighted); query scenes add colored distractor objects and a
whitish background smudge that unreliable prototypes tend to light up.
Per-pixel "features" are block-averaged color channels plus a low-amplitude
sinusoidal position encoding, so prototype matching is color-driven but the
patch affinity matrix has spatial structure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .segmenter import OracleScene
from .tensor_io import save_feature_grid, save_mask

BACKGROUND = (105, 105, 112)
TARGET = (198, 62, 58)
DISTRACTORS = ((58, 88, 198), (60, 176, 92))
WHITISH = (232, 232, 226)  # blotch in the support target, smudge in queries

POSITION_WEIGHT = 0.15
FEATURE_NOISE = 0.01


@dataclass(frozen=True)
class SynthConfig:
    n_pairs: int = 20
    canvas: tuple[int, int] = (96, 96)
    grid: tuple[int, int] = (24, 24)
    seed: int = 0

    def __post_init__(self) -> None:
        ch, cw = self.canvas
        gh, gw = self.grid
        if ch % gh or cw % gw:
            raise ValueError("canvas dims must be multiples of the feature grid")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _place_ellipses(rng, h, w, radius_ranges, gap=5.0, max_tries=200):
    """Sample non-overlapping ellipses (bounding-circle separation test)."""
    placed: list[tuple[float, float, float, float]] = []
    for r_lo, r_hi in radius_ranges:
        for _ in range(max_tries):
            ry = rng.uniform(r_lo, r_hi)
            rx = rng.uniform(r_lo, r_hi)
            cy = rng.uniform(ry + 2, h - ry - 2)
            cx = rng.uniform(rx + 2, w - rx - 2)
            r_outer = max(ry, rx)
            if all(np.hypot(cy - py, cx - px) > r_outer + max(pry, prx) + gap
                   for py, px, pry, prx in placed):
                placed.append((cy, cx, ry, rx))
                break
        else:
            raise RuntimeError("could not place a blob without overlap")
    return placed


def _jitter_color(rng, color, spread=8):
    return tuple(int(np.clip(c + rng.integers(-spread, spread + 1), 0, 255)) for c in color)


def _paint(image: np.ndarray, mask: np.ndarray, color: tuple[int, int, int]) -> None:
    image[mask] = color


@dataclass
class Scene:
    image: np.ndarray             # (H, W, 3) uint8
    target: np.ndarray            # bool mask of the object of interest
    distractors: list[np.ndarray]

    def oracle_scene(self) -> OracleScene:
        h, w = self.target.shape
        return OracleScene(h, w, tuple([self.target] + self.distractors))


def render_support(rng, cfg: SynthConfig) -> Scene:
    h, w = cfg.canvas
    image = np.empty((h, w, 3), dtype=np.int64)
    image[:] = BACKGROUND
    image += rng.integers(-4, 5, size=image.shape)  # mild texture
    image = np.clip(image, 0, 255).astype(np.uint8)

    (ty, tx, t_ry, t_rx), (dy, dx, d_ry, d_rx) = _place_ellipses(
        rng, h, w, [(13, 17), (8, 12)])
    target = _ellipse(h, w, ty, tx, t_ry, t_rx)
    distractor = _ellipse(h, w, dy, dx, d_ry, d_rx)
    _paint(image, target, TARGET)
    _paint(image, distractor, DISTRACTORS[0])

    # degraded region inside the target: whitish, low contrast vs background
    blotch = _ellipse(h, w, ty - t_ry * 0.3, tx + t_rx * 0.25, t_ry * 0.45, t_rx * 0.4)
    _paint(image, blotch & target, WHITISH)

    return Scene(image=image, target=target, distractors=[distractor])


def render_query(rng, cfg: SynthConfig) -> Scene:
    h, w = cfg.canvas
    image = np.empty((h, w, 3), dtype=np.int64)
    image[:] = BACKGROUND
    image += rng.integers(-4, 5, size=image.shape)
    image = np.clip(image, 0, 255).astype(np.uint8)

    n_distractors = int(rng.integers(1, 3))
    specs = [(12, 17)] + [(8, 13)] * n_distractors + [(7, 10)]  # target, distractors, smudge
    spots = _place_ellipses(rng, h, w, specs)

    target = _ellipse(h, w, *spots[0])
    _paint(image, target, _jitter_color(rng, TARGET))

    distractors = []
    for i in range(n_distractors):
        d = _ellipse(h, w, *spots[1 + i])
        _paint(image, d, _jitter_color(rng, DISTRACTORS[i % len(DISTRACTORS)]))
        distractors.append(d)

    smudge = _ellipse(h, w, *spots[-1])  # background artifact, not an object
    _paint(image, smudge, _jitter_color(rng, WHITISH, spread=5))

    return Scene(image=image, target=target, distractors=distractors)


def pixel_features(image: np.ndarray, grid_h: int, grid_w: int, rng) -> np.ndarray:
    """Block-averaged color + sinusoidal position encodings, with tiny noise."""
    h, w, _ = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    channels = [np.asarray(image, dtype=np.float64) / 255.0]
    channels.append(POSITION_WEIGHT * np.stack([
        np.sin(2 * np.pi * xx / w), np.cos(2 * np.pi * xx / w),
        np.sin(2 * np.pi * yy / h), np.cos(2 * np.pi * yy / h),
    ], axis=-1))
    stack = np.concatenate(channels, axis=-1)
    pooled = stack.reshape(grid_h, h // grid_h, grid_w, w // grid_w, stack.shape[-1])
    pooled = pooled.mean(axis=(1, 3))
    pooled += rng.normal(0.0, FEATURE_NOISE, pooled.shape)
    return pooled.astype(np.float32)


def generate_dataset(out_dir: str | Path, cfg: SynthConfig = SynthConfig()) -> dict:
    """Write a support/query dataset usable by the pipeline's oracle backend.

    Layout: support.png, support_mask.png, queries/, gt/, scenes/, features/
    (one NPY per image, including "support.npy").
    """
    out = Path(out_dir)
    for sub in ("queries", "gt", "scenes", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    gh, gw = cfg.grid

    support = render_support(rng, cfg)
    Image.fromarray(support.image, "RGB").save(out / "support.png")
    save_mask(out / "support_mask.png", support.target)
    save_feature_grid(out / "features" / "support.npy",
                      pixel_features(support.image, gh, gw, rng))

    query_ids = []
    for i in range(cfg.n_pairs):
        qid = f"q{i:03d}"
        scene = render_query(rng, cfg)
        Image.fromarray(scene.image, "RGB").save(out / "queries" / f"{qid}.png")
        save_mask(out / "gt" / f"{qid}.png", scene.target)
        save_feature_grid(out / "features" / f"{qid}.npy",
                          pixel_features(scene.image, gh, gw, rng))
        with open(out / "scenes" / f"{qid}.json", "w") as fh:
            json.dump(scene.oracle_scene().to_json_dict(), fh)
        query_ids.append(qid)

    return {
        "support_image": out / "support.png",
        "support_mask": out / "support_mask.png",
        "query_dir": out / "queries",
        "gt_dir": out / "gt",
        "scene_dir": out / "scenes",
        "features_dir": out / "features",
        "query_ids": query_ids,
    }
