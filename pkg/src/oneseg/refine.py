"""Iterative prompt refinement against a prior mask.

The prior drives a promptable segmenter: the first call uses the prior's
bounding box plus one interior point; afterwards, each iteration checks the
current mask against the prior and corrects the dominant error mode - a
positive point at the center of the missed region when coverage is low, else a
negative point at the center of the overshoot region when IoU is low. Prompts
accumulate. The best mask (by IoU against the prior) over the whole history is
returned.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyPrior, EmptyRegion
from .metrics import iou


@dataclass(frozen=True)
class RefineConfig:
    tau_cov: float = 0.9
    tau_iou: float = 0.8
    t_max: int = 5

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_cov <= 1.0) or not (0.0 < self.tau_iou <= 1.0):
            raise ConfigError("stopping thresholds must be in (0, 1]")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")


@dataclass
class PromptSet:
    """Point/box prompts in segmenter pixel coordinates, (x, y) order."""
    positives: list[tuple[int, int]] = field(default_factory=list)
    negatives: list[tuple[int, int]] = field(default_factory=list)
    box: tuple[int, int, int, int] | None = None

    def copy(self) -> "PromptSet":
        return copy.deepcopy(self)


@dataclass
class RefineStep:
    t: int
    prompts: PromptSet  # snapshot used for this segmenter call
    mask: np.ndarray
    cov: float
    iou: float


@dataclass
class RefineTrace:
    steps: list[RefineStep]
    best_index: int
    stopped_early: bool = False     # both stopping criteria met
    degenerate_stop: bool = False   # correction region was empty

    def to_json_dict(self, mask_files: list[str] | None = None) -> dict:
        return {
            "best_index": self.best_index,
            "stopped_early": self.stopped_early,
            "degenerate_stop": self.degenerate_stop,
            "iterations": [
                {
                    "t": s.t,
                    "cov": round(s.cov, 6),
                    "iou": round(s.iou, 6),
                    "positives": [list(p) for p in s.prompts.positives],
                    "negatives": [list(p) for p in s.prompts.negatives],
                    "box": list(s.prompts.box) if s.prompts.box else None,
                    "mask_file": mask_files[i] if mask_files else None,
                }
                for i, s in enumerate(self.steps)
            ],
        }

    def write_json(self, path: str | Path, mask_files: list[str] | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(mask_files), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# exact euclidean distance transform


def _edt_1d(f: list[float]) -> list[float]:
    """Lower-envelope squared distance transform of one sampled row."""
    n = len(f)
    out = [0.0] * n
    v = [0] * n            # parabola sites
    z = [0.0] * (n + 1)    # envelope boundaries
    k = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        site = v[k]
        out[q] = (q - site) ** 2 + f[site]
    return out


def squared_edt(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance of each true pixel to the nearest false
    pixel, with everything beyond the raster border counting as false."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    big = 1e18  # must dominate any achievable squared distance
    grid = np.zeros((h + 2, w + 2))
    grid[1:-1, 1:-1] = np.where(mask, big, 0.0)
    for j in range(grid.shape[1]):
        grid[:, j] = _edt_1d(grid[:, j].tolist())
    for i in range(grid.shape[0]):
        grid[i, :] = _edt_1d(grid[i, :].tolist())
    return np.rint(grid[1:-1, 1:-1]).astype(np.int64)


def edt_center(region: np.ndarray) -> tuple[int, int]:
    """(x, y) of the deepest interior pixel; row-major first on ties."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EmptyRegion("cannot take the center of an empty region")
    d2 = squared_edt(region)
    d2[~region] = -1
    flat_idx = int(np.argmax(d2))  # first maximum in row-major order
    y, x = divmod(flat_idx, region.shape[1])
    return x, y


# ---------------------------------------------------------------------------
# prompting and the refinement loop


def coverage(mask: np.ndarray, prior: np.ndarray) -> float:
    """Fraction of the prior recovered by the mask."""
    prior = np.asarray(prior, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != prior.shape:
        raise ValueError(f"mask dims differ: {mask.shape} vs {prior.shape}")
    denom = np.count_nonzero(prior)
    if denom == 0:
        raise EmptyPrior("coverage against an empty prior is undefined")
    return np.count_nonzero(mask & prior) / denom


def bounding_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight inclusive (x0, y0, x1, y1) around the true pixels."""
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if len(ys) == 0:
        raise EmptyPrior("bounding box of an empty mask is undefined")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def initial_prompts(prior: np.ndarray) -> PromptSet:
    """Tight box plus one positive at the prior's deepest interior point."""
    prior = np.asarray(prior, dtype=bool)
    if not prior.any():
        raise EmptyPrior("cannot prompt from an empty prior")
    return PromptSet(positives=[edt_center(prior)], negatives=[], box=bounding_box(prior))


def refine_loop(segmenter, image_ref: str, prior: np.ndarray,
                cfg: RefineConfig = RefineConfig()) -> tuple[np.ndarray, RefineTrace]:
    """Drive the segmenter until coverage and IoU against the prior both hold,
    the correction region vanishes, or t_max calls are spent.

    Returns the history mask with the highest IoU against the prior.
    """
    prior = np.asarray(prior, dtype=bool)
    if not prior.any():
        raise EmptyPrior("refinement requires a nonempty prior")

    prompts = initial_prompts(prior)
    steps: list[RefineStep] = []
    stopped_early = False
    degenerate = False

    for t in range(1, cfg.t_max + 1):
        mask = np.asarray(segmenter.segment(image_ref, prompts), dtype=bool)
        cov = coverage(mask, prior)
        score = iou(mask, prior)
        steps.append(RefineStep(t=t, prompts=prompts.copy(), mask=mask, cov=cov, iou=score))

        if cov >= cfg.tau_cov and score >= cfg.tau_iou:
            stopped_early = True
            break
        if t == cfg.t_max:
            break
        if cov < cfg.tau_cov:
            region = prior & ~mask  # missed prior area
            if not region.any():
                degenerate = True
                break
            prompts.positives.append(edt_center(region))
        else:
            region = mask & ~prior  # overshoot beyond the prior
            if not region.any():
                degenerate = True
                break
            prompts.negatives.append(edt_center(region))

    best_index = int(np.argmax([s.iou for s in steps]))  # ties: earliest step
    trace = RefineTrace(steps=steps, best_index=best_index,
                        stopped_early=stopped_early, degenerate_stop=degenerate)
    return steps[best_index].mask, trace
