"""End-to-end orchestration: one support image drives a whole query set.

Support-side work (superpixels, pooled mask, prototypes and their contrast
scores) happens once; per query the pipeline recomputes the query-specific
purity weights, aggregates and diffuses the heatmap, upsamples it to the
segmenter raster, selects a prior mask by the threshold sweep, and runs the
prompt-refinement loop. Per-image failures are logged and scored zero so one
bad frame cannot kill a dataset run.
"""
from __future__ import annotations

import csv
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, tensor_io
from .errors import AllCandidatesEmpty, ConfigError, EmptyGroundTruth, EngineError
from .prior import (
    PriorCandidate,
    PriorConfig,
    component_stats,
    geometric_score,
    reference_area,
    refine_candidate,
    select_prior,
)
from .prototypes import (
    FOREGROUND,
    Prototype,
    PrototypeConfig,
    aggregate_heatmap,
    contrast_factor,
    extract_prototypes,
    reverse_purity,
    self_diffuse,
)
from .refine import RefineConfig, RefineTrace, refine_loop
from .segmenter import BridgeClient, OracleSegmenter, rle_encode
from .superpixel import SlicConfig, pool_labels_to_grid, pool_mask_to_grid, slic_segment

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

FIXED_THRESHOLD_FALLBACK = 0.7  # binarization level when the adaptive sweep is off

TOGGLE_NAMES = ("bg-suppression", "prototype-weights", "adaptive-threshold", "refinement")


@dataclass(frozen=True)
class Toggles:
    """Pipeline stages that the ablation harness can disable."""
    bg_suppression: bool = True
    prototype_weights: bool = True
    adaptive_threshold: bool = True
    refinement: bool = True

    def without(self, name: str) -> "Toggles":
        key = name.replace("-", "_")
        if key not in self.__dataclass_fields__:
            raise ConfigError(f"unknown ablation toggle {name!r}; "
                              f"valid: {', '.join(TOGGLE_NAMES)}")
        return replace(self, **{key: False})


@dataclass(frozen=True)
class OutputConfig:
    emit_heatmaps: bool = False
    emit_prototype_scores: bool = False
    emit_candidate_scores: bool = False
    emit_iteration_masks: bool = True


@dataclass
class PipelineConfig:
    support_image: Path
    support_mask: Path
    query_dir: Path
    out_dir: Path
    features_dir: Path | None = None
    gt_dir: Path | None = None
    scene_dir: Path | None = None
    backend: str = "oracle"        # oracle | bridge
    feature_source: str = "dir"    # dir | bridge
    bridge_addr: str | None = None
    workers: int = 1
    seed: int = 0
    slic: SlicConfig = field(default_factory=SlicConfig)
    prototypes: PrototypeConfig = field(default_factory=PrototypeConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    toggles: Toggles = field(default_factory=Toggles)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        if self.backend not in ("oracle", "bridge"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.feature_source not in ("dir", "bridge"):
            raise ConfigError(f"unknown feature_source {self.feature_source!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for path, name in ((self.support_image, "support image"),
                           (self.support_mask, "support mask")):
            if not Path(path).is_file():
                raise ConfigError(f"{name} not found: {path}")
        if not Path(self.query_dir).is_dir():
            raise ConfigError(f"query dir not found: {self.query_dir}")
        if self.feature_source == "dir":
            if self.features_dir is None or not Path(self.features_dir).is_dir():
                raise ConfigError(f"features dir not found: {self.features_dir}")
        if "bridge" in (self.backend, self.feature_source) and not self.bridge_addr:
            raise ConfigError("bridge_addr is required for the bridge backend")
        if self.gt_dir is not None and not Path(self.gt_dir).is_dir():
            raise ConfigError(f"gt dir not found: {self.gt_dir}")


# ---------------------------------------------------------------------------
# config file handling

_SECTIONS = {
    "slic": SlicConfig,
    "prototypes": PrototypeConfig,
    "prior": PriorConfig,
    "refine": RefineConfig,
    "output": OutputConfig,
}
_TOP_LEVEL = ("backend", "feature_source", "bridge_addr", "workers", "seed",
              "support_image", "support_mask", "query_dir", "features_dir",
              "gt_dir", "scene_dir", "out_dir")
_PATH_KEYS = ("support_image", "support_mask", "query_dir", "features_dir",
              "gt_dir", "scene_dir", "out_dir")


def config_from_dict(data: dict, **overrides) -> PipelineConfig:
    """Build a PipelineConfig from a TOML-shaped dict plus flag overrides.

    Overrides with value None are ignored; unknown keys fail fast.
    """
    merged = dict(data)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value

    kwargs: dict = {}
    for section, cls in _SECTIONS.items():
        body = merged.pop(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        try:
            kwargs[section if section != "prior" else "prior"] = cls(**body)
        except TypeError as exc:
            raise ConfigError(f"bad key in [{section}]: {exc}") from exc

    for key in list(merged):
        if key not in _TOP_LEVEL:
            raise ConfigError(f"unknown config key {key!r}")
    for key in _PATH_KEYS:
        if merged.get(key) is not None:
            merged[key] = Path(merged[key])

    missing = [k for k in ("support_image", "support_mask", "query_dir", "out_dir")
               if merged.get(k) is None]
    if missing:
        raise ConfigError(f"missing required settings: {', '.join(missing)}")
    return PipelineConfig(**merged, **kwargs)


def load_config_file(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# support-side preparation


@dataclass
class SupportContext:
    features: np.ndarray       # normalized (Hf, Wf, D)
    mask_grid: np.ndarray      # (Hf, Wf) bool
    labels_grid: np.ndarray    # (Hf, Wf) int32
    prototypes: list[Prototype]  # fg prototypes carry contrast; bg carry weight 1
    support_mask: np.ndarray   # full-resolution support mask


class _FeatureProvider:
    """Fetches per-image feature grids from disk or from the bridge."""

    def __init__(self, cfg: PipelineConfig, bridge: BridgeClient | None):
        self._cfg = cfg
        self._bridge = bridge

    def fetch(self, image_id: str, image_path: Path | None) -> np.ndarray:
        if self._cfg.feature_source == "dir":
            path = Path(self._cfg.features_dir) / f"{image_id}.npy"
            return tensor_io.normalize_features(tensor_io.load_npy_tensor(path))
        assert self._bridge is not None
        if image_path is not None:
            self._bridge.register_image(image_id, image_path)
        return tensor_io.normalize_features(self._bridge.fetch_features(image_id))


def prepare_support(cfg: PipelineConfig, provider: _FeatureProvider) -> SupportContext:
    image = tensor_io.load_image(cfg.support_image)
    support_mask = tensor_io.load_mask(cfg.support_mask)
    features = provider.fetch(Path(cfg.support_image).stem, Path(cfg.support_image))
    grid_h, grid_w = features.shape[:2]

    labels = slic_segment(image, cfg.slic)
    labels_grid = pool_labels_to_grid(labels, grid_h, grid_w)
    mask_grid = pool_mask_to_grid(support_mask, grid_h, grid_w)

    protos = extract_prototypes(features, mask_grid, labels_grid, cfg.prototypes)
    scored = []
    for proto in protos:
        if proto.role == FOREGROUND:
            contrast = contrast_factor(proto.vector, features, mask_grid)
            scored.append(replace(proto, contrast=contrast))
        else:
            scored.append(proto)
    return SupportContext(features=features, mask_grid=mask_grid,
                          labels_grid=labels_grid, prototypes=scored,
                          support_mask=support_mask)


# ---------------------------------------------------------------------------
# per-query processing


@dataclass
class QueryResult:
    record: metrics.EvalRecord
    heatmap: np.ndarray | None = None
    prior: np.ndarray | None = None
    final: np.ndarray | None = None
    candidate: PriorCandidate | None = None
    trace: RefineTrace | None = None
    scored_fg: list[Prototype] = field(default_factory=list)


def score_query_prototypes(ctx: SupportContext, query_features: np.ndarray,
                           cfg: PipelineConfig) -> list[Prototype]:
    """Fill per-query weights: contrast * reverse purity, or 1 when weighting
    is toggled off."""
    n_query = query_features.shape[0] * query_features.shape[1]
    n_support = ctx.features.shape[0] * ctx.features.shape[1]
    top_n = min(cfg.prototypes.reverse_top_n, n_query, n_support)
    out = []
    for proto in ctx.prototypes:
        if proto.role != FOREGROUND:
            out.append(proto)
        elif cfg.toggles.prototype_weights:
            purity = reverse_purity(proto.vector, ctx.features, query_features,
                                    ctx.mask_grid, top_n)
            out.append(proto.with_scores(contrast=proto.contrast or 0.0, purity=purity))
        else:
            out.append(replace(proto, weight=1.0))
    return out


def compute_prior(heat_seg: np.ndarray, a_ref: float, cfg: PipelineConfig
                  ) -> tuple[np.ndarray, PriorCandidate]:
    if cfg.toggles.adaptive_threshold:
        return select_prior(heat_seg, cfg.prior, a_ref)
    refined = refine_candidate(heat_seg >= FIXED_THRESHOLD_FALLBACK, cfg.prior)
    if not refined.any():
        raise AllCandidatesEmpty(
            f"fixed threshold {FIXED_THRESHOLD_FALLBACK} produced an empty mask")
    stats = component_stats(refined)
    cand = PriorCandidate(tau=FIXED_THRESHOLD_FALLBACK, mask=refined,
                          components=tuple(stats),
                          score=geometric_score(refined, a_ref))
    return refined, cand


def process_query(ctx: SupportContext, cfg: PipelineConfig, image_id: str,
                  backend, provider: _FeatureProvider,
                  image_path: Path | None) -> QueryResult:
    query_features = provider.fetch(image_id, image_path)

    scored = score_query_prototypes(ctx, query_features, cfg)
    if cfg.toggles.bg_suppression:
        for_map = scored
    else:
        for_map = [p for p in scored if p.role == FOREGROUND]
    heat_grid = aggregate_heatmap(query_features, for_map, cfg.prototypes)
    heat_grid = self_diffuse(heat_grid, query_features, cfg.prototypes.diffusion_iters)

    seg_h, seg_w = backend.output_size(image_id)
    heat_seg = tensor_io.resize_bilinear(heat_grid, seg_h, seg_w)
    a_ref = reference_area(ctx.support_mask, seg_h, seg_w, cfg.prior)
    prior_mask, candidate = compute_prior(heat_seg, a_ref, cfg)

    trace = None
    if cfg.toggles.refinement:
        final, trace = refine_loop(backend, image_id, prior_mask, cfg.refine)
    else:
        final = prior_mask

    record = _evaluate(cfg, image_id, final, heat_grid)
    return QueryResult(record=record, heatmap=heat_grid, prior=prior_mask,
                       final=final, candidate=candidate, trace=trace,
                       scored_fg=[p for p in scored if p.role == FOREGROUND])


def _evaluate(cfg: PipelineConfig, image_id: str, final: np.ndarray,
              heat_grid: np.ndarray) -> metrics.EvalRecord:
    if cfg.gt_dir is None:
        return metrics.EvalRecord(image_id=image_id, iou=0.0, dice=0.0, auc_pr=None)
    gt = tensor_io.load_mask(Path(cfg.gt_dir) / f"{image_id}.png")
    pred = tensor_io.resize_nearest(final, *gt.shape)
    try:
        auc = metrics.auc_pr(tensor_io.resize_bilinear(heat_grid, *gt.shape), gt)
    except EmptyGroundTruth:
        auc = None
    return metrics.EvalRecord(image_id=image_id, iou=metrics.iou(pred, gt),
                              dice=metrics.dice(pred, gt), auc_pr=auc)


# ---------------------------------------------------------------------------
# artifact writing


def _write_artifacts(cfg: PipelineConfig, image_id: str, result: QueryResult) -> None:
    out = Path(cfg.out_dir)
    tensor_io.save_mask(out / "masks" / f"{image_id}.png", result.final)
    tensor_io.save_mask(out / "priors" / f"{image_id}.png", result.prior)

    if cfg.output.emit_heatmaps:
        tensor_io.save_heatmap(out / "heatmaps" / f"{image_id}.npy", result.heatmap,
                               out / "heatmaps" / f"{image_id}.png")

    if result.trace is not None:
        mask_files = None
        if cfg.output.emit_iteration_masks:
            mask_files = []
            for step in result.trace.steps:
                name = f"iterations/{image_id}_t{step.t}.png"
                tensor_io.save_mask(out / name, step.mask)
                mask_files.append(name)
        result.trace.write_json(out / "traces" / f"{image_id}.json", mask_files)

    if cfg.output.emit_prototype_scores:
        with open(out / "prototypes" / f"{image_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cluster_id", "contrast", "purity", "weight"])
            for p in result.scored_fg:
                writer.writerow([p.cluster_id,
                                 "" if p.contrast is None else f"{p.contrast:.6f}",
                                 "" if p.purity is None else f"{p.purity:.6f}",
                                 f"{p.weight:.6f}"])

    if cfg.output.emit_candidate_scores and result.candidate is not None:
        with open(out / "gas" / f"{image_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau", "n_components", "s_geo"])
            writer.writerow([f"{result.candidate.tau:.2f}",
                             len(result.candidate.components),
                             f"{result.candidate.score:.6f}"])


def _prepare_out_dir(cfg: PipelineConfig) -> None:
    out = Path(cfg.out_dir)
    subdirs = ["masks", "priors", "traces"]
    if cfg.output.emit_iteration_masks:
        subdirs.append("iterations")
    if cfg.output.emit_heatmaps:
        subdirs.append("heatmaps")
    if cfg.output.emit_prototype_scores:
        subdirs.append("prototypes")
    if cfg.output.emit_candidate_scores:
        subdirs.append("gas")
    for sub in subdirs:
        (out / sub).mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# dataset runs


@dataclass
class RunResult:
    records: list[metrics.EvalRecord]
    m_iou: float
    m_dice: float
    m_auc: float | None
    n_failed: int
    out_dir: Path


def _make_backend(cfg: PipelineConfig):
    if cfg.backend == "oracle":
        scene_dir = cfg.scene_dir or Path(cfg.query_dir).parent / "scenes"
        return OracleSegmenter(scene_dir=scene_dir)
    return BridgeClient(cfg.bridge_addr)


def _make_bridge_if_needed(cfg: PipelineConfig) -> BridgeClient | None:
    if cfg.feature_source == "bridge":
        return BridgeClient(cfg.bridge_addr)
    return None


def list_queries(cfg: PipelineConfig) -> list[tuple[str, Path]]:
    files = sorted(p for p in Path(cfg.query_dir).iterdir()
                   if p.suffix.lower() in (".png", ".pgm"))
    return [(p.stem, p) for p in files]


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    cfg.validate()
    queries = list_queries(cfg)
    if not queries:
        raise ConfigError(f"no query images in {cfg.query_dir}")
    _prepare_out_dir(cfg)

    shared_bridge = _make_bridge_if_needed(cfg)
    provider = _FeatureProvider(cfg, shared_bridge)
    ctx = prepare_support(cfg, provider)

    local = threading.local()

    def worker_backend():
        # one backend (and one bridge connection) per worker thread
        if not hasattr(local, "backend"):
            local.backend = _make_backend(cfg)
            local.provider = (_FeatureProvider(cfg, _make_bridge_if_needed(cfg))
                              if cfg.feature_source == "bridge" else provider)
        return local.backend, local.provider

    def run_one(item: tuple[str, Path]) -> metrics.EvalRecord:
        image_id, path = item
        try:
            backend, prov = worker_backend()
            if cfg.backend == "bridge":
                backend.register_image(image_id, path)
            result = process_query(ctx, cfg, image_id, backend, prov, path)
            _write_artifacts(cfg, image_id, result)
            return result.record
        except Exception as exc:  # per-image isolation: score zero, keep going
            log.warning("query %s failed: %s", image_id, exc)
            return metrics.EvalRecord(image_id=image_id, iou=0.0, dice=0.0,
                                      auc_pr=None, failed=True, error=str(exc))

    if cfg.workers == 1:
        records = [run_one(item) for item in queries]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(run_one, queries))

    records.sort(key=lambda r: r.image_id)
    m_iou, m_dice, m_auc = metrics.aggregate(records)
    metrics.write_records_csv(Path(cfg.out_dir) / "results.csv", records)
    metrics.write_summary_json(Path(cfg.out_dir) / "summary.json", records)
    return RunResult(records=records, m_iou=m_iou, m_dice=m_dice, m_auc=m_auc,
                     n_failed=sum(r.failed for r in records), out_dir=Path(cfg.out_dir))


def run_ablation(cfg: PipelineConfig, toggles_off: list[str]) -> list[tuple[str, RunResult]]:
    """One full run per configuration: the complete pipeline plus one row per
    disabled stage. Every row shares the same support/query pairs."""
    for name in toggles_off:
        Toggles().without(name)  # validate names before any work
    rows: list[tuple[str, RunResult]] = []
    base_out = Path(cfg.out_dir)

    for name in ["full"] + [f"no-{t}" for t in toggles_off]:
        row_cfg = replace(cfg, out_dir=base_out / name)
        if name != "full":
            row_cfg = replace(row_cfg, toggles=cfg.toggles.without(name[3:]))
        rows.append((name, run_pipeline(row_cfg)))

    with open(base_out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["configuration", "m_iou", "m_dice", "m_auc_pr", "n_failed"])
        for name, result in rows:
            writer.writerow([name, f"{result.m_iou:.6f}", f"{result.m_dice:.6f}",
                             "" if result.m_auc is None else f"{result.m_auc:.6f}",
                             result.n_failed])
    return rows
