"""Per-case orchestration: localize, build VOIs, fuse an atlas, segment.

These functions are the single implementation path for both the CLI and the
evaluation harness, so CLI runs and direct library calls produce identical
artifacts under the same configuration.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import (AtlasCandidate, ProbAtlas, VOI, build_atlas, make_voi,
                    project_voi_label, select_similar)
from .config import PipelineConfig
from .dss import dss_volume
from .forest import RegressionForest, estimate_bounding_box, train_forest
from .graphcut import build_graph, labeling_energy, max_flow_min_cut
from .io import read_volume
from .metrics import dice, jaccard
from .segment import (fit_intensity_model_em, largest_component,
                      map_segment, posterior_foreground)
from .volume import BoundingBox6, Volume3D

log = logging.getLogger("panseg")


@dataclass
class ManifestCase:
    case_id: str
    ct_path: Path
    label_path: Path | None
    box: BoundingBox6 | None


def load_manifest(path) -> list[ManifestCase]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    doc = json.loads(p.read_text())
    cases = []
    for entry in doc["cases"]:
        box = BoundingBox6.from_faces(entry["box"]) if "box" in entry else None
        label = entry.get("label")
        cases.append(ManifestCase(
            case_id=entry["id"],
            ct_path=p.parent / entry["ct"],
            label_path=p.parent / label if label else None,
            box=box))
    if not cases:
        raise ValueError(f"manifest {p} lists no cases")
    return cases


@dataclass
class SegmentationDiagnostics:
    box: BoundingBox6
    atlas_sources: list[str] = field(default_factory=list)
    atlas_weights: list[float] = field(default_factory=list)
    em_log_likelihoods: list[float] = field(default_factory=list)
    em_ll_monotone: bool = True
    energy_map: float = 0.0
    energy_refined: float = 0.0
    flow: float = 0.0
    stage_seconds: dict[str, float] = field(default_factory=dict)


def build_case_voi(ct: Volume3D, box: BoundingBox6, cfg: PipelineConfig,
                   label: Volume3D | None = None, source_id: str = "") -> VOI:
    """Margin-expanded, size-normalized VOI with its DSS volume attached."""
    voi = make_voi(ct, box, cfg.voi.margin_mm, cfg.voi.size, cfg.voi.spacing,
                   label=label, source_id=source_id)
    return voi.with_volumes(dss=dss_volume(voi.ct, cfg.dss))


def segment_in_voi(input_voi: VOI, candidates: list[AtlasCandidate],
                   cfg: PipelineConfig,
                   diag: SegmentationDiagnostics) -> tuple[Volume3D, ProbAtlas]:
    """Atlas fusion, EM/MAP rough labeling, graph-cut refinement."""
    seg = cfg.segmentation
    atlas = build_atlas(candidates)
    diag.atlas_sources = list(atlas.source_ids)
    diag.atlas_weights = [float(w) for w in atlas.weights]

    t0 = time.perf_counter()
    model = fit_intensity_model_em(
        input_voi.ct, atlas.prob.data, fg_components=seg.fg_components,
        bg_components=seg.bg_components, max_iter=seg.em_max_iter,
        tol=seg.em_tol, var_floor=seg.var_floor)
    diag.em_log_likelihoods = list(model.log_likelihoods)
    diag.em_ll_monotone = model.ll_monotone
    diag.stage_seconds["em"] = time.perf_counter() - t0

    rough = map_segment(input_voi.ct, atlas.prob.data, model)
    post = posterior_foreground(input_voi.ct, atlas.prob.data, model)

    t0 = time.perf_counter()
    g = build_graph(input_voi.ct, post, seg.lambda_smooth, seg.sigma_edge)
    flow, source_side = max_flow_min_cut(g)
    diag.flow = float(flow)
    diag.energy_map = labeling_energy(g, rough.data.ravel() > 0.5)
    diag.energy_refined = labeling_energy(g, source_side)
    diag.stage_seconds["graph_cut"] = time.perf_counter() - t0

    refined = Volume3D(source_side.reshape(input_voi.ct.data.shape)
                       .astype(np.float32),
                       input_voi.ct.spacing, input_voi.ct.origin)
    return refined, atlas


def segment_case(ct: Volume3D, forest: RegressionForest,
                 db_vois: list[VOI], cfg: PipelineConfig,
                 input_box: BoundingBox6 | None = None
                 ) -> tuple[Volume3D, SegmentationDiagnostics]:
    """Full single-case pipeline on the original CT grid.

    ``input_box`` overrides forest localization when provided (used by the
    evaluation harness, which already holds the held-out estimate).
    """
    t_all = time.perf_counter()
    t0 = time.perf_counter()
    box = input_box if input_box is not None else estimate_bounding_box(forest, ct)
    diag = SegmentationDiagnostics(box=box)
    diag.stage_seconds["localize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    input_voi = build_case_voi(ct, box, cfg)
    diag.stage_seconds["voi_dss"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    candidates = select_similar(input_voi, db_vois, cfg.n_select,
                                cfg.registration)
    diag.stage_seconds["atlas_selection"] = time.perf_counter() - t0

    label_voi, _ = segment_in_voi(input_voi, candidates, cfg, diag)

    t0 = time.perf_counter()
    full = project_voi_label(label_voi, input_voi, ct)
    if cfg.segmentation.largest_component:
        full = largest_component(full)
    diag.stage_seconds["back_projection"] = time.perf_counter() - t0
    diag.stage_seconds["total"] = time.perf_counter() - t_all
    for stage, secs in diag.stage_seconds.items():
        log.info("stage %-16s %.3f s", stage, secs)
    return full, diag


def train_fold_forests(volumes: list[Volume3D], boxes: list[BoundingBox6],
                       cfg: PipelineConfig, jobs: int = 1
                       ) -> list[RegressionForest]:
    """One forest per leave-one-out fold (fold i excludes case i)."""
    n = len(volumes)
    fold_seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    forests = []
    for i in range(n):
        keep = [j for j in range(n) if j != i]
        t0 = time.perf_counter()
        forest = train_forest([volumes[j] for j in keep],
                              [boxes[j] for j in keep],
                              cfg.localizer, seed=fold_seeds[i], jobs=jobs)
        log.info("fold %d forest trained in %.2f s", i, time.perf_counter() - t0)
        forests.append(forest)
    return forests


def score_case(pred: Volume3D, truth: Volume3D) -> tuple[float, float]:
    """(JI %, DICE %) of a predicted mask against ground truth."""
    return jaccard(pred, truth), dice(pred, truth)


def read_case(case: ManifestCase) -> tuple[Volume3D, Volume3D | None]:
    ct = read_volume(case.ct_path)
    label = read_volume(case.label_path) if case.label_path else None
    return ct, label
