"""Leave-one-out evaluation over a dataset manifest.

For each case the forests are trained on every other case, the held-out
volume is localized and segmented against an atlas fused from the rest,
and JI/DICE are scored on the original grid. Per-case failures are recorded
and the run continues. All artifacts (predicted labels, CSV rows, JSON
summary) are deterministic under a fixed seed; wall-clock timings go to the
log only, never into report files.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import VOI
from .config import PipelineConfig
from .forest import estimate_bounding_box
from .io import write_volume
from .pipeline import (build_case_voi, load_manifest, read_case,
                       score_case, segment_case, train_fold_forests)
from .volume import BoundingBox6, Volume3D

log = logging.getLogger("panseg")


@dataclass
class CaseResult:
    case_id: str
    status: str = "ok"            # "ok" | "failed"
    error: str = ""
    ji: float = float("nan")
    dice: float = float("nan")
    em_ll_monotone: bool = True
    energy_map: float = float("nan")
    energy_refined: float = float("nan")
    box_faces: list[float] = field(default_factory=list)


@dataclass
class OverlapReport:
    cases: list[CaseResult]

    def ok_cases(self) -> list[CaseResult]:
        return [c for c in self.cases if c.status == "ok"]

    def aggregate(self) -> dict:
        ok = self.ok_cases()
        jis = np.array([c.ji for c in ok])
        dices = np.array([c.dice for c in ok])
        if len(ok) == 0:
            return {"n_ok": 0, "n_failed": len(self.cases),
                    "ji_mean": None, "ji_sd": None,
                    "dice_mean": None, "dice_sd": None}
        return {"n_ok": len(ok), "n_failed": len(self.cases) - len(ok),
                "ji_mean": float(jis.mean()), "ji_sd": float(jis.std()),
                "dice_mean": float(dices.mean()), "dice_sd": float(dices.std())}


def _predict_db_boxes(volumes, boxes_gt, forests, cfg) -> list[BoundingBox6]:
    """Per-case box used for that case's database VOI: its own held-out
    forest estimate, or ground truth when configured."""
    if cfg.voi.db_boxes == "ground_truth":
        return list(boxes_gt)
    return [estimate_bounding_box(forests[i], v)
            for i, v in enumerate(volumes)]


def run_loocv(manifest_path, cfg: PipelineConfig, out_dir,
              oracle_passthrough: bool = False) -> OverlapReport:
    """Leave-one-out over the manifest; writes artifacts under ``out_dir``.

    ``oracle_passthrough`` short-circuits the pipeline and scores each
    case's ground truth against itself (debug plumbing check).
    """
    cases = load_manifest(manifest_path)
    if len(cases) < 3:
        raise ValueError("leave-one-out needs at least 3 cases")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    loaded = [read_case(c) for c in cases]
    volumes = [ct for ct, _ in loaded]
    labels = [lbl for _, lbl in loaded]
    if any(lbl is None for lbl in labels):
        raise ValueError("every manifest case needs a ground-truth label")
    boxes_gt = [c.box for c in cases]
    if any(b is None for b in boxes_gt):
        from .volume import mask_bounding_box
        boxes_gt = [mask_bounding_box(lbl) for lbl in labels]

    results: list[CaseResult] = []
    if oracle_passthrough:
        for case, lbl in zip(cases, labels):
            ji, dc = score_case(lbl, lbl)
            _write_prediction(out, case.case_id, lbl)
            results.append(CaseResult(case.case_id, ji=ji, dice=dc,
                                      box_faces=[]))
        report = OverlapReport(results)
        _write_report(out, report, cfg)
        return report

    t0 = time.perf_counter()
    forests = train_fold_forests(volumes, boxes_gt, cfg, jobs=cfg.jobs)
    log.info("fold forests trained in %.1f s", time.perf_counter() - t0)

    box_est = _predict_db_boxes(volumes, boxes_gt, forests, cfg)

    t0 = time.perf_counter()

    def _build_voi(i: int) -> VOI:
        return build_case_voi(volumes[i], box_est[i], cfg, label=labels[i],
                              source_id=cases[i].case_id)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            vois = list(ex.map(_build_voi, range(len(cases))))
    else:
        vois = [_build_voi(i) for i in range(len(cases))]
    log.info("database VOIs + DSS built in %.1f s", time.perf_counter() - t0)

    def run_fold(i: int) -> CaseResult:
        case = cases[i]
        try:
            db = [vois[j] for j in range(len(cases)) if j != i]
            pred, diag = segment_case(volumes[i], forests[i], db, cfg,
                                      input_box=box_est[i])
            ji, dc = score_case(pred, labels[i])
            _write_prediction(out, case.case_id, pred)
            _write_box(out, case.case_id, diag.box)
            return CaseResult(case.case_id, ji=ji, dice=dc,
                              em_ll_monotone=diag.em_ll_monotone,
                              energy_map=diag.energy_map,
                              energy_refined=diag.energy_refined,
                              box_faces=list(diag.box.faces()))
        except Exception as e:  # record and continue with other cases
            log.exception("case %s failed", case.case_id)
            return CaseResult(case.case_id, status="failed", error=str(e))

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(run_fold, range(len(cases))))
    else:
        results = [run_fold(i) for i in range(len(cases))]

    report = OverlapReport(results)
    _write_report(out, report, cfg)
    return report


def _write_prediction(out: Path, case_id: str, pred: Volume3D):
    write_volume(out / f"{case_id}_pred.mhd", pred, "MET_UCHAR")


def _write_box(out: Path, case_id: str, box: BoundingBox6):
    (out / f"{case_id}_box.json").write_text(
        json.dumps({"faces": list(box.faces())}, indent=2))


def _nan_to_none(x: float):
    return None if x != x else x


def _write_report(out: Path, report: OverlapReport, cfg: PipelineConfig):
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "status", "ji_percent", "dice_percent", "error"])
        for c in report.cases:
            ji = f"{c.ji:.10g}" if c.status == "ok" else ""
            dc = f"{c.dice:.10g}" if c.status == "ok" else ""
            w.writerow([c.case_id, c.status, ji, dc, c.error])
    doc = {
        "schema_version": 1,
        "config": cfg.to_dict(),
        "aggregate": report.aggregate(),
        "cases": [{
            "id": c.case_id, "status": c.status, "error": c.error,
            "ji_percent": _nan_to_none(c.ji),
            "dice_percent": _nan_to_none(c.dice),
            "em_ll_monotone": c.em_ll_monotone,
            "energy_map": _nan_to_none(c.energy_map),
            "energy_refined": _nan_to_none(c.energy_refined),
            "box": c.box_faces,
        } for c in report.cases],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
