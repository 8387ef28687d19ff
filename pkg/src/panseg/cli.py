"""Command-line interface.

Subcommands cover the pipeline stages end to end: ``phantom`` (synthetic
dataset), ``train`` (forest model), ``localize`` (bounding box), ``dss``
(filter volume), ``segment`` (single case), ``evaluate`` (leave-one-out)
and ``default-config``. Exit codes: 0 success, 2 invalid config/usage,
3 missing input, 4 stage failure, 5 model version mismatch. Log verbosity
comes from the PANSEG_LOG environment variable (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_STAGE = 4
EXIT_MODEL = 5

log = logging.getLogger("panseg")


def _setup_logging():
    level = os.environ.get("PANSEG_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)


def _load_config(args):
    from dataclasses import replace
    from .config import PipelineConfig, load_config
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    return cfg.validate()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        print(f"error: {what} not found: {p}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING)
    return p


def cmd_phantom(args) -> int:
    from .phantom import DatasetRanges, gen_dataset
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    manifest = gen_dataset(args.n, args.out, DatasetRanges(), seed=seed)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .forest import save_forest, train_forest
    from .pipeline import load_manifest, read_case
    from .volume import mask_bounding_box
    cfg = _load_config(args)
    manifest = _require(args.manifest, "manifest")
    cases = load_manifest(manifest)
    if args.exclude:
        cases = [c for c in cases if c.case_id != args.exclude]
        if not cases:
            print("error: every case excluded", file=sys.stderr)
            return EXIT_CONFIG
    volumes, boxes = [], []
    for case in cases:
        ct, label = read_case(case)
        volumes.append(ct)
        boxes.append(case.box if case.box is not None
                     else mask_bounding_box(label))
    t0 = time.perf_counter()
    forest = train_forest(volumes, boxes, cfg.localizer, seed=cfg.seed,
                          jobs=cfg.jobs)
    log.info("trained %d cases in %.1f s", len(cases), time.perf_counter() - t0)
    save_forest(args.out, forest)
    print(args.out)
    return EXIT_OK


def cmd_localize(args) -> int:
    from .forest import estimate_bounding_box, load_forest
    from .io import read_volume
    _load_config(args)
    model_path = _require(args.model, "model file")
    ct_path = _require(args.ct, "CT volume")
    forest = load_forest(model_path)
    ct = read_volume(ct_path)
    t0 = time.perf_counter()
    box = estimate_bounding_box(forest, ct)
    log.info("localization took %.2f s", time.perf_counter() - t0)
    Path(args.out).write_text(json.dumps({"faces": list(box.faces())}, indent=2))
    print(args.out)
    return EXIT_OK


def cmd_dss(args) -> int:
    from .dss import dss_volume
    from .io import read_volume, write_volume
    cfg = _load_config(args)
    ct_path = _require(args.ct, "CT volume")
    ct = read_volume(ct_path)
    t0 = time.perf_counter()
    out = dss_volume(ct, cfg.dss)
    log.info("DSS filter took %.2f s", time.perf_counter() - t0)
    write_volume(args.out, out, "MET_FLOAT")
    print(args.out)
    return EXIT_OK


def cmd_segment(args) -> int:
    from .forest import estimate_bounding_box, load_forest
    from .io import read_volume, write_volume
    from .pipeline import build_case_voi, load_manifest, read_case, segment_case
    from .volume import mask_bounding_box
    cfg = _load_config(args)
    ct_path = _require(args.ct, "CT volume")
    model_path = _require(args.model, "model file")
    manifest_path = _require(args.manifest, "manifest")
    forest = load_forest(model_path)
    ct = read_volume(ct_path)
    db_cases = load_manifest(manifest_path)
    db_vois = []
    for case in db_cases:
        if args.exclude and case.case_id == args.exclude:
            continue
        db_ct, db_label = read_case(case)
        if db_label is None:
            print(f"error: database case {case.case_id} has no label",
                  file=sys.stderr)
            return EXIT_STAGE
        if cfg.voi.db_boxes == "ground_truth":
            box = case.box if case.box is not None else mask_bounding_box(db_label)
        else:
            box = estimate_bounding_box(forest, db_ct)
        db_vois.append(build_case_voi(db_ct, box, cfg, label=db_label,
                                      source_id=case.case_id))
    pred, diag = segment_case(ct, forest, db_vois, cfg)
    write_volume(args.out, pred, "MET_UCHAR")
    if args.overlay:
        from .overlay import write_overlays
        write_overlays(args.overlay, ct, pred)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import run_loocv
    cfg = _load_config(args)
    manifest = _require(args.manifest, "manifest")
    report = run_loocv(manifest, cfg, args.out,
                       oracle_passthrough=args.oracle_passthrough)
    agg = report.aggregate()
    print(json.dumps(agg, indent=2, sort_keys=True))
    if agg["n_failed"] > 0:
        return EXIT_STAGE
    return EXIT_OK


def cmd_default_config(args) -> int:
    from .config import PipelineConfig, phantom_profile, save_config
    cfg = phantom_profile() if args.profile == "phantom" else PipelineConfig()
    save_config(args.out, cfg.validate())
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="panseg",
        description="Atlas-based volumetric organ segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, help="worker threads for "
                       "case-parallel stages")

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the localization forests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", help="case id to leave out")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="estimate a bounding box")
    p.add_argument("--model", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("dss", help="vessel-enhancement filter volume")
    p.add_argument("--ct", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_dss)

    p = sub.add_parser("segment", help="segment one CT volume")
    p.add_argument("--ct", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True,
                   help="database manifest (atlas source cases)")
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", help="database case id to skip")
    p.add_argument("--overlay", help="directory for axial overlay PNGs")
    common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="leave-one-out evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-passthrough", action="store_true",
                   help="score ground truth against itself (plumbing check)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("default-config", help="write a config with defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=["full", "phantom"], default="full")
    p.set_defaults(func=cmd_default_config)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    from .forest import ModelVersionError
    try:
        return args.func(args)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    except ModelVersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:
        log.exception("stage failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
