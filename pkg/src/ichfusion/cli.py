"""``ichfusion`` command line: synthetic data, both training stages, extraction, prediction, evaluation.

Exit codes: 0 success, 2 invalid input or config, 3 numerical abort, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import extract_descriptors, load_descriptors, save_descriptors, study_descriptors, train_stage1
from .bundle import ModelBundle, load_bundle, save_bundle
from .config import RunConfig, build, load_run_config, worker_count
from .errors import NumericalAbort, ValidationError
from .fusion import predict_from_descriptors, train_stage2
from .metrics import evaluate, slice_id, study_level_aggregate, write_predictions_csv
from .phantom import generate_dataset
from .sampler import load_dataset

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _log_path(out: Path) -> Path:
    return out.with_name(out.stem + ".log.json")


def _load_config(path, data=None) -> RunConfig:
    cfg = load_run_config(path) if path else build(RunConfig, {"seed": 0, "deterministic": False})
    if data is not None:
        cfg = dataclasses.replace(cfg, data=str(data))
    cfg.check_paths()
    if cfg.seed is None:
        cfg = dataclasses.replace(cfg, seed=int(np.random.SeedSequence().entropy % 2**32))
    return cfg


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    cfg = _load_config(args.config)
    phantom = dataclasses.replace(cfg.synth.phantom, seed=cfg.seed)
    summary = generate_dataset(phantom, cfg.synth.n_studies, cfg.synth.fractions, args.out)
    for name, s in summary.items():
        print(f"{name}: {s['studies']} studies, {s['slices']} slices -> {s['manifest']}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _load_config(args.config, args.data)
    if args.val is not None:
        cfg = dataclasses.replace(cfg, val_data=str(args.val))
        cfg.check_paths()
    out = Path(args.out)
    train = load_dataset(cfg.data)
    val = load_dataset(cfg.val_data) if cfg.val_data else None
    ckpt_dir = out.with_name(out.stem + ".checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    backbone_cfg = cfg.stage1.backbone

    def on_epoch(epoch, params, record):
        save_bundle(ckpt_dir / f"epoch_{epoch:03d}.ichw", ModelBundle("backbone", backbone_cfg, params))
        extra = f" val {record['val_loss']:.5f}" if "val_loss" in record else ""
        print(f"epoch {epoch:3d}  train {record['train_loss']:.5f}{extra}  lr {record['lr']:.3g}", flush=True)

    params, log = train_stage1(train, cfg.stage1, cfg.seed, val_dataset=val, on_epoch=on_epoch)
    save_bundle(out, ModelBundle("backbone", backbone_cfg, params))
    _write_json(_log_path(out), {"config": cfg.to_dict(), **log})
    print(f"wrote {out} (best epoch {log['best_epoch']}) and {_log_path(out)}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args.config, args.data)
    bundle = load_bundle(args.model, kind="backbone")
    data = load_dataset(cfg.data)
    desc = extract_descriptors(data, bundle.params, bundle.config, workers=worker_count(cfg))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_descriptors(args.out, desc)
    print(f"wrote descriptors for {len(desc)} studies to {args.out}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _load_config(args.config, args.data)
    desc = load_descriptors(args.descriptors)
    data = load_dataset(cfg.data)
    labels = {sid: data.labels(i) for i, sid in enumerate(data.study_ids)}
    if set(desc) != set(labels):
        missing, extra = sorted(set(labels) - set(desc)), sorted(set(desc) - set(labels))
        raise ValidationError(f"descriptor studies differ from the manifest: missing {missing}, extra {extra}")
    ordered = {sid: desc[sid] for sid in data.study_ids}
    params, log = train_stage2(ordered, labels, cfg.stage2, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(out, ModelBundle("fusion", cfg.stage2.fusion, params))
    _write_json(_log_path(out), {"config": cfg.to_dict(), **log})
    last = log["epochs"][-1]
    print(f"stage 2: {len(log['epochs'])} epochs, final train loss {last['train_loss']:.5f}; wrote {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    b1 = load_bundle(args.stage1, kind="backbone")
    b2 = load_bundle(args.stage2, kind="fusion")
    data = load_dataset(args.data)
    rows = {}
    for i, sid in enumerate(data.study_ids):
        desc = study_descriptors(data.windowed(i), b1.params, b1.config)
        probs = predict_from_descriptors(desc, b2.params, b2.config)
        if args.study_level:
            rows[sid] = study_level_aggregate(probs)
        else:
            rows.update({slice_id(sid, z): p for z, p in enumerate(probs)})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(args.out, rows)
    print(f"wrote {len(rows)} {'study' if args.study_level else 'slice'} rows to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(args.preds, args.labels, "study" if args.study_level else "slice")
    _write_json(args.out, report.to_dict())
    print(report.table())
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ichfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic CT-phantom dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-stage1", help="train the per-slice backbone")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--val", help="validation manifest for best-epoch selection")
    p.add_argument("--out", required=True, help="backbone bundle path")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("extract", help="write per-slice descriptors for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="backbone bundle")
    p.add_argument("--config", help="run config (controls deterministic mode and threads)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-stage2", help="train the descriptor fusion network")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--data", required=True, help="manifest supplying the labels")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="fusion bundle path")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("predict", help="run both stages and write a predictions CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--study-level", action="store_true", help="one row per study, per-class max over slices")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a predictions CSV against labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--study-level", action="store_true")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="gradient checks and oracle equivalence")
    p.add_argument("--quick", action="store_true", help="3 gradcheck seeds instead of 20")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
