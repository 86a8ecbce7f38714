"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, export-masks, ablation.

Exit codes: 0 success, 1 check failure (gradcheck out of tolerance),
2 usage error (bad flags, invalid spec/config, shape mismatch),
3 runtime failure (non-finite loss).

Every command writes only below its --out path, and the compute-bearing
commands write a run manifest (resolved config, code version, seed) before
any computation so a run can be reproduced from its output directory alone.
``ATTNAGG_THREADS`` caps BLAS threads; the default of 1 keeps reruns
bit-exact.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

import attnagg
from attnagg import experiments
from attnagg.data import (
    DatasetSpec,
    InvalidSpec,
    generate,
    imbalance_ratio,
    load_dataset,
    save_dataset,
    split,
)
from attnagg.gradcheck import (
    MODEL_TOLERANCE,
    OP_TOLERANCE,
    run_model_check,
    run_op_checks,
)
from attnagg.metrics import balanced_mean_accuracy, example_based, mean_ap
from attnagg.model import ModelConfig, build_model, export_masks, load_model
from attnagg.train import (
    NonFiniteLoss,
    TrainConfig,
    ablation_csv_lines,
    evaluate_model,
    fit,
    predict_probs,
    run_ablation,
)

USAGE_ERROR = 2
CHECK_FAILURE = 1
RUNTIME_ERROR = 3


class UsageError(Exception):
    pass


def _fail(msg: str) -> "UsageError":
    return UsageError(msg)


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise _fail(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise _fail(f"{what} is not valid JSON: {e}") from e


def _write_manifest(out_dir: Path, args_config_path, resolved: dict, seed: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_path": str(args_config_path) if args_config_path else None,
        "resolved_config": resolved,
        "code_version": attnagg.__version__,
        "seed": seed,
        "output_dir": str(out_dir),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1,
                                                      sort_keys=True))


def _load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Config file layout: {"model": {...}, "train": {...}}, both optional."""
    d = _read_json(path, "config")
    try:
        model_cfg = ModelConfig.from_json_dict(d.get("model", {}))
        train_cfg = TrainConfig.from_json_dict(d.get("train", {}))
    except ValueError as e:
        raise _fail(f"invalid config: {e}") from e
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.spec is None:
        spec = experiments.default_dataset_spec()
    else:
        try:
            spec = DatasetSpec.from_json_dict(_read_json(args.spec, "spec"))
        except InvalidSpec as e:
            raise _fail(f"invalid spec: {e}") from e
    out = Path(args.out)
    _write_manifest(out, args.spec, spec.to_json_dict(), spec.seed)
    ds = generate(spec)
    save_dataset(ds, out)
    for c, ratio in enumerate(imbalance_ratio(ds.labels)):
        print(f"attr_{c} {ratio}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = ((experiments.desk_model_config(),
                             experiments.desk_train_config())
                            if args.config is None
                            else _load_run_config(args.config))
    model_cfg = replace(model_cfg, use_attention=train_cfg.use_attention,
                        use_multiscale=train_cfg.use_multiscale)
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise _fail(f"dataset directory not found: {data_dir}")
    ds = load_dataset(data_dir)
    if ds.spec.num_attributes != model_cfg.num_attributes:
        raise _fail(f"dataset has {ds.spec.num_attributes} attributes, model "
                    f"config expects {model_cfg.num_attributes}")
    out = Path(args.out)
    _write_manifest(out, args.config,
                    {"model": model_cfg.to_json_dict(),
                     "train": train_cfg.to_json_dict(),
                     "data": str(data_dir)}, train_cfg.seed)
    train, val, test = split(ds, train_cfg.split_fractions, train_cfg.seed)
    model = build_model(model_cfg.validate(), seed=train_cfg.seed)
    model, records = fit(
        model, train, val, train_cfg, out_dir=out,
        resume_from=args.resume,
        log=lambda rec: print(
            f"epoch {rec.epoch}: loss {rec.losses['total']:.4f} "
            f"val mAP {rec.val.map:.4f} f1 {rec.val.ex_f1:.4f} lr {rec.lr:g}"))
    test_report = evaluate_model(model, test)
    (out / "test_report.json").write_text(test_report.to_json())
    print(f"done: {len(records)} epochs, test mAP {test_report.map:.4f}")
    return 0


def _report_dict_for_protocol(probs, labels, protocol: str,
                              threshold: float) -> dict:
    aps, m = mean_ap(probs, labels)
    out = {"ap": [round(float(v), 6) for v in aps], "map": round(float(m), 6),
           "threshold": threshold}
    if protocol == "peta":
        ma = balanced_mean_accuracy(probs, labels, threshold)
        acc, prec, rec, f1 = example_based(probs, labels, threshold)
        out.update({"ma": round(ma, 6), "ex_accuracy": round(acc, 6),
                    "ex_precision": round(prec, 6), "ex_recall": round(rec, 6),
                    "ex_f1": round(f1, 6)})
    return out


def _load_predictions_csv(path, n_attr: int) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = np.array([int(r[0]) for r in rows[1:]])
    probs = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if probs.shape[1] != n_attr:
        raise _fail(f"predictions have {probs.shape[1]} attribute columns, "
                    f"dataset has {n_attr}")
    return ids, probs


def cmd_eval(args) -> int:
    ds = load_dataset(Path(args.data))
    if args.checkpoint is not None:
        params_dir = Path(args.checkpoint)
        if (params_dir / "params" / "manifest.json").exists():
            params_dir = params_dir / "params"
        model = load_model(params_dir)
        if model.config.num_attributes != ds.spec.num_attributes:
            raise _fail(
                f"checkpoint predicts {model.config.num_attributes} "
                f"attributes, dataset has {ds.spec.num_attributes}")
        probs = predict_probs(model, ds)
        labels = ds.labels
    else:
        ids, probs = _load_predictions_csv(args.predictions,
                                           ds.spec.num_attributes)
        rows = [ds.index_of(int(s)) for s in ids]
        labels = ds.labels[rows]
    report = _report_dict_for_protocol(probs, labels, args.protocol,
                                       args.threshold)
    Path(args.out).write_text(json.dumps(report, indent=1))
    print(f"map {report['map']:.4f}"
          + (f" ma {report['ma']:.4f} f1 {report['ex_f1']:.4f}"
             if args.protocol == "peta" else ""))
    return 0


def cmd_gradcheck(args) -> int:
    failed = []
    if args.scale in ("op", "all"):
        errors = run_op_checks(seed=args.seed, corrupt=args.corrupt)
        for name, err in errors.items():
            status = "ok" if err < OP_TOLERANCE else "FAIL"
            print(f"{name:22s} max_rel_err {err:.3e}  {status}")
            if err >= OP_TOLERANCE:
                failed.append(name)
    if args.scale in ("model", "all"):
        err = run_model_check(seed=args.seed,
                              corrupt=args.corrupt == "model")
        status = "ok" if err < MODEL_TOLERANCE else "FAIL"
        print(f"{'full_model':22s} max_rel_err {err:.3e}  {status}")
        if err >= MODEL_TOLERANCE:
            failed.append("full_model")
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}", file=sys.stderr)
        return CHECK_FAILURE
    return 0


def cmd_export_masks(args) -> int:
    ds = load_dataset(Path(args.data))
    params_dir = Path(args.checkpoint)
    if (params_dir / "params" / "manifest.json").exists():
        params_dir = params_dir / "params"
    model = load_model(params_dir)
    sample_ids = [int(s) for s in args.samples.split(",")]
    for sid in sample_ids:
        try:
            ds.index_of(sid)
        except KeyError:
            raise _fail(f"unknown sample id {sid}")
    out = Path(args.out)
    _write_manifest(out, None, {"checkpoint": str(args.checkpoint),
                                "samples": sample_ids}, 0)
    export_masks(model, ds, sample_ids, out)
    n_files = len(list(out.glob("*.pgm")))
    print(f"wrote {n_files} masks to {out}")
    return 0


def cmd_ablation(args) -> int:
    if args.base is None:
        model_cfg = experiments.matrix_model_config()
        train_cfg = experiments.matrix_train_config()
        spec = experiments.matrix_dataset_spec()
        base_resolved = {"profile": "matrix-default"}
    else:
        d = _read_json(args.base, "base config")
        try:
            model_cfg = ModelConfig.from_json_dict(d.get("model", {}))
            train_cfg = TrainConfig.from_json_dict(d.get("train", {}))
            spec = (DatasetSpec.from_json_dict(d["dataset"]) if "dataset" in d
                    else experiments.matrix_dataset_spec())
        except (ValueError, InvalidSpec) as e:
            raise _fail(f"invalid base config: {e}") from e
        base_resolved = {"model": model_cfg.to_json_dict(),
                         "train": train_cfg.to_json_dict(),
                         "dataset": spec.to_json_dict()}
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(seeds) < 3:
        raise _fail("ablation needs at least 3 seeds")
    out = Path(args.out)
    _write_manifest(out.parent if out.suffix else out, args.base,
                    base_resolved, seeds[0])
    results = run_ablation(
        model_cfg, train_cfg, spec, seeds,
        log=lambda r: print(f"{r['row']:22s} seed {r['seed']}: "
                            f"map {r['map']:.4f} f1 {r['f1']:.4f}"))
    lines = ablation_csv_lines(results)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} rows to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="attnagg",
        description="multi-scale attention aggregation trainer and tools")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", default=None, help="DatasetSpec JSON (default: "
                                                "built-in desk spec)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--config", default=None,
                   help='JSON {"model": {...}, "train": {...}}')
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None,
                   help="checkpoint directory to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or predictions file")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--predictions", default=None,
                   help="CSV sample_id,attr_0..attr_{C-1} of probabilities")
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=["map", "peta"], default="map")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scale", choices=["op", "model", "all"], default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corrupt", default=None,
                   help="testing hook: corrupt the named component's gradient")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("export-masks", help="write attention masks as PGM+CSV")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--samples", required=True, help="comma-separated ids")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_masks)

    a = sub.add_parser("ablation", help="run the component ablation matrix")
    a.add_argument("--base", default=None,
                   help='JSON {"model","train","dataset"} base configuration')
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and (args.checkpoint is None) == (
            args.predictions is None):
        print("eval needs exactly one of --checkpoint / --predictions",
              file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (InvalidSpec, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
