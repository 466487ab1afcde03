"""Command-line front end.

Subcommands: gen-data, train, losocv, ablate, verify-theory, report. All
randomness flows from the config/--seed value; reruns with identical inputs
overwrite outputs with identical bytes. Exit codes: 0 success, 1 runtime or
verification failure, 2 usage error, 3 partial fold failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import pipeline, theory
from .model import save_checkpoint


class UsageError(Exception):
    pass


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _write(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


_TRAIN_KEYS = {f.name for f in dataclasses.fields(pipeline.TrainConfig)}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(data_mod.SyntheticConfig)}


def load_config_file(path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(raw) - (_TRAIN_KEYS | _SYNTH_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    return raw


def _train_config(args) -> pipeline.TrainConfig:
    values = {}
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        values.update({k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS})
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "equal_weights", False):
        values["equal_weights"] = True
    if getattr(args, "disable", None):
        toggles = [t for t in args.disable.split(",") if t]
        unknown = set(toggles) - set(pipeline.TOGGLES)
        if unknown:
            raise UsageError(f"unknown --disable toggles: {sorted(unknown)}")
        values["disable"] = frozenset(values.get("disable", ())) | frozenset(toggles)
    try:
        return pipeline.config_from_dict(values)
    except pipeline.PipelineError as exc:
        raise UsageError(str(exc)) from exc


def _parallel_workers(requested: int) -> int:
    cap = os.environ.get("SSAS_NUM_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"SSAS_NUM_THREADS={cap!r} is not an integer") from None
    return max(1, requested)


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    corrupt = frozenset(int(v) for v in args.corrupt.split(",") if v) \
        if args.corrupt else frozenset()
    try:
        cfg = data_mod.SyntheticConfig(
            num_domains=args.domains,
            num_classes=args.classes,
            dim=args.dim,
            samples_per_class=args.samples_per_class,
            class_separation=args.class_separation,
            domain_shift_scale=args.shift,
            corrupt_domain_ids=corrupt,
            corrupt_shift_multiplier=args.corrupt_mult,
            label_noise_rate=args.label_noise,
            seed=args.seed,
        )
    except data_mod.BundleError as exc:
        raise UsageError(str(exc)) from exc
    bundle = data_mod.generate_synthetic(cfg)
    out = Path(args.out)
    data_mod.save_bundle(bundle, out)
    print(out / "manifest.json")
    return 0


def _write_fold_outputs(out: Path, report: pipeline.RunReport):
    _write(out / "report.json", _json_bytes(pipeline.report_to_dict(report)))
    if report.ss_curve:
        _write(out / "loss_ss.csv", pipeline.curve_to_csv(report.ss_curve).encode())
    _write(out / "loss_as.csv", pipeline.curve_to_csv(report.as_curve).encode())
    if report.source_weights is not None:
        _write(out / "weights.json",
               _json_bytes(pipeline.weights_to_dict(report.source_weights)))


def cmd_train(args) -> int:
    bundle = data_mod.load_bundle(args.data)
    try:
        bundle = bundle.with_target(args.target)
    except data_mod.BundleError as exc:
        raise UsageError(str(exc)) from exc
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = pipeline.config_to_dict(cfg)

    if args.stage == "ss":
        ss_net, ss_curve = pipeline.train_ss(bundle, cfg)
        sources = [d.domain_id for d in bundle.domains if d.domain_id != bundle.target_id]
        weights = pipeline.compute_source_weights(
            ss_net, bundle.domain_by_id(bundle.target_id).features, sorted(sources)
        )
        save_checkpoint(out / "ss.ckpt", cfg_dict, ss_net.state_arrays())
        _write(out / "weights.json", _json_bytes(pipeline.weights_to_dict(weights)))
        _write(out / "loss_ss.csv", pipeline.curve_to_csv(ss_curve).encode())
        return 0

    if args.stage == "as":
        cfg = dataclasses.replace(cfg, equal_weights=True)
    report = pipeline.run_pipeline(bundle, cfg)
    _write_fold_outputs(out, report)
    return 0


def cmd_losocv(args) -> int:
    bundle = data_mod.load_bundle(args.data)
    cfg = _train_config(args)
    workers = _parallel_workers(args.parallel)
    result = pipeline.run_losocv(bundle, cfg, parallel=workers)
    out = Path(args.out)
    for report in result.reports:
        _write_fold_outputs(out / f"fold_{report.target_domain_id:03d}", report)
    _write(out / "aggregate.json", _json_bytes(pipeline.losocv_to_dict(result, cfg)))
    if result.failures:
        for domain_id, msg in result.failures:
            print(f"fold {domain_id} failed: {msg}", file=sys.stderr)
        return 3
    return 0


def cmd_ablate(args) -> int:
    bundle = data_mod.load_bundle(args.data)
    cfg = _train_config(args)
    toggles = [t for t in args.toggles.split(",") if t]
    unknown = set(toggles) - set(pipeline.TOGGLES)
    if unknown:
        raise UsageError(f"unknown toggles: {sorted(unknown)}")
    rows = pipeline.run_ablation(bundle, cfg, toggles,
                                 parallel=_parallel_workers(args.parallel))
    out = Path(args.out)
    _write(out / "ablation.json", _json_bytes(pipeline.ablation_to_dict(rows, cfg)))
    _write(out / "ablation.csv", pipeline.ablation_to_csv(rows).encode())
    print(pipeline.ablation_to_csv(rows), end="")
    return 0


def cmd_verify_theory(args) -> int:
    summary = theory.run_verification(
        trials=args.trials, seed=args.seed,
        max_points=args.max_points, max_hypotheses=args.max_hypotheses,
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if summary["failures"] == 0 else 1


def _collect_run_rows(run_dir: Path) -> list[dict]:
    agg = run_dir / "aggregate.json"
    if agg.is_file():
        doc = json.loads(agg.read_text(encoding="utf-8"))
        return doc["folds"]
    single = run_dir / "report.json"
    if single.is_file():
        doc = json.loads(single.read_text(encoding="utf-8"))
        return [{
            "target_domain_id": doc["target_domain_id"],
            "seed": doc["seed"],
            "label": doc["label"],
            "accuracy": doc["metrics"]["accuracy"],
            "macro_f1": doc["metrics"]["macro_f1"],
            "macro_auc": doc["metrics"]["macro_auc"],
        }]
    raise UsageError(f"{run_dir}: no aggregate.json or report.json found")


def cmd_report(args) -> int:
    rows = _collect_run_rows(Path(args.run))

    def stats(key):
        vals = [r[key] for r in rows if r[key] is not None]
        if not vals:
            return {"mean": None, "std": None}
        arr = np.asarray(vals, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    summary = {
        "rows": rows,
        "aggregate": {k: stats(k) for k in ("accuracy", "macro_f1", "macro_auc")},
    }
    if args.format == "json":
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print("target_domain_id,seed,label,accuracy,macro_f1,macro_auc")
        for r in rows:
            print(",".join(str(r[k]) for k in
                           ("target_domain_id", "seed", "label", "accuracy",
                            "macro_f1", "macro_auc")))
        agg = summary["aggregate"]
        print(f'aggregate,,,{agg["accuracy"]["mean"]},{agg["macro_f1"]["mean"]},'
              f'{agg["macro_auc"]["mean"]}')
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssas")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--samples-per-class", type=int, required=True)
    p.add_argument("--shift", type=float, required=True)
    p.add_argument("--class-separation", type=float, default=3.0)
    p.add_argument("--corrupt", default="")
    p.add_argument("--corrupt-mult", type=float, default=10.0)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on one designated target domain")
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("ss", "as", "full"), default="full")
    p.add_argument("--equal-weights", action="store_true")
    p.add_argument("--disable", default="")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("losocv", help="leave-one-subject-out cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--disable", default="")
    p.add_argument("--equal-weights", action="store_true")
    p.set_defaults(func=cmd_losocv)

    p = sub.add_parser("ablate", help="single-component removal study")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--toggles", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify-theory", help="randomized finite-instance bound checks")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-points", type=int, default=6)
    p.add_argument("--max-hypotheses", type=int, default=16)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("report", help="consolidate run reports into one table")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (data_mod.BundleError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (pipeline.PipelineError, theory.TheoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
