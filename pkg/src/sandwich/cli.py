"""Command-line entry point: ``sandwich {synth,train,eval,export,audit}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .alignment import AlignmentConfig
from .config import DatasetEntry, ExperimentConfig
from .data import write_dataset
from .federation import PrivacyViolation, audit_check
from .federation.audit import AuditLog
from .metrics import (
    SET_A, SET_B, MergeScoringMap, export_features, merged_confusion, merged_weighted_accuracy,
)
from .preprocess import PreprocessConfig
from .synth import SynthSpec, beetl_mini_spec, generate

EXIT_OK, EXIT_VALIDATION, EXIT_PRIVACY, EXIT_IO = 0, 2, 3, 4
PRESETS = {"beetl-mini": beetl_mini_spec}

log = logging.getLogger("sandwich")


def beetl_mini_experiment(data_root: str = ".", **changes) -> ExperimentConfig:
    """Desk-scale experiment over the beetl-mini directories under ``data_root``."""
    root = Path(data_root)
    entries = tuple(
        DatasetEntry(str(root / d.dataset_id), "target" if d.dataset_id.startswith("tgt") else "source")
        for d in beetl_mini_spec().datasets
    )
    base = ExperimentConfig(
        datasets=entries,
        preprocess=PreprocessConfig(target_rate_hz=100.0, window_s=2.0, balance_target=300),
        # per-class MMD over 10-trial batches has a large small-sample floor; at
        # weight 1 it drowns the classification loss on this task
        alignment=AlignmentConfig(lambda_weight=0.1),
        epochs=30,
    )
    cfg = base.replace(**changes)
    if cfg.backbone == "inception" and "branch_overrides" not in changes:
        # 2 s at 100 Hz leaves short feature maps; a wider pool keeps the power estimate stable
        cfg = cfg.replace(branch_overrides={"pool": 8})
    return cfg


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.config:
        spec = SynthSpec.from_json(json.loads(Path(args.config).read_text()))
        if args.seed is not None:
            spec = SynthSpec(spec.datasets, spec.signatures, spec.gain_range, spec.noise_std,
                             spec.oscillation_amplitude, args.seed)
    else:
        spec = PRESETS[args.preset](seed=42 if args.seed is None else args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for descriptor, trials in generate(spec):
        write_dataset(descriptor, trials, out / descriptor.dataset_id)
        print(f"wrote {out / descriptor.dataset_id} ({trials.n_trials} trials)")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    if not args.config and args.preset == "beetl-mini":
        cfg = beetl_mini_experiment(".", seed=42 if args.seed is None else args.seed,
                                    output_dir="run")
        (out / "experiment.json").write_text(cfg.dumps())
    return EXIT_OK


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    from .experiment import run_train

    cfg = _config(args)
    report = run_train(cfg, args.out)
    out = Path(args.out or cfg.output_dir)
    print(f"best epoch {report['best_epoch']} val accuracy {report['best_val_accuracy']}")
    print(f"audit: {json.dumps(report['audit'], sort_keys=True)}")
    print(f"report: {out / 'report.json'}")
    return EXIT_PRIVACY if report["audit"].get("violations") else EXIT_OK


def _load_predictions(path, target: str) -> dict[str, np.ndarray]:
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, list):
        raw = {target: raw}
    return {k: np.asarray(v, dtype=np.int64) for k, v in raw.items()}


def cmd_eval(args) -> int:
    from .experiment import prepare, restore, predict_with, report_header, write_json

    cfg = _config(args)
    maps = [MergeScoringMap.load(p) for p in args.scoring_map] if args.scoring_map else [SET_A, SET_B]
    if args.predictions:
        prepared = prepare(cfg)
        preds = _load_predictions(args.predictions, prepared.target)
    else:
        if not args.checkpoint:
            raise ValueError("eval needs --checkpoint or --predictions")
        prepared, _, trainer = restore(cfg, args.checkpoint)
        preds = {d: predict_with(trainer, d, t) for d, t in sorted(prepared.test.items())}
    results = {}
    for d, trials in sorted(prepared.test.items()):
        if d not in preds:
            continue
        p, y = preds[d], trials.labels
        if len(p) != len(y):
            raise ValueError(f"{d}: {len(p)} predictions for {len(y)} trials")
        entry = {"n_trials": int(len(y)), "accuracy": float(np.mean(p == y)), "scoring": {}}
        for m in maps:
            entry["scoring"][m.name] = {
                "classes": m.classes,
                "merged_weighted_accuracy": merged_weighted_accuracy(p, y, m),
                "confusion": merged_confusion(p, y, m).tolist(),
            }
        results[d] = entry
    report = {"header": report_header(), "results": results}
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    for d, e in results.items():
        scores = ", ".join(f"{k}={v['merged_weighted_accuracy']:.4f}" for k, v in e["scoring"].items())
        print(f"{d}: accuracy={e['accuracy']:.4f} {scores}")
    print(f"report: {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .experiment import _load, restore

    cfg = _config(args)
    prepared, model, _ = restore(cfg, args.checkpoint)
    trials = {}
    for entry in cfg.datasets:
        desc, t = _load(cfg, entry, entry.path, balance=False)
        trials[desc.dataset_id] = t
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"features_{args.tap}.csv"
    export_features(model, trials, args.tap, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    audit = AuditLog.read(args.log)
    verdict = audit_check(audit, check_counts=not args.no_counts)
    print(json.dumps({"summary": audit.summary(), "violations": verdict.violations},
                     indent=2, sort_keys=True))
    return EXIT_OK if verdict.ok else EXIT_PRIVACY


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sandwich", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic datasets")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--config", help="synth spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score held-out trials with merged-label maps")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--scoring-map", action="append", help="scoring map JSON (repeatable)")
    e.add_argument("--predictions", help="JSON predictions instead of running the model")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write per-trial features at a tap point")
    x.add_argument("--config", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--tap", choices=("pre_common", "post_transfer"), default="post_transfer")
    x.add_argument("--out")
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_export)

    a = sub.add_parser("audit", help="re-check a message audit log")
    a.add_argument("--log", required=True)
    a.add_argument("--no-counts", action="store_true", help="skip per-step message counts")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PrivacyViolation as e:
        print(f"privacy audit violation: {e}", file=sys.stderr)
        return EXIT_PRIVACY
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
