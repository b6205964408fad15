"""Command-line entry points: dataset building, training, the ablation matrix,
metric evaluation, and figure-style grid emission.

Exit status: 0 on success, 2 on usage/configuration errors, 1 on runtime
failures.  Configs are YAML mappings of ``ExperimentConfig`` fields; unknown
keys are hard errors so a typo cannot silently drop an ablation flag.
"""

from __future__ import annotations

import argparse
import dataclasses
import fcntl
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import dataio, evalkit, genlab, trainer
from .errors import CheckpointError, ConfigurationError, IngestionError
from .objectives import AblationFlags

log = logging.getLogger(__name__)

USAGE_EXIT = 2
RUNTIME_EXIT = 1

# ablation rows: name -> (model kind, (selfReg, MIReg, featureCycle))
ABLATION_ROWS = (
    ("DAI", "DAI", (False, False, False)),
    ("DRAI", "DRAI", (True, True, True)),
    ("DAI+selfReg+MIReg", "DAI", (True, True, False)),
    ("DAI+featureCycle", "DAI", (False, False, True)),
    ("DAI+MIReg", "DAI", (False, True, False)),
    ("DAI+selfReg", "DAI", (True, False, False)),
)

METRIC_NAMES = ("cifc", "fid", "is", "cgacc", "retrieval")


def _load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    return data


def _config_from_file(path, overrides: dict) -> trainer.ExperimentConfig:
    data = _load_yaml(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return trainer.ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# build-data
# ---------------------------------------------------------------------------

def cmd_build_data(args) -> int:
    if args.profile == "synthetic":
        spec_fields = _load_yaml(args.spec) if args.spec else {}
        known = {f.name for f in dataclasses.fields(dataio.SyntheticSpec)}
        unknown = set(spec_fields) - known
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if args.seed is not None:
            spec_fields["seed"] = args.seed
        bundle = dataio.make_synthetic_dataset(dataio.SyntheticSpec(**spec_fields))
    elif args.profile in ("lidc", "ham"):
        if not args.manifest:
            raise ConfigurationError(f"profile {args.profile} requires --manifest")
        if args.profile == "lidc":
            bundle = dataio.preprocess_lidc(args.manifest)
        else:
            bundle = dataio.preprocess_ham(args.manifest)
    else:
        raise ConfigurationError(f"unknown profile {args.profile!r}")
    out = dataio.save_dataset(bundle, args.out)
    counts = {split: len(subset) for split, subset in bundle.splits.items()}
    print(f"built {args.profile} dataset at {out}: {counts}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = _config_from_file(args.config, {
        "seed": args.seed, "out_dir": args.out, "steps": args.steps_override,
    })
    artifacts = trainer.run_experiment(config, resume=args.resume)
    with open(artifacts.metrics_path) as fh:
        last = None
        for line in fh:
            last = line
    print(f"run complete: {artifacts.run_dir}")
    if last:
        record = json.loads(last)
        parts = ", ".join(f"{k}={v:.4f}" for k, v in sorted(record.items()) if k != "step")
        print(f"final losses (step {record['step']}): {parts}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _evaluate_checkpoint(state: trainer.TrainState, dataset: dataio.DatasetBundle,
                         metrics: list[str], seed: int, n_samples: int,
                         cifc_pairs: int = 500, clf_steps: int = 400):
    bundle = state.bundle
    profile = dataset.profile
    test = dataset.splits["test"]
    records: list[evalkit.MetricsRecord] = []
    clf = None
    if {"fid", "is", "cgacc"} & set(metrics):
        clf = evalkit.train_domain_classifier(dataset.splits["train"], profile,
                                              seed=seed, steps=clf_steps)
    if "cifc" in metrics:
        value = evalkit.cifc(bundle, genlab.to_nchw(test.images),
                             n_pairs=cifc_pairs, seed=seed)
        records.append(evalkit.MetricsRecord("cifc", value, min(cifc_pairs, len(test) // 2),
                                             seed, state.step))
    if {"fid", "is"} & set(metrics):
        fid, is_mean, is_std = evalkit.fid_is_pipeline(bundle, clf, test,
                                                       n=n_samples, seed=seed)
        if "fid" in metrics:
            records.append(evalkit.MetricsRecord("fid", fid, n_samples, seed, state.step))
        if "is" in metrics:
            records.append(evalkit.MetricsRecord("is", is_mean, n_samples, seed, state.step,
                                                 extra={"std": is_std}))
    if "cgacc" in metrics:
        value = evalkit.cg_accuracy(bundle, clf, test, profile, n=n_samples, seed=seed)
        records.append(evalkit.MetricsRecord("cgacc", value, n_samples, seed, state.step))
    if "retrieval" in metrics:
        queries = dataset.splits.get("query")
        if queries is None or not len(queries):
            log.warning("no query split; retrieval metrics skipped")
        else:
            ref_codes = evalkit.reference_codes_for(bundle, test, "content")
            dds, overlaps = [], []
            for i in range(len(queries)):
                res = evalkit.retrieve(bundle, queries.images[i], test, "content",
                                       top_n=3, reference_codes=ref_codes)
                retrieved = test.attributions[res.neighbor_ids]
                dds.append(evalkit.disagreement_divergence(queries.attributions[i], retrieved))
                overlaps.append(evalkit.label_overlap(queries.attributions[i],
                                                      test.attributions, retrieved))
            records.append(evalkit.MetricsRecord("retrieval_dd", float(np.mean(dds)),
                                                 len(queries), seed, state.step))
            records.append(evalkit.MetricsRecord("retrieval_overlap", float(np.mean(overlaps)),
                                                 len(queries), seed, state.step))
    return records


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else list(METRIC_NAMES)
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown metric names: {sorted(unknown)}")
    state = trainer.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    records = _evaluate_checkpoint(state, dataset, metrics, args.seed, args.samples)
    out_path = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "metrics-eval.jsonl"
    evalkit.append_records(out_path, records)
    width = max(len(r.metric) for r in records) if records else 8
    print(f"{'metric'.ljust(width)}  value      n      step")
    for rec in records:
        print(f"{rec.metric.ljust(width)}  {rec.value:<9.4f}  {rec.sample_count:<5d}  {rec.checkpoint_step}")
    print(f"records appended to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _locked_append(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _format_mean_std(values: list[float]) -> str:
    if not values:
        return "n/a"
    mean = float(np.mean(values))
    std = float(np.std(values)) if len(values) > 1 else 0.0
    return f"{mean:.3f}±{std:.3f}"


def cmd_ablate(args) -> int:
    base = _load_yaml(args.config)
    base.pop("model_kind", None)
    base.pop("flags", None)
    base_seed = int(base.pop("seed", 0))
    if args.steps_override is not None:
        base["steps"] = args.steps_override
    out_root = Path(args.out or base.pop("out_dir", "runs/ablation"))
    base.pop("out_dir", None)
    out_root.mkdir(parents=True, exist_ok=True)
    manifest_path = out_root / "manifest.jsonl"

    dataset = None
    summary: dict[str, dict[str, list[float]]] = {}
    scheduled = 0
    for row_name, kind, flag_tuple in ABLATION_ROWS:
        summary[row_name] = {m: [] for m in ("fid", "is", "cgacc", "cifc")}
        for seed_idx in range(args.seeds):
            scheduled += 1
            seed = base_seed + seed_idx
            cell_dir = out_root / f"{row_name.replace('+', '_')}__seed{seed}"
            config = trainer.ExperimentConfig.from_dict({
                **base, "model_kind": kind,
                "flags": dict(zip(("selfReg", "MIReg", "featureCycle"), flag_tuple)),
                "seed": seed, "out_dir": str(cell_dir),
            })
            record = {"row": row_name, "seed": seed, "run_dir": str(cell_dir),
                      "config_hash": config.config_hash(), "model_kind": kind,
                      "flags": config.flags.as_dict(), "profile": config.profile}
            t0 = time.time()
            try:
                if dataset is None:
                    dataset = trainer.load_or_build_dataset(config)
                artifacts = trainer.run_experiment(config, dataset=dataset)
                recs = _evaluate_checkpoint(
                    artifacts.final_state, dataset,
                    ["cifc", "fid", "is", "cgacc"], seed=seed,
                    n_samples=args.samples, cifc_pairs=args.cifc_pairs,
                    clf_steps=args.clf_steps)
                values = {r.metric: r.value for r in recs}
                for metric, value in values.items():
                    summary[row_name].setdefault(metric, []).append(value)
                record.update({"status": "ok", "metrics": values,
                               "checkpoint": str(artifacts.checkpoints[-1]),
                               "metrics_log": str(artifacts.metrics_path),
                               "wall_seconds": round(time.time() - t0, 1)})
            except Exception as exc:  # record the failure, keep the matrix going
                log.exception("ablation cell %s seed %d failed", row_name, seed)
                record.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            _locked_append(manifest_path, record)
            print(f"[{row_name} seed {seed}] {record['status']}", flush=True)

    report = _ablation_report(summary, scheduled, args.seeds)
    (out_root / "report.md").write_text(report)
    print(report)
    print(f"manifest: {manifest_path}")
    drai = summary.get("DRAI", {}).get("cifc", [])
    dai = summary.get("DAI", {}).get("cifc", [])
    if drai and dai and float(np.mean(drai)) >= float(np.mean(dai)):
        print("WARNING: expected CIFC ordering (DRAI < DAI) DID NOT HOLD", flush=True)
    return 0


def _ablation_report(summary: dict, scheduled: int, seeds: int) -> str:
    lines = [
        "# Ablation matrix",
        "",
        f"{scheduled} runs scheduled ({len(ABLATION_ROWS)} rows x {seeds} seeds).",
        "",
        "| Method | FID(v) | IS(^) | CGAcc(^) | CIFC(v) |",
        "|---|---|---|---|---|",
    ]
    for row_name, _, _ in ABLATION_ROWS:
        cells = summary.get(row_name, {})
        lines.append("| " + " | ".join(
            [row_name] + [_format_mean_std(cells.get(m, [])) for m in
                          ("fid", "is", "cgacc", "cifc")]) + " |")
    drai = summary.get("DRAI", {}).get("cifc", [])
    dai = summary.get("DAI", {}).get("cifc", [])
    lines.append("")
    if drai and dai:
        ok = float(np.mean(drai)) < float(np.mean(dai))
        lines.append(f"CIFC ordering mean(DRAI) < mean(DAI): {'HOLDS' if ok else 'FAILED'} "
                     f"({np.mean(drai):.3f} vs {np.mean(dai):.3f})")
    else:
        lines.append("CIFC ordering: not computable (missing rows)")

    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    test = dataset.splits.get("test") or dataset.splits["train"]
    if not len(test):
        raise ConfigurationError("dataset has no reference images")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = state.bundle
    manifest: dict = {"mode": args.mode, "checkpoint": str(args.checkpoint)}

    if args.mode == "conditional":
        _, first_idx = np.unique(test.conditions, axis=0, return_index=True)
        rows = []
        for i in first_idx[:args.conditions]:
            samples = genlab.conditional_generate(bundle, test.conditions[i], args.n,
                                                  seed=args.seed)
            rows.append(np.concatenate([test.images[i][None], samples], axis=0))
        path = genlab.write_image_grid(np.stack(rows), out_dir / "conditional.png")
        manifest["rows"] = [int(i) for i in first_idx[:args.conditions]]
        manifest["row_width"] = 1 + args.n
        manifest["files"] = [str(path)]
    elif args.mode == "hybrid-grid":
        k = args.refs
        if len(test) < 2 * k:
            raise ConfigurationError("not enough reference images for the hybrid grid")
        rng = np.random.default_rng(args.seed)
        pick = rng.choice(len(test), size=2 * k, replace=False)
        content_refs = [test.images[i] for i in pick[:k]]
        style_refs = [test.images[i] for i in pick[k:]]
        hybrids = genlab.hybrid_grid(bundle, content_refs, style_refs)
        blank = np.ones_like(test.images[0])
        header = np.stack([blank] + style_refs)
        body = [np.concatenate([content_refs[r][None], hybrids[r]], axis=0)
                for r in range(k)]
        grid = np.stack([header] + body)
        path = genlab.write_image_grid(grid, out_dir / "hybrid_grid.png")
        manifest["content_refs"] = [int(i) for i in pick[:k]]
        manifest["style_refs"] = [int(i) for i in pick[k:]]
        manifest["files"] = [str(path)]
    elif args.mode == "interpolate":
        src, dst = args.pair
        if src >= len(test) or dst >= len(test):
            raise ConfigurationError("interpolation indices out of range")
        files = []
        for mode in ("content", "style", "both"):
            frames = genlab.interpolate(bundle, genlab.InterpolationRequest(
                test.images[src], test.images[dst], mode=mode, steps=args.steps))
            path = genlab.write_image_grid(frames[None], out_dir / f"interpolate_{mode}.png")
            files.append(str(path))
        manifest["pair"] = [int(src), int(dst)]
        manifest["steps"] = args.steps
        manifest["files"] = files
    else:
        raise ConfigurationError(f"unknown generate mode {args.mode!r}")

    (out_dir / "grid_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {', '.join(manifest['files'])}")
    return 0


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drailab",
                                     description="dual adversarial inference lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="materialize a dataset directory")
    p.add_argument("--profile", required=True, choices=("synthetic", "lidc", "ham"))
    p.add_argument("--spec", help="YAML overrides for the synthetic recipe")
    p.add_argument("--manifest", help="source manifest for lidc/ham")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--steps-override", type=int, dest="steps_override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the six-row ablation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--out")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--cifc-pairs", type=int, default=500, dest="cifc_pairs")
    p.add_argument("--clf-steps", type=int, default=600, dest="clf_steps")
    p.add_argument("--steps-override", type=int, dest="steps_override")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", help="comma list of cifc,fid,is,cgacc,retrieval (default all)")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="emit image grids from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("conditional", "hybrid-grid", "interpolate"))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4, help="samples per condition")
    p.add_argument("--conditions", type=int, default=3)
    p.add_argument("--refs", type=int, default=3)
    p.add_argument("--pair", type=int, nargs=2, default=(0, 1))
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (IngestionError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except Exception as exc:  # pragma: no cover - unexpected
        log.exception("unhandled failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
