"""Command-line entry point for reproducible generate/train/ablate/eval runs.

One JSON config file drives everything: a ``generator`` section (dataset)
and a ``train`` section (model and optimization); flags override file
values. Outputs land under a fixed layout::

    <out>/dataset/dataset.json            + manifest.json
    <out>/runs/<mode>/<seed>/metrics.csv
    <out>/runs/<mode>/<seed>/checkpoint.json
    <out>/runs/<mode>/<seed>/report.json  + manifest.json

Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (evaluate_split, export_embeddings, export_scores,
                         split_eval_to_dict)
from .graphs import (DatasetError, load_dataset, render_dot, save_dataset,
                     save_scores)
from .model import Model
from .motifgen import ConfigError, GenConfig, generate
from .trainer import (MODES, TrainConfig, Trainer, TrainError, TrainingDiverged,
                      config_hash, load_checkpoint, save_checkpoint, train,
                      write_metrics_csv)

OUT_ROOT_ENV = "INFOIGL_OUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4


class MissingArtifact(FileNotFoundError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise ConfigError(f"config missing required section '{name}'")
    if not isinstance(doc[name], dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return doc[name]


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "out"))


def _write_manifest(directory: Path, config_doc: dict, files: list[str],
                    extra: dict | None = None) -> None:
    manifest = {
        "artifact_version": __version__,
        "config": config_doc,
        "files": {name: sha256_file(directory / name) for name in files},
    }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def _dataset_path(data_dir) -> Path:
    path = Path(data_dir)
    if path.is_dir():
        for candidate in (path / "dataset" / "dataset.json", path / "dataset.json"):
            if candidate.exists():
                return candidate
        raise MissingArtifact(f"no dataset.json under {path}")
    if not path.exists():
        raise MissingArtifact(f"dataset not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    doc = load_config(args.config)
    gen_cfg = GenConfig.from_dict(_section(doc, "generator"))
    gen_cfg.validate()
    split = generate(gen_cfg)
    out = _out_root(args) / "dataset"
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(split, out / "dataset.json")
    counts = {name: len(graphs) for name, graphs in split.parts().items()}
    _write_manifest(out, doc, ["dataset.json"],
                    extra={"counts": counts, "seed_list": [gen_cfg.seed]})
    print(f"wrote {out / 'dataset.json'} "
          f"({counts['train']}/{counts['val']}/{counts['test']} graphs)")
    return EXIT_OK


def _train_one(split, train_cfg: TrainConfig, mode: str, run_dir: Path,
               dataset_digest: str, config_doc: dict) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = train(split, train_cfg, mode)
    write_metrics_csv(trainer.history, run_dir / "metrics.csv")
    ckpt = trainer.checkpoint()
    save_checkpoint(ckpt, run_dir / "checkpoint.json")
    best_model = Model.from_state_dict(trainer.best["model"])
    report = {
        "mode": mode,
        "seed": train_cfg.seed,
        "config_hash": config_hash(train_cfg, mode),
        "dataset_digest": dataset_digest,
        "best_epoch": trainer.best["epoch"],
        "best_val_metric": trainer.best["val_metric"],
        "test_metric_at_best": trainer.best["test_metric"],
        "splits": {
            name: split_eval_to_dict(
                evaluate_split(best_model, graphs, train_cfg.eval_batch_size,
                               trainer.bypass_filter))
            for name, graphs in split.parts().items() if graphs
        },
        "counters": trainer.counters,
    }
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
    _write_manifest(run_dir, config_doc,
                    ["metrics.csv", "checkpoint.json", "report.json"],
                    extra={"dataset_digest": dataset_digest,
                           "seed_list": [train_cfg.seed], "mode": mode})
    return report


def cmd_train(args) -> int:
    doc = load_config(args.config)
    train_cfg = TrainConfig.from_dict(_section(doc, "train"))
    if args.seed is not None:
        train_cfg.seed = args.seed
    dataset_file = _dataset_path(args.data)
    split = load_dataset(dataset_file)
    run_dir = _out_root(args) / "runs" / args.mode / str(train_cfg.seed)
    try:
        report = _train_one(split, train_cfg, args.mode, run_dir,
                            sha256_file(dataset_file), doc)
    except TrainingDiverged as exc:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(exc.checkpoint, run_dir / "checkpoint.last.json")
        print(f"error: {exc}; last finite checkpoint saved to "
              f"{run_dir / 'checkpoint.last.json'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"mode={args.mode} seed={train_cfg.seed} "
          f"best_val={report['best_val_metric']:.4f} "
          f"test@best={report['test_metric_at_best']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = load_config(args.config)
    base_cfg = _section(doc, "train")
    dataset_file = _dataset_path(args.data)
    split = load_dataset(dataset_file)
    digest = sha256_file(dataset_file)
    out = _out_root(args)
    seeds = list(range(args.seeds))
    jobs = []
    for mode in MODES:
        for seed in seeds:
            cfg = TrainConfig.from_dict(base_cfg)
            cfg.seed = seed
            jobs.append((mode, seed, cfg))

    def run_job(job):
        mode, seed, cfg = job
        run_dir = out / "runs" / mode / str(seed)
        return mode, seed, _train_one(split, cfg, mode, run_dir, digest, doc)

    results: dict[str, list[dict]] = {mode: [] for mode in MODES}
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            for mode, seed, report in pool.map(run_job, jobs):
                results[mode].append(report)
    else:
        for job in jobs:
            mode, seed, report = run_job(job)
            results[mode].append(report)

    table = []
    for mode in MODES:
        accs = [r["test_metric_at_best"] for r in results[mode]]
        vals = [r["best_val_metric"] for r in results[mode]]
        table.append({
            "mode": mode,
            "seeds": len(accs),
            "test_acc_mean": statistics.mean(accs),
            "test_acc_std": statistics.pstdev(accs) if len(accs) > 1 else 0.0,
            "test_acc_median": statistics.median(accs),
            "val_acc_mean": statistics.mean(vals),
        })
    full_median = next(r["test_acc_median"] for r in table if r["mode"] == "full")
    ordering_ok = all(full_median >= r["test_acc_median"]
                      for r in table if r["mode"] in ("S", "I"))
    summary = {"table": table, "ordering_full_ge_single_level": ordering_ok,
               "seed_list": seeds, "dataset_digest": digest}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        cols = ["mode", "seeds", "test_acc_mean", "test_acc_std",
                "test_acc_median", "val_acc_mean"]
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    print(f"{'mode':6s} {'test acc':>18s} {'median':>8s}")
    for row in table:
        print(f"{row['mode']:6s} {row['test_acc_mean']:.4f} ± "
              f"{row['test_acc_std']:.4f} {row['test_acc_median']:8.4f}")
    if not ordering_ok:
        print("warning: full-mode median below a single-level ablation "
              "(flagged, run completed)", file=sys.stderr)
    return EXIT_OK


def _load_best_model(checkpoint_path) -> tuple[Model, dict, bool]:
    path = Path(checkpoint_path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if ckpt.get("best") is None:
        raise MissingArtifact(f"checkpoint {path} holds no best model")
    model = Model.from_state_dict(ckpt["best"]["model"])
    cfg = TrainConfig.from_dict(ckpt["config"])
    bypass = ckpt["mode"] == "C"
    return model, ckpt, bypass


def cmd_eval(args) -> int:
    model, ckpt, bypass = _load_best_model(args.checkpoint)
    split = load_dataset(_dataset_path(args.data))
    cfg = TrainConfig.from_dict(ckpt["config"])
    report = {
        "mode": ckpt["mode"],
        "config_hash": ckpt["config_hash"],
        "best_epoch": ckpt["best"]["epoch"],
        "splits": {
            name: split_eval_to_dict(
                evaluate_split(model, graphs, cfg.eval_batch_size, bypass))
            for name, graphs in split.parts().items() if graphs
        },
    }
    report["val_metric_reproduced"] = report["splits"]["val"]["accuracy"] \
        if "val" in report["splits"] else None
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_export_scores(args) -> int:
    model, ckpt, bypass = _load_best_model(args.checkpoint)
    split = load_dataset(_dataset_path(args.data))
    graphs = split.parts()[args.split]
    if args.limit:
        graphs = graphs[:args.limit]
    entries = export_scores(model, graphs, bypass_filter=bypass)
    save_scores(entries, args.out)
    print(f"wrote {args.out} ({len(entries)} graphs)")
    if args.dot:
        dot_dir = Path(args.dot)
        dot_dir.mkdir(parents=True, exist_ok=True)
        for entry in entries:
            idx = entry["graph_index"]
            dot = render_dot(graphs[idx], entry["node_scores"], name=f"g{idx}")
            (dot_dir / f"graph{idx}.dot").write_text(dot, encoding="utf-8")
        print(f"wrote {len(entries)} DOT files to {dot_dir}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model, ckpt, bypass = _load_best_model(args.checkpoint)
    split = load_dataset(_dataset_path(args.data))
    graphs = split.parts()[args.split]
    rows = export_embeddings(model, graphs, args.out, bypass_filter=bypass)
    print(f"wrote {args.out} ({rows} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infoigl",
        description="Invariant graph learning lab: generate motif-shift "
                    "datasets, train with the attention filter and multi-level "
                    "contrast, ablate, evaluate, export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help=f"output root (default ${OUT_ROOT_ENV} or ./out)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one mode/seed on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset dir or file")
    p.add_argument("--mode", default="full", choices=MODES)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output root")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run all six modes over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output root")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write report JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-scores", help="export invariance scores (+DOT)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--dot", help="directory for DOT renderings")
    p.set_defaults(func=cmd_export_scores)

    p = sub.add_parser("export-embeddings", help="export projected embeddings CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, TrainError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
