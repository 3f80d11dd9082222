"""Experiment driver: generate data, train, evaluate, compare.

Every command is a pure function of its inputs; rerunning one with the
same arguments reproduces its output files byte for byte. Failures exit
nonzero with a single ``error: ...`` line on stderr.
"""

import os

# single-threaded BLAS keeps runs reproducible and lets the experiment
# matrix parallelize across processes instead; must precede numpy
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import figures, metrics, pipelines
from .config import TrainConfig, config_text, load_config
from .synthdata import (SceneSpec, make_dataset, read_dataset, read_metadata,
                        write_dataset)

# sidecar keys that may ride along in a --spec file without being
# SceneSpec fields (so a dataset's .meta file can be reused directly)
_SPEC_EXTRAS = {"master_seed", "count"}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_scene_spec(path) -> SceneSpec:
    values = read_metadata(path)
    fields = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = sorted(set(values) - fields - _SPEC_EXTRAS)
    if unknown:
        raise ValueError(f"{path}: unknown scene keys {unknown}")
    kept = {k: v for k, v in values.items() if k in fields}
    # tuples serialize as lists under literal_eval round trips
    kept = {k: tuple(v) if isinstance(v, list) else v for k, v in kept.items()}
    return SceneSpec(**kept)


def cmd_gen_data(args) -> int:
    spec = _load_scene_spec(args.spec) if args.spec else SceneSpec()
    workers = int(os.environ.get("JOINTSEG_THREADS", "1"))
    samples = make_dataset(spec, args.count, args.seed, workers=workers)
    write_dataset(samples, args.out, spec, args.seed)
    total = sum(s.myo.size for s in samples)
    myo = sum(int(s.myo.sum()) for s in samples)
    scar = sum(int(s.scar.sum()) for s in samples)
    scar_free = sum(1 for s in samples if not s.scar.any())
    print(f"samples={len(samples)}")
    print(f"out={args.out}")
    if samples:
        print(f"scar_free_fraction={scar_free / len(samples)!r}")
        print(f"pixel_fraction_background={(total - myo) / total!r}")
        print(f"pixel_fraction_myocardium={(myo - scar) / total!r}")
        print(f"pixel_fraction_scar={scar / total!r}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if not cfg.train_dataset:
        raise ValueError("config must set train_dataset")
    if not cfg.out_dir:
        raise ValueError("config must set out_dir (or pass --out)")
    dataset = read_dataset(cfg.train_dataset)
    model = pipelines.train(dataset, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipelines.save_model(model, out / "checkpoint.bin")
    (out / "history.csv").write_text(pipelines.history_csv(model))
    manifest = (config_text(cfg)
                + f"dataset_sha256={_sha256(cfg.train_dataset)}\n")
    (out / "manifest.txt").write_text(manifest)
    print(f"checkpoint={out / 'checkpoint.bin'}")
    print(f"history={out / 'history.csv'}")
    print(f"manifest={out / 'manifest.txt'}")
    return 0


def _scores_csv(scores) -> str:
    lines = ["id,dice,precision,recall,precision_defined,recall_defined"]
    for s in scores:
        lines.append(f"{s.id},{s.dice!r},{s.precision!r},{s.recall!r},"
                     f"{int(s.precision_defined)},{int(s.recall_defined)}")
    return "\n".join(lines) + "\n"


def _summary_block(stats_by_metric) -> dict:
    return {m: st.as_dict() for m, st in stats_by_metric.items()}


def cmd_eval(args) -> int:
    model = pipelines.load_model(args.checkpoint)
    dataset = read_dataset(args.dataset)
    report = pipelines.evaluate(model, dataset, tau=args.tau)
    out = Path(args.out) if args.out else (Path(args.checkpoint).parent or Path("."))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_scores_csv(report.scar_scores))
    summary = {
        "tau": report.tau,
        "n_samples": report.n_samples,
        "dataset": str(args.dataset),
        "dataset_sha256": _sha256(args.dataset),
        "scar": _summary_block(report.scar_summary),
    }
    if report.myo_scores is not None:
        (out / "myo_metrics.csv").write_text(_scores_csv(report.myo_scores))
        summary["myo"] = _summary_block(report.myo_summary)
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"metrics_csv={out / 'metrics.csv'}")
    print(f"summary_json={out / 'summary.json'}")
    return 0


def _read_scores_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


_STAT_KEYS = ("mean", "median", "q1", "q3", "min", "max", "n", "n_excluded")
_TABLE_METRICS = ("dice", "precision", "recall")


class _Run:
    def __init__(self, run_dir: Path):
        self.dir = run_dir
        summary_path = run_dir / "summary.json"
        if not summary_path.exists():
            raise ValueError(f"{run_dir}: no summary.json (run eval first)")
        self.summary = json.loads(summary_path.read_text())
        self.rows = _read_scores_csv(run_dir / "metrics.csv")
        self.model = pipelines.load_model(run_dir / "checkpoint.bin")
        self.kind = self.model.kind.value

    def stats(self, metric: str) -> metrics.Stats:
        return metrics.Stats(**self.summary["scar"][metric])


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ValueError("compare needs at least two run directories")
    runs = [_Run(Path(d)) for d in args.runs]
    hashes = {r.summary["dataset_sha256"] for r in runs}
    if len(hashes) != 1:
        raise ValueError("runs were evaluated on different datasets")

    labels = []
    for r in runs:
        dup = sum(1 for other in runs if other.kind == r.kind) > 1
        label = f"{r.kind}:{r.dir.name}" if dup else r.kind
        while label in labels:  # same dir listed twice
            label += "'"
        labels.append(label)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    header = ["method"] + [f"{m}_{k}" for m in _TABLE_METRICS
                           for k in _STAT_KEYS]
    csv_lines = [",".join(header)]
    txt_lines = [f"{'method':<18}" + "".join(
        f"{m + '_' + k:>16}" for m in _TABLE_METRICS
        for k in ("mean", "median", "q1", "q3"))]
    for label, r in zip(labels, runs):
        cells = [label]
        for m in _TABLE_METRICS:
            d = r.summary["scar"][m]
            cells += [repr(d[k]) for k in _STAT_KEYS]
        csv_lines.append(",".join(cells))
        txt_lines.append(f"{label:<18}" + "".join(
            f"{r.summary['scar'][m][k]:>16.4f}" for m in _TABLE_METRICS
            for k in ("mean", "median", "q1", "q3")))
    (out / "comparison.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "comparison.txt").write_text("\n".join(txt_lines) + "\n")

    dice_groups = {label: metrics.summarize_values(
        [float(row["dice"]) for row in r.rows])
        for label, r in zip(labels, runs)}
    (out / "dice_box.svg").write_text(figures.svg_boxplot(
        dice_groups, "Scar dice by method", "dice"))
    pr_groups = {label: {"precision": r.stats("precision"),
                         "recall": r.stats("recall")}
                 for label, r in zip(labels, runs)}
    (out / "precision_recall.svg").write_text(figures.svg_metric_bars(
        pr_groups, "Scar precision and recall"))

    dataset_path = runs[0].summary["dataset"]
    if not Path(dataset_path).exists():
        raise ValueError(f"evaluation dataset not found: {dataset_path}")
    samples = read_dataset(dataset_path)[:max(args.count, 0)]
    if samples:
        grid = []
        for s in samples:
            row = [s.image[0], s.scar.astype(np.float64)]
            for r in runs:
                _, scar_prob = pipelines.predict(r.model, s.image)
                row.append(pipelines.binarize(
                    scar_prob, r.summary["tau"]).astype(np.float64))
            grid.append(row)
        panel = figures.render_panel(["input", "truth"] + labels, grid)
        panel.save(out / "panel.png")
        print(f"panel={out / 'panel.png'}")
    print(f"table_csv={out / 'comparison.csv'}")
    print(f"table_txt={out / 'comparison.txt'}")
    print(f"dice_box={out / 'dice_box.svg'}")
    print(f"precision_recall={out / 'precision_recall.svg'}")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="jointseg",
        description="Coupled myocardium/scar segmentation experiments.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--count", type=int, required=True, help="sample count")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", default=None,
                   help="scene key=value file (a dataset .meta file works)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one pipeline from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None, help="override config out_dir")
    t.add_argument("--seed", type=int, default=None,
                   help="override config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--tau", type=float, default=0.5,
                   help="binarization threshold")
    e.add_argument("--out", default=None,
                   help="output directory (default: checkpoint's)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="cross-method table and figures")
    c.add_argument("runs", nargs="+", help="run directories (train + eval)")
    c.add_argument("--out", default="comparison")
    c.add_argument("--count", type=int, default=3,
                   help="samples in the qualitative panel")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
