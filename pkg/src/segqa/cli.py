"""segqa command line: build-dataset, train, eval, recommend, purify, report (+ synth fixtures).

Exit codes: 0 ok, 1 usage/config error, 2 missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import config as C
from .core import ScoreTable
from .dataset import (DatasetError, MissingLabelsError, attach_labels, build_label_table, filter_records,
                      read_confusions, read_label_table, read_manifest, read_sources,
                      records_from_sources, split_manifest, write_label_table, write_manifest)
from .metrics import MetricError, write_metric_report, write_scatter_csv, metric_bundle
from .model import (FeatureFileError, FeatureStore, QualityModel, load_checkpoint, read_feature_file,
                    save_checkpoint)
from .purify import (HttpCaptionClient, PurifyError, RefinementPrompt, ScriptedCaptionClient,
                     assemble_purified, attach_embeddings, default_threshold, partition_by_threshold,
                     read_captions, refine_captions, score_records, write_captions)
from .recommend import RecommendError, recommend, write_recommendation
from .training import TrainingError, evaluate_split, predict, train, write_loss_curve

log = logging.getLogger("segqa")

EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise MissingInput(f"{what} not configured")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _out_path(out: Path, configured: Optional[str], default_name: str) -> Path:
    return Path(configured) if configured else out / default_name


def _write_snapshot(cfg, out: Path, command: str) -> None:
    (out / f"resolved_config.{command}.yaml").write_text(C.dump_config(cfg), encoding="utf-8")


def _manifest(cfg, out: Path):
    return read_manifest(_require(str(_out_path(out, cfg["dataset"]["manifest"], "manifest.jsonl")),
                                  "manifest"))


def _methods(cfg, manifest) -> List[str]:
    methods = cfg["train"]["methods"] or cfg["dataset"]["methods"] or manifest.methods()
    if not methods:
        raise MissingInput("no methods: manifest carries no labels and none are configured")
    return list(methods)


# -- subcommands -------------------------------------------------------------------

def cmd_build_dataset(cfg, out: Path) -> Dict:
    d = cfg["dataset"]
    sources = read_sources(_require(d["sources"], "dataset.sources"))
    confusions = read_confusions(_require(d["confusions"], "dataset.confusions"))
    records = records_from_sources(sources, int(d["patch_size"]), d["feature_refs"])
    records = filter_records(records, d["exclude"])
    manifest = split_manifest(records, tuple(d["split"]), seed=cfg["seed"], patch_size=int(d["patch_size"]))
    methods = d["methods"] or sorted({m for _, m in confusions})
    table = build_label_table(manifest, confusions, methods)
    manifest = attach_labels(manifest, table)
    write_manifest(manifest, out / "manifest.jsonl")
    write_label_table(table, out / "labels.csv")
    summary = {"records": len(manifest.records), "train": len(manifest.split("train")),
               "test": len(manifest.split("test")), "methods": methods}
    print(f"manifest: {summary['records']} patches ({summary['train']} train / {summary['test']} test), "
          f"{len(methods)} method(s) -> {out / 'manifest.jsonl'}")
    return summary


def cmd_train(cfg, out: Path) -> Dict:
    manifest = _manifest(cfg, out)
    store = FeatureStore(cfg["dataset"]["feature_root"])
    ckpt_dir = _out_path(out, cfg["train"]["checkpoints"], "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    mcfg, tcfg, lcfg = C.model_config(cfg), C.train_config(cfg), C.loss_config(cfg)
    result = {}
    for method in _methods(cfg, manifest):
        model = QualityModel(mcfg, seed=int(cfg["seed"]))
        res = train(model, manifest, method, tcfg, lcfg, store=store)
        _, bundle = evaluate_split(model, manifest, method, "train", store)
        save_checkpoint(model, ckpt_dir / f"{method}.pt", step=tcfg.max_steps,
                        train_loss=res.final_loss, metrics=bundle.as_dict())
        write_loss_curve(res.curve, out / f"loss_{method}.csv")
        result[method] = {"final_loss": res.final_loss, "train_srocc": bundle.srocc}
        print(f"{method}: final loss {res.final_loss:.6f}, train SROCC {bundle.srocc:.4f}")
    return result


def cmd_eval(cfg, out: Path) -> Dict:
    manifest = _manifest(cfg, out)
    split = cfg["metrics"]["split"]
    records = manifest.split(split)
    if not records:
        raise DatasetError(f"{split} split is empty")
    ids = [r.patch_id for r in records]
    methods = _methods(cfg, manifest)
    columns: Dict[str, np.ndarray] = {}
    if cfg["metrics"]["predictions"]:
        table = read_label_table(_require(cfg["metrics"]["predictions"], "metrics.predictions"))
        table = table.select(ids, [m for m in methods if m in table.method_ids])
        columns = {m: table.column(m) for m in table.method_ids}
    else:
        store = FeatureStore(cfg["dataset"]["feature_root"])
        ckpt_dir = _out_path(out, cfg["metrics"]["checkpoints"] or cfg["train"]["checkpoints"], "checkpoints")
        for m in methods:
            model = load_checkpoint(_require(str(ckpt_dir / f"{m}.pt"), f"checkpoint for {m}"))
            columns[m] = predict(model, records, m, store)
    reports = {}
    for m, pred in columns.items():
        labels = np.array([r.labels[m] for r in records], dtype=np.float64)
        bundle = metric_bundle(pred, labels)
        reports[m] = write_metric_report(bundle, m, split, out / f"metrics_{m}.json")
        write_scatter_csv(out / f"scatter_{m}.csv", ids, pred, labels)
        print(f"{m} [{split}] n={bundle.n} PLCC {bundle.plcc:.4f} SROCC {bundle.srocc:.4f} "
              f"KROCC {bundle.krocc:.4f} RMSE {bundle.rmse:.4f}")
    write_label_table(ScoreTable.from_columns(ids, columns), out / f"predictions_{split}.csv")
    return reports


def cmd_recommend(cfg, out: Path) -> Dict:
    r = cfg["recommend"]
    split = r["split"]
    pred = read_label_table(_require(str(_out_path(out, r["predictions"], f"predictions_{split}.csv")),
                                     "recommend.predictions"))
    truth = read_label_table(_require(str(_out_path(out, r["truth"], "labels.csv")), "recommend.truth"))
    truth = truth.select(pred.image_ids, pred.method_ids)
    result = recommend(pred, truth, float(r["pred_tol"]), float(r["truth_tol"]))
    write_recommendation(result, out / "recommendation.json", out / "recommendation.csv")
    for item in result.per_image:
        print(f"{item.patch_id}: {' > '.join(item.ranked_methods)}  (true best: {','.join(item.true_best_set)})")
    p3 = "n/a" if np.isnan(result.p_at_3) else f"{result.p_at_3:.4f}"
    print(f"P@1 {result.p_at_1:.4f}  P@3 {p3}  over {len(result.per_image)} images")
    return result.as_dict()


def cmd_purify(cfg, out: Path) -> Dict:
    p = cfg["purify"]
    records = read_captions(_require(p["captions"], "purify.captions"))
    img = read_feature_file(_require(p["image_embeddings"], "purify.image_embeddings"))
    txt = read_feature_file(_require(p["text_embeddings"], "purify.text_embeddings"))
    scored = score_records(attach_embeddings(records, img, txt))
    tau = float(p["tau"]) if p["tau"] is not None else default_threshold(scored, float(p["tau_quantile"]))
    high, low = partition_by_threshold(scored, tau)
    if p["client"] == "http":
        if not p["url"]:
            raise UsageError("purify.url is required for the http client")
        client = HttpCaptionClient(p["url"], float(p["timeout"]))
    elif p["client"] == "mock":
        client = ScriptedCaptionClient()
    else:
        raise UsageError(f"unknown purify.client {p['client']!r}")
    prompt_kw = {k: v for k, v in p["prompt"].items() if v is not None}
    image_refs = None
    if p["image_refs"]:
        with open(_require(p["image_refs"], "purify.image_refs"), encoding="utf-8") as fh:
            image_refs = json.load(fh)
    refined = refine_captions(low, client, RefinementPrompt(**prompt_kw), image_refs=image_refs,
                              max_attempts=int(p["max_attempts"]), backoff=float(p["backoff"]),
                              max_in_flight=int(p["max_in_flight"]))
    write_captions(high + refined, out / "captions_scored.jsonl")
    counts = assemble_purified(high, refined, out / "purified.jsonl")
    summary = {"tau": tau, "high": len(high), "low": len(low), **{f"purified_{k}": v for k, v in counts.items()}}
    (out / "purify_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"tau={tau:.6f}: {len(high)} high / {len(low)} low; refined {counts['refined']}, "
          f"failed {counts['failed']}, purified total {counts['total']}")
    return summary


REPORT_METRICS = ("n", "plcc", "srocc", "krocc", "rmse")


def cmd_report(cfg, out: Path) -> Dict:
    pattern = cfg["report"]["inputs"] or str(out / "metrics_*.json")
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise MissingInput(f"no metric reports match {pattern}")
    reports = [json.loads(Path(p).read_text()) for p in paths]
    methods = [r["method_id"] for r in reports]
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *methods])
        for key in REPORT_METRICS:
            w.writerow([key, *(r[key] for r in reports)])
    table = {m: {k: r[k] for k in REPORT_METRICS} for m, r in zip(methods, reports)}
    (out / "report.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    width = max(len(k) for k in REPORT_METRICS)
    print(" " * width + "  " + "  ".join(f"{m:>10}" for m in methods))
    for key in REPORT_METRICS:
        print(f"{key:<{width}}  " + "  ".join(f"{r[key]:>10.4f}" if key != "n" else f"{r[key]:>10d}"
                                              for r in reports))
    return table


def cmd_synth(args) -> Dict:
    from .synthetic import make_synthetic_corpus, method_names
    out = Path(args.out)
    info = make_synthetic_corpus(out, n_sources=args.sources, methods=method_names(args.methods),
                                 seed=args.seed or 0)
    cfg = {"seed": args.seed or 0,
           "dataset": {"sources": info["sources"], "confusions": info["confusions"],
                       "feature_root": info["feature_root"], "feature_refs": info["feature_refs"]},
           "model": {"d_sem": 32, "d_seg": 16, "d_fused": 64, "d_hidden": 32},
           "train": {"max_steps": 400}}
    (out / "config.yaml").write_text(C.dump_config(cfg), encoding="utf-8")
    print(f"synthetic corpus with {args.methods} method(s) in {out}; config at {out / 'config.yaml'}")
    return info


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "purify": cmd_purify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int, help="top-level seed (overrides config)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    sp = sub.add_parser("synth", help="write a synthetic corpus and matching config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--methods", type=int, default=8)
    sp.add_argument("--sources", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        cfg = C.load_config(args.config, args.override, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_snapshot(cfg, out, args.command)
        COMMANDS[args.command](cfg, out)
        return 0
    except (UsageError, C.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInput, FileNotFoundError, MissingLabelsError, FeatureFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, MetricError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, RecommendError, PurifyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
