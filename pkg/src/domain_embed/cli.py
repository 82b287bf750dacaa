"""Command line entry point: ``domain-embed <command> [options]``.

Exit codes: 0 on success, 2 when inputs violate a precondition (bad config,
missing files, shape mismatches), 3 when optimization produces NaN/Inf.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigurationError, LabelAccessError, NumericError, PreconditionError

logger = logging.getLogger("domain_embed")


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args):
    from .datagen import build_corpus

    config = _read_json(args.config)
    config["scale"] = args.scale or config.get("scale", "desk")
    out = _out(args)
    manifest = build_corpus(config, out, args.seed or 0)
    _write_json(out / "resolved_config.json", {**config, "seed": args.seed or 0})
    print(f"wrote {manifest.num_domains} domains to {out}")


def cmd_train(args):
    from .datagen import DatasetManifest
    from .training import TrainConfig, fit

    cfg = TrainConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out(args)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    path = fit(cfg, DatasetManifest.load(args.manifest), out)
    print(f"checkpoint: {path}")


def _load_model(path):
    from .model import load_checkpoint

    model, extra = load_checkpoint(path)
    return model, (np.asarray(extra["channel_mean"]), np.asarray(extra["channel_std"]))


def cmd_embed(args):
    from .data import CorpusData
    from .datagen import DatasetManifest
    from .embedding import distance_matrix, write_embeddings
    from .evaluation import embed_corpus, matrix_csv, standardize

    options = {"gram_layers": "all", "use_gram": True, "metric": "cosine", **_read_json(args.config)}
    if args.no_gram:
        options["use_gram"] = False
    model, (mean, std) = _load_model(args.checkpoint)
    data = CorpusData.from_manifest(DatasetManifest.load(args.manifest))
    data.channel_mean, data.channel_std = mean, std
    embeddings = embed_corpus(model, data, None, options["gram_layers"])
    _, Z = standardize(embeddings, options["use_gram"])
    out = _out(args)
    write_embeddings(out / "embeddings.csv", embeddings, Z, {"options": options,
                                                             "names": [data.name(i) for i in data.domain_ids]})
    D = distance_matrix(Z, options["metric"])
    (out / "distances.csv").write_text(matrix_csv(D, data.domain_ids))
    _write_json(out / "resolved_config.json", options)
    print(f"embedded {len(embeddings)} domains into {Z.shape[1]} dimensions")


def cmd_graph(args):
    from .embedding import distance_matrix, knn_graph, read_embeddings

    options = {"k": 5, "metric": "cosine", **_read_json(args.config)}
    if args.k is not None:
        options["k"] = args.k
    ids, vectors, meta = read_embeddings(args.embeddings)
    D = distance_matrix(vectors, options["metric"])
    counts = [d["sample_count"] for d in meta.get("domains", [])] or None
    graph = knn_graph(D, options["k"], ids, counts, meta.get("names"))
    out = _out(args)
    (out / "graph.json").write_text(graph.to_json() + "\n")
    (out / "graph.dot").write_text(graph.to_dot())
    _write_json(out / "resolved_config.json", options)
    print(f"graph with {len(graph.edges)} edges")


def cmd_msda(args):
    from .data import CorpusData
    from .datagen import DatasetManifest
    from .msda import MSDAConfig, TransferTask, run_msda, source_weights

    cfg = MSDAConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    task = TransferTask.load(args.task)
    ids = list(task.source_domain_ids) + [task.target_domain_id]
    data = CorpusData.from_manifest(DatasetManifest.load(args.manifest), ids)
    weights = None
    if args.variant in ("alpha", "beta"):
        if args.checkpoint is None:
            raise PreconditionError(f"variant {args.variant!r} needs --checkpoint of a trained embedding model")
        model, _ = _load_model(args.checkpoint)
        weights, _ = source_weights(model, data, task, tau=cfg.tau)
    out = _out(args)
    row = run_msda(data, task, args.variant, cfg, weights)
    results = out / "msda_results.csv"
    new = not results.exists()
    with open(results, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["task", "variant", "seed", "accuracy"])
        w.writerow([row["task"], row["variant"], row["seed"], repr(row["accuracy"])])
    _write_json(out / "resolved_config.json", {**cfg.to_dict(), "variant": args.variant})
    print(f"{row['task']} {row['variant']} seed={row['seed']} accuracy={row['accuracy']:.4f}")


def cmd_eval(args):
    from .data import CorpusData
    from .datagen import DatasetManifest
    from .evaluation import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    data = CorpusData.from_manifest(DatasetManifest.load(args.manifest))
    out = _out(args)
    _write_json(out / cfg.name / "resolved_config.json", cfg.to_dict())
    for r in run_experiment(cfg, data, out, tuple(args.tags)):
        print(f"{cfg.name}/{r.tag}/{r.seed}: pcc={r.pcc:.4f} diagonal_gap={r.diagonal_gap:.4f}")


def cmd_report(args):
    from .evaluation import report

    out = _out(args)
    report(args.runs or out, out / "report.md", plots=not args.no_plots)
    print(f"report: {out / 'report.md'}")


def build_parser():
    def global_flags(suppress):
        # Flags are accepted before or after the subcommand; the subcommand copy
        # must not overwrite a value given before it.
        default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default(None), help="random seed (overrides the config)")
        g.add_argument("--config", default=default(None), help="JSON config for the command")
        g.add_argument("--out", default=default("."), help="output directory")
        g.add_argument("-v", "--verbose", action="store_true", default=default(False))
        return g

    common = global_flags(True)
    parser = argparse.ArgumentParser(prog="domain-embed", description=__doc__.splitlines()[0],
                                     parents=[global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="render the synthetic multi-domain corpus")
    p.add_argument("--scale", choices=("desk", "full"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train the disentanglement model")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed every domain of a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-gram", action="store_true", help="prototype-only embeddings")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("graph", parents=[common], help="k-nearest-neighbour graph over embeddings")
    p.add_argument("--embeddings", required=True, help="embeddings CSV written by `embed`")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("msda", parents=[common], help="multi-source adaptation on one transfer task")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", required=True, help="JSON with source_domain_ids and target_domain_id")
    p.add_argument("--variant", required=True, choices=("alpha", "beta", "uniform-alpha", "uniform-beta",
                                                        "source-only"))
    p.add_argument("--checkpoint", help="embedding model used to weight the sources")
    p.set_defaults(func=cmd_msda)

    p = sub.add_parser("eval", parents=[common], help="accuracy matrix, distances and PCC per seed and tag")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tags", nargs="+", default=["full", "no-gram"], choices=("full", "no-gram", "no-mi"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="markdown summary and plots of `eval` runs")
    p.add_argument("--runs", help="directory holding eval runs (default: --out)")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (PreconditionError, LabelAccessError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
