"""graphcaps command line: tensorize, run, grid, embed, report, selftest.

Configuration precedence is CLI flags > config file > built-in defaults; the
resolved configuration is echoed into a manifest before any compute starts,
and every output directory can be reproduced from its manifest alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import load_tu_dataset, permute_dataset
from .experiment import (
    PTC_SUBSETS,
    ExperimentConfig,
    dataset_tensors,
    grid_search,
    run_experiment,
)
from .labelling import Procedure
from .tensor_cache import cache_filename, save_tensors
from .tensorize import default_width, padded_anchor_count, tensorize_dataset

LABELLING_ALIASES = {"bc": "bc", "canonical": "canonical", "nauty": "canonical"}


def _data_root(args) -> str:
    if getattr(args, "data_root", None):
        return args.data_root
    return os.environ.get("GRAPHCAPS_DATA", "data")


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_checksums(root: str, name: str) -> dict:
    from .data import resolve_dataset_dir

    base = resolve_dataset_dir(root, name)
    sums = {}
    for suffix in ("A", "graph_indicator", "graph_labels", "node_labels"):
        path = os.path.join(base, f"{name}_{suffix}.txt")
        if os.path.isfile(path):
            sums[os.path.basename(path)] = _sha256(path)
    return sums


def write_manifest(out_dir: str, args, resolved: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command_line": sys.argv,
        "resolved_config": resolved,
        "version": __version__,
        "started_utc": datetime.now(timezone.utc).isoformat(),
    }
    datasets = resolved.get("datasets") or [resolved.get("dataset")]
    root = resolved.get("data_root")
    if root:
        manifest["dataset_checksums"] = {
            name: dataset_checksums(root, name) for name in datasets if name
        }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _experiment_config(args) -> ExperimentConfig:
    return ExperimentConfig(
        dataset=args.dataset,
        labelling=LABELLING_ALIASES[args.labelling],
        model=args.model,
        preset=args.preset,
        w=args.w,
        k=args.k,
        folds=args.folds,
        seed=args.seed,
        epochs=args.epochs,
        base_lr=args.lr,
        lr_decay=args.lr_decay,
        batch_size=args.batch_size,
        lam=args.lam,
        alpha=args.alpha,
        routing_iters=args.routing_iters,
        loss_mode=args.loss_mode,
        naive_ties=args.naive_ties,
        jobs=args.jobs,
        data_root=_data_root(args),
        out_root=args.out_root,
        cache_dir=args.cache_dir,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_tensorize(args) -> int:
    root = _data_root(args)
    names = list(PTC_SUBSETS) if args.dataset.upper() == "PTC" else [args.dataset]
    procedure = (
        Procedure.BETWEENNESS if LABELLING_ALIASES[args.labelling] == "bc" else Procedure.CANONICAL
    )
    jobs = args.jobs if args.jobs is not None else max(1, os.cpu_count() or 1)
    cache_dir = args.cache_dir or os.path.join(args.out_root, "cache")
    for name in names:
        ds = load_tu_dataset(root, name)
        w = args.w if args.w is not None else default_width(ds)
        path = os.path.join(
            cache_dir, cache_filename(name, procedure, w, args.k, args.seed, args.naive_ties)
        )
        if os.path.isfile(path) and not args.force:
            print(f"[tensorize] warm cache, nothing to do: {path}")
            continue
        t0 = time.perf_counter()
        permuted = permute_dataset(ds, args.seed)
        tensors = tensorize_dataset(
            permuted, w=w, k=args.k, procedure=procedure,
            naive_ties=args.naive_ties, jobs=jobs,
        )
        save_tensors(path, tensors, w, args.k, ds.num_node_labels, procedure,
                     args.seed, args.naive_ties)
        print(
            f"[tensorize] {name}: {len(tensors)} tensors ({w}x{args.k}x"
            f"{ds.num_node_labels + 1}), {padded_anchor_count(ds, w)} padded anchors, "
            f"{time.perf_counter() - t0:.1f}s -> {path}"
        )
    return 0


def cmd_run(args) -> int:
    repeats = max(1, args.repeats)
    means = []
    for rep in range(repeats):
        cfg = _experiment_config(args)
        if repeats > 1:
            cfg = dataclasses.replace(cfg, seed=args.seed + rep)
        run_dir = os.path.join(cfg.out_root, cfg.run_id())
        resolved = dict(cfg.to_dict(), datasets=(
            list(PTC_SUBSETS) if cfg.dataset.upper() == "PTC" else [cfg.dataset]
        ))
        write_manifest(run_dir, args, resolved)
        result = run_experiment(cfg)
        means.append(result.mean_accuracy)
        print(
            f"[run] {result.variant} on {result.dataset}: "
            f"{100 * result.mean_accuracy:.1f} ± {100 * result.std_accuracy:.2f} "
            f"(train {result.train_seconds_mean:.1f} ± {result.train_seconds_std:.1f} s/fold)"
        )
        print(f"[run] outputs in {run_dir}")
    if repeats > 1:
        print(f"[run] mean over {repeats} repetitions: {100 * float(np.mean(means)):.2f}")
    return 0


def cmd_grid(args) -> int:
    cfg = _experiment_config(args)
    grid = {
        "epochs": [int(v) for v in args.epochs_grid.split(",")],
        "base_lr": [float(v) for v in args.lr_grid.split(",")],
        "lr_decay": [float(v) for v in args.decay_grid.split(",")],
    }
    parent = os.path.join(cfg.out_root, f"grid_{cfg.run_id()}")
    write_manifest(parent, args, dict(cfg.to_dict(), grid=grid))
    best_cfg, best_res, cells = grid_search(cfg, grid)
    print(f"[grid] {len(cells)} cells evaluated")
    print(
        f"[grid] best: epochs={best_cfg.epochs} lr={best_cfg.base_lr} "
        f"decay={best_cfg.lr_decay} -> {100 * best_res.mean_accuracy:.1f} "
        f"± {100 * best_res.std_accuracy:.2f}"
    )
    return 0


def cmd_embed(args) -> int:
    from .analysis import (
        EmbeddingSource,
        cluster_distances,
        extract_embeddings,
        tsne,
        write_distances_csv,
        write_embeddings_csv,
    )
    from .models import TrainConfig, train_model

    source = EmbeddingSource(args.source)
    args.model = "cnn" if source is EmbeddingSource.CNN_INNER else "capsules"
    cfg = _experiment_config(args)
    out_dir = os.path.join(cfg.out_root, f"embed_{cfg.dataset}_{source.value}_s{cfg.seed}")
    write_manifest(out_dir, args, dict(cfg.to_dict(), source=source.value,
                                       perplexity=args.perplexity, iters=args.iters))

    x, y, w, channels, ds = dataset_tensors(cfg)
    model = None
    if source is not EmbeddingSource.RAW_TENSOR:
        from .experiment import _build_model

        model = _build_model(cfg, w, channels, ds.num_classes, cfg.seed)
        tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                         base_lr=cfg.base_lr, lr_decay=cfg.lr_decay, seed=cfg.seed)
        print(f"[embed] training {cfg.model} on the full dataset ({cfg.epochs} epochs)")
        train_model(model, x, y, tc)

    emb = extract_embeddings(model, x, source, labels=y)
    print(f"[embed] {emb.points.shape[0]} x {emb.points.shape[1]} features from {source.value}")
    res = tsne(emb.points, perplexity=args.perplexity, iters=args.iters, seed=cfg.seed)
    dist = cluster_distances(res.coords, y)
    write_embeddings_csv(os.path.join(out_dir, "embeddings.csv"), res.coords, y)
    write_distances_csv(os.path.join(out_dir, "distances.csv"), source, dist)
    print(
        f"[embed] KL {res.kl_initial:.4f} -> {res.kl_final:.4f}; "
        f"intra {dist.intra_pooled:.2f}, inter {dist.inter:.2f}; outputs in {out_dir}"
    )
    return 0


def cmd_report(args) -> int:
    from .experiment import ExperimentResult, emit_report

    results = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "result.json")
        if not os.path.isfile(path):
            print(f"error: no result.json in {run_dir}", file=sys.stderr)
            return 1
        with open(path) as fh:
            results.append(ExperimentResult(**json.load(fh)))
    out = emit_report(results, args.out)
    print(f"[report] {len(results)} results -> {out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(break_kernel=os.environ.get("GRAPHCAPS_SELFTEST_BREAK") == "1")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", default=None,
                   help="directory with TU-format datasets (default: $GRAPHCAPS_DATA or ./data)")
    p.add_argument("--out-root", default="results", help="output directory root")
    p.add_argument("--cache-dir", default=None, help="tensor cache directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel workers for folds/extraction (default: available cores)")
    p.add_argument("--seed", type=int, default=1)


def _add_tensor_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="dataset id, e.g. MUTAG or PTC")
    p.add_argument("--labelling", choices=sorted(LABELLING_ALIASES), default="bc",
                   help="node ranking procedure (nauty is an alias for canonical)")
    p.add_argument("-w", type=int, default=None, help="anchors per graph (default: avg size)")
    p.add_argument("-k", type=int, default=10, help="receptive field size")
    p.add_argument("--naive-ties", action="store_true",
                   help="plain node-index tie-breaking (not permutation-invariant)")


def _add_train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=["capsules", "cnn"], default="capsules")
    p.add_argument("--preset", choices=["paper", "small"], default="small")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lam", type=float, default=0.5, help="absent-class margin down-weight")
    p.add_argument("--alpha", type=float, default=1.0, help="reconstruction loss scale")
    p.add_argument("--routing-iters", type=int, default=3)
    p.add_argument("--loss-mode", choices=["auto", "margin", "binary_ce"], default="auto")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphcaps",
        description="Graph classification with receptive-field tensors and capsule networks",
    )
    parser.add_argument("--version", action="version", version=f"graphcaps {__version__}")
    parser.add_argument("--config", default=None, help="key = value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tensorize", help="extract and cache graph tensors")
    _add_common(p)
    _add_tensor_opts(p)
    p.add_argument("--force", action="store_true", help="overwrite a warm cache")
    p.set_defaults(func=cmd_tensorize)

    p = sub.add_parser("run", help="k-fold cross-validation of one model")
    _add_common(p)
    _add_tensor_opts(p)
    _add_train_opts(p)
    p.add_argument("--repeats", type=int, default=1,
                   help="repeat the full CV with consecutive seeds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="exhaustive hyper-parameter grid search")
    _add_common(p)
    _add_tensor_opts(p)
    _add_train_opts(p)
    p.add_argument("--epochs-grid", default="100,150,200")
    p.add_argument("--lr-grid", default="0.0005,0.001,0.005")
    p.add_argument("--decay-grid", default="0.25,0.4,0.75,1.5")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("embed", help="t-SNE embedding of a representation layer")
    _add_common(p)
    _add_tensor_opts(p)
    _add_train_opts(p)
    p.add_argument("--source", choices=["raw", "cnn", "caps"], required=True)
    p.add_argument("--perplexity", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=500)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("report", help="combine result.json files into one table")
    p.add_argument("runs", nargs="+", help="run directories containing result.json")
    p.add_argument("-o", "--out", default="results/report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in verification suites")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()

    try:
        # apply config-file values as defaults before the real parse
        probe, _ = parser.parse_known_args(argv)
        if getattr(probe, "config", None):
            values = read_config_file(probe.config)
            for action in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
                known = {a.dest for a in action._actions}  # noqa: SLF001
                action.set_defaults(**{k: _coerce(v) for k, v in values.items() if k in known})
        args = parser.parse_args(argv)
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _coerce(value: str):
    text = value.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


if __name__ == "__main__":
    sys.exit(main())
