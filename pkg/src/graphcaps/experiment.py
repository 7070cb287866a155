"""Cross-validation harness: stratified folds, grid search, reports.

A run is driven by one :class:`ExperimentConfig`; its outputs live under
``<out_root>/<run_id>/`` as config.json (resolved config echo), folds.csv
(deterministic per-fold payload), traces/fold_*.csv (loss traces),
result.json (summary incl. timings) and report.csv / report.txt.  folds.csv
intentionally contains no wall-clock values so a repeated run is
byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import multiprocessing
import os
import subprocess
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import GraphDataset, load_tu_dataset, permute_dataset
from .labelling import Procedure
from .models import (
    CapsNetConfig,
    CnnConfig,
    TrainConfig,
    build_capsnet,
    build_cnn,
    evaluate_accuracy,
    train_model,
)
from .tensor_cache import cache_filename, load_tensors, save_tensors
from .tensorize import default_width, padded_anchor_count, tensorize_dataset

PTC_SUBSETS = ("PTC_MM", "PTC_FM", "PTC_MR", "PTC_FR")

# Architecture dims are fixed design decisions; the preset picks the training
# schedule and the scaled-down capsule geometry for CI-speed runs.
PRESETS = {
    "paper": {
        "capsnet": dict(conv_filters=256, primary_channels=32, decoder_hidden=(512, 1024)),
        "epochs": 150,
        "epochs_cnn": 200,
        "base_lr": 1e-3,
        "lr_decay": 0.01,
        "batch_size": 50,
    },
    "small": {
        "capsnet": dict(conv_filters=64, primary_channels=8, decoder_hidden=(128, 256)),
        "epochs": 60,
        "epochs_cnn": 120,
        "base_lr": 1e-3,
        "lr_decay": 0.01,
        "batch_size": 50,
    },
}


@dataclass
class ExperimentConfig:
    dataset: str
    labelling: str = "bc"  # bc | canonical
    model: str = "capsules"  # capsules | cnn
    preset: str = "small"
    w: int | None = None
    k: int = 10
    folds: int = 10
    seed: int = 1
    epochs: int | None = None
    base_lr: float | None = None
    lr_decay: float | None = None
    batch_size: int | None = None
    lam: float = 0.5
    alpha: float = 1.0
    routing_iters: int = 3
    loss_mode: str = "auto"
    naive_ties: bool = False
    jobs: int | None = None  # None -> available cores, capped at folds
    data_root: str = "data"
    out_root: str = "results"
    cache_dir: str | None = None
    tuned_on: str = "MUTAG"

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.labelling not in ("bc", "canonical"):
            raise ValueError(f"unknown labelling {self.labelling!r}")
        if self.model not in ("capsules", "cnn"):
            raise ValueError(f"unknown model {self.model!r}")
        preset = PRESETS[self.preset]
        if self.epochs is None:
            self.epochs = preset["epochs_cnn"] if self.model == "cnn" else preset["epochs"]
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr is None:
            self.base_lr = preset["base_lr"]
        if self.lr_decay is None:
            self.lr_decay = preset["lr_decay"]
        if self.batch_size is None:
            self.batch_size = preset["batch_size"]
        if self.jobs is None:
            self.jobs = max(1, min(os.cpu_count() or 1, self.folds))
        if self.cache_dir is None:
            self.cache_dir = os.path.join(self.out_root, "cache")

    @property
    def procedure(self) -> Procedure:
        return Procedure.BETWEENNESS if self.labelling == "bc" else Procedure.CANONICAL

    def capsnet_config(self) -> CapsNetConfig:
        return CapsNetConfig(
            routing_iters=self.routing_iters,
            lam=self.lam,
            alpha=self.alpha,
            loss_mode=self.loss_mode,
            **PRESETS[self.preset]["capsnet"],
        )

    def run_id(self) -> str:
        parts = [
            self.dataset,
            self.labelling + ("-naive" if self.naive_ties else ""),
            self.model,
            self.preset,
            f"f{self.folds}",
            f"e{self.epochs}",
            f"s{self.seed}",
        ]
        return "_".join(parts)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentResult:
    dataset: str
    variant: str
    fold_accuracies: list
    mean_accuracy: float
    std_accuracy: float
    train_seconds_mean: float
    train_seconds_std: float
    config: dict = field(default_factory=dict)
    version: str = ""

    @staticmethod
    def from_folds(dataset, variant, accuracies, seconds, config) -> "ExperimentResult":
        acc = np.asarray(accuracies, dtype=np.float64)
        sec = np.asarray(seconds, dtype=np.float64)
        return ExperimentResult(
            dataset=dataset,
            variant=variant,
            fold_accuracies=[float(a) for a in acc],
            mean_accuracy=float(acc.mean()),
            std_accuracy=float(acc.std()),  # population std over folds
            train_seconds_mean=float(sec.mean()),
            train_seconds_std=float(sec.std()),
            config=config,
            version=version_stamp(),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def version_stamp() -> str:
    try:
        sha = (
            subprocess.run(
                ["git", "rev-parse", "--short", "HEAD"],
                capture_output=True,
                text=True,
                cwd=os.path.dirname(os.path.abspath(__file__)),
                timeout=5,
            ).stdout.strip()
            or "unknown"
        )
    except (OSError, subprocess.SubprocessError):
        sha = "unknown"
    return f"graphcaps {__version__} ({sha})"


def variant_name(labelling: str, model: str) -> str:
    lab = "BC" if labelling == "bc" else "Canonical"
    mod = "Capsules" if model == "capsules" else "CNN"
    return f"{lab} + {mod}"


def kfold_split(n_samples: int, folds: int, seed: int, strata) -> list:
    """Stratified disjoint covering folds whose per-class sizes differ by <= 1.

    Each class's shuffled indices are cut into ``folds`` chunks; the larger
    chunks go to the currently least-loaded folds, which also keeps the fold
    totals balanced.
    """
    if folds > n_samples:
        raise ValueError(f"cannot make {folds} folds from {n_samples} samples")
    strata = np.asarray(strata)
    if len(strata) != n_samples:
        raise ValueError("strata length must equal n_samples")
    rng = np.random.default_rng([seed, 0x666F6C64])
    fold_indices = [[] for _ in range(folds)]
    loads = np.zeros(folds, dtype=np.int64)
    for cls in np.unique(strata):
        members = np.flatnonzero(strata == cls)
        if len(members) < folds:
            warnings.warn(
                f"class {cls} has {len(members)} samples for {folds} folds; "
                "some folds will miss it",
                stacklevel=2,
            )
        members = members[rng.permutation(len(members))]
        base, extra = divmod(len(members), folds)
        # least-loaded folds receive the size-(base+1) chunks
        order = np.lexsort((np.arange(folds), loads))
        sizes = np.full(folds, base, dtype=np.int64)
        sizes[order[:extra]] += 1
        start = 0
        for f in range(folds):
            take = int(sizes[f])
            fold_indices[f].extend(int(i) for i in members[start : start + take])
            loads[f] += take
            start += take
    return [np.array(sorted(fi), dtype=np.int64) for fi in fold_indices]


def dataset_tensors(cfg: ExperimentConfig, name: str | None = None, log=print):
    """Load, permute, tensorize (through the binary cache) one dataset.

    Returns (x, y, w, channels, dataset).  The node-id permutation always runs
    before tensorization so no curated ordering leaks into the tensors.
    """
    name = name or cfg.dataset
    ds = load_tu_dataset(cfg.data_root, name)
    w = cfg.w if cfg.w is not None else default_width(ds)
    cache_path = os.path.join(
        cfg.cache_dir, cache_filename(name, cfg.procedure, w, cfg.k, cfg.seed, cfg.naive_ties)
    )
    if os.path.isfile(cache_path):
        cached = load_tensors(cache_path)
        tensors = cached["tensors"]
        log(f"[tensorize] warm cache: {cache_path}")
    else:
        t0 = time.perf_counter()
        permuted = permute_dataset(ds, cfg.seed)
        tensors = tensorize_dataset(
            permuted, w=w, k=cfg.k, procedure=cfg.procedure,
            naive_ties=cfg.naive_ties, jobs=cfg.jobs,
        )
        save_tensors(
            cache_path, tensors, w, cfg.k, ds.num_node_labels,
            cfg.procedure, cfg.seed, cfg.naive_ties,
        )
        log(
            f"[tensorize] cold cache: {len(tensors)} graphs in "
            f"{time.perf_counter() - t0:.1f}s, {padded_anchor_count(ds, w)} padded anchors "
            f"-> {cache_path}"
        )
    x = np.stack([t.data for t in tensors])
    y = np.array([t.class_label for t in tensors], dtype=np.int64)
    return x, y, w, ds.num_node_labels + 1, ds


def _build_model(cfg: ExperimentConfig, w: int, channels: int, num_classes: int, seed: int):
    if cfg.model == "capsules":
        return build_capsnet(w, cfg.k, channels, num_classes, cfg.capsnet_config(), seed=seed)
    return build_cnn(w, cfg.k, channels, num_classes, CnnConfig(), seed=seed)


def fold_seed(base_seed: int, fold: int) -> int:
    return (base_seed * 0x9E3779B1 + fold * 0x85EBCA77) % (1 << 32)


def _run_fold(args):
    cfg, x, y, w, channels, num_classes, fold, test_idx = args
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    seed = fold_seed(cfg.seed, fold)
    train_idx = np.setdiff1d(np.arange(len(x)), test_idx)
    model = _build_model(cfg, w, channels, num_classes, seed)
    tc = TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, base_lr=cfg.base_lr,
        lr_decay=cfg.lr_decay, seed=seed,
    )
    if cfg.jobs > 1 and threadpool_limits is not None:
        with threadpool_limits(limits=1):
            tr = train_model(model, x[train_idx], y[train_idx], tc)
            acc = evaluate_accuracy(model, x[test_idx], y[test_idx])
    else:
        tr = train_model(model, x[train_idx], y[train_idx], tc)
        acc = evaluate_accuracy(model, x[test_idx], y[test_idx])
    return {
        "fold": fold,
        "seed": seed,
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "accuracy": float(acc),
        "final_loss": float(tr.final_loss),
        "seconds": float(tr.seconds),
        "trace": tr.loss_trace,
    }


FOLD_COLUMNS = ("fold", "seed", "n_train", "n_test", "accuracy", "final_loss")


def _write_folds_csv(path: str, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FOLD_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["fold"], row["seed"], row["n_train"], row["n_test"],
                 f"{row['accuracy']:.10f}", f"{row['final_loss']:.10f}"]
            )


def _write_trace_csv(path: str, trace: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "margin", "mse", "seconds"])
        for row in trace:
            writer.writerow(
                [row["epoch"], f"{row['total']:.8f}", f"{row['margin']:.8f}",
                 f"{row['mse']:.8f}", f"{row['seconds']:.3f}"]
            )


def run_cv(cfg: ExperimentConfig, name: str | None = None, run_dir: str | None = None,
           log=print) -> ExperimentResult:
    """Stratified k-fold cross-validation of one (dataset, labelling, model)
    cell.  Folds already present in folds.csv are reused, so an interrupted
    run resumes at the next fold."""
    name = name or cfg.dataset
    run_dir = run_dir or os.path.join(cfg.out_root, cfg.run_id())
    os.makedirs(run_dir, exist_ok=True)
    os.makedirs(os.path.join(run_dir, "traces"), exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)

    x, y, w, channels, ds = dataset_tensors(cfg, name, log=log)
    folds = kfold_split(len(x), cfg.folds, cfg.seed, strata=y)

    done = {}
    partial = os.path.join(run_dir, "folds_partial.json")
    if os.path.isfile(partial):
        with open(partial) as fh:
            for row in json.load(fh):
                done[row["fold"]] = row
        if done:
            log(f"[run] resuming: folds {sorted(done)} already complete")

    pending = [
        (cfg, x, y, w, channels, ds.num_classes, f, folds[f])
        for f in range(cfg.folds)
        if f not in done
    ]
    can_fork = "fork" in multiprocessing.get_all_start_methods()
    if cfg.jobs > 1 and len(pending) > 1 and can_fork:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=ctx) as pool:
            for row in pool.map(_run_fold, pending):
                done[row["fold"]] = row
                _persist_partial(partial, done)
                log(_fold_line(row))
    else:
        for args in pending:
            row = _run_fold(args)
            done[row["fold"]] = row
            _persist_partial(partial, done)
            log(_fold_line(row))

    rows = [done[f] for f in range(cfg.folds)]
    _write_folds_csv(os.path.join(run_dir, "folds.csv"), rows)
    for row in rows:
        _write_trace_csv(os.path.join(run_dir, "traces", f"fold_{row['fold']}.csv"), row["trace"])

    result = ExperimentResult.from_folds(
        dataset=name,
        variant=variant_name(cfg.labelling, cfg.model),
        accuracies=[r["accuracy"] for r in rows],
        seconds=[r["seconds"] for r in rows],
        config=cfg.to_dict(),
    )
    with open(os.path.join(run_dir, "result.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
    emit_report([result], run_dir)
    os.remove(partial)
    return result


def _persist_partial(path: str, done: dict) -> None:
    rows = [dict(done[f], trace=done[f]["trace"]) for f in sorted(done)]
    with open(path, "w") as fh:
        json.dump(rows, fh)


def _fold_line(row: dict) -> str:
    return (
        f"[fold {row['fold']}] acc={row['accuracy']:.4f} "
        f"loss={row['final_loss']:.4f} ({row['seconds']:.1f}s)"
    )


def run_experiment(cfg: ExperimentConfig, log=print) -> ExperimentResult:
    """run_cv plus the PTC convention: dataset id PTC expands to its four
    animal sub-datasets and the reported cell is their average."""
    if cfg.dataset.upper() != "PTC":
        return run_cv(cfg, log=log)
    parent = os.path.join(cfg.out_root, cfg.run_id())
    subresults = []
    for sub in PTC_SUBSETS:
        sub_dir = os.path.join(parent, sub)
        subresults.append(run_cv(cfg, name=sub, run_dir=sub_dir, log=log))
        log(f"[PTC] {sub}: {subresults[-1].mean_accuracy:.4f}")
    result = ExperimentResult(
        dataset="PTC",
        variant=variant_name(cfg.labelling, cfg.model),
        fold_accuracies=[a for r in subresults for a in r.fold_accuracies],
        mean_accuracy=float(np.mean([r.mean_accuracy for r in subresults])),
        std_accuracy=float(np.mean([r.std_accuracy for r in subresults])),
        train_seconds_mean=float(np.mean([r.train_seconds_mean for r in subresults])),
        train_seconds_std=float(np.mean([r.train_seconds_std for r in subresults])),
        config=cfg.to_dict(),
        version=version_stamp(),
    )
    os.makedirs(parent, exist_ok=True)
    with open(os.path.join(parent, "result.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
    emit_report([result], parent)
    return result


def grid_search(cfg: ExperimentConfig, grid: dict, log=print):
    """Exhaustive product over {epochs, base_lr, lr_decay} lists.

    Ties on mean CV accuracy break toward fewer epochs, then lower lr.
    Returns (best ExperimentConfig, best ExperimentResult, all cell results).
    """
    epochs_list = list(grid.get("epochs", [cfg.epochs]))
    lr_list = list(grid.get("base_lr", [cfg.base_lr]))
    decay_list = list(grid.get("lr_decay", [cfg.lr_decay]))
    if not epochs_list or not lr_list or not decay_list:
        raise ValueError("grid axes must be non-empty")

    parent = os.path.join(cfg.out_root, f"grid_{cfg.run_id()}")
    os.makedirs(parent, exist_ok=True)
    cells = []
    for epochs in epochs_list:
        for lr in lr_list:
            for decay in decay_list:
                cell_cfg = dataclasses.replace(
                    cfg, epochs=int(epochs), base_lr=float(lr), lr_decay=float(decay)
                )
                cell_dir = os.path.join(parent, f"e{epochs}_lr{lr}_d{decay}")
                log(f"[grid] cell epochs={epochs} lr={lr} decay={decay}")
                res = run_cv(cell_cfg, run_dir=cell_dir, log=log)
                cells.append((cell_cfg, res))

    with open(os.path.join(parent, "grid.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epochs", "base_lr", "lr_decay", "mean_accuracy", "std_accuracy"])
        for cell_cfg, res in cells:
            writer.writerow(
                [cell_cfg.epochs, cell_cfg.base_lr, cell_cfg.lr_decay,
                 f"{res.mean_accuracy:.6f}", f"{res.std_accuracy:.6f}"]
            )

    best_cfg, best_res = min(
        cells, key=lambda cr: (-cr[1].mean_accuracy, cr[0].epochs, cr[0].base_lr)
    )
    with open(os.path.join(parent, "best.json"), "w") as fh:
        json.dump({"config": best_cfg.to_dict(), "result": best_res.to_dict()}, fh, indent=2)
    return best_cfg, best_res, cells


def emit_report(results: list, out_dir: str) -> str:
    """Cross table (variant rows x dataset columns, cells "mean ± std" in %)
    written as report.csv and aligned report.txt."""
    os.makedirs(out_dir, exist_ok=True)
    variants = sorted({r.variant for r in results})
    datasets = sorted({r.dataset for r in results})
    cell = {(r.variant, r.dataset): r for r in results}

    def fmt(r: ExperimentResult | None) -> str:
        if r is None:
            return ""
        return f"{100 * r.mean_accuracy:.1f} ± {100 * r.std_accuracy:.2f}"

    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *datasets])
        for v in variants:
            writer.writerow([v, *[fmt(cell.get((v, d))) for d in datasets]])

    widths = [max(len("variant"), *(len(v) for v in variants))]
    for d in datasets:
        widths.append(max(len(d), *(len(fmt(cell.get((v, d)))) for v in variants)))
    lines = []
    header = ["variant", *datasets]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for v in variants:
        row = [v, *[fmt(cell.get((v, d))) for d in datasets]]
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    timing = [
        f"{r.variant} / {r.dataset}: train {r.train_seconds_mean:.1f} ± "
        f"{r.train_seconds_std:.1f} s/fold" for r in results
    ]
    footer = (
        "accuracies are percentages, mean ± population std over folds; "
        "PTC cells average the MM/FM/MR/FR sub-datasets"
    )
    text = "\n".join(lines + [""] + timing + ["", footer, ""])
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return csv_path
