"""Library-level experiment runners; the CLI is a thin shell over these.

Every CSV written here starts with a ``# config_hash=<hex>`` comment line and
every JSON carries a ``config_hash`` field, so outputs can be traced back to
the exact configuration that produced them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .data import DatasetArchive, SplitSpec, import_dataset, load_archive, pack_archive, split, standardize
from .metrics import EvaluationReport, evaluate
from .nn import Model
from .training import TrainLog, fit, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

COMPARISON_HEADER = ["model", "accuracy", "precision", "recall", "f1", "train_wall_seconds"]


class OverlapError(RuntimeError):
    pass


def _with_hash(text: str, config_hash: str) -> str:
    return f"# config_hash={config_hash}\n{text}"


def strip_comments(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def run_import(cfg: ExperimentConfig, root: str | None = None, out: str | None = None) -> Path:
    root = root or cfg.root
    if root is None:
        raise FileNotFoundError("no dataset root given (dataset.root or --root)")
    if cfg.target_size is None:
        raise ConfigError("dataset.target_size", "required for import")
    archive = import_dataset(root, cfg.target_size, cfg.classes)
    path = Path(out or cfg.archive)
    path.parent.mkdir(parents=True, exist_ok=True)
    pack_archive(archive, path)
    log.info("packed %d images in %d classes into %s", len(archive), archive.num_classes, path)
    return path


def load_experiment_archive(cfg: ExperimentConfig) -> DatasetArchive:
    path = Path(cfg.archive)
    if not path.exists():
        raise FileNotFoundError(f"archive {path} not found; run `lusc import` first")
    return load_archive(path)


def make_split(cfg: ExperimentConfig, archive: DatasetArchive) -> SplitSpec:
    return split(archive.labels, cfg.split_ratios, cfg.split_seed)


def run_split(cfg: ExperimentConfig, out: str | None = None) -> Path:
    spec = make_split(cfg, load_experiment_archive(cfg))
    path = Path(out) if out else Path(cfg.output_dir) / "split.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(spec.to_json())
    return path


def read_split(path) -> SplitSpec:
    return SplitSpec.from_json(Path(path).read_text())


@dataclass
class TrainResult:
    model: Model
    log: TrainLog
    report: EvaluationReport
    train_wall_seconds: float
    out_dir: Path


def _write_report(report: EvaluationReport, out_dir: Path, subset: str, config_hash: str) -> None:
    (out_dir / f"report_{subset}.json").write_text(report.to_json())
    (out_dir / f"confusion_{subset}.csv").write_text(_with_hash(report.confusion.to_csv(), config_hash))


def run_train(cfg: ExperimentConfig, name: str | None = None, archive: DatasetArchive | None = None) -> TrainResult:
    """Train one model; writes checkpoint, learning curve and validation report."""
    if name is None:
        if len(cfg.models) != 1:
            raise ConfigError("model.name", "train needs exactly one model")
        name = cfg.models[0]
    if archive is None:
        archive = load_experiment_archive(cfg)
    if not archive.standardized:
        archive = standardize(archive)
    spec = make_split(cfg, archive)
    out_dir = Path(cfg.output_dir) / name
    out_dir.mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "split.json").write_text(spec.to_json())
    chash = cfg.config_hash()

    model = cfg.build_model(name, archive.num_classes)
    tcfg = cfg.train_config_for(name)
    t0 = time.monotonic()
    model, tlog = fit(model, archive, spec, tcfg, cfg.augment)
    wall = time.monotonic() - t0

    save_checkpoint(model, None, out_dir / "checkpoint.luck")
    (out_dir / "trainlog.csv").write_text(_with_hash(tlog.to_csv(), chash))
    (out_dir / "label_hashes.json").write_text(
        json.dumps({"config_hash": chash, "label_hashes": tlog.label_hashes}, indent=2)
    )
    report = evaluate(model, archive, spec.val, tcfg.batch_size, chash, spec.seed)
    _write_report(report, out_dir, "val", chash)
    return TrainResult(model, tlog, report, wall, out_dir)


def run_evaluate(
    cfg: ExperimentConfig,
    checkpoint,
    subset: str = "test",
    split_path=None,
    name: str | None = None,
    out: str | None = None,
) -> EvaluationReport:
    name = name or (cfg.models[0] if cfg.models else None)
    if name is None:
        raise ConfigError("model.name", "evaluate needs a model name")
    archive = standardize(load_experiment_archive(cfg))
    spec = read_split(split_path) if split_path else make_split(cfg, archive)
    indices = spec.subset(subset)
    if subset != "train" and set(indices) & set(spec.train):
        raise OverlapError(f"{subset} indices overlap the training subset")
    model = cfg.build_model(name, archive.num_classes)
    load_checkpoint(checkpoint, model)
    chash = cfg.config_hash()
    report = evaluate(model, archive, indices, cfg.train_config_for(name).batch_size, chash, spec.seed)
    out_dir = Path(out) if out else Path(cfg.output_dir) / name
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report(report, out_dir, subset, chash)
    return report


def run_compare(cfg: ExperimentConfig) -> dict:
    """Train AlexNet then ViT under one archive, split, seed and train section."""
    names = cfg.models or ["alexnet", "vit"]
    if sorted(names) != ["alexnet", "vit"]:
        raise ConfigError("model.names", "compare needs both alexnet and vit")
    archive = standardize(load_experiment_archive(cfg))
    spec = make_split(cfg, archive)
    chash = cfg.config_hash()
    out = Path(cfg.output_dir)
    entries, metric_entries = {}, {}
    for name in ("alexnet", "vit"):
        res = run_train(cfg, name, archive)
        test = evaluate(res.model, archive, spec.test, cfg.train_config_for(name).batch_size, chash, spec.seed)
        _write_report(test, res.out_dir, "test", chash)
        entries[name] = {**test.macro, "split_seed": spec.seed, "train_wall_seconds": res.train_wall_seconds,
                         "eval_wall_seconds": test.eval_wall_seconds}
        metric_entries[name] = {**test.macro, "split_seed": spec.seed, "epochs": len(res.log.records),
                                "best_epoch": res.log.best_epoch, "label_hashes": res.log.label_hashes}
    comparison = {"config_hash": chash, "split_seed": spec.seed, "models": entries}
    (out / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True))
    (out / "metrics.json").write_text(
        json.dumps({"config_hash": chash, "split_seed": spec.seed, "models": metric_entries}, indent=2, sort_keys=True)
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_HEADER)
    for name, e in entries.items():
        w.writerow([name, *(f"{e[k]:.6f}" for k in ("accuracy", "precision", "recall", "f1")),
                    f"{e['train_wall_seconds']:.3f}"])
    (out / "comparison.csv").write_text(_with_hash(buf.getvalue(), chash))
    return comparison
