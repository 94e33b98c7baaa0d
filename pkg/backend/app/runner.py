"""
Experiment pipeline behind the command line: train, attack, tsr, diagnose
and report. Every command writes its outputs atomically and embeds the fully
resolved configuration in each report.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.checkpoint import CheckpointError, CheckpointFile, file_sha256, load_checkpoint, save_checkpoint
from app.data import Dataset, build_dataset, save_idx, subsample
from app.edlcm import method_tag, train
from app.metrics import (
    HessianGuardrailError,
    accuracy,
    bound_table,
    curvature_stats,
    exact_input_hessian,
    fd_error_sweep,
    majority_deception_rate,
    robust_accuracy,
    tsr,
)
from app.models import (
    DiagnosticsReport,
    ExperimentConfig,
    RobustnessReport,
    RobustnessRow,
    TsrRunReport,
)
from app.nn import EnsembleModel, init_ensemble
from app.storage import get_output_dir, write_csv, write_json

logger = logging.getLogger(__name__)

CLEAN_ROW = "No Attack"
DECIMALS = 3
LOSS_LOG_HEADER = ["epoch", "step", "ece", "l_r", "l_g", "total"]


class ConfigError(ValueError):
    pass


def _field_path(loc: Sequence[Any]) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def load_config(path: str) -> ExperimentConfig:
    """
    Read an ExperimentConfig from a JSON file.

    Raises:
        ConfigError: unreadable file, JSON syntax error (with line and
            column) or validation failure (with dotted field paths)
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror or e})")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    return _validate_config(raw, str(path))


def _validate_config(raw: Any, source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(f"{_field_path(err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: invalid config: {problems}")


def resolve_config(cfg: ExperimentConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                   out: Optional[str] = None) -> ExperimentConfig:
    """Apply command-line overrides."""
    update: Dict[str, Any] = {}
    if seed is not None:
        update["seed"] = seed
    if threads is not None:
        update["threads"] = threads
    if out is not None:
        update["output_dir"] = out
    return cfg.model_copy(update=update) if update else cfg


def _round(value: float) -> float:
    return round(float(value), DECIMALS)


def _check_arch(cfg: ExperimentConfig, ds: Dataset) -> None:
    if cfg.model.input_dim != ds.dim:
        raise ConfigError(f"model.input_dim: {cfg.model.input_dim} but the dataset has d={ds.dim}")
    if cfg.model.num_classes < ds.num_classes:
        raise ConfigError(
            f"model.num_classes: {cfg.model.num_classes} but the dataset has {ds.num_classes} classes"
        )


def cmd_train(config_path: str, out: Optional[str] = None, seed: Optional[int] = None,
              threads: Optional[int] = None) -> Dict[str, Path]:
    """
    Train an ensemble and write its checkpoint, loss log, resolved config and dataset cache.

    Returns:
        Written paths keyed by role
    """
    cfg = resolve_config(load_config(config_path), seed, threads, out)
    out_dir = get_output_dir(cfg.output_dir)
    train_ds, test_ds = build_dataset(cfg.dataset)
    _check_arch(cfg, train_ds)

    tag = method_tag(cfg.edlcm)
    resolved = cfg.model_dump(mode="json")
    ens = init_ensemble(cfg.model, cfg.ensemble_size, cfg.seed)
    try:
        ens, history = train(ens, train_ds, cfg.edlcm, cfg.sgd, cfg.seed)
    except Exception as e:
        logger.error(f"Error training {tag} ensemble: {e}")
        raise

    logger.info(
        f"{tag}: train accuracy {accuracy(ens, train_ds.inputs, train_ds.labels):.3f}%, "
        f"test accuracy {accuracy(ens, test_ds.inputs, test_ds.labels):.3f}%"
    )
    paths = {
        "checkpoint": out_dir / f"checkpoint_{tag}.json",
        "loss_log": out_dir / f"loss_log_{tag}.csv",
        "config": out_dir / f"config_{tag}.resolved.json",
        "train_images": out_dir / "dataset_train-inputs.idx",
        "train_labels": out_dir / "dataset_train-labels.idx",
        "test_images": out_dir / "dataset_test-inputs.idx",
        "test_labels": out_dir / "dataset_test-labels.idx",
    }
    digest = save_checkpoint(ens, paths["checkpoint"], method=tag, training=resolved)
    write_csv(paths["loss_log"], LOSS_LOG_HEADER,
              [[r.epoch, r.step, r.ece, r.l_r, r.l_g, r.total] for r in history])
    write_json(paths["config"], {"method": tag, "checkpoint_sha256": digest, "config": resolved})
    save_idx(train_ds, paths["train_images"], paths["train_labels"])
    save_idx(test_ds, paths["test_images"], paths["test_labels"])
    return paths


@dataclass
class LoadedRun:
    ens: EnsembleModel
    container: CheckpointFile
    cfg: ExperimentConfig
    sha256: str
    test: Dataset
    out_dir: Path

    @property
    def method(self) -> str:
        return self.container.method

    def resolved(self) -> Dict[str, Any]:
        return self.cfg.model_dump(mode="json")


def load_run(checkpoint_path: str, config_path: Optional[str] = None, out: Optional[str] = None,
             seed: Optional[int] = None, threads: Optional[int] = None) -> LoadedRun:
    """
    Load a checkpoint with the configuration it was trained under, or with
    ``config_path`` when given (which must describe the same architecture).
    """
    ens, container = load_checkpoint(checkpoint_path)
    if config_path is not None:
        cfg = load_config(config_path)
        if cfg.model != container.arch or cfg.ensemble_size != container.ensemble_size:
            raise CheckpointError(
                f"Mismatch: checkpoint {checkpoint_path} holds {container.ensemble_size} x "
                f"{container.arch.model_dump()} but the config describes {cfg.ensemble_size} x "
                f"{cfg.model.model_dump()}"
            )
    else:
        cfg = _validate_config(container.training, str(checkpoint_path))
    cfg = resolve_config(cfg, seed, threads, out)
    _, test = build_dataset(cfg.dataset)
    if test.dim != ens.input_dim:
        raise CheckpointError(f"Mismatch: checkpoint expects d={ens.input_dim}, dataset has d={test.dim}")
    return LoadedRun(ens=ens, container=container, cfg=cfg, sha256=file_sha256(checkpoint_path),
                     test=test, out_dir=get_output_dir(cfg.output_dir))


def _evaluation_set(run: LoadedRun) -> Dataset:
    limit = run.cfg.attacks.max_samples
    return subsample(run.test, limit, run.cfg.seed) if limit else run.test


def cmd_attack(checkpoint_path: str, config_path: Optional[str] = None, out: Optional[str] = None,
               seed: Optional[int] = None, threads: Optional[int] = None) -> Dict[str, Path]:
    """White-box robustness table: a clean row, then one row per (family, epsilon)."""
    run = load_run(checkpoint_path, config_path, out, seed, threads)
    ds = _evaluation_set(run)
    rows = [RobustnessRow(attack=CLEAN_ROW, accuracy=_round(accuracy(run.ens, ds.inputs, ds.labels)))]
    for attack_cfg in run.cfg.attacks.configs(run.cfg.seed):
        value = robust_accuracy(run.ens, attack_cfg, ds, threads=run.cfg.threads)
        rows.append(RobustnessRow(attack=attack_cfg.family.upper(), epsilon=attack_cfg.epsilon,
                                  accuracy=_round(value)))
        logger.info(f"{run.method} {attack_cfg.family} eps={attack_cfg.epsilon}: {value:.3f}%")

    report = RobustnessReport(method=run.method, seed=run.cfg.seed, checkpoint_sha256=run.sha256,
                              samples=len(ds), rows=rows, config=run.resolved())
    paths = {
        "json": run.out_dir / f"robustness_{run.method}.json",
        "csv": run.out_dir / f"robustness_{run.method}.csv",
    }
    write_json(paths["json"], report.model_dump(mode="json"))
    write_csv(paths["csv"], ["attack", "epsilon", run.method],
              [[r.attack, "" if r.epsilon is None else r.epsilon, r.accuracy] for r in rows])
    return paths


def cmd_tsr(checkpoint_path: str, config_path: Optional[str] = None, out: Optional[str] = None,
            seed: Optional[int] = None, threads: Optional[int] = None) -> Dict[str, Path]:
    """Transferability matrix and scalar for member-targeted attacks."""
    run = load_run(checkpoint_path, config_path, out, seed, threads)
    ds = _evaluation_set(run)
    attack_cfg = run.cfg.tsr_attack.model_copy(update={"seed": run.cfg.seed}).resolved()
    report = tsr(run.ens, attack_cfg, ds, reading=run.cfg.tsr_reading, threads=run.cfg.threads)
    deception = majority_deception_rate(run.ens, attack_cfg, ds, threads=run.cfg.threads)

    result = TsrRunReport(method=run.method, seed=run.cfg.seed, checkpoint_sha256=run.sha256,
                          samples=len(ds), attack=attack_cfg, report=report,
                          majority_deception_rate=_round(deception), config=run.resolved())
    paths = {
        "json": run.out_dir / f"tsr_{run.method}.json",
        "csv": run.out_dir / f"tsr_{run.method}.csv",
    }
    write_json(paths["json"], result.model_dump(mode="json"))
    header = ["source"] + [f"member_{j}" for j in range(report.M)]
    rows: List[List[Any]] = [
        [f"member_{i}"] + ["-" if v is None else v for v in row]
        for i, row in enumerate(report.pairwise_fool_rate)
    ]
    rows.append(["tsr", report.tsr] + [""] * (report.M - 1))
    write_csv(paths["csv"], header, rows)
    return paths


def cmd_diagnose(checkpoint_path: str, config_path: Optional[str] = None, out: Optional[str] = None,
                 seed: Optional[int] = None, threads: Optional[int] = None) -> Dict[str, Path]:
    """Curvature statistics, perturbation bounds and the finite-difference step sweep."""
    run = load_run(checkpoint_path, config_path, out, seed, threads)
    options = run.cfg.diagnose
    h = run.cfg.edlcm.h
    if options.hessian and run.ens.input_dim > options.max_hessian_dim:
        raise HessianGuardrailError(
            f"diagnose.hessian needs d <= diagnose.max_hessian_dim={options.max_hessian_dim}, "
            f"got d={run.ens.input_dim}; set diagnose.hessian to false"
        )

    stats = curvature_stats(run.ens, run.test, options, h, run.cfg.seed)
    bounds, sweep, asymmetry = [], [], None
    if options.hessian:
        points = subsample(run.test, options.hessian_points, run.cfg.seed)
        member = run.ens.members[0]
        sweep = fd_error_sweep(member, points.inputs, points.labels, options.h_sweep,
                               max_dim=options.max_hessian_dim)
        asymmetry = max(
            exact_input_hessian(member, x, y, max_dim=options.max_hessian_dim).asymmetry
            for x, y in zip(points.inputs, points.labels)
        )
        bounds = bound_table(run.ens, run.test, options, run.cfg.seed)

    report = DiagnosticsReport(method=run.method, seed=run.cfg.seed, checkpoint_sha256=run.sha256,
                               curvature=stats, bounds=bounds, h_sweep=sweep,
                               hessian_asymmetry_max=asymmetry, config=run.resolved())
    paths = {
        "json": run.out_dir / f"diagnostics_{run.method}.json",
        "h_sweep": run.out_dir / f"h_sweep_{run.method}.csv",
        "bounds": run.out_dir / f"bounds_{run.method}.csv",
    }
    write_json(paths["json"], report.model_dump(mode="json"))
    write_csv(paths["h_sweep"], ["h", "relative_error", "ratio"],
              [[r.h, r.relative_error, "" if r.ratio is None else r.ratio] for r in sweep])
    write_csv(paths["bounds"],
              ["member", "sample", "c", "grad_norm", "nu", "grad_dot_u_abs", "lower", "upper",
               "delta_estimate", "violated"],
              [[b.member, b.sample, b.c, b.grad_norm, b.nu, b.grad_dot_u_abs, b.lower,
                "inf" if b.upper is None else b.upper,
                "" if b.delta_estimate is None else b.delta_estimate, b.violated] for b in bounds])
    return paths


def _read_report(path: str) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot read report ({e})")


def _column_name(method: str, seed: int, taken: Dict[str, Any]) -> str:
    return method if method not in taken else f"{method}_seed{seed}"


def _config_key(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


def merge_robustness(reports: Sequence[RobustnessReport]) -> Tuple[List[str], List[List[Any]]]:
    """One row per (attack, epsilon) in first-seen order, one column per method."""
    columns: Dict[str, Dict[Tuple[str, Optional[float]], float]] = {}
    keys: List[Tuple[str, Optional[float]]] = []
    for report in reports:
        name = _column_name(report.method, report.seed, columns)
        columns[name] = {}
        for row in report.rows:
            key = (row.attack, row.epsilon)
            if key not in keys:
                keys.append(key)
            columns[name][key] = row.accuracy
    header = ["attack", "epsilon"] + list(columns)
    rows = [
        [attack, "" if eps is None else eps] + [columns[c].get((attack, eps), "") for c in columns]
        for attack, eps in keys
    ]
    return header, rows


def merge_tsr(reports: Sequence[TsrRunReport]) -> Tuple[List[str], List[List[Any]]]:
    """One row per method, one column per attack epsilon."""
    epsilons: List[float] = []
    table: Dict[str, Dict[float, float]] = {}
    for run in reports:
        name = _column_name(run.method, run.seed, table)
        table.setdefault(name, {})[run.attack.epsilon] = run.report.tsr
        if run.attack.epsilon not in epsilons:
            epsilons.append(run.attack.epsilon)
    header = ["method"] + [f"eps={eps}" for eps in epsilons]
    rows = [[name] + [values.get(eps, "") for eps in epsilons] for name, values in table.items()]
    return header, rows


def cmd_report(report_paths: Sequence[str], out: Optional[str] = None) -> Dict[str, Path]:
    """Merge robustness and TSR reports of several checkpoints into comparison tables."""
    if not report_paths:
        raise ConfigError("report needs at least one input report")
    robustness: List[RobustnessReport] = []
    transfer: List[TsrRunReport] = []
    for path in report_paths:
        raw = _read_report(path)
        try:
            if "rows" in raw:
                robustness.append(RobustnessReport.model_validate(raw))
            elif "report" in raw:
                transfer.append(TsrRunReport.model_validate(raw))
            else:
                raise ConfigError(f"{path}: not a robustness or TSR report")
        except ValidationError as e:
            raise ConfigError(f"{path}: malformed report ({e.error_count()} validation errors)")

    out_dir = get_output_dir(out)
    paths: Dict[str, Path] = {}
    if robustness:
        header, rows = merge_robustness(robustness)
        paths["robustness_csv"] = write_csv(out_dir / "robustness_comparison.csv", header, rows)
        paths["robustness_json"] = write_json(
            out_dir / "robustness_comparison.json",
            {"columns": header, "rows": rows, "sources": [str(p) for p in report_paths],
             "configs": {_config_key(r.method, r.seed): r.config for r in robustness}},
        )
    if transfer:
        header, rows = merge_tsr(transfer)
        paths["tsr_csv"] = write_csv(out_dir / "tsr_comparison.csv", header, rows)
        paths["tsr_json"] = write_json(
            out_dir / "tsr_comparison.json",
            {"columns": header, "rows": rows,
             "configs": {_config_key(r.method, r.seed): r.config for r in transfer}},
        )
    logger.info(f"Merged {len(robustness)} robustness and {len(transfer)} TSR reports")
    return paths
