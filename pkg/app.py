"""
QKCV Forecasting Lab - Command Line
Generate data, train and evaluate forecasters, run fine-tuning comparisons,
verify gradients and export attention / importance artifacts.

Usage:
    python app.py train --config run.yaml --set model.variant=v1 --seed 7
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import ColumnConfig, ExperimentConfig, ModelConfig, load_config, output_root
from errors import QKCVError
from data_manager import (
    DataManager, Dataset, generate_synthetic, load_csv, load_vocabulary, split_and_window,
)
from ml_engine.attention import ScoreMatrix
from ml_engine.finetune import PretrainedBase, compare_modes, pretrain_base, reports_frame
from ml_engine.forecaster import (
    ForecastBatch, QKCVForecaster, build_model, evaluate, forecast_frame, load_checkpoint, save_checkpoint,
    train,
)
from ml_engine.gradcheck import run_gradcheck
from ml_engine.numeric import no_grad
from ml_engine.static_encoder import feature_importance

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "evaluate", "finetune", "gradcheck", "export-attention", "importance")


class GradcheckFailure(QKCVError):
    """A gradient check exceeded its tolerance"""


# =============================================================================
# SHARED PIPELINE
# =============================================================================

def load_dataset(cfg: ExperimentConfig) -> Tuple[Dataset, List[str]]:
    """Dataset for the run plus the input files it was read from"""
    if cfg.data.source == "csv":
        vocabularies = load_vocabulary(cfg.data.vocabulary_path) if cfg.data.vocabulary_path else None
        inputs = [cfg.data.path] + ([cfg.data.vocabulary_path] if cfg.data.vocabulary_path else [])
        return load_csv(cfg.data.path, cfg.data.schema, vocabularies), inputs
    return generate_synthetic(cfg.synthetic), []


def model_config_for(model: ModelConfig, dataset: Dataset) -> ModelConfig:
    return replace(model, static_cardinalities=dataset.cardinalities, static_names=list(dataset.static_names))


def make_windows(cfg: ExperimentConfig, dataset: Dataset) -> Tuple[ForecastBatch, ForecastBatch, ForecastBatch]:
    if dataset.length <= cfg.model.input_len + cfg.model.horizon:
        raise QKCVError(
            f"series length {dataset.length} must exceed input_len + horizon = "
            f"{cfg.model.input_len + cfg.model.horizon}"
        )
    boundaries = cfg.data.resolve_boundaries(dataset.length)
    return split_and_window(dataset, cfg.model.input_len, cfg.model.horizon, boundaries)


def metrics_frame(run_id: str, cfg: ExperimentConfig, rows: Sequence[Tuple[str, str, object]]) -> pd.DataFrame:
    """rows: (variant, mode, MetricsReport)"""
    records = [
        {"run_id": run_id, "model": cfg.run.name, "variant": variant, "mode": mode, **report.as_dict()}
        for variant, mode, report in rows
    ]
    return pd.DataFrame(records, columns=ColumnConfig.METRICS_COLUMNS)


def _train_model(cfg: ExperimentConfig, dataset: Dataset, windows) -> Tuple[QKCVForecaster, object]:
    train_set, val_set, _ = windows
    model = build_model(model_config_for(cfg.model, dataset), cfg.run.seed)
    return train(model, train_set, val_set, cfg.optim)


def _model_from(args, cfg: ExperimentConfig, dataset: Dataset, windows) -> QKCVForecaster:
    if getattr(args, "checkpoint", None):
        model, _ = load_checkpoint(args.checkpoint)
        return model
    model, _ = _train_model(cfg, dataset, windows)
    return model


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_gen_data(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    dataset, inputs = load_dataset(cfg)
    written = manager.save_dataset(dataset, run_dir)
    print(f"{dataset.n_entities} entities x {dataset.length} steps -> {run_dir}")
    return {"inputs": inputs, "artifacts": [p.name for p in written]}


def cmd_train(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    dataset, inputs = load_dataset(cfg)
    windows = make_windows(cfg, dataset)
    model, history = _train_model(cfg, dataset, windows)
    report = evaluate(model, windows[2], jobs=cfg.optim.eval_jobs)
    frame = metrics_frame(run_dir.name, cfg, [(cfg.model.variant, "train", report)])
    manager.write_frame(frame, run_dir / "metrics.csv")
    manager.write_frame(history.to_frame(), run_dir / "history.csv")
    manager.write_frame(forecast_frame(model, windows[2], jobs=cfg.optim.eval_jobs), run_dir / "forecasts.csv")
    save_checkpoint(model, run_dir / "checkpoint", cfg.run.seed)
    print(frame.to_string(index=False))
    return {"inputs": inputs, "artifacts": ["metrics.csv", "history.csv", "forecasts.csv", "checkpoint"]}


def cmd_evaluate(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    dataset, inputs = load_dataset(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    cfg = replace(cfg, model=replace(model.config))
    _, _, test_set = make_windows(cfg, dataset)
    report = evaluate(model, test_set, jobs=cfg.optim.eval_jobs)
    frame = metrics_frame(run_dir.name, cfg, [(model.config.variant, "evaluate", report)])
    manager.write_frame(frame, run_dir / "metrics.csv")
    manager.write_frame(forecast_frame(model, test_set, jobs=cfg.optim.eval_jobs), run_dir / "forecasts.csv")
    print(frame.to_string(index=False))
    return {"inputs": inputs + [str(Path(args.checkpoint) / "manifest.json")],
            "artifacts": ["metrics.csv", "forecasts.csv"]}


def cmd_finetune(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    dataset, inputs = load_dataset(cfg)
    base_config = cfg.finetune.base_model(cfg.model)
    windows = make_windows(replace(cfg, model=base_config), dataset)

    if cfg.finetune.base_checkpoint:
        base = PretrainedBase.load(cfg.finetune.base_checkpoint)
        inputs.append(str(Path(cfg.finetune.base_checkpoint) / "manifest.json"))
    else:
        # category-free pretraining panel: same generator, independent draw
        pretrain_cfg = replace(cfg, synthetic=replace(cfg.synthetic, seed=cfg.synthetic.seed + 1))
        pre_data, _ = load_dataset(pretrain_cfg)
        pre_train, pre_val, _ = make_windows(replace(cfg, model=base_config), pre_data)
        base = pretrain_base(base_config, pre_train, pre_val,
                             replace(cfg.optim, max_steps=cfg.finetune.pretrain_steps), cfg.run.seed)
        base.save(run_dir / "base_checkpoint")

    reports = compare_modes(base, windows, dataset.cardinalities, dataset.static_names,
                            cfg.finetune, cfg.optim)
    table = reports_frame(reports)
    manager.write_frame(table, run_dir / "finetune.csv")
    metrics = metrics_frame(run_dir.name, cfg, [(r.variant, r.mode, r.metrics) for r in reports])
    manager.write_frame(metrics, run_dir / "metrics.csv")
    print(table.to_string(index=False))
    return {"inputs": inputs, "artifacts": ["finetune.csv", "metrics.csv"]}


def cmd_gradcheck(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    results = run_gradcheck(seeds=range(args.seeds))
    frame = pd.DataFrame(
        [{"op": r.op, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance, "passed": r.passed}
         for r in results]
    )
    manager.write_frame(frame, run_dir / "gradcheck.csv")
    for r in results:
        print(f"{r.op:<16} {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GradcheckFailure(f"gradient check failed for: {', '.join(failed)}")
    return {"artifacts": ["gradcheck.csv"]}


def cmd_export_attention(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    dataset, inputs = load_dataset(cfg)
    windows = make_windows(cfg, dataset)
    model = _model_from(args, cfg, dataset, windows)
    test_set = windows[2] if not windows[2].is_empty else windows[0]
    sample = test_set.take(np.arange(min(len(test_set), args.max_windows)))

    with no_grad():
        details = model.forward(sample.normalized_history(), sample.statics)
    labels = [f"{e}@{s}" for e, s in zip(sample.entity_ids, sample.starts)]
    artifacts = []
    for k, scores in enumerate(details.scores):
        path = manager.write_frame(scores.to_heatmap_frame(labels), run_dir / f"scores_layer{k}.csv")
        ScoreMatrix.from_heatmap_frame(pd.read_csv(path))
        artifacts.append(path.name)

    # one window per entity, sorted by id; the modulation depends on the statics only
    entities, first = np.unique(test_set.entity_ids, return_index=True)
    firsts = test_set.take(first)
    with no_grad():
        per_entity = model.forward(firsts.normalized_history(), firsts.statics)
    for k, modulation in enumerate(per_entity.modulations):
        if modulation is None:
            continue
        frame = modulation.to_frame(entities, ColumnConfig.ENTITY_ID)
        artifacts.append(manager.write_frame(frame, run_dir / f"modulation_layer{k}.csv").name)

    if model.encoder is not None:
        with no_grad():
            c_entity, _ = model.encoder(dataset.static_vector())
        embedding = pd.DataFrame(c_entity.data, columns=[f"dim_{i}" for i in range(c_entity.shape[1])])
        embedding.insert(0, ColumnConfig.ENTITY_ID, dataset.entity_ids)
        manager.write_frame(embedding, run_dir / "static_embedding.csv")
        artifacts.append("static_embedding.csv")
    print(f"exported {len(artifacts)} heatmap files for {len(sample)} windows -> {run_dir}")
    return {"inputs": inputs, "artifacts": artifacts}


def cmd_importance(args, cfg, manager: DataManager, run_dir: Path) -> Dict:
    dataset, inputs = load_dataset(cfg)
    windows = make_windows(cfg, dataset)
    model = _model_from(args, cfg, dataset, windows)
    if model.encoder is None or model.encoder.mode != "sce":
        raise QKCVError("importance needs a model with an sce static encoder")
    report = feature_importance(dataset.static_vector(), model.encoder)
    manager.write_frame(report.to_frame(), run_dir / "importance.csv")
    print(report.to_frame().to_string(index=False))
    return {"inputs": inputs, "artifacts": ["importance.csv"]}


HANDLERS: Dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "finetune": cmd_finetune,
    "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
    "importance": cmd_importance,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML run document")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="Override a config field (repeatable), e.g. model.variant=v3")
    common.add_argument("--seed", type=int, default=None, help="Run and optimiser seed")
    common.add_argument("--output-dir", type=str, default=None, help="Output root (default: $QKCV_OUTPUT_ROOT)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="qkcv", description="QKCV attention forecasting lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "export-attention", "importance"):
            p.add_argument("--checkpoint", type=str, default=None, required=(name == "evaluate"),
                           help="Checkpoint directory (otherwise a model is trained first)")
        if name == "export-attention":
            p.add_argument("--max-windows", type=int, default=64)
        if name == "gradcheck":
            p.add_argument("--seeds", type=int, default=3, help="Check seeds 0..N-1")
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a library error or failed gradient check, 2 on usage errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"run.seed={args.seed}", f"optim.seed={args.seed}"]
        cfg = load_config(args.config, overrides)
        manager = DataManager(args.output_dir or cfg.run.output_dir or output_root())
        snapshot = cfg.to_dict()
        run_dir = manager.run_dir(manager.run_id(args.command, snapshot))
        result = HANDLERS[args.command](args, cfg, manager, run_dir)
        inputs = ([args.config] if args.config else []) + list(result.get("inputs", []))
        manager.write_manifest(run_dir, args.command, snapshot, cfg.run.seed, inputs, result.get("artifacts", []))
    except (QKCVError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run_cli())
