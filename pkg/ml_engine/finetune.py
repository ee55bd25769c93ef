"""
Frozen-Base Fine-Tuning
Attach the static-category path to a pretrained category-free forecaster,
partition parameters into trainable/frozen sets and run constrained training.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union
import hashlib
import logging

import numpy as np
import pandas as pd

from config import ColumnConfig, FinetuneConfig, ModelConfig, OptimConfig
from errors import ContractError, InternalError
from .attention import AttentionVariant
from .forecaster import (
    Adam, ForecastBatch, MetricsReport, QKCVForecaster, TrainingHistory, build_model, evaluate,
    load_checkpoint, save_checkpoint, state_hash, train,
)

logger = logging.getLogger(__name__)


class FreezeMode(str, Enum):
    FROZEN = "frozen"                    # nothing trains: the base as-is
    PL = "pl"
    FP = "fp"
    PL_QKCV = "pl+qkcv"
    FP_QKCV = "fp+qkcv"
    COMPRESSOR_MLP = "compressor-mlp"
    COMPRESSOR_SCE = "compressor-sce"

    @property
    def attaches_qkcv(self) -> bool:
        return self in (FreezeMode.PL_QKCV, FreezeMode.FP_QKCV)

    @property
    def compressor_encoder(self) -> Optional[str]:
        return {FreezeMode.COMPRESSOR_MLP: "mlp", FreezeMode.COMPRESSOR_SCE: "sce"}.get(self)


# Parameter groups by name prefix
GROUP_PATCHING = "patching"
GROUP_HEAD = "head"
GROUP_ENCODER = "encoder"
GROUP_COMBINER = "combiner"
GROUP_COMPRESSOR = "compressor"
GROUP_CORE = "core"


def parameter_group(name: str) -> str:
    """Map a dotted parameter name to its group"""
    parts = name.split(".")
    if parts[0] in ("patch", "pos_embedding"):
        return GROUP_PATCHING
    if parts[0] == "head":
        return GROUP_HEAD
    if parts[0] == "encoder":
        return GROUP_ENCODER
    if parts[0] == "compressor":
        return GROUP_COMPRESSOR
    if parts[0] == "layers" and len(parts) > 2:
        if len(parts) > 3 and parts[2] == "attn" and parts[3] == "combiner":
            return GROUP_COMBINER
        return GROUP_CORE
    raise InternalError(f"parameter '{name}' belongs to no known group")


TRAINABLE_GROUPS = {
    FreezeMode.FROZEN: set(),
    FreezeMode.PL: {GROUP_PATCHING, GROUP_HEAD, GROUP_ENCODER, GROUP_COMBINER},
    FreezeMode.PL_QKCV: {GROUP_PATCHING, GROUP_HEAD, GROUP_ENCODER, GROUP_COMBINER},
    FreezeMode.FP: {GROUP_PATCHING, GROUP_HEAD, GROUP_ENCODER, GROUP_COMBINER, GROUP_CORE, GROUP_COMPRESSOR},
    FreezeMode.FP_QKCV: {GROUP_PATCHING, GROUP_HEAD, GROUP_ENCODER, GROUP_COMBINER, GROUP_CORE, GROUP_COMPRESSOR},
    # the encoder feeding the compressor is part of the compressor path
    FreezeMode.COMPRESSOR_MLP: {GROUP_COMPRESSOR, GROUP_ENCODER, GROUP_PATCHING, GROUP_HEAD},
    FreezeMode.COMPRESSOR_SCE: {GROUP_COMPRESSOR, GROUP_ENCODER, GROUP_PATCHING, GROUP_HEAD},
}


@dataclass
class FreezePolicy:
    """Disjoint trainable / frozen parameter-name sets covering a model"""
    mode: FreezeMode
    trainable: FrozenSet[str]
    frozen: FrozenSet[str]
    sizes: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise InternalError(f"parameters both trainable and frozen: {sorted(self.trainable & self.frozen)}")

    @property
    def counts(self) -> Tuple[int, int, int]:
        """(trainable_n, frozen_n, total_n) in scalar parameters"""
        trainable_n = sum(self.sizes[n] for n in self.trainable)
        frozen_n = sum(self.sizes[n] for n in self.frozen)
        return trainable_n, frozen_n, trainable_n + frozen_n

    def apply(self, model: QKCVForecaster) -> None:
        names = {name for name, _ in model.named_parameters()}
        if names != self.trainable | self.frozen:
            raise InternalError("freeze policy was derived from a different model")
        for name, tensor in model.named_parameters():
            tensor.requires_grad = name in self.trainable


def partition_parameters(model: QKCVForecaster, mode: Union[str, FreezeMode]) -> FreezePolicy:
    """
    Split the model's parameters for a fine-tuning mode.

    PL trains the patching layer, output head and any attached static path;
    FP trains everything; compressor modes train the compressor (with its
    encoder), patching layer and head.
    """
    mode = FreezeMode(mode)
    has_combiner = any(parameter_group(n) == GROUP_COMBINER for n, _ in model.named_parameters())
    if mode.attaches_qkcv and not has_combiner:
        raise ContractError(f"mode {mode.value} needs a model with an attached QKCV path")
    if mode.compressor_encoder and model.compressor is None:
        raise ContractError(f"mode {mode.value} needs a model with an input compressor")

    groups = TRAINABLE_GROUPS[mode]
    trainable, frozen, sizes = set(), set(), {}
    for name, tensor in model.named_parameters():
        sizes[name] = int(tensor.size)
        (trainable if parameter_group(name) in groups else frozen).add(name)
    policy = FreezePolicy(mode, frozenset(trainable), frozenset(frozen), sizes)
    logger.info("policy %s: trainable %d / total %d", mode.value, policy.counts[0], policy.counts[2])
    return policy


# =============================================================================
# PRETRAINED BASE
# =============================================================================

@dataclass
class PretrainedBase:
    """Category-free forecaster with its recorded checkpoint hash"""
    model: QKCVForecaster
    checkpoint_hash: str
    seed: int
    history: Optional[TrainingHistory] = None

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def state(self) -> Dict[str, np.ndarray]:
        return self.model.state()

    def fresh(self) -> QKCVForecaster:
        """Independent copy of the base model"""
        model = build_model(self.config, self.seed)
        model.load_state(self.model.state())
        return model

    def save(self, directory: Union[str, Path]) -> Dict:
        return save_checkpoint(self.model, directory, self.seed)

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PretrainedBase":
        model, manifest = load_checkpoint(directory)
        if model.config.variant != "vanilla" or model.config.encoder != "none":
            raise ContractError(f"checkpoint {directory} is not a category-free base model")
        return cls(model, manifest["sha256"], manifest["seed"])


def pretrain_base(config: ModelConfig, train_set: ForecastBatch, val_set: Optional[ForecastBatch],
                  optim: OptimConfig, seed: int = 0) -> PretrainedBase:
    """Train the vanilla, encoder-free base that later runs are attached to"""
    if config.variant != "vanilla" or config.encoder != "none":
        raise ContractError("the pretrained base must be vanilla with no static encoder")
    model = build_model(config, seed)
    model, history = train(model, train_set, val_set, optim)
    digest = state_hash(model.state())
    logger.info("pretrained base: %d parameters, hash %s", model.num_parameters(), digest[:12])
    return PretrainedBase(model, digest, seed, history)


def _check_base(base: PretrainedBase) -> None:
    if state_hash(base.model.state()) != base.checkpoint_hash:
        raise InternalError("pretrained base weights differ from their recorded checkpoint hash")


def _graft(base: PretrainedBase, config: ModelConfig) -> QKCVForecaster:
    model = build_model(config, base.seed + 1)
    base_state = base.state()
    model.load_state(base_state, strict=False)
    copied = model.state()
    for name, array in base_state.items():
        if not np.array_equal(copied[name], array):
            raise InternalError(f"base parameter {name} changed while attaching")
    return model


def attach_qkcv(base: PretrainedBase, encoder_mode: str, cardinalities: Sequence[int],
                variant: Union[str, AttentionVariant], names: Optional[Sequence[str]] = None,
                qkcv_layers: Optional[List[int]] = None) -> QKCVForecaster:
    """
    Add a static encoder and per-layer combiner GRNs to a copy of the base.

    Combiners start at identity modulation: v1 reproduces the base exactly,
    v2 scales keys by 1 - 1e-3, v3 leaves keys unchanged and only softens
    the scores by 1/sqrt(2). Base weights are copied bitwise.
    """
    variant = AttentionVariant.parse(variant)
    if variant is AttentionVariant.VANILLA:
        raise ContractError("attach_qkcv needs a QKCV variant; vanilla has nothing to attach")
    _check_base(base)
    config = replace(
        base.config, variant=variant.value, encoder=encoder_mode,
        static_cardinalities=list(cardinalities), static_names=list(names) if names else None,
        combiner_init="identity", static_path="attention", qkcv_layers=qkcv_layers,
    )
    return _graft(base, config)


def attach_compressor(base: PretrainedBase, encoder_mode: str, cardinalities: Sequence[int],
                      names: Optional[Sequence[str]] = None) -> QKCVForecaster:
    """
    Ablation: encode the statics, concatenate them to the history window and
    compress back to the history width with a freshly initialised MLP before
    the frozen base.
    """
    _check_base(base)
    config = replace(
        base.config, encoder=encoder_mode, static_path="compressor", variant="vanilla",
        static_cardinalities=list(cardinalities), static_names=list(names) if names else None,
    )
    return _graft(base, config)


# =============================================================================
# RUNS
# =============================================================================

@dataclass
class FinetuneReport:
    """Outcome of one fine-tuning run"""
    mode: str
    variant: str
    trainable_params: int
    frozen_params: int
    total_params: int
    optimizer_state_bytes: int
    metrics: MetricsReport
    history: Optional[TrainingHistory] = None

    @property
    def wpe(self) -> float:
        return self.metrics.wpe

    @property
    def mae(self) -> float:
        return self.metrics.mae

    def to_row(self) -> Dict:
        return {
            "mode": self.mode, "variant": self.variant, "trainable_params": self.trainable_params,
            "total_params": self.total_params, "wpe": self.wpe, "mae": self.mae,
        }


def reports_frame(reports: Sequence[FinetuneReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports], columns=ColumnConfig.FINETUNE_COLUMNS)


def _tensor_hashes(model: QKCVForecaster, names) -> Dict[str, str]:
    params = dict(model.named_parameters())
    return {n: hashlib.sha256(np.ascontiguousarray(params[n].data).tobytes()).hexdigest() for n in names}


def finetune_run(model: QKCVForecaster, policy: FreezePolicy,
                 dataset: Tuple[ForecastBatch, Optional[ForecastBatch], ForecastBatch],
                 opt_config: OptimConfig) -> Tuple[QKCVForecaster, FinetuneReport]:
    """
    Train only the policy's trainable parameters, then evaluate on the test split.

    Args:
        model: Model the policy was derived from
        policy: Trainable/frozen partition
        dataset: (train, val, test) windows
        opt_config: Optimiser settings

    Returns:
        (model, FinetuneReport)
    """
    train_set, val_set, test_set = dataset
    policy.apply(model)
    before = _tensor_hashes(model, policy.frozen)

    history = None
    optimizer_bytes = 0
    if policy.trainable:
        requires = {name for name, t in model.named_parameters() if t.requires_grad}
        if requires != policy.trainable:
            raise InternalError("requires_grad flags disagree with the freeze policy")
        optimizer_bytes = Adam({n: t for n, t in model.named_parameters() if t.requires_grad}).state_bytes()
        model, history = train(model, train_set, val_set, opt_config)
    else:
        logger.info("policy %s trains nothing; evaluating as-is", policy.mode.value)

    after = _tensor_hashes(model, policy.frozen)
    changed = sorted(n for n in policy.frozen if before[n] != after[n])
    if changed:
        raise InternalError(f"frozen parameters were modified: {changed}")

    report = evaluate(model, test_set, jobs=opt_config.eval_jobs)
    trainable_n, frozen_n, total_n = policy.counts
    variant = model.config.variant if model.config.variant != "vanilla" else "none"
    logger.info("%s/%s: WPE %.4f MAE %.4f (%d trainable)", policy.mode.value, variant,
                report.wpe, report.mae, trainable_n)
    return model, FinetuneReport(policy.mode.value, variant, trainable_n, frozen_n, total_n,
                                 optimizer_bytes, report, history)


def compare_modes(base: PretrainedBase, dataset: Tuple[ForecastBatch, Optional[ForecastBatch], ForecastBatch],
                  cardinalities: Sequence[int], names: Optional[Sequence[str]],
                  finetune: FinetuneConfig, opt_config: OptimConfig) -> List[FinetuneReport]:
    """Run every configured mode (and variant, for QKCV modes) from the same base"""
    reports = []
    for mode in (FreezeMode(m) for m in finetune.modes):
        if mode.attaches_qkcv:
            candidates = [(v, attach_qkcv(base, finetune.encoder, cardinalities, v, names))
                          for v in finetune.variants]
        elif mode.compressor_encoder:
            candidates = [("none", attach_compressor(base, mode.compressor_encoder, cardinalities, names))]
        else:
            candidates = [("none", base.fresh())]
        for _, model in candidates:
            policy = partition_parameters(model, mode)
            _, report = finetune_run(model, policy, dataset, opt_config)
            reports.append(report)
    _check_base(base)
    return reports
