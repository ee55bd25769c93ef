"""
QKCV Forecasting Lab - Configuration
Model, optimisation, data and fine-tuning settings plus the run-document loader.
"""

from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import List, Dict, Any, Optional, Iterable, Tuple
import os

import yaml
from dotenv import load_dotenv

from errors import ConfigurationError

load_dotenv()

OUTPUT_ROOT_ENV = "QKCV_OUTPUT_ROOT"

ATTENTION_VARIANTS = ("vanilla", "v1", "v2", "v3")
ENCODER_MODES = ("sce", "mlp", "none")
STATIC_PATHS = ("attention", "compressor")
COMBINER_CONTEXTS = ("auto", "none", "position")
FREQUENCIES = {"daily": "D", "weekly": "7D"}
FINETUNE_MODES = ("frozen", "pl", "fp", "pl+qkcv", "fp+qkcv", "compressor-mlp", "compressor-sce")


# =============================================================================
# MODEL CONFIGURATION
# =============================================================================

@dataclass
class ModelConfig:
    """Forecaster architecture"""

    input_len: int = 24             # L_in
    horizon: int = 8                # L_out
    model_dim: int = 32             # E = heads * head_dim
    heads: int = 4
    head_dim: int = 8
    n_layers: int = 2
    ffn_dim: int = 64
    variant: str = "vanilla"        # "vanilla", "v1", "v2", "v3"
    quantiles: List[float] = None
    dropout: float = 0.1
    encoder: str = "none"           # "sce", "mlp", "none"
    static_path: str = "attention"  # "attention" (QKCV) or "compressor" (input ablation)
    patch_len: int = 1
    causal_mask: bool = False
    qkcv_layers: Optional[List[int]] = None   # None = every layer
    combiner_init: str = "standard"           # "standard" or "identity"
    combiner_context: str = "auto"            # "auto", "none" or "position"; auto = position for v3
    static_cardinalities: List[int] = None    # table sizes, reserved unknown slot included
    static_names: List[str] = None
    precision: str = "float64"

    def __post_init__(self):
        if self.quantiles is None:
            self.quantiles = [0.5, 0.9]
        if self.static_cardinalities is None:
            self.static_cardinalities = []
        if self.static_names is None:
            self.static_names = [f"static_{i}" for i in range(len(self.static_cardinalities))]
        self.quantiles = [float(q) for q in self.quantiles]
        self.validate()

    @property
    def seq_len(self) -> int:
        """Attention sequence length after patching"""
        return self.input_len // self.patch_len

    @property
    def n_static(self) -> int:
        return len(self.static_cardinalities)

    def uses_qkcv(self, layer: int) -> bool:
        if self.variant == "vanilla" or self.static_path != "attention":
            return False
        return self.qkcv_layers is None or layer in self.qkcv_layers

    @property
    def combiner_position(self) -> bool:
        """Whether the combiner GRN reads a positional context"""
        if self.combiner_context == "auto":
            return self.variant == "v3"
        return self.combiner_context == "position"

    def validate(self):
        if min(self.input_len, self.horizon, self.heads, self.head_dim, self.patch_len) < 1:
            raise ConfigurationError("input_len, horizon, heads, head_dim and patch_len must be positive")
        if self.model_dim != self.heads * self.head_dim:
            raise ConfigurationError(
                f"model_dim E={self.model_dim} must equal heads*head_dim = {self.heads}*{self.head_dim}"
            )
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.ffn_dim < 1:
            raise ConfigurationError(f"ffn_dim must be >= 1, got {self.ffn_dim}")
        if self.input_len % self.patch_len:
            raise ConfigurationError(
                f"input_len {self.input_len} is not divisible by patch_len {self.patch_len}"
            )
        if not self.quantiles or any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ConfigurationError(f"quantiles must lie in (0, 1): {self.quantiles}")
        if any(b <= a for a, b in zip(self.quantiles, self.quantiles[1:])):
            raise ConfigurationError(f"quantiles must be strictly increasing: {self.quantiles}")
        if 0.5 not in self.quantiles:
            raise ConfigurationError("quantiles must include the median 0.5")
        if self.variant not in ATTENTION_VARIANTS:
            raise ConfigurationError(f"unknown attention variant '{self.variant}'")
        if self.encoder not in ENCODER_MODES:
            raise ConfigurationError(f"unknown encoder mode '{self.encoder}'")
        if self.static_path not in STATIC_PATHS:
            raise ConfigurationError(f"unknown static path '{self.static_path}'")
        if self.combiner_init not in ("standard", "identity"):
            raise ConfigurationError(f"unknown combiner_init '{self.combiner_init}'")
        if self.combiner_context not in COMBINER_CONTEXTS:
            raise ConfigurationError(f"unknown combiner_context '{self.combiner_context}'")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"precision must be float64 or float32, got '{self.precision}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.variant != "vanilla" and self.encoder == "none":
            raise ConfigurationError(f"variant {self.variant} needs a static encoder (sce or mlp)")
        if self.static_path == "compressor":
            if self.encoder == "none":
                raise ConfigurationError("compressor path needs a static encoder (sce or mlp)")
            if self.variant != "vanilla":
                raise ConfigurationError("compressor path feeds statics into the input; variant must be vanilla")
        if self.variant == "vanilla" and self.encoder != "none" and self.static_path == "attention":
            raise ConfigurationError("an encoder without a QKCV variant or compressor path is never used")
        if self.qkcv_layers is not None and any(not 0 <= i < self.n_layers for i in self.qkcv_layers):
            raise ConfigurationError(f"qkcv_layers {self.qkcv_layers} outside 0..{self.n_layers - 1}")
        if len(self.static_names) != len(self.static_cardinalities):
            raise ConfigurationError("static_names and static_cardinalities differ in length")
        if any(c < 1 for c in self.static_cardinalities):
            raise ConfigurationError(f"cardinalities must be positive: {self.static_cardinalities}")


# =============================================================================
# OPTIMISATION CONFIGURATION
# =============================================================================

@dataclass
class OptimConfig:
    """Adam training loop settings"""

    learning_rate: float = 1e-3
    max_steps: int = 1000
    batch_size: int = 64
    seed: int = 0
    patience: int = 5           # validation evaluations without P50 improvement
    eval_every: int = 50
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_jobs: int = 1          # thread shards for evaluation

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.patience < 1 \
                or self.log_every < 1:
            raise ConfigurationError("max_steps >= 0 and batch_size, eval_every, log_every, patience >= 1 required")


# =============================================================================
# DATA CONFIGURATION
# =============================================================================

@dataclass
class SyntheticSpec:
    """Category-driven seasonal panel generator"""

    n_categories: List[int] = None     # one entry per static variable
    n_entities: int = 64
    length: int = 200                  # T
    base_range: Tuple[float, float] = (20.0, 60.0)
    amplitude_range: Tuple[float, float] = (5.0, 25.0)
    periods: List[int] = None
    slope_range: Tuple[float, float] = (-0.02, 0.02)
    noise_sigma: float = 3.0
    informative: Optional[List[int]] = None   # variables carrying signal, None = all
    start_date: str = "2020-01-01"
    frequency: str = "daily"
    seed: int = 0

    def __post_init__(self):
        if self.n_categories is None:
            self.n_categories = [8]
        if self.periods is None:
            self.periods = [12, 18, 24, 36]
        self.base_range = tuple(self.base_range)
        self.amplitude_range = tuple(self.amplitude_range)
        self.slope_range = tuple(self.slope_range)
        if not self.n_categories or min(self.n_categories) < 1:
            raise ConfigurationError(f"n_categories must be positive: {self.n_categories}")
        if self.n_entities < 2 * max(self.n_categories):
            raise ConfigurationError(
                f"n_entities={self.n_entities} must be >= 2 * n_categories={max(self.n_categories)}"
            )
        if self.length < 2:
            raise ConfigurationError(f"series length must be >= 2, got {self.length}")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if min(self.periods) < 1:
            raise ConfigurationError("periods must be positive")
        if self.informative is not None and any(
            not 0 <= i < len(self.n_categories) for i in self.informative
        ):
            raise ConfigurationError(f"informative variables out of range: {self.informative}")
        if self.frequency not in FREQUENCIES:
            raise ConfigurationError(f"frequency must be one of {list(FREQUENCIES)}")


@dataclass
class DatasetSchema:
    """Column layout of a user-supplied panel CSV"""

    entity_column: str = "entity_id"
    timestamp_column: str = "timestamp"
    target_column: str = "target"
    frequency: str = "daily"
    static_columns: List[str] = None
    cardinalities: Optional[List[Optional[int]]] = None   # declared known categories

    def __post_init__(self):
        if self.static_columns is None:
            self.static_columns = []
        if self.frequency not in FREQUENCIES:
            raise ConfigurationError(f"frequency must be one of {list(FREQUENCIES)}")
        if self.cardinalities is not None and len(self.cardinalities) != len(self.static_columns):
            raise ConfigurationError("cardinalities must have one entry per static column")


@dataclass
class DataConfig:
    """Where the panel comes from and how it is split"""

    source: str = "synthetic"           # "synthetic" or "csv"
    path: Optional[str] = None
    vocabulary_path: Optional[str] = None
    schema: DatasetSchema = field(default_factory=DatasetSchema)
    boundaries: Optional[List[int]] = None   # (train_end, val_end) time indices
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def __post_init__(self):
        if isinstance(self.schema, dict):
            self.schema = _build(DatasetSchema, self.schema, "data.schema")
        if self.source not in ("synthetic", "csv"):
            raise ConfigurationError(f"data.source must be synthetic or csv, got '{self.source}'")
        if self.source == "csv" and not self.path:
            raise ConfigurationError("data.path is required when data.source is csv")
        if self.boundaries is not None and len(self.boundaries) != 2:
            raise ConfigurationError("data.boundaries must be [train_end, val_end]")
        if self.boundaries is not None and any(isinstance(b, bool) or not isinstance(b, int) for b in self.boundaries):
            raise ConfigurationError(f"data.boundaries must be integer time indices, got {self.boundaries}")

    def resolve_boundaries(self, length: int) -> Tuple[int, int]:
        if self.boundaries is not None:
            return int(self.boundaries[0]), int(self.boundaries[1])
        train_end = int(length * self.train_fraction)
        val_end = int(length * (self.train_fraction + self.val_fraction))
        return train_end, val_end


# =============================================================================
# FINE-TUNING CONFIGURATION
# =============================================================================

@dataclass
class FinetuneConfig:
    """Frozen-base experiments"""

    base_layers: int = 4
    base_ffn_dim: int = 128
    patch_len: int = 4
    pretrain_steps: int = 2000
    encoder: str = "sce"
    modes: List[str] = None
    variants: List[str] = None
    base_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.modes is None:
            self.modes = ["frozen", "pl", "pl+qkcv", "fp+qkcv", "compressor-mlp", "compressor-sce"]
        if self.variants is None:
            self.variants = ["v1", "v2", "v3"]
        if self.encoder not in ("sce", "mlp"):
            raise ConfigurationError(f"finetune.encoder must be sce or mlp, got '{self.encoder}'")
        if any(v not in ("v1", "v2", "v3") for v in self.variants):
            raise ConfigurationError(f"finetune.variants must be QKCV variants: {self.variants}")
        if any(m not in FINETUNE_MODES for m in self.modes):
            raise ConfigurationError(f"finetune.modes must be drawn from {list(FINETUNE_MODES)}: {self.modes}")

    def base_model(self, model: ModelConfig) -> ModelConfig:
        """Category-free base architecture derived from the run's model section"""
        return replace(
            model, n_layers=self.base_layers, ffn_dim=self.base_ffn_dim, patch_len=self.patch_len,
            variant="vanilla", encoder="none", static_path="attention", qkcv_layers=None,
            combiner_init="standard",
        )


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

@dataclass
class RunConfig:
    """Run-level settings"""

    seed: int = 0
    name: str = "qkcv"
    output_dir: Optional[str] = None


@dataclass
class ExperimentConfig:
    """One run document"""

    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataConfig = field(default_factory=DataConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "ExperimentConfig":
        document = document or {}
        sections = {f.name: f.type for f in fields(cls)}
        unknown = set(document) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        builders = {
            "model": ModelConfig, "optim": OptimConfig, "synthetic": SyntheticSpec,
            "data": DataConfig, "finetune": FinetuneConfig, "run": RunConfig,
        }
        return cls(**{
            name: _build(builder, document.get(name) or {}, name)
            for name, builder in builders.items()
        })


def _build(cls, values: Dict[str, Any], section: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"config section '{section}' must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid values in '{section}': {exc}") from exc


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def apply_overrides(document: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply ``section.field=value`` overrides to a raw config document.

    Values are parsed as YAML scalars, so ``model.quantiles=[0.1,0.5]`` gives a list.
    """
    document = _plain(document or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if len(keys) < 2:
            raise ConfigurationError(f"override path '{path}' must name section.field")
        node = document
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override path '{path}' crosses a non-mapping value")
        try:
            node[keys[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"override '{item}' has an unparseable value: {exc}") from exc
    return document


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """
    Load a run document and apply dotted overrides.

    Args:
        path: YAML file with sections model/optim/synthetic/data/finetune/run
        overrides: Iterable of "section.field=value" strings

    Returns:
        Validated ExperimentConfig
    """
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config document {path}: {exc}") from exc
    return ExperimentConfig.from_dict(apply_overrides(document, overrides))


def output_root() -> Path:
    """Output root from QKCV_OUTPUT_ROOT (or .env), default ./outputs"""
    return Path(os.getenv(OUTPUT_ROOT_ENV, "outputs"))


# =============================================================================
# DATA COLUMN MAPPINGS
# =============================================================================

class ColumnConfig:
    """Column names of the long panel format"""

    ENTITY_ID = "entity_id"
    TIMESTAMP = "timestamp"
    TARGET = "target"

    # Reserved vocabulary entry for categories unseen when the vocabulary was built
    UNKNOWN_CATEGORY = "<unknown>"

    METRICS_COLUMNS = ["run_id", "model", "variant", "mode", "wpe", "p50", "p90", "mae"]
    FINETUNE_COLUMNS = ["mode", "variant", "trainable_params", "total_params", "wpe", "mae"]


# =============================================================================
# INSTANTIATE CONFIGS
# =============================================================================

model_config = ModelConfig()
optim_config = OptimConfig()
synthetic_spec = SyntheticSpec()
finetune_config = FinetuneConfig()
column_config = ColumnConfig()
