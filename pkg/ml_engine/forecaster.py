"""
QKCV Forecaster
Patch-embedded transformer encoder with quantile heads, the Adam training
loop, evaluation metrics and checkpoints.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging

import joblib
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import mean_absolute_error, mean_pinball_loss

from config import ModelConfig, OptimConfig
from errors import (
    ConfigurationError, ContractError, DimensionError, InternalError, NumericalError,
    TrainingDivergedError,
)
from .attention import AttentionConfig, Modulation, MultiHeadQKCV, ScoreMatrix, multi_head_qkcv
from .layers import Module, Linear, LayerNorm, fan_uniform
from .numeric import (
    Tape, Tensor, add, concatenate, dropout, elu, grad_of, no_grad, pinball, reduce_mean,
    reduce_sum, reshape, sub,
)
from .static_encoder import StaticCovariateEncoder, StaticFeatureVector

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAMETERS_FILE = f"parameters_v{CHECKPOINT_VERSION}.joblib"
MANIFEST_FILE = "manifest.json"


# =============================================================================
# DATA CONTAINERS
# =============================================================================

@dataclass
class ForecastBatch:
    """
    Windows of one split. ``history``/``future`` hold raw target values;
    ``loc``/``scale`` are the per-entity train-segment statistics used to
    normalize model inputs and de-normalize predictions.
    """
    history: np.ndarray                    # [B, L_in]
    future: np.ndarray                     # [B, L_out]
    statics: StaticFeatureVector           # [B, F]
    entity_ids: np.ndarray = None          # [B]
    starts: np.ndarray = None              # [B] index of the first history step
    loc: np.ndarray = None                 # [B]
    scale: np.ndarray = None               # [B]

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        B = self.history.shape[0]
        if self.future.shape[0] != B or len(self.statics) != B:
            raise DimensionError(
                f"batch parts disagree: history {self.history.shape}, future {self.future.shape}, "
                f"statics {len(self.statics)}"
            )
        if self.entity_ids is None:
            self.entity_ids = np.arange(B).astype(str)
        if self.starts is None:
            self.starts = np.zeros(B, dtype=np.int64)
        if self.loc is None:
            self.loc = np.zeros(B)
        if self.scale is None:
            self.scale = np.ones(B)
        if not (np.isfinite(self.history).all() and np.isfinite(self.future).all()):
            raise ContractError("forecast batch contains NaN or Inf")

    def __len__(self) -> int:
        return int(self.history.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def take(self, index: np.ndarray) -> "ForecastBatch":
        index = np.asarray(index, dtype=np.int64)
        return ForecastBatch(
            self.history[index], self.future[index], self.statics.take(index),
            self.entity_ids[index], self.starts[index], self.loc[index], self.scale[index],
        )

    def normalized_history(self) -> np.ndarray:
        return (self.history - self.loc[:, None]) / self.scale[:, None]

    def normalized_future(self) -> np.ndarray:
        return (self.future - self.loc[:, None]) / self.scale[:, None]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        shape = (-1,) + (1,) * (values.ndim - 1)
        return values * self.scale.reshape(shape) + self.loc.reshape(shape)

    def batches(self, batch_size: int) -> Iterator["ForecastBatch"]:
        for start in range(0, len(self), batch_size):
            yield self.take(np.arange(start, min(start + batch_size, len(self))))


@dataclass
class ForwardDetails:
    """Prediction plus the intermediate values exported for heatmaps"""
    prediction: Tensor                           # [B, L_out, Qn]
    scores: List[ScoreMatrix]                    # one per layer
    c_entity: Optional[Tensor] = None            # [B, E]
    selection_weights: Optional[Tensor] = None   # [B, F]
    modulations: List[Optional[Modulation]] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Container for forecast accuracy metrics"""
    wpe: float
    p50: float
    p90: float
    mae: float
    n_points: int = 0
    error: Optional[str] = None
    per_entity: Optional[pd.DataFrame] = None

    def as_dict(self) -> Dict[str, float]:
        return {"wpe": self.wpe, "p50": self.p50, "p90": self.p90, "mae": self.mae}


@dataclass
class TrainingHistory:
    """Per-step train loss and periodic validation P50"""
    train_loss: List[float] = field(default_factory=list)
    val_steps: List[int] = field(default_factory=list)
    val_p50: List[float] = field(default_factory=list)
    best_step: Optional[int] = None
    stopped_early: bool = False

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"step": np.arange(len(self.train_loss)), "train_loss": self.train_loss})
        val = pd.DataFrame({"step": self.val_steps, "val_p50": self.val_p50})
        return frame.merge(val, on="step", how="left")


# =============================================================================
# MODEL
# =============================================================================

class EncoderLayer(Module):
    """Post-norm block: attention and ELU feed-forward, each with residual + LayerNorm"""

    def __init__(self, attention: AttentionConfig, ffn_dim: int, rng: np.random.Generator, dtype):
        super().__init__()
        E = attention.model_dim
        self.attn = self.child("attn", MultiHeadQKCV(attention, rng, dtype))
        self.norm1 = self.child("norm1", LayerNorm(E, dtype=dtype))
        self.ffn_in = self.child("ffn_in", Linear(E, ffn_dim, rng, dtype=dtype))
        self.ffn_out = self.child("ffn_out", Linear(ffn_dim, E, rng, dtype=dtype))
        self.norm2 = self.child("norm2", LayerNorm(E, dtype=dtype))

    def __call__(self, h: Tensor, c_entity: Optional[Tensor], rate: float, rng, training: bool,
                 inject=None):
        a, scores, modulation = multi_head_qkcv(
            h, c_entity, self.attn, self.attn.config, None, inject, rng, training, return_modulation=True
        )
        h = self.norm1(add(h, dropout(a, rate, rng, training)))
        f = self.ffn_out(dropout(elu(self.ffn_in(h)), rate, rng, training))
        return self.norm2(add(h, dropout(f, rate, rng, training))), scores, modulation


class InputCompressor(Module):
    """Two-layer ELU MLP mapping [history, c_entity] back to the history width"""

    def __init__(self, input_len: int, width: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.fc_in = self.child("fc_in", Linear(input_len + width, width, rng, dtype=dtype))
        self.fc_out = self.child("fc_out", Linear(width, input_len, rng, dtype=dtype))

    def __call__(self, history: Tensor, c_entity: Tensor) -> Tensor:
        return self.fc_out(elu(self.fc_in(concatenate([history, c_entity], axis=-1))))


class QKCVForecaster(Module):
    """
    Transformer forecaster hosting QKCV attention.

    history [B, L_in] -> optional input compressor -> patches [B, L_in/P, P]
    -> Linear(P, E) + positional embedding -> n_layers encoder layers
    -> flatten -> Linear -> [B, L_out, |quantiles|]
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.dtype = np.float32 if config.precision == "float32" else np.float64
        rng = np.random.default_rng(seed)
        E, dtype = config.model_dim, self.dtype

        self.encoder = None
        if config.encoder != "none":
            if not config.static_cardinalities:
                raise ConfigurationError(f"encoder '{config.encoder}' needs static_cardinalities")
            self.encoder = self.child("encoder", StaticCovariateEncoder(
                config.static_cardinalities, E, rng, config.encoder, config.static_names, dtype
            ))
        self.compressor = None
        if config.static_path == "compressor":
            self.compressor = self.child("compressor", InputCompressor(config.input_len, E, rng, dtype))

        self.patch = self.child("patch", Linear(config.patch_len, E, rng, dtype=dtype))
        self.pos_embedding = self.register("pos_embedding", fan_uniform(rng, config.seq_len, E, dtype))
        self.layers: List[EncoderLayer] = []
        for i in range(config.n_layers):
            variant = config.variant if config.uses_qkcv(i) else "vanilla"
            attention = AttentionConfig(variant, config.heads, config.head_dim, config.causal_mask,
                                        config.dropout, config.combiner_context)
            self.layers.append(self.child(f"layers.{i}", EncoderLayer(attention, config.ffn_dim, rng, dtype)))
        self.head = self.child(
            "head", Linear(config.seq_len * E, config.horizon * len(config.quantiles), rng, dtype=dtype)
        )
        if config.combiner_init == "identity":
            self.init_identity_modulation()

    @property
    def quantiles(self) -> List[float]:
        return list(self.config.quantiles)

    def init_identity_modulation(self) -> None:
        for layer in self.layers:
            layer.attn.init_identity_modulation()

    def __call__(self, history: Union[Tensor, np.ndarray], statics: Optional[StaticFeatureVector] = None,
                 training: bool = False, rng: Optional[np.random.Generator] = None,
                 inject=None) -> Tensor:
        return self.forward(history, statics, training, rng, inject).prediction

    def forward(self, history: Union[Tensor, np.ndarray], statics: Optional[StaticFeatureVector] = None,
                training: bool = False, rng: Optional[np.random.Generator] = None,
                inject=None) -> ForwardDetails:
        """
        Args:
            history: Normalized history [B, L_in]
            statics: Category codes; required when an encoder is attached
            training: Enables dropout (needs ``rng``)
            inject: Modulation override handed to every QKCV layer

        Returns:
            ForwardDetails with prediction [B, L_out, Qn]
        """
        cfg = self.config
        x = history if isinstance(history, Tensor) else Tensor(history, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != cfg.input_len:
            raise DimensionError(f"history must be [B, {cfg.input_len}], got {x.shape}")
        B = x.shape[0]

        c_entity, selection = None, None
        if self.encoder is not None:
            if statics is None:
                raise ContractError("this model needs static features")
            c_entity, selection = self.encoder(statics)
        if self.compressor is not None:
            x = self.compressor(x, c_entity)

        h = self.patch(reshape(x, (B, cfg.seq_len, cfg.patch_len)))
        h = add(h, self.pos_embedding)
        scores, modulations = [], []
        for i, layer in enumerate(self.layers):
            context = c_entity if cfg.uses_qkcv(i) else None
            h, layer_scores, modulation = layer(h, context, cfg.dropout, rng, training,
                                                inject if cfg.uses_qkcv(i) else None)
            scores.append(layer_scores)
            modulations.append(modulation)
        out = self.head(reshape(h, (B, cfg.seq_len * cfg.model_dim)))
        prediction = reshape(out, (B, cfg.horizon, len(cfg.quantiles)))
        return ForwardDetails(prediction, scores, c_entity, selection, modulations)


def build_model(config: ModelConfig, seed: int = 0) -> QKCVForecaster:
    """Deterministically initialized forecaster"""
    config.validate()
    model = QKCVForecaster(config, seed)
    expected = parameter_count(config)
    if model.num_parameters() != expected:
        raise InternalError(f"model has {model.num_parameters()} parameters, formula gives {expected}")
    logger.debug("built %s/%s model with %d parameters", config.variant, config.encoder, expected)
    return model


def _linear_count(n: int, m: int, bias: bool = True) -> int:
    return n * m + (m if bias else 0)


def grn_parameter_count(n: int, hidden: int, m: int) -> int:
    """fc2 (n->h) + fc1 (h->h) + gate, value (h->m) + skip (n->m, only if n != m) + LayerNorm (2m)"""
    count = _linear_count(n, hidden) + _linear_count(hidden, hidden) + 2 * _linear_count(hidden, m) + 2 * m
    if n != m:
        count += _linear_count(n, m)
    return count


def encoder_parameter_count(cardinalities: Sequence[int], E: int, mode: str) -> int:
    """Embedding tables + (F variable GRNs + selection GRN) or the two MLP layers"""
    F = len(cardinalities)
    count = sum(cardinalities) * E
    if mode == "sce":
        return count + F * grn_parameter_count(E, E, E) + grn_parameter_count(F * E, E, F)
    return count + _linear_count(F * E, E) + _linear_count(E, E)


def parameter_count(config: ModelConfig) -> int:
    """
    Closed-form parameter count.

    With S = L_in / P, Qn = |quantiles| and lin(a, b) = a*b + b:
        patch          lin(P, E) + S*E
        each layer     4 lin(E, E) + lin(E, ffn) + lin(ffn, E) + 4E
                       + grn(E, E, E) when the layer runs QKCV
                       + E*E for the combiner's positional context (v3 by default)
        head           lin(S*E, L_out*Qn)
        encoder        sum(card)*E + F grn(E, E, E) + grn(F*E, E, F)       (sce)
                       sum(card)*E + lin(F*E, E) + lin(E, E)                (mlp)
        compressor     lin(L_in + E, E) + lin(E, L_in)
    """
    E, S = config.model_dim, config.seq_len
    count = _linear_count(config.patch_len, E) + S * E
    for i in range(config.n_layers):
        count += 4 * _linear_count(E, E) + _linear_count(E, config.ffn_dim) + _linear_count(config.ffn_dim, E)
        count += 4 * E
        if config.uses_qkcv(i):
            count += grn_parameter_count(E, E, E)
            if config.combiner_position:
                count += _linear_count(E, E, bias=False)
    count += _linear_count(S * E, config.horizon * len(config.quantiles))
    if config.encoder != "none":
        count += encoder_parameter_count(config.static_cardinalities, E, config.encoder)
    if config.static_path == "compressor":
        count += _linear_count(config.input_len + E, E) + _linear_count(E, config.input_len)
    return count


# =============================================================================
# LOSS AND METRICS
# =============================================================================

def _check_quantiles(quantiles: Sequence[float]) -> np.ndarray:
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or ((q <= 0) | (q >= 1)).any():
        raise ContractError(f"quantiles must lie in (0, 1): {list(quantiles)}")
    return q


def quantile_loss(pred: Tensor, y: Union[Tensor, np.ndarray], quantiles: Sequence[float]) -> Tensor:
    """
    Mean over (b, t) of sum_q pinball_q(y - pred_q).

    Args:
        pred: [B, L, Qn]
        y: [B, L]
        quantiles: Qn levels in (0, 1)
    """
    q = _check_quantiles(quantiles)
    y = y if isinstance(y, Tensor) else Tensor(y, dtype=pred.dtype)
    if pred.ndim != 3 or pred.shape[:2] != y.shape or pred.shape[2] != q.size:
        raise DimensionError(f"prediction {pred.shape} does not match target {y.shape} and {q.size} quantiles")
    error = sub(reshape(y, y.shape + (1,)), pred)
    return reduce_mean(reduce_sum(pinball(error, q.astype(pred.dtype)), axis=-1))


def _weighted_quantile(y: np.ndarray, pred: np.ndarray, q: float, denominator: float) -> float:
    return float(2.0 * mean_pinball_loss(y, pred, alpha=q) * y.size / denominator)


def metrics(pred_p50: np.ndarray, pred_p90: Optional[np.ndarray], y: np.ndarray,
            entity_ids: Optional[np.ndarray] = None) -> MetricsReport:
    """
    WPE, P50, P90 and MAE.

        WPE = sum|p50 - y| / sum|y|
        Pq  = 2 sum[q (y - p_q)+ + (1 - q)(p_q - y)+] / sum|y|
        MAE = mean|p50 - y|

    All-zero targets leave the weighted metrics undefined: they are reported
    as NaN together with an explanation in ``error``.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p50 = np.asarray(pred_p50, dtype=np.float64).reshape(-1)
    if p50.shape != y.shape or (pred_p90 is not None and np.size(pred_p90) != y.size):
        raise DimensionError(f"predictions {np.shape(pred_p50)} do not align with targets {np.shape(y)}")
    if y.size == 0:
        raise ContractError("cannot compute metrics on an empty set")
    mae = float(mean_absolute_error(y, p50))
    denominator = float(np.abs(y).sum())

    per_entity = None
    if entity_ids is not None:
        ids = np.repeat(np.asarray(entity_ids), y.size // len(entity_ids))
        per_entity = (pd.DataFrame({"entity_id": ids, "abs_err": np.abs(p50 - y), "abs_y": np.abs(y)})
                      .groupby("entity_id", sort=True).sum())
        per_entity["wpe"] = per_entity["abs_err"] / per_entity["abs_y"].replace(0.0, np.nan)
        per_entity = per_entity.reset_index()[["entity_id", "wpe"]]

    if denominator == 0.0:
        return MetricsReport(np.nan, np.nan, np.nan, mae, y.size,
                             "all targets are zero: weighted metrics are undefined", per_entity)
    wpe = float(np.abs(p50 - y).sum() / denominator)
    p50_loss = _weighted_quantile(y, p50, 0.5, denominator)
    p90_loss = np.nan
    if pred_p90 is not None:
        p90_loss = _weighted_quantile(y, np.asarray(pred_p90, dtype=np.float64).reshape(-1), 0.9, denominator)
    return MetricsReport(wpe, p50_loss, p90_loss, mae, y.size, None, per_entity)


def quantile_crossing_rate(pred: np.ndarray, quantiles: Sequence[float] = (0.5, 0.9)) -> float:
    """Fraction of positions where the 0.9 forecast falls below the median"""
    pred = np.asarray(pred)
    quantiles = list(quantiles)
    lo, hi = quantiles.index(0.5), quantiles.index(0.9)
    return float((pred[..., hi] < pred[..., lo]).mean())


# =============================================================================
# OPTIMISATION
# =============================================================================

class Adam:
    """Adam over named parameters; only the tensors it was given are ever touched"""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.t = 0

    def state_bytes(self) -> int:
        return int(sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values()))

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def trainable_parameters(model: Module) -> Dict[str, Tensor]:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def _batch_loss(model: QKCVForecaster, batch: ForecastBatch, training: bool, rng) -> Tensor:
    pred = model(batch.normalized_history(), batch.statics, training=training, rng=rng)
    return quantile_loss(pred, batch.normalized_future(), model.quantiles)


def check_tape(loss: Tensor, trainable: Dict[str, Tensor]) -> None:
    """Every gradient-requiring leaf on the tape must be a trainable parameter"""
    allowed = {id(p) for p in trainable.values()}
    leaked = [leaf.name or repr(leaf) for leaf in Tape.of(loss).leaves() if id(leaf) not in allowed]
    if leaked:
        raise InternalError(f"gradient would be materialized for frozen tensors: {leaked}")


def train(model: QKCVForecaster, train_set: ForecastBatch, val_set: Optional[ForecastBatch],
          opt_config: OptimConfig) -> Tuple[QKCVForecaster, TrainingHistory]:
    """
    Minibatch Adam with early stopping on validation P50.

    Args:
        model: Forecaster; parameters with requires_grad=False stay untouched
        train_set: Training windows
        val_set: Validation windows (early stopping disabled when empty)
        opt_config: Learning rate, steps, batch size, seed and patience

    Returns:
        (model restored to its best validation state, TrainingHistory)
    """
    if train_set.is_empty:
        raise ContractError("training split has no windows")
    rng = np.random.default_rng(opt_config.seed)
    params = trainable_parameters(model)
    optimizer = Adam(params, opt_config.learning_rate, opt_config.beta1, opt_config.beta2, opt_config.eps)
    history = TrainingHistory()
    use_val = val_set is not None and not val_set.is_empty
    best_p50, best_state, bad_evals = np.inf, None, 0
    last_finite = float("nan")

    order = rng.permutation(len(train_set))
    cursor = 0
    model.train()
    for step in range(opt_config.max_steps):
        if cursor >= len(order):
            order, cursor = rng.permutation(len(train_set)), 0
        index = order[cursor:cursor + opt_config.batch_size]
        cursor += opt_config.batch_size
        batch = train_set.take(index)

        try:
            loss = _batch_loss(model, batch, True, rng)
            check_tape(loss, params)
            grads = grad_of(loss, params.values())
        except NumericalError as exc:
            logger.error("training diverged at step %d: %s", step, exc)
            raise TrainingDivergedError(step, last_finite, str(exc)) from exc
        optimizer.step({name: grads[p].data for name, p in params.items()})
        last_finite = loss.item()
        history.train_loss.append(last_finite)
        if step % opt_config.log_every == 0:
            logger.info("step %d train loss %.6f", step, last_finite)

        if use_val and ((step + 1) % opt_config.eval_every == 0 or step + 1 == opt_config.max_steps):
            report = evaluate(model, val_set, jobs=opt_config.eval_jobs)
            model.train()
            history.val_steps.append(step)
            history.val_p50.append(report.p50)
            logger.info("step %d validation P50 %.6f", step, report.p50)
            if report.p50 < best_p50:
                best_p50, best_state, bad_evals = report.p50, model.state(), 0
                history.best_step = step
            else:
                bad_evals += 1
                if bad_evals >= opt_config.patience:
                    logger.warning("early stop at step %d (best P50 %.6f at step %s)",
                                   step, best_p50, history.best_step)
                    history.stopped_early = True
                    break

    if best_state is not None:
        model.load_state(best_state)
    model.eval()
    return model, history


# =============================================================================
# EVALUATION
# =============================================================================

def _predict_shard(model: QKCVForecaster, batch: ForecastBatch) -> np.ndarray:
    with no_grad():
        return model(batch.normalized_history(), batch.statics, training=False).data


def predict(model: QKCVForecaster, dataset: ForecastBatch, batch_size: int = 256, jobs: int = 1) -> np.ndarray:
    """De-normalized quantile forecasts [N, L_out, Qn], in dataset order"""
    if dataset.is_empty:
        raise ContractError("cannot predict on an empty split")
    was_training = model.training
    model.eval()
    shards = list(dataset.batches(batch_size))
    if jobs > 1 and len(shards) > 1:
        outputs = Parallel(n_jobs=jobs, prefer="threads")(delayed(_predict_shard)(model, s) for s in shards)
    else:
        outputs = [_predict_shard(model, s) for s in shards]
    model.train(was_training)
    return dataset.denormalize(np.concatenate(outputs, axis=0).astype(np.float64))


def evaluate(model: QKCVForecaster, test_set: ForecastBatch, batch_size: int = 256, jobs: int = 1) -> MetricsReport:
    """Metrics of the de-normalized forecasts over the whole split"""
    if test_set is None or test_set.is_empty:
        raise ContractError("cannot evaluate an empty split")
    pred = predict(model, test_set, batch_size, jobs)
    quantiles = model.quantiles
    p90 = pred[..., quantiles.index(0.9)] if 0.9 in quantiles else None
    return metrics(pred[..., quantiles.index(0.5)], p90, test_set.future, test_set.entity_ids)


def forecast_frame(model: QKCVForecaster, dataset: ForecastBatch, batch_size: int = 256,
                   jobs: int = 1) -> pd.DataFrame:
    """
    Long forecasts: one row per (window, horizon step) with the actual value
    and one p<100 q> column per quantile, all de-normalized.
    """
    pred = predict(model, dataset, batch_size, jobs)
    N, L_out, _ = pred.shape
    starts = dataset.starts if dataset.starts is not None else np.zeros(N, dtype=np.int64)
    ids = dataset.entity_ids if dataset.entity_ids is not None else np.arange(N)
    frame = pd.DataFrame({
        "entity_id": np.repeat(np.asarray(ids), L_out),
        "start": np.repeat(starts, L_out),
        "step": np.tile(np.arange(L_out), N),
        "y": dataset.future.reshape(-1),
    })
    for k, q in enumerate(model.quantiles):
        frame[f"p{round(q * 100)}"] = pred[..., k].reshape(-1)
    return frame


# =============================================================================
# CHECKPOINTS
# =============================================================================

def state_hash(state: Dict[str, np.ndarray]) -> str:
    """SHA-256 over parameter names, shapes, dtypes and bytes, in name order"""
    digest = hashlib.sha256()
    for name in sorted(state):
        array = np.ascontiguousarray(state[name])
        digest.update(f"{name}:{array.shape}:{array.dtype}".encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def save_checkpoint(model: QKCVForecaster, directory: Union[str, Path], seed: Optional[int] = None) -> Dict:
    """
    Write ``parameters_v1.joblib`` (name -> array) and ``manifest.json``.

    The manifest holds format version, config, parameter names, shapes,
    dtypes, seed and content hash; nothing time-dependent, so repeated runs
    produce identical files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed if seed is None else seed,
        "parameters": [
            {"name": name, "shape": list(array.shape), "dtype": str(array.dtype)}
            for name, array in state.items()
        ],
        "num_parameters": model.num_parameters(),
        "sha256": state_hash(state),
    }
    joblib.dump(state, directory / PARAMETERS_FILE)
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("checkpoint saved to %s (%d parameters)", directory, manifest["num_parameters"])
    return manifest


def load_checkpoint(directory: Union[str, Path]) -> Tuple[QKCVForecaster, Dict]:
    """Rebuild a model from a checkpoint directory, verifying its content hash"""
    directory = Path(directory)
    with open(directory / MANIFEST_FILE, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {manifest.get('format_version')}")
    state = joblib.load(directory / f"parameters_v{manifest['format_version']}.joblib")
    if state_hash(state) != manifest["sha256"]:
        raise InternalError(f"checkpoint {directory} does not match its manifest hash")
    model = build_model(ModelConfig(**manifest["config"]), manifest["seed"])
    model.load_state(state)
    return model, manifest
