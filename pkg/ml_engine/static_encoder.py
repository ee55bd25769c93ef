"""
Static Covariate Encoder
Turns per-entity categorical codes into the static embedding C:
embedding tables -> variable selection -> weighted per-variable GRN outputs.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import logging
import numpy as np
import pandas as pd

from errors import ConfigurationError, ContractError, DataError, DimensionError
from .layers import Module, Linear, LayerNorm, fan_uniform
from .numeric import (
    Tensor, add, broadcast_to, concatenate, elu, embedding_lookup, mul, no_grad,
    reduce_sum, reshape, sigmoid, softmax_lastdim,
)

logger = logging.getLogger(__name__)

ENCODER_SCE = "sce"
ENCODER_MLP = "mlp"


@dataclass
class StaticFeatureVector:
    """Integer category codes, one column per static variable"""
    values: np.ndarray                 # [B, F]
    cardinalities: List[int]           # table sizes (reserved unknown slot included)
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1) if len(self.cardinalities) == 1 \
                else self.values.reshape(1, -1)
        if not self.names:
            self.names = [f"static_{i}" for i in range(len(self.cardinalities))]
        self.validate()

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_features(self) -> int:
        return len(self.cardinalities)

    def validate(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != len(self.cardinalities):
            raise DataError(
                f"static codes of shape {self.values.shape} do not match {len(self.cardinalities)} variables"
            )
        for f, (name, card) in enumerate(zip(self.names, self.cardinalities)):
            column = self.values[:, f]
            bad = (column < 0) | (column >= card)
            if bad.any():
                raise DataError(
                    f"static variable '{name}' has code {int(column[bad][0])} outside [0, {card})"
                )

    def take(self, index: np.ndarray) -> "StaticFeatureVector":
        return StaticFeatureVector(self.values[index], list(self.cardinalities), list(self.names))


@dataclass
class ImportanceReport:
    """Mean variable-selection weight per static variable"""
    names: List[str]
    weights: np.ndarray
    n_samples: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"variable_name": self.names, "mean_weight": self.weights})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def top(self) -> str:
        return self.names[int(np.argmax(self.weights))]


# =============================================================================
# GATED RESIDUAL NETWORK
# =============================================================================

class GatedResidualNetwork(Module):
    """
    GRN(a, c) = LayerNorm(skip(a) + GLU(W1 ELU(W2 a + W3 c + b2) + b1))

    GLU(x) = sigmoid(W4 x + b4) * (W5 x + b5). The skip is the identity when
    input and output widths agree, otherwise a learned linear map.
    """

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, rng: np.random.Generator,
                 context_dim: Optional[int] = None, dtype=np.float64):
        super().__init__()
        self.input_dim, self.hidden_dim, self.output_dim = input_dim, hidden_dim, output_dim
        self.fc2 = self.child("fc2", Linear(input_dim, hidden_dim, rng, dtype=dtype))
        self.context = (self.child("context", Linear(context_dim, hidden_dim, rng, bias=False, dtype=dtype))
                        if context_dim else None)
        self.fc1 = self.child("fc1", Linear(hidden_dim, hidden_dim, rng, dtype=dtype))
        self.gate = self.child("gate", Linear(hidden_dim, output_dim, rng, dtype=dtype))
        self.value = self.child("value", Linear(hidden_dim, output_dim, rng, dtype=dtype))
        self.skip = (self.child("skip", Linear(input_dim, output_dim, rng, dtype=dtype))
                     if input_dim != output_dim else None)
        self.norm = self.child("norm", LayerNorm(output_dim, dtype=dtype))

    def __call__(self, a: Tensor, context: Optional[Tensor] = None) -> Tensor:
        return grn(a, context, self)


def grn(a: Tensor, context: Optional[Tensor], params: GatedResidualNetwork) -> Tensor:
    """Apply a gated residual network over the last axis of ``a``"""
    if a.shape[-1] != params.input_dim:
        raise DimensionError(f"GRN expects width {params.input_dim}, got input {a.shape}")
    hidden = params.fc2(a)
    if context is not None:
        if params.context is None:
            raise DimensionError("GRN was built without a context projection")
        if context.shape[:-1] != a.shape[:-1]:
            raise DimensionError(f"GRN context {context.shape} does not match input {a.shape}")
        hidden = add(hidden, params.context(context))
    hidden = params.fc1(elu(hidden))
    gated = mul(sigmoid(params.gate(hidden)), params.value(hidden))
    residual = a if params.skip is None else params.skip(a)
    return params.norm(add(residual, gated))


# =============================================================================
# STATIC COVARIATE ENCODER
# =============================================================================

class StaticCovariateEncoder(Module):
    """
    Embedding tables plus either a variable selection network (``sce``) or a
    two-layer MLP over the concatenated embeddings (``mlp``).

    Every table shares the output width E, so the selection-weighted sum of
    per-variable GRN outputs is already the entity embedding.
    """

    def __init__(self, cardinalities: Sequence[int], width: int, rng: np.random.Generator,
                 mode: str = ENCODER_SCE, names: Optional[Sequence[str]] = None, dtype=np.float64):
        super().__init__()
        if mode not in (ENCODER_SCE, ENCODER_MLP):
            raise ConfigurationError(f"unknown static encoder mode '{mode}'")
        if not cardinalities:
            raise ConfigurationError("a static encoder needs at least one categorical variable")
        self.mode = mode
        self.width = width
        self.cardinalities = [int(c) for c in cardinalities]
        self.names = list(names) if names else [f"static_{i}" for i in range(len(self.cardinalities))]
        self.dtype = dtype
        n = len(self.cardinalities)

        self.tables = [self.register(f"embedding_{i}", fan_uniform(rng, card, width, dtype))
                       for i, card in enumerate(self.cardinalities)]
        if mode == ENCODER_SCE:
            self.variable_grns = [
                self.child(f"variable_grn_{i}", GatedResidualNetwork(width, width, width, rng, dtype=dtype))
                for i in range(n)
            ]
            self.selection = self.child(
                "selection", GatedResidualNetwork(n * width, width, n, rng, dtype=dtype)
            )
        else:
            self.mlp_in = self.child("mlp_in", Linear(n * width, width, rng, dtype=dtype))
            self.mlp_out = self.child("mlp_out", Linear(width, width, rng, dtype=dtype))

    @property
    def n_features(self) -> int:
        return len(self.cardinalities)

    def embed(self, statics: StaticFeatureVector) -> List[Tensor]:
        if list(statics.cardinalities) != self.cardinalities:
            raise DataError(
                f"static cardinalities {statics.cardinalities} do not match encoder {self.cardinalities}"
            )
        statics.validate()
        return [embedding_lookup(statics.values[:, i], table) for i, table in enumerate(self.tables)]

    def __call__(self, statics: StaticFeatureVector) -> Tuple[Tensor, Optional[Tensor]]:
        if self.mode == ENCODER_SCE:
            return static_covariate_encode(statics, self)
        return mlp_encode(statics, self), None

    def permuted(self, order: Sequence[int]) -> "StaticCovariateEncoder":
        """
        Encoder over the variables reordered by ``order``, carrying each
        variable's parameter blocks along so the embedding is unchanged.
        """
        order = list(order)
        n, E = self.n_features, self.width
        if sorted(order) != list(range(n)):
            raise ContractError(f"order {order} is not a permutation of {n} variables")
        clone = StaticCovariateEncoder(
            [self.cardinalities[i] for i in order], E, np.random.default_rng(0), self.mode,
            [self.names[i] for i in order], self.dtype,
        )
        state = self.state()
        rows = np.concatenate([np.arange(i * E, (i + 1) * E) for i in order])
        new_state = {}
        for new_i, old_i in enumerate(order):
            new_state[f"embedding_{new_i}"] = state[f"embedding_{old_i}"]
            if self.mode == ENCODER_SCE:
                prefix = f"variable_grn_{old_i}."
                for name, value in state.items():
                    if name.startswith(prefix):
                        new_state[f"variable_grn_{new_i}." + name[len(prefix):]] = value
        for name, value in state.items():
            if name.startswith("selection."):
                if name in ("selection.fc2.weight", "selection.skip.weight"):
                    value = value[rows]
                if name.split(".")[1] in ("gate", "value", "skip", "norm"):
                    value = value[..., order]
                new_state[name] = value
            elif name == "mlp_in.weight":
                new_state[name] = value[rows]
            elif name.startswith("mlp_"):
                new_state[name] = value
        clone.load_state(new_state)
        return clone


def _check_mode(params: StaticCovariateEncoder, mode: str) -> None:
    if params.mode != mode:
        raise ContractError(f"encoder is in '{params.mode}' mode, '{mode}' required")


def variable_selection_weights(embeddings: List[Tensor], params: StaticCovariateEncoder) -> Tensor:
    """Softmax selection weights [B, F] from the flattened embeddings"""
    flat = concatenate(embeddings, axis=-1)
    return softmax_lastdim(params.selection(flat))


def static_covariate_encode(batch: StaticFeatureVector,
                            params: StaticCovariateEncoder) -> Tuple[Tensor, Tensor]:
    """
    Static covariate encoding.

    Args:
        batch: Codes [B, F]
        params: Encoder in ``sce`` mode

    Returns:
        (C_entity [B, E], selection weights [B, F])
    """
    _check_mode(params, ENCODER_SCE)
    return select_and_combine(params.embed(batch), params)


def select_and_combine(embeddings: List[Tensor], params: StaticCovariateEncoder) -> Tuple[Tensor, Tensor]:
    """Variable selection over per-variable embeddings [B, E] each"""
    weights = variable_selection_weights(embeddings, params)
    B, E = embeddings[0].shape[0], params.width
    processed = concatenate(
        [reshape(g(e), (B, 1, E)) for g, e in zip(params.variable_grns, embeddings)], axis=1
    )
    c_entity = reduce_sum(mul(processed, reshape(weights, (B, params.n_features, 1))), axis=1)
    return c_entity, weights


def mlp_encode(batch: StaticFeatureVector, params: StaticCovariateEncoder) -> Tensor:
    """Concatenated embeddings through Linear -> ELU -> Linear, giving [B, E]"""
    _check_mode(params, ENCODER_MLP)
    flat = concatenate(params.embed(batch), axis=-1)
    return params.mlp_out(elu(params.mlp_in(flat)))


def expand_static(c_entity: Tensor, L: int, H: int, D: int) -> Tensor:
    """
    Repeat the entity embedding over L positions and split it into heads.

    result[b, l, h, d] == c_entity[b, h*D + d] for every l.
    """
    if c_entity.ndim != 2:
        raise DimensionError(f"entity embedding must be [B, E], got {c_entity.shape}")
    B, E = c_entity.shape
    if E != H * D:
        raise ConfigurationError(f"embedding width E={E} must equal H*D = {H}*{D}")
    per_head = reshape(c_entity, (B, 1, H, D))
    if L == 1:
        return per_head
    return broadcast_to(per_head, (B, L, H, D))


def feature_importance(dataset: Union[StaticFeatureVector, object],
                       params: StaticCovariateEncoder, batch_size: int = 1024) -> ImportanceReport:
    """
    Mean variable-selection weight of every static variable over a dataset.

    Args:
        dataset: StaticFeatureVector, or anything exposing one as ``.statics``
        params: Trained encoder in ``sce`` mode

    Returns:
        ImportanceReport with one weight per variable, summing to 1
    """
    _check_mode(params, ENCODER_SCE)
    statics = dataset if isinstance(dataset, StaticFeatureVector) else getattr(dataset, "statics", None)
    if statics is None or len(statics) == 0:
        raise ContractError("feature importance needs a non-empty dataset")

    total = np.zeros(params.n_features)
    with no_grad():
        for start in range(0, len(statics), batch_size):
            chunk = statics.take(np.arange(start, min(start + batch_size, len(statics))))
            weights = variable_selection_weights(params.embed(chunk), params)
            total += weights.data.sum(axis=0)
    mean = total / len(statics)
    logger.info("static importance: %s", dict(zip(params.names, np.round(mean, 4))))
    return ImportanceReport(list(params.names), mean, len(statics))
