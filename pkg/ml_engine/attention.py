"""
QKCV Attention
Scaled dot-product attention with a static categorical embedding injected
into the key path, plus the multi-head block that hosts it.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
import pandas as pd
from scipy.special import logit

from errors import ConfigurationError, ContractError, DimensionError
from .layers import Module, Linear
from .numeric import (
    Tensor, add, as_tensor, batched_matmul, broadcast_to, dropout, masked_fill, mul, reshape, scale,
    sigmoid, softmax_lastdim, swapaxes, transpose,
)
from .static_encoder import GatedResidualNetwork, expand_static

logger = logging.getLogger(__name__)

# v2 identity init: sigmoid(bias) = 1 - eps
V2_IDENTITY_EPS = 1e-3


class AttentionVariant(str, Enum):
    VANILLA = "vanilla"
    V1 = "v1"      # K * GRN(C)
    V2 = "v2"      # K * sigmoid(GRN(C))
    V3 = "v3"      # K + GRN(C), divisor sqrt(2 d_k)

    @classmethod
    def parse(cls, value: Union[str, "AttentionVariant"]) -> "AttentionVariant":
        try:
            return cls(value)
        except ValueError:
            raise ContractError(f"unknown attention variant '{value}'") from None


@dataclass
class AttentionConfig:
    """Variant selector and head geometry (E = heads * head_dim, d_k = head_dim)"""
    variant: AttentionVariant = AttentionVariant.VANILLA
    heads: int = 4
    head_dim: int = 8
    causal_mask: bool = False
    dropout: float = 0.0
    combiner_context: str = "auto"     # "auto" (position for v3), "none" or "position"

    def __post_init__(self):
        self.variant = AttentionVariant.parse(self.variant)
        if self.combiner_context not in ("auto", "none", "position"):
            raise ConfigurationError(f"unknown combiner_context '{self.combiner_context}'")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigurationError(f"heads and head_dim must be positive, got {self.heads}, {self.head_dim}")

    @property
    def d_k(self) -> int:
        return self.head_dim

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def combiner_position(self) -> bool:
        if self.variant is AttentionVariant.VANILLA:
            return False
        if self.combiner_context == "auto":
            return self.variant is AttentionVariant.V3
        return self.combiner_context == "position"


@dataclass
class ScoreMatrix:
    """
    Post-softmax attention weights [B, H, Lq, Lk] and the logits they came from.
    Weights are recorded before attention dropout.
    """
    values: Tensor
    logits: Optional[Tensor] = None
    divisor: float = 1.0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def row_sums(self) -> np.ndarray:
        return self.values.data.sum(axis=-1)

    def validate(self, atol: float = 1e-6) -> None:
        validate_rows(self.values.data, atol)

    def to_frame(self) -> pd.DataFrame:
        """Long form: one row per flattened (b, h, i, j) index"""
        data = self.values.data
        return pd.DataFrame({"index": np.arange(data.size), "value": data.reshape(-1)})

    def to_heatmap_frame(self, row_labels: Optional[Sequence] = None) -> pd.DataFrame:
        """One row per sample, columns h<h>_q<i>_k<j>"""
        B, H, Lq, Lk = self.values.shape
        columns = [f"h{h}_q{i}_k{j}" for h in range(H) for i in range(Lq) for j in range(Lk)]
        frame = pd.DataFrame(self.values.data.reshape(B, -1), columns=columns)
        if row_labels is not None:
            frame.insert(0, "sample", list(row_labels))
        return frame

    @classmethod
    def from_heatmap_frame(cls, frame: pd.DataFrame, atol: float = 1e-6) -> "ScoreMatrix":
        """Rebuild from a heatmap frame, checking every row sums to 1"""
        columns = [c for c in frame.columns if c.startswith("h") and "_q" in c]
        last = columns[-1]
        h, q, k = (int(part[1:]) for part in last.split("_"))
        values = frame[columns].to_numpy(dtype=np.float64).reshape(len(frame), h + 1, q + 1, k + 1)
        validate_rows(values, atol)
        return cls(Tensor(values))


def validate_rows(values: np.ndarray, atol: float = 1e-6) -> None:
    if (values < 0).any():
        raise ContractError("attention weights must be nonnegative")
    worst = np.abs(values.sum(axis=-1) - 1.0).max() if values.size else 0.0
    if worst > atol:
        raise ContractError(f"attention rows do not sum to 1 (max deviation {worst:.3e})")


@dataclass
class Modulation:
    """The element-wise operand combined with K: multiplicative (v1, v2) or additive (v3)"""
    mode: str                # "multiplicative" or "additive"
    values: Tensor           # [B, Lk, H, D]

    def __post_init__(self):
        if self.mode not in ("multiplicative", "additive"):
            raise ContractError(f"unknown modulation mode '{self.mode}'")
        self.values = as_tensor(self.values)

    @classmethod
    def identity(cls, shape: Sequence[int], variant: Union[str, AttentionVariant]) -> "Modulation":
        variant = AttentionVariant.parse(variant)
        if variant is AttentionVariant.V3:
            return cls("additive", Tensor(np.zeros(shape)))
        return cls("multiplicative", Tensor(np.ones(shape)))

    def is_time_constant(self) -> bool:
        v = self.values.data
        return bool(np.array_equal(v, np.broadcast_to(v[:, :1], v.shape)))

    def to_frame(self, row_labels: Sequence, label_name: str = "sample") -> pd.DataFrame:
        """
        One row per (sample, key position), columns h<h>_d<d>. A time-constant
        modulation keeps position 0 only.
        """
        B, L, H, D = self.values.shape
        positions = [0] if self.is_time_constant() else list(range(L))
        data = self.values.data[:, positions].reshape(B * len(positions), H * D)
        frame = pd.DataFrame(data, columns=[f"h{h}_d{d}" for h in range(H) for d in range(D)])
        frame.insert(0, "position", np.tile(positions, B))
        frame.insert(0, label_name, np.repeat(np.asarray(list(row_labels)), len(positions)))
        return frame


def causal_mask(lq: int, lk: int) -> np.ndarray:
    """True where a query may not see the key (j > i)"""
    return np.triu(np.ones((lq, lk), dtype=bool), k=1)


def position_code(length: int, width: int) -> np.ndarray:
    """Fixed sinusoidal code [length, width]: sin on even columns, cos on odd ones"""
    code = np.zeros((length, width))
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, width, 2) * (-math.log(10000.0) / width))
    code[:, 0::2] = np.sin(pos * div)
    code[:, 1::2] = np.cos(pos * div)[:, :width // 2]
    return code


# =============================================================================
# SCALED DOT-PRODUCT ATTENTION
# =============================================================================

def dot_product_attention(Q: Tensor, K: Tensor, V: Tensor, mask: Optional[np.ndarray] = None,
                          divisor: Optional[float] = None, dropout_rate: float = 0.0,
                          rng: Optional[np.random.Generator] = None,
                          training: bool = False) -> Tuple[Tensor, ScoreMatrix]:
    """
    softmax(Q K^T / divisor) V over the last two axes.

    Args:
        Q: [B, H, Lq, D]
        K: [B, H, Lk, D]
        V: [B, H, Lk, Dv]
        mask: Boolean, broadcastable to [Lq, Lk]; True blocks the key
        divisor: Score temperature, sqrt(D) when omitted

    Returns:
        (output [B, H, Lq, Dv], ScoreMatrix)
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query dim {Q.shape} and key dim {K.shape} differ")
    if K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2] or K.shape[:-2] != V.shape[:-2]:
        raise DimensionError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if divisor is None:
        divisor = math.sqrt(Q.shape[-1])
    logits = scale(batched_matmul(Q, swapaxes(K, -1, -2)), 1.0 / divisor)

    masked = logits
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, logits.shape)
        except ValueError:
            raise DimensionError(f"mask {mask.shape} does not broadcast to scores {logits.shape}") from None
        if full.all(axis=-1).any():
            raise ContractError("attention mask blocks every key for at least one query")
        masked = masked_fill(logits, full, -np.inf)

    weights = softmax_lastdim(masked)
    attended = dropout(weights, dropout_rate, rng, training)
    return batched_matmul(attended, V), ScoreMatrix(weights, logits, float(divisor))


# =============================================================================
# KEY / CATEGORY COMBINATION
# =============================================================================

def category_modulation(C: Tensor, variant: Union[str, AttentionVariant],
                        grn_params: Optional[GatedResidualNetwork] = None,
                        inject: Optional[Union[Modulation, Tensor, np.ndarray]] = None) -> Modulation:
    """
    Build the operand combined with K.

    ``inject`` bypasses the GRN: a Modulation is used verbatim, a raw tensor is
    taken as the GRN output (v2 still applies the sigmoid). A combiner built
    with a context projection reads position_code(Lk, E) as its context, so
    its output varies over key positions even though C does not.
    """
    variant = AttentionVariant.parse(variant)
    if variant is AttentionVariant.VANILLA:
        raise ContractError("vanilla attention has no key modulation")
    mode = "additive" if variant is AttentionVariant.V3 else "multiplicative"

    if isinstance(inject, Modulation):
        if inject.mode != mode:
            raise ContractError(f"{variant.value} needs a {mode} modulation, got {inject.mode}")
        return inject

    if inject is not None:
        g = as_tensor(inject)
    else:
        if grn_params is None:
            raise ContractError(f"{variant.value} needs combiner GRN parameters or an injected modulation")
        B, L, H, D = C.shape
        context = None
        if grn_params.context is not None:
            code = position_code(L, H * D).astype(C.data.dtype)
            context = broadcast_to(Tensor(code), (B, L, H * D))
        g = reshape(grn_params(reshape(C, (B, L, H * D)), context), (B, L, H, D))
    if variant is AttentionVariant.V2:
        g = sigmoid(g)
    return Modulation(mode, g)


def combine_key_category(K: Tensor, C: Tensor, variant: Union[str, AttentionVariant],
                         grn_params: Optional[GatedResidualNetwork] = None,
                         inject: Optional[Union[Modulation, Tensor, np.ndarray]] = None
                         ) -> Tuple[Tensor, float]:
    """
    Combine keys with the categorical embedding.

    Args:
        K: Keys [B, L, H, D]
        C: Expanded static embedding [B, L, H, D]
        variant: v1 (K * GRN(C)), v2 (K * sigmoid(GRN(C))) or v3 (K + GRN(C))
        grn_params: Combiner GRN acting on the E = H*D vector at each position
        inject: Optional modulation that replaces the GRN

    Returns:
        (K_mod, divisor): divisor is sqrt(d_k) for v1/v2 and sqrt(2 d_k) for v3
    """
    K, C = as_tensor(K), as_tensor(C)
    if K.shape != C.shape:
        raise DimensionError(f"keys {K.shape} and category embedding {C.shape} are not congruent")
    return _combine(K, category_modulation(C, variant, grn_params, inject), AttentionVariant.parse(variant))


def _combine(K: Tensor, modulation: Modulation, variant: AttentionVariant) -> Tuple[Tensor, float]:
    if modulation.values.shape != K.shape:
        raise DimensionError(f"modulation {modulation.values.shape} is not congruent with keys {K.shape}")
    d_k = K.shape[-1]
    if variant is AttentionVariant.V3:
        return add(K, modulation.values), math.sqrt(2.0 * d_k)
    return mul(K, modulation.values), math.sqrt(d_k)


def _qkcv(Q: Tensor, K: Tensor, V: Tensor, C: Optional[Tensor], config: AttentionConfig,
          grn_params: Optional[GatedResidualNetwork], mask: Optional[np.ndarray],
          inject, rng, training) -> Tuple[Tensor, ScoreMatrix, Optional[Modulation]]:
    if config.causal_mask:
        causal = causal_mask(Q.shape[-2], K.shape[-2])
        mask = causal if mask is None else (np.asarray(mask, dtype=bool) | causal)
    if config.variant is AttentionVariant.VANILLA:
        out, scores = dot_product_attention(Q, K, V, mask, math.sqrt(config.d_k), config.dropout, rng, training)
        return out, scores, None
    if C is None:
        raise ContractError(f"variant {config.variant.value} needs the static embedding C")

    K_positions = transpose(K, (0, 2, 1, 3))            # [B, Lk, H, D]
    C = as_tensor(C)
    if C.shape != K_positions.shape:
        raise DimensionError(f"category embedding {C.shape} is not congruent with keys {K_positions.shape}")
    modulation = category_modulation(C, config.variant, grn_params, inject)
    K_mod, divisor = _combine(K_positions, modulation, config.variant)
    out, scores = dot_product_attention(
        Q, transpose(K_mod, (0, 2, 1, 3)), V, mask, divisor, config.dropout, rng, training
    )
    return out, scores, modulation


def qkcv_attention(Q: Tensor, K: Tensor, V: Tensor, C: Optional[Tensor], config: AttentionConfig,
                   grn_params: Optional[GatedResidualNetwork] = None, mask: Optional[np.ndarray] = None,
                   inject=None, rng: Optional[np.random.Generator] = None,
                   training: bool = False) -> Tuple[Tensor, ScoreMatrix]:
    """
    QKCV attention; Q, K, V are [B, H, L, D] and C is [B, Lk, H, D].
    The vanilla variant ignores C and reduces to dot_product_attention.
    """
    out, scores, _ = _qkcv(as_tensor(Q), as_tensor(K), as_tensor(V), C, config,
                           grn_params, mask, inject, rng, training)
    return out, scores


# =============================================================================
# MULTI-HEAD BLOCK
# =============================================================================

class MultiHeadQKCV(Module):
    """Wq, Wk, Wv, Wo projections and, for QKCV variants, the combiner GRN"""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.config = config
        E = config.model_dim
        self.wq = self.child("wq", Linear(E, E, rng, dtype=dtype))
        self.wk = self.child("wk", Linear(E, E, rng, dtype=dtype))
        self.wv = self.child("wv", Linear(E, E, rng, dtype=dtype))
        self.wo = self.child("wo", Linear(E, E, rng, dtype=dtype))
        self.combiner = None
        if config.variant is not AttentionVariant.VANILLA:
            context_dim = E if config.combiner_position else None
            self.combiner = self.child("combiner", GatedResidualNetwork(E, E, E, rng, context_dim, dtype=dtype))

    def init_identity_modulation(self) -> None:
        """
        Make the combiner output a constant: ones (v1), 1 - 1e-3 after the
        sigmoid (v2) or zeros (v3), so K passes through (almost) unchanged.
        """
        if self.combiner is None:
            return
        target = {
            AttentionVariant.V1: 1.0,
            AttentionVariant.V2: float(logit(1.0 - V2_IDENTITY_EPS)),
            AttentionVariant.V3: 0.0,
        }[self.config.variant]
        norm = self.combiner.norm
        norm.gain.data = np.zeros_like(norm.gain.data)
        norm.bias.data = np.full_like(norm.bias.data, target)

    def __call__(self, x: Tensor, c_entity: Optional[Tensor] = None, mask=None, inject=None,
                 rng=None, training: bool = False):
        return multi_head_qkcv(x, c_entity, self, self.config, mask, inject, rng, training)


def multi_head_qkcv(x: Tensor, c_entity: Optional[Tensor], weights: MultiHeadQKCV,
                    config: AttentionConfig, mask: Optional[np.ndarray] = None, inject=None,
                    rng: Optional[np.random.Generator] = None, training: bool = False,
                    return_modulation: bool = False):
    """
    Multi-head QKCV over x [B, L, E] with the entity embedding c_entity [B, E].

    Returns:
        (y [B, L, E], ScoreMatrix), plus the Modulation when ``return_modulation``
    """
    x = as_tensor(x)
    H, D = config.heads, config.head_dim
    if x.ndim != 3 or x.shape[-1] != H * D:
        raise ConfigurationError(f"input width {x.shape} must be E = H*D = {H}*{D}")
    B, L, E = x.shape

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, L, H, D)), (0, 2, 1, 3))

    Q, K, V = heads(weights.wq(x)), heads(weights.wk(x)), heads(weights.wv(x))
    C = None
    if config.variant is not AttentionVariant.VANILLA:
        if c_entity is None:
            raise ContractError(f"variant {config.variant.value} needs the entity embedding")
        c_entity = as_tensor(c_entity)
        C = expand_static(c_entity, L, H, D)
        if inject is None and weights.combiner.context is None:
            # C is time-constant: run the combiner once per entity and broadcast over positions
            once = category_modulation(expand_static(c_entity, 1, H, D), config.variant, weights.combiner)
            inject = Modulation(once.mode, broadcast_to(once.values, (B, L, H, D)))
    out, scores, modulation = _qkcv(Q, K, V, C, config, weights.combiner, mask, inject, rng, training)
    merged = reshape(transpose(out, (0, 2, 1, 3)), (B, L, E))
    y = weights.wo(merged)
    if return_modulation:
        return y, scores, modulation
    return y, scores
