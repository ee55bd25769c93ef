"""ML Engine Package"""
from .numeric import Tensor, grad_of, no_grad
from .attention import AttentionConfig, AttentionVariant, Modulation, MultiHeadQKCV, ScoreMatrix, qkcv_attention
from .static_encoder import StaticCovariateEncoder, StaticFeatureVector, feature_importance
from .forecaster import QKCVForecaster, build_model, evaluate, train
from .finetune import FreezeMode, attach_qkcv, compare_modes, partition_parameters, pretrain_base

__all__ = [
    "Tensor", "grad_of", "no_grad",
    "AttentionConfig", "AttentionVariant", "Modulation", "MultiHeadQKCV", "ScoreMatrix", "qkcv_attention",
    "StaticCovariateEncoder", "StaticFeatureVector", "feature_importance",
    "QKCVForecaster", "build_model", "evaluate", "train",
    "FreezeMode", "attach_qkcv", "compare_modes", "partition_parameters", "pretrain_base",
]
