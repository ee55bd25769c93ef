"""
Gradient Verification Suite
Central-difference checks for every primitive and for the composed GRN,
variable selection and QKCV attention blocks.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple
import logging

import numpy as np

from . import numeric as nm
from .attention import AttentionConfig, MultiHeadQKCV, multi_head_qkcv
from .numeric import Tensor, finite_difference_check, grad_of, no_grad
from .static_encoder import GatedResidualNetwork, StaticCovariateEncoder, select_and_combine

logger = logging.getLogger(__name__)

PRIMITIVE_TOLERANCE = 1e-6
COMPOSITE_TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    """Worst relative error of one checked op over all seeds"""
    op: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _positive(a: np.ndarray) -> np.ndarray:
    return np.abs(a) + 0.5


# name -> (function, input shapes, input transform)
_MASK = np.array([[True, False, False, True], [False, True, False, False], [False, False, True, False]])
PRIMITIVES: Dict[str, Tuple[Callable[..., Tensor], List[Tuple[int, ...]], Callable]] = {
    "matmul": (nm.matmul, [(3, 4), (4, 2)], None),
    "batched_matmul": (nm.batched_matmul, [(2, 3, 4), (2, 4, 2)], None),
    "transpose": (lambda x: nm.transpose(x, (2, 0, 1)), [(2, 3, 4)], None),
    "add": (nm.add, [(3, 4), (4,)], None),
    "sub": (nm.sub, [(3, 4), (3, 1)], None),
    "mul": (nm.mul, [(3, 4), (4,)], None),
    "div": (nm.div, [(3, 4), (3, 4)], _positive),
    "broadcast": (lambda x: nm.broadcast_to(x, (2, 3, 4)), [(3, 1)], None),
    "scale": (lambda x: nm.scale(x, 2.5), [(3, 4)], None),
    "exp": (nm.exp, [(3, 4)], None),
    "log": (nm.log, [(3, 4)], _positive),
    "elu": (nm.elu, [(3, 4)], None),
    "sigmoid": (nm.sigmoid, [(3, 4)], None),
    "tanh": (nm.tanh, [(3, 4)], None),
    "softmax": (nm.softmax_lastdim, [(3, 5)], None),
    "layer_norm": (nm.layer_norm, [(3, 5)], None),
    "concatenate": (lambda a, b: nm.concatenate([a, b], axis=-1), [(2, 3), (2, 2)], None),
    "reshape": (lambda x: nm.reshape(x, (3, 4)), [(2, 6)], None),
    "sum": (lambda x: nm.reduce_sum(x, axis=1), [(3, 4)], None),
    "mean": (lambda x: nm.reduce_mean(x, axis=0), [(3, 4)], None),
    "masked_fill": (lambda x: nm.masked_fill(x, _MASK, 0.0), [(3, 4)], None),
}


def _inputs(rng: np.random.Generator, shapes: Sequence[Tuple[int, ...]], transform) -> List[np.ndarray]:
    arrays = [rng.standard_normal(shape) for shape in shapes]
    return [transform(a) for a in arrays] if transform else arrays


def check_primitive(op: str, seeds: Iterable[int] = (0, 1, 2), eps: float = 1e-5) -> GradcheckResult:
    fn, shapes, transform = PRIMITIVES[op]
    worst = max(
        finite_difference_check(fn, _inputs(np.random.default_rng(seed), shapes, transform), eps, seed=seed)
        for seed in seeds
    )
    return GradcheckResult(op, worst, PRIMITIVE_TOLERANCE)


def _composites(seed: int) -> Dict[str, Tuple[Callable[..., Tensor], List[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    E, H, D, B, L = 8, 2, 4, 2, 5

    grn = GatedResidualNetwork(6, 5, 4, rng, context_dim=3)
    encoder = StaticCovariateEncoder([4, 3, 5], E, rng, "sce")

    blocks = {
        "grn": (lambda a, c: grn(a, c), [rng.standard_normal((B, 6)), rng.standard_normal((B, 3))]),
        "vsn": (lambda e0, e1, e2: select_and_combine([e0, e1, e2], encoder)[0],
                [rng.standard_normal((B, E)) for _ in range(3)]),
    }
    for variant in ("vanilla", "v1", "v2", "v3"):
        config = AttentionConfig(variant, H, D)
        block = MultiHeadQKCV(config, rng)

        def attend(x, c, block=block, config=config):
            return multi_head_qkcv(x, c, block, config)[0]

        blocks[f"qkcv_{variant}"] = (attend, [rng.standard_normal((B, L, E)), rng.standard_normal((B, E))])
    return blocks


def check_composites(seeds: Iterable[int] = (0, 1, 2), eps: float = 1e-5,
                     max_coords: int = 40) -> List[GradcheckResult]:
    worst: Dict[str, float] = {}
    for seed in seeds:
        for name, (fn, inputs) in _composites(seed).items():
            err = finite_difference_check(fn, inputs, eps, max_coords=max_coords, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    return [GradcheckResult(name, err, COMPOSITE_TOLERANCE) for name, err in worst.items()]


def run_gradcheck(seeds: Iterable[int] = (0, 1, 2), eps: float = 1e-5) -> List[GradcheckResult]:
    """Check every primitive, then the composed blocks"""
    seeds = list(seeds)
    results = [check_primitive(op, seeds, eps) for op in nm.OP_SET]
    results.extend(check_composites(seeds, eps))
    for r in results:
        logger.debug("gradcheck %-16s %.3e (tol %.0e)", r.op, r.max_rel_error, r.tolerance)
    return results


def check_parameter_gradients(model, loss_fn: Callable[[], Tensor], max_coords: int = 8,
                              eps: float = 1e-5, seed: int = 0) -> Dict[str, float]:
    """
    Compare analytic parameter gradients with central differences.

    Args:
        model: Module whose parameters are perturbed in place (and restored)
        loss_fn: Deterministic scalar loss of the current parameters
        max_coords: Sampled coordinates per parameter tensor

    Returns:
        Parameter name -> max relative error
    """
    rng = np.random.default_rng(seed)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = grad_of(loss_fn(), [p for _, p in named])
    errors = {}
    for name, param in named:
        flat = param.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        g = grads[param].data.reshape(-1)
        worst = 0.0
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            with no_grad():
                plus = loss_fn().item()
            flat[i] = original - eps
            with no_grad():
                minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(numeric)))
        errors[name] = worst
    return errors
