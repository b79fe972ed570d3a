"""Finite-difference checks of every attention block and a miniature BaseNet."""

from __future__ import annotations

from typing import Iterable, List, Optional, Tuple

import numpy as np

from eegattn import tensor as T
from eegattn.attention import KINDS, AttentionSpec, build_attention
from eegattn.basenet import BaseNet, BaseNetConfig
from eegattn.layers import Module
from eegattn.rng import make_rng
from eegattn.tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-6
BLOCK_SHAPE = (3, 6, 10)
MINI_BASENET = dict(in_channels=4, n_samples=200, n_classes=2, temporal_filters=4, projected_channels=4,
                    dropout=0.0)


def _jitter(module: Module, rng, scale: float = 0.3):
    # moves zero-initialised gates off their symmetric starting point
    for _, p in module.named_parameters():
        p.data += scale * rng.standard_normal(p.shape)


def module_gradcheck(module: Module, x: np.ndarray, loss_fn, step: float = STEP) -> float:
    """Worst relative error over the input and every parameter of ``module``."""
    xt = Tensor(x)
    worst = T.grad_check(lambda t: loss_fn(module(t)), xt, step)
    for _, p in module.named_parameters():
        worst = max(worst, T.grad_check(lambda _: loss_fn(module(xt)), p, step))
    return worst


def block_gradcheck(kind: str, shape: Tuple[int, int, int] = BLOCK_SHAPE, seed: int = 0) -> float:
    B, C, T_len = shape
    rng = make_rng(seed, "gradcheck", kind)
    spec = AttentionSpec.default(kind)
    if kind in ("se", "se_l2", "gsop", "fca", "ge_theta_plus", "cbam", "cat", "catlite") and C % spec.r:
        spec.r = 2
    if kind == "eca":
        spec.k = min(spec.k, 2 * C - 1)
    block = build_attention(spec, C, T_len, rng, n_classes=2, dtype=np.float64)
    _jitter(block, rng)
    block.train()
    x = rng.standard_normal(shape)
    weights = Tensor(rng.standard_normal(shape))
    return module_gradcheck(block, x, lambda y: T.tsum(T.mul(y, weights)))


def basenet_gradcheck(seed: int = 0, attention: Optional[str] = None) -> float:
    cfg = BaseNetConfig(**MINI_BASENET, attention=attention)
    model = BaseNet(cfg, seed=seed, dtype=np.float64)
    rng = make_rng(seed, "gradcheck", "basenet")
    _jitter(model, rng, 0.05)
    model.train()
    x = rng.standard_normal((2, cfg.in_channels, cfg.n_samples))
    labels = np.array([0, 1])
    return module_gradcheck(model, x, lambda out: T.cross_entropy(out, labels))


def run(kinds: Iterable[str] = KINDS, include_basenet: bool = True) -> List[Tuple[str, float]]:
    out = [(k, block_gradcheck(k)) for k in kinds]
    if include_basenet:
        out.append(("basenet", basenet_gradcheck()))
    return out
