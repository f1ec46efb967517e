"""Multi-head cross-attention fusing discrete and continuous tokens.

Quantized tokens form the queries; the continuous feature tokens form the
keys and values.  Per-head outputs are concatenated along the feature
axis with head width D/h, so the fused tokens keep dimension D.  There is
no output projection, no residual, and no layer normalization.  Score
scaling by 1/sqrt(d_h) is off by default and available behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat_last, matmul, scale, softmax_rows, transpose
from .errors import ConfigurationError, DimensionError


@dataclass
class FusionParams:
    heads: int
    wq: list[Tensor]            # per head, (D, D/h)
    wk: list[Tensor]
    wv: list[Tensor]
    scale_scores: bool = False

    @property
    def dim(self) -> int:
        return self.wq[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    def named_parameters(self):
        for i in range(self.heads):
            yield f"head{i}.wq", self.wq[i]
            yield f"head{i}.wk", self.wk[i]
            yield f"head{i}.wv", self.wv[i]


def init_fusion(dim: int, heads: int, rng: np.random.Generator,
                scale_scores: bool = False) -> FusionParams:
    """Projections drawn i.i.d. normal with std 1/sqrt(D) (fan-in scaling)."""
    if heads < 1:
        raise ConfigurationError(f"fusion needs at least one head, got {heads}")
    if dim % heads != 0:
        raise ConfigurationError(f"head count {heads} must divide feature dim {dim}")
    d_h = dim // heads
    std = 1.0 / math.sqrt(dim)

    def mat() -> Tensor:
        return Tensor(rng.normal(0.0, std, size=(dim, d_h)), requires_grad=True)

    return FusionParams(heads=heads,
                        wq=[mat() for _ in range(heads)],
                        wk=[mat() for _ in range(heads)],
                        wv=[mat() for _ in range(heads)],
                        scale_scores=scale_scores)


def attention_scores(queries: Tensor, keys: Tensor, scale_by_dim: bool = False) -> Tensor:
    """Dot-product similarity Q @ K^T, optionally divided by sqrt(d_h)."""
    if queries.data.ndim != 2 or keys.data.ndim != 2 or queries.shape[1] != keys.shape[1]:
        raise DimensionError(
            f"attention_scores expects (N,d) queries and keys, got {queries.shape} and {keys.shape}")
    s = matmul(queries, transpose(keys))
    if scale_by_dim:
        s = scale(s, 1.0 / math.sqrt(queries.shape[1]))
    return s


def attention_weights(scores: Tensor) -> Tensor:
    """Row-stochastic weights from a square score matrix."""
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"attention_weights expects a square matrix, got {scores.shape}")
    return softmax_rows(scores)


def fuse(y_d: Tensor, y_phi: Tensor, params: FusionParams) -> Tensor:
    """Cross-attend quantized queries over continuous keys/values, concat heads."""
    if y_d.data.ndim != 2 or y_phi.data.ndim != 2 or y_d.shape != y_phi.shape:
        raise DimensionError(
            f"fuse expects matching (N,D) token grids, got {y_d.shape} and {y_phi.shape}")
    if y_d.shape[1] != params.dim:
        raise ConfigurationError(
            f"fusion params built for dim {params.dim}, tokens have dim {y_d.shape[1]}")
    heads = []
    for i in range(params.heads):
        q = matmul(y_d, params.wq[i])
        k = matmul(y_phi, params.wk[i])
        v = matmul(y_phi, params.wv[i])
        w = attention_weights(attention_scores(q, k, params.scale_scores))
        heads.append(matmul(w, v))
    return concat_last(heads)
