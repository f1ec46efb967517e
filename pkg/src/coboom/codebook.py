"""Discrete dictionary: codeword storage, nearest-codeword assignment,
the two-term quantization loss, and utilization diagnostics.

Assignment uses exact squared Euclidean distance with ties broken toward
the lowest index.  The two loss terms are numerically identical and differ
only in gradient routing: the codebook term moves codewords toward the
(frozen) features, the commitment term moves features toward the (frozen)
codewords.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, scale, stop_gradient, sub, take_rows, tsum
from .errors import ConfigurationError, ContractError, DimensionError

Array = np.ndarray


@dataclass
class Codebook:
    embeddings: Tensor  # (K, D), trainable

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class QuantizationResult:
    indices: Array      # (N,) int64
    quantized: Tensor   # (N, D) detached copies of the selected codewords
    distances: Array    # (N,) squared Euclidean distance to the chosen codeword


def init_codebook(K: int, D: int, seed: int) -> Codebook:
    """Codewords drawn i.i.d. uniform on [-1/K, 1/K]; deterministic per seed."""
    if K < 1 or D < 1:
        raise ConfigurationError(f"codebook needs K >= 1 and D >= 1, got K={K}, D={D}")
    rng = np.random.default_rng(seed)
    table = rng.uniform(-1.0 / K, 1.0 / K, size=(K, D))
    return Codebook(embeddings=Tensor(table, requires_grad=True))


def nearest_codeword(v, cb: Codebook) -> tuple[int, float]:
    """Lowest-index minimizer of squared Euclidean distance to ``v``."""
    arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if arr.shape != (cb.D,):
        raise DimensionError(f"nearest_codeword expects shape ({cb.D},), got {arr.shape}")
    diff = cb.embeddings.data - arr
    d = (diff * diff).sum(axis=1)
    idx = int(np.argmin(d))  # argmin returns the first (lowest) index on ties
    return idx, float(d[idx])


def quantize(tokens, cb: Codebook) -> QuantizationResult:
    """Per-token nearest-codeword assignment.

    The returned ``quantized`` rows are value copies of the selected
    codewords with no backward path: the assignment itself is not
    differentiable.
    """
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != cb.D:
        raise DimensionError(f"quantize expects (N,{cb.D}) tokens, got {arr.shape}")
    n = arr.shape[0]
    if n < 1:
        raise DimensionError("quantize needs at least one token")
    indices = np.empty(n, dtype=np.int64)
    distances = np.empty(n, dtype=np.float64)
    for i in range(n):
        indices[i], distances[i] = nearest_codeword(arr[i], cb)
    quantized = stop_gradient(take_rows(cb.embeddings, indices))
    return QuantizationResult(indices=indices, quantized=quantized, distances=distances)


def quantization_loss(tokens: Tensor, result: QuantizationResult, cb: Codebook,
                      alpha_commit: float) -> tuple[Tensor, Tensor, Tensor]:
    """Codebook loss, commitment loss, and their weighted sum.

    Both terms are the mean (over tokens) squared distance between each
    token and its codeword; they are numerically equal and differ only in
    which side the gradient reaches.
    """
    if alpha_commit < 0:
        raise ContractError(f"alpha_commit must be nonnegative, got {alpha_commit}")
    idx = np.asarray(result.indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= cb.K:
        raise ContractError(
            f"quantization result does not match codebook with K={cb.K}: indices "
            f"{'empty' if idx.size == 0 else f'{int(idx.min())}..{int(idx.max())}'}")
    if tokens.shape != (idx.size, cb.D):
        raise ContractError(
            f"quantization result for {idx.size} tokens does not match input shape {tokens.shape}")
    n = idx.size
    selected = take_rows(cb.embeddings, idx)          # gradient reaches the codebook
    d_cb = sub(stop_gradient(tokens), selected)
    l_cb = scale(tsum(d_cb * d_cb), 1.0 / n)
    d_ce = sub(tokens, stop_gradient(selected))       # gradient reaches the tokens
    l_ce = scale(tsum(d_ce * d_ce), 1.0 / n)
    l_q = l_cb + scale(l_ce, alpha_commit)
    return l_cb, l_ce, l_q


def usage_histogram(indices, K: int) -> Array:
    """Counts per codeword; sums to len(indices)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise ContractError(f"index out of range for K={K}")
    return np.bincount(idx, minlength=K)


def codebook_perplexity(indices, K: int) -> float:
    """exp(entropy) of the empirical codeword distribution; in [1, K]."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("perplexity of an empty index list is undefined")
    counts = usage_histogram(idx, K)
    p = counts[counts > 0] / idx.size
    return float(np.exp(-(p * np.log(p)).sum()))
