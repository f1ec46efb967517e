"""Loss terms and their symmetric combination.

The two similarity terms are the standard self-distillation form
2 - 2*cos(a, b); the raw cosines are kept on the breakdown for logging.
The total is alpha*(l1 + l2) + l_q + gamma*l_r, and the symmetric
objective averages the two directional totals obtained by swapping the
views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, div, mul, scale, sub, tmean, tsum, l2_norm
from .codebook import quantization_loss
from .errors import DegenerateEmbeddingError, DimensionError
from .model import ForwardOutputs


@dataclass
class LossWeights:
    alpha: float = 0.5         # weight of the two similarity terms
    gamma: float = 0.5         # weight of the reconstruction term
    alpha_commit: float = 0.5  # weight of the commitment term inside l_q


@dataclass
class LossBreakdown:
    l1: Tensor
    l2: Tensor
    l_cb: Tensor
    l_ce: Tensor
    l_q: Tensor
    l_r: Tensor
    total: Tensor
    cos1: float
    cos2: float

    def floats(self) -> dict[str, float]:
        return {"l1": self.l1.item(), "l2": self.l2.item(),
                "l_cb": self.l_cb.item(), "l_ce": self.l_ce.item(),
                "l_q": self.l_q.item(), "l_r": self.l_r.item(),
                "total": self.total.item(), "cos1": self.cos1, "cos2": self.cos2}


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """<a,b> / (|a||b|); raises on (near-)zero norms, which signal collapse."""
    if a.shape != b.shape or a.data.ndim != 1:
        raise DimensionError(f"cosine expects two equal-length vectors, got {a.shape} and {b.shape}")
    na = l2_norm(a)
    nb = l2_norm(b)
    if na.item() < 1e-12 or nb.item() < 1e-12:
        raise DegenerateEmbeddingError(
            f"embedding norm below 1e-12 ({na.item():.3e}, {nb.item():.3e}); "
            "cosine similarity is undefined")
    return div(tsum(mul(a, b)), mul(na, nb))


def similarity_loss(a: Tensor, b: Tensor) -> Tensor:
    """2 - 2*cos(a, b): zero when aligned, 4 when antipodal."""
    return scale(cosine_similarity(a, b), -2.0) + 2.0


def reconstruction_loss(x, x_prime: Tensor, norm: str = "mse") -> Tensor:
    """Pixel error between target image and reconstruction.

    "mse" is the per-pixel mean squared error (resolution-independent);
    "l2" is the plain Euclidean norm of the difference.
    """
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if xt.shape != x_prime.shape:
        raise DimensionError(f"reconstruction shapes differ: {xt.shape} vs {x_prime.shape}")
    d = sub(x_prime, xt)
    if norm == "l2":
        return l2_norm(d)
    return tmean(mul(d, d))


def directional_loss(out: ForwardOutputs, recon_target, w: LossWeights, cfg) -> LossBreakdown:
    """All terms for one directional forward pass.

    ``recon_target`` is the view consumed by the target/quantizer branch —
    its fused tokens are what the decoder inverts.
    """
    l1 = similarity_loss(out.z_theta, out.z_phi)
    l2 = similarity_loss(out.z_theta, out.z_theta_prime)
    cos1 = 1.0 - 0.5 * l1.item()
    cos2 = 1.0 - 0.5 * l2.item()
    l_cb, l_ce, l_q = quantization_loss(out.y_phi, out.quantization, out.codebook,
                                        w.alpha_commit)
    if out.reconstruction is not None:
        l_r = reconstruction_loss(recon_target, out.reconstruction, cfg.recon_norm)
    else:
        l_r = Tensor(0.0)
    total = add(add(scale(add(l1, l2), w.alpha), l_q), scale(l_r, w.gamma))
    return LossBreakdown(l1=l1, l2=l2, l_cb=l_cb, l_ce=l_ce, l_q=l_q, l_r=l_r,
                         total=total, cos1=cos1, cos2=cos2)


def symmetric_loss(bd_12: LossBreakdown, bd_21: LossBreakdown) -> Tensor:
    """Mean of the two directional totals (views fed interchangeably)."""
    return scale(add(bd_12.total, bd_21.total), 0.5)
