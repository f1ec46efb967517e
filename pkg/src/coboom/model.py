"""Full architecture: context/target conv encoders, projection and
prediction heads, decoder, codebook, and cross-attention fusion, plus the
directional forward pass and the EMA update of the target branch.

The target branch (encoder + projection head) mirrors the online branch
parameter-for-parameter, never requires gradients, and is advanced by an
exponential moving average of the online parameters after every optimizer
step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, conv2d, matmul, relu, reshape,
                       stop_gradient, take_rows, transpose, upsample2x)
from .codebook import Codebook, QuantizationResult, init_codebook, quantize
from .config import RunConfig
from .errors import ConfigurationError, ContractError, DimensionError
from .fusion import FusionParams, fuse, init_fusion
from .seeding import component_rng, mix64, tag


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    w: Tensor   # (C_out, C_in, 3, 3)
    b: Tensor   # (C_out,)
    stride: int = 1
    pad: int = 1


def _conv_layer(rng: np.random.Generator, c_in: int, c_out: int,
                stride: int, requires_grad: bool = True) -> ConvLayer:
    std = math.sqrt(2.0 / (c_in * 9))
    w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)), requires_grad=requires_grad)
    # small random bias: with zero bias, dead regions put pre-activations
    # exactly on the relu kink, where finite differences disagree by design
    b = Tensor(rng.normal(0.0, 0.02, size=c_out), requires_grad=requires_grad)
    return ConvLayer(w=w, b=b, stride=stride, pad=1)


class Encoder:
    """Stack of stride-2 3x3 convolutions with relu after each layer."""

    def __init__(self, layers: list[ConvLayer], in_size: int):
        self.layers = layers
        self.in_size = in_size

    @property
    def dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def map_size(self) -> int:
        return self.in_size >> len(self.layers)

    def feature_map(self, image: Tensor) -> Tensor:
        if image.shape != (1, self.in_size, self.in_size):
            raise DimensionError(
                f"encoder expects a 1x{self.in_size}x{self.in_size} image, got {image.shape}")
        x = image
        for layer in self.layers:
            x = relu(conv2d(x, layer.w, layer.b, stride=layer.stride, pad=layer.pad))
        return x

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            yield f"conv{i}.weight", layer.w
            yield f"conv{i}.bias", layer.b


def build_encoder(dim: int, in_size: int, n_layers: int,
                  rng: np.random.Generator, requires_grad: bool = True) -> Encoder:
    widths = [max(1, dim >> (n_layers - 1 - i)) for i in range(n_layers)]
    layers = []
    c_in = 1
    for c_out in widths:
        layers.append(_conv_layer(rng, c_in, c_out, stride=2, requires_grad=requires_grad))
        c_in = c_out
    # damp the final layer so initial token magnitudes land near the codeword
    # init ball; otherwise one codeword captures every token on the first
    # codebook-loss pull and usage collapses
    layers[-1].w.data *= 0.1
    return Encoder(layers, in_size)


class MLPHead:
    """Three linear layers with relu between; final width is the embed dim."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        self.weights = weights
        self.biases = biases

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_parameters(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"linear{i}.weight", w
            yield f"linear{i}.bias", b


def build_mlp(in_dim: int, out_dim: int, rng: np.random.Generator,
              requires_grad: bool = True) -> MLPHead:
    dims = [in_dim, in_dim, in_dim, out_dim]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        std = math.sqrt(2.0 / a)
        weights.append(Tensor(rng.normal(0.0, std, size=(a, b)), requires_grad=requires_grad))
        biases.append(Tensor(rng.normal(0.0, 0.02, size=b), requires_grad=requires_grad))
    return MLPHead(weights, biases)


def project(head: MLPHead, v: Tensor) -> Tensor:
    """Forward a 1-d vector through the three-layer head."""
    if v.shape != (head.in_dim,):
        raise DimensionError(f"head expects input of width {head.in_dim}, got {v.shape}")
    x = v
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        x = add(reshape(matmul(reshape(x, (1, w.shape[0])), w), (w.shape[1],)), b)
        if i < last:
            x = relu(x)
    return x


class Decoder:
    """Nearest-upsample + conv blocks restoring input resolution, then a
    final 1-channel convolution."""

    def __init__(self, blocks: list[ConvLayer], final: ConvLayer):
        self.blocks = blocks
        self.final = final

    def named_parameters(self):
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.weight", blk.w
            yield f"block{i}.bias", blk.b
        yield "final.weight", self.final.w
        yield "final.bias", self.final.b


def build_decoder(dim: int, n_up: int, rng: np.random.Generator) -> Decoder:
    blocks = []
    c_in = dim
    for i in range(n_up):
        c_out = max(2, dim >> (i + 1))
        blocks.append(_conv_layer(rng, c_in, c_out, stride=1))
        c_in = c_out
    final = _conv_layer(rng, c_in, 1, stride=1)
    return Decoder(blocks, final)


def decode(dec: Decoder, fmap: Tensor) -> Tensor:
    x = fmap
    for blk in dec.blocks:
        x = relu(conv2d(upsample2x(x), blk.w, blk.b, stride=1, pad=1))
    return conv2d(x, dec.final.w, dec.final.b, stride=1, pad=1)


# ---------------------------------------------------------------------------
# token plumbing
# ---------------------------------------------------------------------------

def encode(encoder: Encoder, image: Tensor) -> Tensor:
    """Feature map flattened to N = H'*W' tokens of width D, row-major."""
    fmap = encoder.feature_map(image)
    d, h, w = fmap.shape
    return transpose(reshape(fmap, (d, h * w)))


def tokens_to_map(tokens: Tensor, side: int) -> Tensor:
    """Invert the row-major flatten used by ``encode``."""
    n, d = tokens.shape
    if n != side * side:
        raise DimensionError(f"cannot fold {n} tokens into a {side}x{side} map")
    return reshape(transpose(tokens), (d, side, side))


def global_avg_pool(tokens: Tensor) -> Tensor:
    """Arithmetic mean over the token axis."""
    if tokens.data.ndim != 2 or tokens.shape[0] < 1:
        raise DimensionError(f"global_avg_pool expects (N,D) tokens, got {tokens.shape}")
    n, d = tokens.shape
    weights = Tensor(np.full((1, n), 1.0 / n))
    return reshape(matmul(weights, tokens), (d,))


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    encoder: Encoder                 # online f
    projector: MLPHead               # online projection g
    predictor: MLPHead | None        # online predictor q (BYOL-style)
    fused_projector: MLPHead         # projection p for the fused path
    fusion: FusionParams | None
    decoder: Decoder | None
    codebook: Codebook
    target_encoder: Encoder          # EMA mirror of encoder, gradient-free
    target_projector: MLPHead        # EMA mirror of projector, gradient-free
    ema_momentum: float

    def named_parameters(self):
        for n, p in self.encoder.named_parameters():
            yield f"encoder.{n}", p
        for n, p in self.projector.named_parameters():
            yield f"projector.{n}", p
        if self.predictor is not None:
            for n, p in self.predictor.named_parameters():
                yield f"predictor.{n}", p
        for n, p in self.fused_projector.named_parameters():
            yield f"fused_projector.{n}", p
        if self.fusion is not None:
            for n, p in self.fusion.named_parameters():
                yield f"fusion.{n}", p
        if self.decoder is not None:
            for n, p in self.decoder.named_parameters():
                yield f"decoder.{n}", p
        yield "codebook.embeddings", self.codebook.embeddings
        for n, p in self.target_encoder.named_parameters():
            yield f"target_encoder.{n}", p
        for n, p in self.target_projector.named_parameters():
            yield f"target_projector.{n}", p

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def mirrored_pairs(self):
        """(target, online) parameter pairs advanced by the EMA update."""
        pairs = list(zip(self.target_encoder.named_parameters(),
                         self.encoder.named_parameters()))
        pairs += list(zip(self.target_projector.named_parameters(),
                          self.projector.named_parameters()))
        return [(tp, op) for (_, tp), (_, op) in pairs]


def _mirror_encoder(src: Encoder) -> Encoder:
    layers = [ConvLayer(w=Tensor(l.w.data.copy()), b=Tensor(l.b.data.copy()),
                        stride=l.stride, pad=l.pad) for l in src.layers]
    return Encoder(layers, src.in_size)


def _mirror_mlp(src: MLPHead) -> MLPHead:
    return MLPHead([Tensor(w.data.copy()) for w in src.weights],
                   [Tensor(b.data.copy()) for b in src.biases])


def init_model_state(cfg: RunConfig) -> ModelState:
    """Seeded initialization; each component draws from its own stream, so
    toggling one component never shifts another's initial values."""
    cfg.validate()
    encoder = build_encoder(cfg.dim, cfg.image_size, cfg.encoder_layers,
                            component_rng(cfg.seed, "encoder"))
    projector = build_mlp(cfg.dim, cfg.embed_dim, component_rng(cfg.seed, "projector"))
    predictor = (build_mlp(cfg.embed_dim, cfg.embed_dim, component_rng(cfg.seed, "predictor"))
                 if cfg.use_predictor else None)
    fused_projector = build_mlp(cfg.dim, cfg.embed_dim,
                                component_rng(cfg.seed, "fused_projector"))
    fusion = (init_fusion(cfg.dim, cfg.heads, component_rng(cfg.seed, "fusion"),
                          cfg.scale_scores)
              if cfg.use_diversifuse else None)
    decoder = (build_decoder(cfg.dim, cfg.encoder_layers, component_rng(cfg.seed, "decoder"))
               if cfg.use_decoder else None)
    codebook = init_codebook(cfg.codebook_size, cfg.dim, seed=mix64(cfg.seed, tag("codebook")))
    return ModelState(encoder=encoder,
                      projector=projector,
                      predictor=predictor,
                      fused_projector=fused_projector,
                      fusion=fusion,
                      decoder=decoder,
                      codebook=codebook,
                      target_encoder=_mirror_encoder(encoder),
                      target_projector=_mirror_mlp(projector),
                      ema_momentum=cfg.ema_momentum)


def ema_update(state: ModelState) -> None:
    """Advance every target parameter: phi <- m*phi + (1-m)*theta, values only."""
    m = state.ema_momentum
    if not (0.0 <= m <= 1.0):
        raise ContractError(f"ema momentum must be in [0, 1], got {m}")
    for phi, theta in state.mirrored_pairs():
        if phi.shape != theta.shape:
            raise ContractError(
                f"EMA mirror shape mismatch: {phi.shape} vs {theta.shape} (corrupted state)")
        phi.data[...] = m * phi.data + (1.0 - m) * theta.data


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutputs:
    z_theta: Tensor                  # online embedding (predictor output if enabled)
    z_phi: Tensor                    # target embedding, gradient-free
    z_theta_prime: Tensor            # embedding of the fused tokens
    fused_tokens: Tensor             # (N, D)
    reconstruction: Tensor | None    # (1, H, W), absent when the decoder is off
    quantization: QuantizationResult
    y_phi: Tensor                    # target tokens, gradient-free
    codebook: Codebook


def forward_pass(x1: Tensor, x2: Tensor, state: ModelState, cfg: RunConfig) -> ForwardOutputs:
    """Directional dataflow: the online encoder consumes ``x2``, the target
    branch and the quantizer consume ``x1``."""
    expected = (1, cfg.image_size, cfg.image_size)
    if x1.shape != expected or x2.shape != expected:
        raise ConfigurationError(
            f"views must have shape {expected}, got {x1.shape} and {x2.shape}")
    if state.encoder.dim != cfg.dim or state.codebook.D != cfg.dim:
        raise ConfigurationError("model state does not match the configured feature dim")
    if cfg.use_diversifuse and state.fusion is None:
        raise ConfigurationError("config enables fusion but the model state has none")
    if cfg.use_decoder and state.decoder is None:
        raise ConfigurationError("config enables the decoder but the model state has none")
    if cfg.use_predictor and state.predictor is None:
        raise ConfigurationError("config enables the predictor but the model state has none")

    y_theta = encode(state.encoder, x2)
    y_phi = stop_gradient(encode(state.target_encoder, x1))

    z_theta = project(state.projector, global_avg_pool(y_theta))
    if cfg.use_predictor:
        z_theta = project(state.predictor, z_theta)
    z_phi = project(state.target_projector, global_avg_pool(y_phi))

    qres = quantize(y_phi, state.codebook)
    if cfg.codebook_downstream_grad:
        y_d = take_rows(state.codebook.embeddings, qres.indices)
    else:
        y_d = qres.quantized

    fused = fuse(y_d, y_phi, state.fusion) if cfg.use_diversifuse else y_d
    z_theta_prime = project(state.fused_projector, global_avg_pool(fused))

    reconstruction = None
    if cfg.use_decoder:
        reconstruction = decode(state.decoder, tokens_to_map(fused, state.encoder.map_size))

    return ForwardOutputs(z_theta=z_theta, z_phi=z_phi, z_theta_prime=z_theta_prime,
                          fused_tokens=fused, reconstruction=reconstruction,
                          quantization=qres, y_phi=y_phi, codebook=state.codebook)
