"""Run configuration and named presets.

The "desk" preset is the acceptance target: everything trains in minutes
on one CPU core.  The "paper" preset documents the full-scale recipe
(224x224 inputs, 1024x512 codebook, 256-d embeddings, LARS at base lr
0.02, batch 64, 300 epochs); it is runnable but not a tested target at
this scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigurationError

OPTIMIZERS = ("sgd", "lars")
RECON_NORMS = ("mse", "l2")

# The paper preset's nominal backbone is a stride-32 ResNet18 producing a
# 512x7x7 map from 224x224 inputs; the built-in stack reproduces those token
# shapes with five stride-2 convolutions.
PAPER_BACKBONE_MAP = (512, 7, 7)


@dataclass
class RunConfig:
    preset: str = "desk"
    image_size: int = 32
    dim: int = 64                  # token/feature dimension (codeword size)
    codebook_size: int = 32        # number of codewords
    heads: int = 4
    embed_dim: int = 32
    encoder_layers: int = 3        # stride-2 conv count; 2**layers divides image_size
    batch_size: int = 16
    epochs: int = 30
    base_lr: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lars_eps: float = 1e-9
    ema_momentum: float = 0.99
    alpha: float = 0.5
    gamma: float = 0.5
    alpha_commit: float = 0.5
    use_decoder: bool = True
    use_diversifuse: bool = True
    use_predictor: bool = True
    recon_norm: str = "mse"
    scale_scores: bool = False
    codebook_downstream_grad: bool = False
    seed: int = 7
    max_steps: int = 0             # 0 = run every scheduled step
    checkpoint_every: int = 10     # epochs between periodic checkpoints; 0 = final only
    probe_epochs: int = 500
    probe_lr: float = 0.1
    data_path: str = ""
    out_dir: str = ""

    def validate(self) -> "RunConfig":
        if self.preset not in ("desk", "paper", "tiny"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.image_size < 8:
            raise ConfigurationError(f"image_size must be >= 8, got {self.image_size}")
        if self.encoder_layers < 1:
            raise ConfigurationError("encoder_layers must be >= 1")
        factor = 1 << self.encoder_layers
        if self.image_size % factor != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} must be divisible by 2**encoder_layers = {factor}")
        if self.dim < 1 or self.codebook_size < 1 or self.embed_dim < 1:
            raise ConfigurationError("dim, codebook_size, and embed_dim must be positive")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigurationError(
                f"heads ({self.heads}) must be >= 1 and divide dim ({self.dim})")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ConfigurationError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        if min(self.alpha, self.gamma, self.alpha_commit) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.recon_norm not in RECON_NORMS:
            raise ConfigurationError(f"recon_norm must be one of {RECON_NORMS}, got {self.recon_norm!r}")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("max_steps and checkpoint_every must be >= 0")
        return self

    @property
    def map_size(self) -> int:
        return self.image_size >> self.encoder_layers

    @property
    def token_count(self) -> int:
        return self.map_size * self.map_size

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


def desk_config(**overrides) -> RunConfig:
    return replace(RunConfig(), **overrides).validate()


def paper_config(**overrides) -> RunConfig:
    cfg = RunConfig(preset="paper", image_size=224, dim=512, codebook_size=1024,
                    heads=8, embed_dim=256, encoder_layers=5, batch_size=64,
                    epochs=300, base_lr=0.02, optimizer="lars")
    return replace(cfg, **overrides).validate()


def tiny_config(**overrides) -> RunConfig:
    """Smallest exercised configuration; used by the gradient checker."""
    cfg = RunConfig(preset="tiny", image_size=8, dim=8, codebook_size=4, heads=2,
                    embed_dim=8, batch_size=2, epochs=1)
    return replace(cfg, **overrides).validate()


def config_for_preset(preset: str, **overrides) -> RunConfig:
    if preset == "desk":
        return desk_config(**overrides)
    if preset == "paper":
        return paper_config(**overrides)
    if preset == "tiny":
        return tiny_config(**overrides)
    raise ConfigurationError(f"unknown preset {preset!r}")
