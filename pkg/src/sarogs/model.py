"""The full dynamic-scene model: primitives, residual field and decoder heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .decoder import Decoder
from .gaussian4d import GaussianCloud, num_sh_coeffs
from .residual_field import HexplaneField
from .temporal import DEFAULT_K


@dataclass
class ModelConfig:
    feature_dim: int = 32
    resolution: int = 64
    time_resolution: int = 64
    levels: int = 5
    sh_degree: int = 1
    hidden: int = 64
    lifespan_hidden: int = 32
    init_lifespan: float = 0.5
    field_init_scale: float = 0.1
    k: float = DEFAULT_K
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


class SaroModel(nn.Module):
    def __init__(self, cloud: GaussianCloud, config: ModelConfig | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        config = config or ModelConfig()
        if cloud.sh_coeffs.shape[-1] != num_sh_coeffs(config.sh_degree):
            raise ValueError("cloud SH layout does not match config.sh_degree")
        dtype = cloud.raw_position.dtype
        self.config = config
        self.cloud = cloud
        self.field = HexplaneField(cloud.bbox, config.feature_dim, config.resolution,
                                   config.time_resolution, config.levels,
                                   init_scale=config.field_init_scale, generator=generator,
                                   dtype=dtype)
        self.decoder = Decoder(config.feature_dim, num_sh_coeffs(config.sh_degree),
                               config.hidden, config.lifespan_hidden, config.init_lifespan,
                               dtype=dtype)
        if generator is not None:
            _reseed_linear(self.decoder, generator)
        # bumped on every parameter write; bakes record it
        self.version = 0

    @property
    def k(self) -> float:
        return self.config.k

    def bump_version(self):
        self.version += 1


def _reseed_linear(module: nn.Module, generator: torch.Generator):
    """Re-draw non-zero Linear weights from ``generator`` (torch's default init is global-RNG based)."""
    with torch.no_grad():
        for lin in module.modules():
            if isinstance(lin, nn.Linear) and lin.weight.abs().sum() > 0:
                bound = 1.0 / lin.in_features ** 0.5
                w = torch.rand(lin.weight.shape, generator=generator, dtype=torch.float64)
                b = torch.rand(lin.bias.shape, generator=generator, dtype=torch.float64)
                lin.weight.copy_(((2 * w - 1) * bound).to(lin.weight.dtype))
                lin.bias.copy_(((2 * b - 1) * bound).to(lin.bias.dtype))
