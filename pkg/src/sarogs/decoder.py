"""Tiny MLP heads decoding residual features into lifespans and attribute residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

SIGMA_MIN = 1e-3
TIME_FREQUENCIES = 4


class TinyMLP(nn.Module):
    """Affine + ReLU stack with a linear output layer."""

    def __init__(self, widths: list[int], zero_last: bool = False, dtype=torch.float32):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=dtype) for a, b in zip(widths[:-1], widths[1:]))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        return mlp_forward(self, x)


def mlp_forward(net: TinyMLP, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != net.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match MLP input {net.widths[0]}")
    for i, layer in enumerate(net.layers):
        x = layer(x)
        if i < len(net.layers) - 1:
            x = torch.relu(x)
    return x


def embed_time(dt: torch.Tensor, frequencies: int = TIME_FREQUENCIES) -> torch.Tensor:
    """Sinusoidal embedding of the time offset: (P,) -> (P, 2 * frequencies)."""
    freqs = math.pi * 2.0 ** torch.arange(frequencies, dtype=dt.dtype)
    ang = dt.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class ResidualBundle:
    d_position: torch.Tensor  # (P, 3)
    d_scale: torch.Tensor  # (P, 3), added in log domain
    d_rotation: torch.Tensor  # (P, 4), added before renormalization
    d_sh: torch.Tensor  # (P, 3, K)


class Decoder(nn.Module):
    """Lifespan head and residual heads sharing one feature input."""

    def __init__(self, feature_dim: int = 32, sh_coeffs: int = 4, hidden: int = 64,
                 lifespan_hidden: int = 32, init_lifespan: float = 0.5, dtype=torch.float32):
        super().__init__()
        self.feature_dim = feature_dim
        self.sh_coeffs = sh_coeffs
        emb = 2 * TIME_FREQUENCIES
        self.lifespan = TinyMLP([feature_dim, lifespan_hidden, 1], zero_last=True, dtype=dtype)
        with torch.no_grad():
            # softplus^-1 so an untrained head predicts init_lifespan
            raw = init_lifespan - SIGMA_MIN
            self.lifespan.layers[-1].bias.fill_(raw + math.log(-math.expm1(-raw)))
        self.trunk = TinyMLP([feature_dim + emb, hidden, hidden], dtype=dtype)
        self.position_head = TinyMLP([hidden, 3], zero_last=True, dtype=dtype)
        self.covariance_head = TinyMLP([hidden, 7], zero_last=True, dtype=dtype)
        self.color_head = TinyMLP([hidden, 3 * sh_coeffs], zero_last=True, dtype=dtype)

    def forward(self, f, dt):
        return residual_heads(self, f, dt)


def lifespan_head(decoder: Decoder, f: torch.Tensor) -> torch.Tensor:
    raw = mlp_forward(decoder.lifespan, f).squeeze(-1)
    return F.softplus(raw) + SIGMA_MIN


def residual_heads(decoder: Decoder, f: torch.Tensor, dt) -> ResidualBundle:
    dt = torch.as_tensor(dt, dtype=f.dtype).expand(f.shape[0])
    h = torch.relu(mlp_forward(decoder.trunk, torch.cat([f, embed_time(dt)], dim=-1)))
    cov = mlp_forward(decoder.covariance_head, h)
    return ResidualBundle(
        d_position=mlp_forward(decoder.position_head, h),
        d_scale=cov[:, :3],
        d_rotation=cov[:, 3:],
        d_sh=mlp_forward(decoder.color_head, h).reshape(-1, 3, decoder.sh_coeffs),
    )
