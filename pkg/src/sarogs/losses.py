"""Photometric losses, the scale-residual regularizer, and image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .decoder import residual_heads

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


@dataclass
class LossWeights:
    lambda1: float = 0.2  # D-SSIM weight
    lambda2: float = 0.8  # scale-residual weight

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError(f"lambda1 must lie in [0, 1], got {self.lambda1}")
        if self.lambda2 < 0.0:
            raise ValueError(f"lambda2 must be >= 0, got {self.lambda2}")


def l1_loss(img, ref):
    return (img - ref).abs().mean()


def mse(img, ref):
    return ((img - ref) ** 2).mean()


def psnr(img, ref) -> float:
    """PSNR in dB for images in [0, 1]; identical images report ``PSNR_CAP``."""
    err = float(mse(img.detach().double(), ref.detach().double()))
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def _filter(x, win):
    # x: (C, H, W); zero-padded "same" convolution per channel
    c = x.shape[0]
    w = win.expand(c, 1, *win.shape)
    return F.conv2d(x.unsqueeze(0), w, padding=win.shape[-1] // 2, groups=c).squeeze(0)


def ssim_map(img, ref):
    """Per-channel SSIM map for (H, W, C) images; returns (C, H, W)."""
    x, y = img.permute(2, 0, 1), ref.permute(2, 0, 1)
    win = gaussian_window(dtype=x.dtype)
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x**2 + mu_y**2 + C1) * (sxx + syy + C2)
    return num / den


def ssim(img, ref):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    return ssim_map(img, ref).mean()


def ssim_pooled(img, ref):
    """SSIM with window statistics pooled jointly across the color channels."""
    x, y = img.permute(2, 0, 1), ref.permute(2, 0, 1)
    win = gaussian_window(dtype=x.dtype)

    def stat(a):
        return _filter(a, win).mean(0, keepdim=True)

    mu_x, mu_y = stat(x), stat(y)
    sxx = stat(x * x) - mu_x**2
    syy = stat(y * y) - mu_y**2
    sxy = stat(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x**2 + mu_y**2 + C1) * (sxx + syy + C2)
    return (num / den).mean()


def dssim(img, ref):
    return (1.0 - ssim(img, ref)) / 2.0


def dssim_variants(img, ref) -> dict[str, float]:
    """Both D-SSIM conventions reported by the evaluator."""
    with torch.no_grad():
        return {
            "dssim_channel_mean": float((1.0 - ssim(img, ref)) / 2.0),
            "dssim_global": float((1.0 - ssim_pooled(img, ref)) / 2.0),
        }


def l_sr(model, f=None):
    """Mean L2 norm of the log-scale residual decoded at each primitive's own tau."""
    if f is None:
        from .projection import primitive_features

        f, _ = primitive_features(model)
    res = residual_heads(model.decoder, f, torch.zeros(f.shape[0], dtype=f.dtype))
    return scale_residual_penalty(res.d_scale)


def scale_residual_penalty(d_scale):
    # vector_norm has a zero subgradient at the origin, so the untrained decoder is safe
    return torch.linalg.vector_norm(d_scale, dim=-1).mean()


def combine(l1, d_ssim, sr, w: LossWeights):
    return (1.0 - w.lambda1) * l1 + w.lambda1 * d_ssim + w.lambda2 * sr


def total_loss(img, ref, model, w: LossWeights | None = None, f=None):
    w = w or LossWeights()
    sr = l_sr(model, f) if w.lambda2 > 0 else img.new_zeros(())
    return combine(l1_loss(img, ref), dssim(img, ref), sr, w)
