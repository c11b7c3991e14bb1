"""Scale-aware residual field: hexplane features with mipmapped spatial planes.

Three spatial-only planes (xy, xz, yz) are stored at full resolution and
expanded into mipmap stacks by 2x2 average pooling; each primitive reads them
at a fractional pyramid level chosen from its world-space size.  Three
spatiotemporal planes (xt, yt, zt) are read with plain bilinear lookups.  The
six samples are summed into one feature vector.

Plane layout is ``(M, Nu, Nv)``: feature dim first, then the two axes of the
plane in the order given by its name.  Normalized coordinates live in [0, 1];
cell ``i`` covers ``[i/N, (i+1)/N]`` so its center sits at ``(i + 0.5)/N``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

SPATIAL_PAIRS = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz
SPATIAL_NAMES = ("xy", "xz", "yz")
SPACETIME_NAMES = ("xt", "yt", "zt")


def base_scales(bbox, n: int) -> torch.Tensor:
    """World-space size of one level-0 cell along x, y, z."""
    bbox = torch.as_tensor(bbox, dtype=torch.float64).reshape(2, 3)
    s = (bbox[1] - bbox[0]) / n
    if torch.any(s <= 0):
        raise ValueError("bbox must have positive extent on every axis")
    return s


def pool_level(plane: torch.Tensor) -> torch.Tensor:
    """One mipmap step: 2x2 mean, odd sizes padded by edge replication."""
    m, h, w = plane.shape
    pad_h, pad_w = h % 2, w % 2
    x = plane.unsqueeze(0)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return F.avg_pool2d(x, 2).squeeze(0)


def build_thumbnails(level0: torch.Tensor, levels: int) -> list[torch.Tensor]:
    if levels < 1:
        raise ValueError("need at least one level")
    out = [level0]
    for _ in range(levels - 1):
        out.append(pool_level(out[-1]))
    return out


class MipMapStack:
    """Pyramid over one trainable level-0 plane.

    Higher levels are derived data: they are rebuilt when level 0 has been
    written since the last build (tracked through the tensor version counter),
    and always rebuilt when autograd needs a fresh graph.
    """

    def __init__(self, level0: torch.Tensor, levels: int):
        self.level0 = level0
        self.level_count = levels
        self._levels = None
        self._stamp = None

    @property
    def dirty(self) -> bool:
        return self._stamp != (id(self.level0), self.level0._version)

    def levels(self) -> list[torch.Tensor]:
        needs_graph = torch.is_grad_enabled() and self.level0.requires_grad
        if needs_graph or self.dirty or self._levels is None:
            levels = build_thumbnails(self.level0, self.level_count)
            if needs_graph:
                return levels
            self._levels = [lv.detach() for lv in levels]
            self._stamp = (id(self.level0), self.level0._version)
        return self._levels


def bilinear(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample ``plane`` (M, Nu, Nv) at normalized coords; returns (P, M).

    Coordinates are clamped to the border cell centers (no wraparound).  This
    is ``grid_sample`` with ``align_corners=False`` and border padding, which
    uses the same cell-center convention; :func:`bilinear_reference` spells
    the lookup out with explicit gathers.
    """
    grid = torch.stack([v.clamp(0.0, 1.0) * 2 - 1, u.clamp(0.0, 1.0) * 2 - 1], -1)
    out = F.grid_sample(plane.unsqueeze(0), grid.to(plane.dtype).reshape(1, 1, -1, 2),
                        mode="bilinear", padding_mode="border", align_corners=False)
    return out.reshape(plane.shape[0], -1).T


def bilinear_reference(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Gather-based bilinear lookup with the same conventions as :func:`bilinear`."""
    m, nu, nv = plane.shape
    fu = (u.clamp(0.0, 1.0) * nu - 0.5).clamp(0.0, nu - 1.0)
    fv = (v.clamp(0.0, 1.0) * nv - 0.5).clamp(0.0, nv - 1.0)
    iu0 = fu.detach().floor().clamp(max=max(nu - 2, 0)).long()
    iv0 = fv.detach().floor().clamp(max=max(nv - 2, 0)).long()
    iu1 = (iu0 + 1).clamp(max=nu - 1)
    iv1 = (iv0 + 1).clamp(max=nv - 1)
    wu = (fu - iu0.to(fu.dtype)).unsqueeze(-1)
    wv = (fv - iv0.to(fv.dtype)).unsqueeze(-1)
    flat = plane.reshape(m, nu * nv).T  # (Nu*Nv, M)
    f00 = flat[iu0 * nv + iv0]
    f01 = flat[iu0 * nv + iv1]
    f10 = flat[iu1 * nv + iv0]
    f11 = flat[iu1 * nv + iv1]
    return (f00 * (1 - wu) * (1 - wv) + f01 * (1 - wu) * wv
            + f10 * wu * (1 - wv) + f11 * wu * wv)


def scale_level(s_projected: torch.Tensor, base: torch.Tensor, levels: int) -> torch.Tensor:
    """Fractional pyramid level: min over the two plane axes of log2(s / base), clamped."""
    s_projected = torch.as_tensor(s_projected, dtype=torch.float64) \
        if not isinstance(s_projected, torch.Tensor) else s_projected
    base = torch.as_tensor(base, dtype=s_projected.dtype)
    lv = torch.log2(s_projected / base).min(dim=-1).values
    return lv.clamp(0.0, levels - 1.0)


def sample_spatial(levels: list[torch.Tensor], uv: torch.Tensor, level: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup: bilinear inside each pyramid level, linear across ``level``."""
    level = level.reshape(-1, 1)
    out = 0.0
    for i, plane in enumerate(levels):
        w = torch.relu(1.0 - (level - i).abs())
        if w.detach().max() <= 0:
            continue
        out = out + w * bilinear(plane, uv[:, 0], uv[:, 1])
    if isinstance(out, float):
        return uv.new_zeros((uv.shape[0], levels[0].shape[0]))
    return out


def sample_spacetime(plane: torch.Tensor, u: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return bilinear(plane, u, t)


class HexplaneField(torch.nn.Module):
    """Residual feature field over (x, y, z, t)."""

    def __init__(self, bbox, feature_dim: int = 32, resolution: int = 64,
                 time_resolution: int = 64, levels: int = 5, init_scale: float = 0.1,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if resolution < 2 or time_resolution < 2 or feature_dim < 1:
            raise ValueError("plane resolution must be >= 2 and feature dim >= 1")
        self.feature_dim = feature_dim
        self.resolution = resolution
        self.time_resolution = time_resolution
        self.level_count = levels
        self.register_buffer("bbox", torch.as_tensor(bbox, dtype=dtype).reshape(2, 3).clone())
        if not torch.all(self.bbox[0] < self.bbox[1]):
            raise ValueError("bbox min must be < max")

        def plane(nu, nv):
            x = torch.rand((feature_dim, nu, nv), generator=generator, dtype=torch.float64)
            return torch.nn.Parameter(((2 * x - 1) * init_scale).to(dtype))

        self.spatial = torch.nn.ParameterList(
            [plane(resolution, resolution) for _ in SPATIAL_NAMES])
        self.spacetime = torch.nn.ParameterList(
            [plane(resolution, time_resolution) for _ in SPACETIME_NAMES])
        self._stacks = None

    def base_scales(self) -> torch.Tensor:
        return base_scales(self.bbox, self.resolution).to(self.bbox.dtype)

    def stacks(self) -> list[MipMapStack]:
        if self._stacks is None or any(s.level0 is not p for s, p in zip(self._stacks, self.spatial)):
            self._stacks = [MipMapStack(p, self.level_count) for p in self.spatial]
        return self._stacks

    def normalize(self, xyz: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bbox[0].to(xyz.dtype), self.bbox[1].to(xyz.dtype)
        return (xyz - lo) / (hi - lo)

    def forward(self, position4d: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
        """Residual feature ``f`` (P, M) for primitives at ``position4d`` with activated ``scale``."""
        return query_residual_feature(self, position4d, scale)


def query_residual_feature(field: HexplaneField, position4d: torch.Tensor,
                           scale: torch.Tensor) -> torch.Tensor:
    uvw = field.normalize(position4d[:, :3])
    t = position4d[:, 3]
    base = field.base_scales().to(scale.dtype)
    f = position4d.new_zeros((position4d.shape[0], field.feature_dim))
    for (a, b), stack in zip(SPATIAL_PAIRS, field.stacks()):
        level = scale_level(scale[:, [a, b]], base[[a, b]], field.level_count)
        f = f + sample_spatial(stack.levels(), uvw[:, [a, b]], level)
    for axis, plane in enumerate(field.spacetime):
        f = f + sample_spacetime(plane, uvw[:, axis], t)
    return f


def smooth_random_planes(field: HexplaneField, generator: torch.Generator, frequencies: int = 2,
                         offset: float = 1.0):
    """Fill every plane with low-frequency cosine mixtures (used for coherence checks)."""
    with torch.no_grad():
        for p in list(field.spatial) + list(field.spacetime):
            m, nu, nv = p.shape
            u = (torch.arange(nu, dtype=torch.float64) + 0.5) / nu
            v = (torch.arange(nv, dtype=torch.float64) + 0.5) / nv
            acc = torch.full((m, nu, nv), offset, dtype=torch.float64)
            for fu in range(frequencies + 1):
                for fv in range(frequencies + 1):
                    amp = torch.randn((m, 1, 1), generator=generator, dtype=torch.float64)
                    amp = amp * 0.1 / (1 + fu + fv)
                    phase = torch.rand((m, 1, 1), generator=generator, dtype=torch.float64) * 2 * math.pi
                    acc += amp * torch.cos(math.pi * fu * u[:, None] + math.pi * fv * v[None, :] + phase)
            p.copy_(acc.to(p.dtype))


def split_coherence(trials: int = 100, seed: int = 0, feature_dim: int = 8, resolution: int = 64,
                    levels: int = 5, bbox=((-1.3, -1.3, -1.3), (1.3, 1.3, 1.3))) -> float:
    """Worst ``|f_child - f_parent| / |f_parent|`` over random smooth fields.

    Each trial places a parent whose projected axes sit exactly on an integer
    level ``l >= 1`` and queries a child with half the scale at the same
    position.
    """
    import numpy as np

    gen = torch.Generator().manual_seed(seed)
    rs = np.random.default_rng(seed)
    lo, hi = torch.as_tensor(bbox, dtype=torch.float64)
    worst = 0.0
    for _ in range(trials):
        field = HexplaneField(bbox, feature_dim, resolution, resolution, levels, dtype=torch.float64)
        smooth_random_planes(field, gen)
        lv = int(rs.integers(1, levels))
        scale = (field.base_scales() * 2.0**lv).reshape(1, 3)
        xyz = lo + (hi - lo) * torch.from_numpy(rs.uniform(0.05, 0.95, 3))
        pos = torch.cat([xyz, torch.tensor([rs.uniform(0.0, 1.0)], dtype=torch.float64)]).reshape(1, 4)
        with torch.no_grad():
            fp = query_residual_feature(field, pos, scale)
            fc = query_residual_feature(field, pos, scale / 2)
        worst = max(worst, ((fc - fp).norm() / fp.norm()).item())
    return worst
