"""4D -> 3D composition at a sampling time, rendering, and lossless baking."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .decoder import lifespan_head, residual_heads
from .gaussian4d import Gaussian4D
from .rasterizer import Camera, RenderResult, project_splat, rasterize
from .temporal import DEFAULT_K, TemporalState, state_function

BAKE_THRESHOLD = 1e-3


class StaleBakeError(RuntimeError):
    pass


@dataclass
class Gaussian3D:
    position: torch.Tensor  # (P, 3)
    rotation: torch.Tensor  # (P, 4) unit quaternion
    scale: torch.Tensor  # (P, 3)
    opacity: torch.Tensor  # (P,)
    sh_coeffs: torch.Tensor  # (P, 3, K)


def subset(g, index) -> Gaussian4D:
    """Batched raw view of selected primitives (keeps autograd links)."""
    return Gaussian4D(g.raw_position[index], g.raw_scale[index], g.raw_rotation[index],
                      g.raw_opacity[index], g.sh_coeffs[index])


def primitive_features(model, g=None):
    """Residual feature and lifespan for every primitive of ``g`` (default: the model's cloud)."""
    g = model.cloud if g is None else g
    f = model.field(g.raw_position, torch.exp(g.raw_scale))
    return f, lifespan_head(model.decoder, f)


def project_to_3d(g, f, sigma, t0, decoder, k: float = DEFAULT_K, static: bool = False) -> Gaussian3D:
    """Compose initial attributes with decoded residuals at time ``t0``.

    ``static`` freezes time at each primitive's own temporal position: the
    state function is 1 and the residual heads see ``dt = 0``.
    """
    tau = g.raw_position[:, 3]
    if static:
        dt = torch.zeros_like(tau)
        gamma = torch.ones_like(tau)
    else:
        dt = t0 - tau
        gamma = state_function(TemporalState(tau, sigma, k), t0)
    res = residual_heads(decoder, f, dt)
    q = F.normalize(g.raw_rotation, dim=-1)
    return Gaussian3D(
        position=g.raw_position[:, :3] + res.d_position,
        rotation=F.normalize(q + res.d_rotation, dim=-1),
        scale=torch.exp(g.raw_scale + res.d_scale),
        opacity=torch.sigmoid(g.raw_opacity) * gamma,
        sh_coeffs=g.sh_coeffs + res.d_sh,
    )


def render_gaussians(g3: Gaussian3D, cam: Camera, background, rasterizer=rasterize):
    splats = project_splat(g3.position, g3.rotation, g3.scale, g3.opacity, g3.sh_coeffs, cam)
    return rasterizer(splats, cam, background), splats


def render(model, cam: Camera, t0: float, background=(0.0, 0.0, 0.0), static: bool = False,
           features=None, rasterizer=rasterize) -> RenderResult:
    """Unbaked render path: features, lifespans and residuals computed for every primitive."""
    f, sigma = primitive_features(model) if features is None else features
    g3 = project_to_3d(model.cloud, f, sigma, t0, model.decoder, model.k, static)
    out, splats = render_gaussians(g3, cam, background, rasterizer)
    out.splats = splats
    return out


@dataclass
class BakedCloud:
    raw: Gaussian4D
    features: torch.Tensor
    lifespan: torch.Tensor
    version: int
    k: float


@torch.no_grad()
def bake(model) -> BakedCloud:
    raw = subset(model.cloud, slice(None))
    raw = Gaussian4D(*(t.detach().clone() for t in (raw.raw_position, raw.raw_scale,
                                                     raw.raw_rotation, raw.raw_opacity,
                                                     raw.sh_coeffs)))
    f, sigma = primitive_features(model)
    return BakedCloud(raw, f.detach().clone(), sigma.detach().clone(), model.version, model.k)


@torch.no_grad()
def render_from_baked(baked: BakedCloud, model, t0: float, cam: Camera,
                      background=(0.0, 0.0, 0.0), threshold: float = BAKE_THRESHOLD,
                      rasterizer=rasterize) -> RenderResult:
    """Render from precomputed features, skipping primitives whose state is below ``threshold``."""
    if baked.version != model.version:
        raise StaleBakeError(
            f"bake is stale: baked at model version {baked.version}, model is at {model.version}")
    tau = baked.raw.raw_position[:, 3]
    gamma = state_function(TemporalState(tau, baked.lifespan, baked.k), t0)
    keep = torch.nonzero(gamma >= threshold).flatten()
    if len(keep) == len(tau):
        g, f, sigma = baked.raw, baked.features, baked.lifespan
    else:
        g, f, sigma = subset(baked.raw, keep), baked.features[keep], baked.lifespan[keep]
    g3 = project_to_3d(g, f, sigma, t0, model.decoder, baked.k)
    out, splats = render_gaussians(g3, cam, background, rasterizer)
    splats.ids = keep[splats.ids]
    out.splats = splats
    return out
