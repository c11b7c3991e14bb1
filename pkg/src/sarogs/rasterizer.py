"""Software Gaussian splatting: pinhole camera, EWA projection, alpha compositing.

Conventions: camera space is x right, y down, z forward (OpenCV).  Pixel
``(col, row)`` has its center at ``(col + 0.5, row + 0.5)``.  Images are
``(H, W, 3)`` tensors.

Compositing rules shared by :func:`rasterize` and :func:`rasterize_oracle`:

* splats are ordered front to back by ``(depth, primitive id)``;
* per-pixel alpha is ``min(0.99, opacity * G(x))`` and is dropped when below
  1/255;
* a splat is skipped once the transmittance in front of it falls below 1e-4;
* leftover transmittance multiplies the background color.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels
from .gaussian4d import covariance_from_rs

TILE = 16
LOWPASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


@dataclass
class Camera:
    """Pinhole camera with world-to-camera matrix ``world_to_camera`` (4x4)."""

    world_to_camera: torch.Tensor
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        w2c = torch.as_tensor(self.world_to_camera, dtype=torch.float64).reshape(4, 4)
        self.world_to_camera = w2c
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = w2c[:3, :3]
        err = (rot @ rot.T - torch.eye(3, dtype=rot.dtype)).abs().max().item()
        if err > 1e-6:
            raise ValueError(f"world_to_camera rotation is not orthonormal (error {err:.2e})")

    @property
    def center(self) -> torch.Tensor:
        rot, t = self.world_to_camera[:3, :3], self.world_to_camera[:3, 3]
        return -rot.T @ t

    @classmethod
    def from_c2w(cls, c2w, **intrinsics):
        c2w = np.asarray(c2w, dtype=np.float64).reshape(4, 4)
        return cls(world_to_camera=torch.from_numpy(np.linalg.inv(c2w)), **intrinsics)

    def camera_to_world(self) -> np.ndarray:
        return np.linalg.inv(self.world_to_camera.numpy())

    def intrinsics(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height, near=self.near)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for an OpenCV camera at ``eye`` looking at ``target``."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, fwd, eye
    return c2w


def sh_to_color(sh: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
    """Evaluate real SH (degree from ``sh.shape[-1]``) per channel; (P, 3, K) -> (P, 3)."""
    k = sh.shape[-1]
    d = view_dir / torch.linalg.vector_norm(view_dir, dim=-1, keepdim=True)
    x, y, z = (d[..., i:i + 1] for i in range(3))
    res = SH_C0 * sh[..., 0]
    if k > 1:
        res = res - SH_C1 * y * sh[..., 1] + SH_C1 * z * sh[..., 2] - SH_C1 * x * sh[..., 3]
    if k > 4:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        res = (res + SH_C2[0] * xy * sh[..., 4] + SH_C2[1] * yz * sh[..., 5]
               + SH_C2[2] * (2 * zz - xx - yy) * sh[..., 6] + SH_C2[3] * xz * sh[..., 7]
               + SH_C2[4] * (xx - yy) * sh[..., 8])
        if k > 9:
            res = (res + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9]
                   + SH_C3[1] * xy * z * sh[..., 10]
                   + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11]
                   + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12]
                   + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13]
                   + SH_C3[5] * z * (xx - yy) * sh[..., 14]
                   + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15])
    return torch.clamp_min(res + 0.5, 0.0)


@dataclass
class Splats:
    """Screen-space splats that survived culling."""

    means: torch.Tensor  # (P, 2) pixel coords
    cov: torch.Tensor  # (P, 2, 2) after low-pass dilation
    depth: torch.Tensor  # (P,)
    color: torch.Tensor  # (P, 3)
    opacity: torch.Tensor  # (P,)
    ids: torch.Tensor  # (P,) long, index of the source primitive

    def __len__(self):
        return self.means.shape[0]

    def subset(self, mask):
        return Splats(self.means[mask], self.cov[mask], self.depth[mask], self.color[mask],
                      self.opacity[mask], self.ids[mask])


def project_splat(position, rotation, scale, opacity, sh, cam: Camera,
                  cull: bool = True) -> Splats:
    """Project 3D Gaussians (batched, leading dim P) to screen space.

    ``cov2d = (J W Sigma W^T J^T)[:2, :2] + 0.3 I``; a splat is culled when its
    depth is not beyond the near plane or its 3-sigma box misses the image.
    """
    dtype = position.dtype
    w2c = cam.world_to_camera.to(dtype)
    rot_w, t_w = w2c[:3, :3], w2c[:3, 3]
    p = position @ rot_w.T + t_w
    x, y, z = p.unbind(-1)
    ids = torch.arange(position.shape[0])
    keep = z > cam.near
    if cull:
        position, rotation, scale, opacity, sh = (a[keep] for a in (position, rotation, scale, opacity, sh))
        p, x, y, z, ids = p[keep], x[keep], y[keep], z[keep], ids[keep]
    zs = torch.where(z > cam.near, z, torch.ones_like(z))
    inv_z = 1.0 / zs
    mx = cam.fx * x * inv_z + cam.cx
    my = cam.fy * y * inv_z + cam.cy
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], -1),
        torch.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], -1),
    ], -2)  # (P, 2, 3)
    sigma = covariance_from_rs(rotation, scale)
    tmat = jac @ rot_w
    cov = tmat @ sigma @ tmat.transpose(-1, -2)
    cov = cov + LOWPASS * torch.eye(2, dtype=dtype)
    view_dir = position - cam.center.to(dtype)
    color = sh_to_color(sh, view_dir)
    splats = Splats(torch.stack([mx, my], -1), cov, z, color, opacity, ids)
    if not cull:
        return splats
    rx = 3.0 * torch.sqrt(cov[:, 0, 0].detach())
    ry = 3.0 * torch.sqrt(cov[:, 1, 1].detach())
    mxd, myd = mx.detach(), my.detach()
    onscreen = (mxd + rx > 0) & (mxd - rx < cam.width) & (myd + ry > 0) & (myd - ry < cam.height)
    return splats.subset(onscreen)


def _sort_order(splats: Splats) -> torch.Tensor:
    by_id = torch.argsort(splats.ids)
    by_depth = torch.sort(splats.depth.detach()[by_id], stable=True).indices
    return by_id[by_depth]


def _conics(cov):
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], -1)


def _check_size(cam):
    if cam.width <= 0 or cam.height <= 0:
        raise ValueError(f"zero-size image {cam.width}x{cam.height}")


def _pixel_alpha(dx, dy, conic, opacity):
    power = -0.5 * (conic[..., 0] * dx * dx + conic[..., 2] * dy * dy) - conic[..., 1] * dx * dy
    alpha = torch.clamp_max(opacity * torch.exp(power), ALPHA_MAX)
    return torch.where(alpha >= ALPHA_MIN, alpha, torch.zeros_like(alpha))


@dataclass
class RenderResult:
    image: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W) alpha-weighted mean depth
    alpha: torch.Tensor  # (H, W) accumulated opacity
    blended: int  # splats handed to the compositor (after projection culling)
    listed: int = 0  # splats that can pass the alpha cutoff somewhere (tile lists / oracle hits)


class _Composite(torch.autograd.Function):
    """Tiled compositor; gradients flow to means, conics, opacities and colors."""

    @staticmethod
    def forward(ctx, means, conic, opacity, color, depth, tiles, bg, cam, tile):
        tile_ptr, tile_idx, tiles_x = tiles
        args = [x.detach().contiguous().numpy() for x in (means, conic, opacity, color)]
        image, dmap, trans, n_done = _kernels.composite_forward(
            *args, depth.detach().contiguous().numpy(), tile_ptr, tile_idx,
            bg.detach().numpy(), cam.width, cam.height, tile, tiles_x)
        ctx.saved = (args, tile_ptr, tile_idx, tiles_x, bg.detach().numpy(), cam.width,
                     cam.height, tile, trans, n_done)
        dmap, trans = torch.from_numpy(dmap), torch.from_numpy(trans)
        ctx.mark_non_differentiable(dmap, trans)
        return torch.from_numpy(image), dmap, trans

    @staticmethod
    def backward(ctx, grad_image, grad_depth, grad_trans):
        args, tile_ptr, tile_idx, tiles_x, bg, w, h, tile, trans, n_done = ctx.saved
        grads = _kernels.composite_backward(
            *args, tile_ptr, tile_idx, bg, w, h, tile, tiles_x, trans, n_done,
            grad_image.detach().contiguous().numpy())
        g_means, g_conic, g_opacity, g_color = (torch.from_numpy(g) for g in grads)
        return g_means, g_conic, g_opacity, g_color, None, None, None, None, None


def tile_lists(means, cov, opacity, cam: Camera, tile: int = TILE):
    """Per-tile splat lists (CSR layout) in the order of the input splats.

    A splat joins every tile touched by the screen box of its footprint
    ``opacity * G >= 1/255``, padded by one pixel; outside that box it can never
    pass the alpha cutoff, so the lists lose nothing.
    """
    ty, tx = math.ceil(cam.height / tile), math.ceil(cam.width / tile)
    with torch.no_grad():
        r2 = 2.0 * torch.log(torch.clamp_min(opacity * 255.0, 1.0))
        ex = torch.sqrt(r2 * cov[:, 0, 0]) + 1.0
        ey = torch.sqrt(r2 * cov[:, 1, 1]) + 1.0
        live = r2 > 0
        x0 = torch.floor((means[:, 0] - ex - 0.5) / tile)
        x1 = torch.floor((means[:, 0] + ex - 0.5) / tile)
        y0 = torch.floor((means[:, 1] - ey - 0.5) / tile)
        y1 = torch.floor((means[:, 1] + ey - 0.5) / tile)
        tiles_x = torch.arange(tx, dtype=means.dtype)
        tiles_y = torch.arange(ty, dtype=means.dtype)
        in_x = (tiles_x[:, None] >= x0) & (tiles_x[:, None] <= x1)  # (tx, P)
        in_y = (tiles_y[:, None] >= y0) & (tiles_y[:, None] <= y1)  # (ty, P)
        hit = (in_y[:, None, :] & in_x[None, :, :] & live).reshape(ty * tx, -1)
        counts = hit.sum(1)
        ptr = torch.zeros(ty * tx + 1, dtype=torch.int64)
        ptr[1:] = torch.cumsum(counts, 0)
        idx = torch.nonzero(hit)[:, 1]
    return ptr.numpy(), idx.numpy(), tx, hit.any(0)


def rasterize(splats: Splats, cam: Camera, background, tile: int = TILE) -> RenderResult:
    """Tiled front-to-back compositing with an analytic backward pass."""
    _check_size(cam)
    dtype = splats.means.dtype
    bg = torch.as_tensor(background, dtype=dtype).reshape(3)
    h, w = cam.height, cam.width
    if len(splats) == 0:
        return RenderResult(bg.expand(h, w, 3).clone(), torch.zeros((h, w), dtype=dtype),
                            torch.zeros((h, w), dtype=dtype), 0, 0)
    order = _sort_order(splats)
    means, cov = splats.means[order], splats.cov[order]
    color, opac, depth = splats.color[order], splats.opacity[order], splats.depth[order]
    conic = _conics(cov)
    ptr, idx, tiles_x, used = tile_lists(means, cov, opac, cam, tile)
    image, dmap, trans = _Composite.apply(means, conic, opac, color, depth,
                                          (ptr, idx, tiles_x), bg, cam, tile)
    return RenderResult(image, dmap, 1.0 - trans, len(splats), int(used.sum().item()))


def rasterize_oracle(splats: Splats, cam: Camera, background) -> RenderResult:
    """Reference compositor: every splat evaluated at every pixel, one at a time."""
    _check_size(cam)
    dtype = splats.means.dtype
    bg = torch.as_tensor(background, dtype=dtype).reshape(3)
    h, w = cam.height, cam.width
    py, px = torch.meshgrid(torch.arange(h, dtype=dtype) + 0.5,
                            torch.arange(w, dtype=dtype) + 0.5, indexing="ij")
    trans = torch.ones((h, w), dtype=dtype)
    rgb = torch.zeros((h, w, 3), dtype=dtype)
    dsum = torch.zeros((h, w), dtype=dtype)
    wsum = torch.zeros((h, w), dtype=dtype)
    listed = 0
    if len(splats):
        order = _sort_order(splats)
        conic = _conics(splats.cov)
        for i in order.tolist():
            alpha = _pixel_alpha(px - splats.means[i, 0], py - splats.means[i, 1],
                                 conic[i], splats.opacity[i])
            alpha = alpha * (trans >= T_MIN).to(dtype)
            if bool((alpha > 0).any()):
                listed += 1
            wgt = alpha * trans
            rgb = rgb + wgt[..., None] * splats.color[i]
            dsum = dsum + wgt * splats.depth[i]
            wsum = wsum + wgt
            trans = trans * (1.0 - alpha)
    rgb = rgb + trans[..., None] * bg
    return RenderResult(rgb, dsum / torch.clamp_min(wsum, 1e-10), 1.0 - trans, len(splats), listed)
