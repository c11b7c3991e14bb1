"""4D Gaussian primitives: raw storage, activation, covariance assembly, split/clone.

Raw parameters are kept unconstrained (log scale, logit opacity, unnormalized
quaternion) so the optimizer never has to project back onto a feasible set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

SH_C0 = 0.28209479177387814

#: split children are shrunk by this factor
SPLIT_SCALE_DIVISOR = 1.6
INIT_OPACITY = 0.1


def num_sh_coeffs(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in [0, 3], got {degree}")
    return (degree + 1) ** 2


def inverse_sigmoid(x):
    x = torch.as_tensor(x)
    return torch.log(x / (1 - x))


def rgb_to_sh(rgb):
    return (torch.as_tensor(rgb) - 0.5) / SH_C0


@dataclass
class Gaussian4D:
    """Raw parameters of a single primitive (or a stack of them, leading dim N)."""

    raw_position: torch.Tensor  # (..., 4) x, y, z, tau
    raw_scale: torch.Tensor  # (..., 3) log domain
    raw_rotation: torch.Tensor  # (..., 4) quaternion (w, x, y, z), unnormalized
    raw_opacity: torch.Tensor  # (...) logit domain
    sh_coeffs: torch.Tensor  # (..., 3, K)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, torch.Tensor):
                setattr(self, f.name, torch.as_tensor(value, dtype=torch.float64))


@dataclass
class ActivatedGaussian:
    position: torch.Tensor
    scale: torch.Tensor
    rotation: torch.Tensor
    opacity: torch.Tensor
    sh_coeffs: torch.Tensor


def _check_finite(name, x):
    x = x.detach()
    bad = ~torch.isfinite(x)
    if bad.any():
        idx = torch.nonzero(bad.reshape(x.shape[0], -1).any(dim=1) if x.dim() > 1 else bad)
        first = idx.flatten()[0].item() if x.dim() > 0 else 0
        raise ValueError(f"non-finite {name} at primitive index {first}")


def activate(g) -> ActivatedGaussian:
    """Map raw parameters to their constrained counterparts.

    Accepts a :class:`Gaussian4D` or anything exposing the same raw fields
    (e.g. :class:`GaussianCloud`).
    """
    for name in ("raw_position", "raw_scale", "raw_rotation", "raw_opacity", "sh_coeffs"):
        t = getattr(g, name)
        if t.dim() == 0:
            t = t.reshape(1)
        elif t.dim() == 1 and name != "raw_opacity":
            t = t.unsqueeze(0)
        _check_finite(name, t)
    return ActivatedGaussian(
        position=g.raw_position,
        scale=torch.exp(g.raw_scale),
        rotation=torch.nn.functional.normalize(g.raw_rotation, dim=-1),
        opacity=torch.sigmoid(g.raw_opacity),
        sh_coeffs=g.sh_coeffs,
    )


def deactivate(a: ActivatedGaussian) -> Gaussian4D:
    return Gaussian4D(
        raw_position=a.position,
        raw_scale=torch.log(a.scale),
        raw_rotation=a.rotation,
        raw_opacity=inverse_sigmoid(a.opacity),
        sh_coeffs=a.sh_coeffs,
    )


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for unit quaternions ``(w, x, y, z)``, shape (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def covariance_from_rs(q: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for unit quaternion ``q`` and positive scales ``s``."""
    q = torch.as_tensor(q, dtype=torch.float64) if not isinstance(q, torch.Tensor) else q
    s = torch.as_tensor(s, dtype=q.dtype) if not isinstance(s, torch.Tensor) else s
    if torch.any(s <= 0):
        raise ValueError("degenerate scale: all components must be > 0")
    m = quaternion_to_matrix(q) * s.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


class GaussianCloud(torch.nn.Module):
    """Structure-of-arrays container for N primitives plus the scene box."""

    def __init__(self, raw_position, raw_scale, raw_rotation, raw_opacity, sh_coeffs, bbox):
        super().__init__()
        self.raw_position = torch.nn.Parameter(raw_position)
        self.raw_scale = torch.nn.Parameter(raw_scale)
        self.raw_rotation = torch.nn.Parameter(raw_rotation)
        self.raw_opacity = torch.nn.Parameter(raw_opacity)
        self.sh_coeffs = torch.nn.Parameter(sh_coeffs)
        bbox = torch.as_tensor(bbox, dtype=raw_position.dtype).reshape(2, 3)
        if not torch.all(bbox[0] < bbox[1]):
            raise ValueError(f"invalid bbox {bbox.tolist()}: min must be < max")
        self.register_buffer("bbox", bbox)

    PARAM_NAMES = ("raw_position", "raw_scale", "raw_rotation", "raw_opacity", "sh_coeffs")

    def __len__(self):
        return self.raw_position.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_coeffs.shape[-1]))) - 1

    def primitive(self, i: int) -> Gaussian4D:
        return Gaussian4D(*(getattr(self, n)[i].detach().clone() for n in self.PARAM_NAMES))

    def tensors(self) -> dict[str, torch.Tensor]:
        return {n: getattr(self, n) for n in self.PARAM_NAMES}

    def replace_tensors(self, new: dict[str, torch.Tensor]):
        """Swap in new per-primitive arrays (after densify/prune)."""
        n = None
        for name in self.PARAM_NAMES:
            t = new[name].detach()
            if n is None:
                n = t.shape[0]
            elif t.shape[0] != n:
                raise ValueError(f"inconsistent primitive count for {name}")
            setattr(self, name, torch.nn.Parameter(t.contiguous()))

    @classmethod
    def from_primitives(cls, prims: list[Gaussian4D], bbox):
        stacked = [torch.stack([getattr(p, n) for p in prims]) for n in cls.PARAM_NAMES]
        return cls(*stacked, bbox=bbox)


def split(g: Gaussian4D, n: int = 2, rng: torch.Generator | None = None) -> list[Gaussian4D]:
    """Replace a primitive by ``n`` smaller children sampled from its 3D density."""
    if n < 2:
        raise ValueError(f"split needs n >= 2, got {n}")
    act = activate(g)
    scale = act.scale.reshape(3)
    rot = quaternion_to_matrix(act.rotation.reshape(4))
    noise = torch.randn((n, 3), generator=rng, dtype=scale.dtype)
    offsets = (noise * scale) @ rot.T
    children = []
    for i in range(n):
        pos = g.raw_position.clone()
        pos[:3] = pos[:3] + offsets[i]
        children.append(replace(
            g,
            raw_position=pos,
            raw_scale=torch.log(scale / SPLIT_SCALE_DIVISOR),
            raw_rotation=g.raw_rotation.clone(),
            raw_opacity=g.raw_opacity.clone(),
            sh_coeffs=g.sh_coeffs.clone(),
        ))
    return children


def clone(g: Gaussian4D, grad=None, step: float = 0.0) -> Gaussian4D:
    """Duplicate ``g``, nudged by ``step`` along the unit direction of ``grad`` (xyz only)."""
    pos = g.raw_position.clone()
    if grad is not None and step != 0.0:
        d = torch.as_tensor(grad, dtype=pos.dtype)[:3]
        norm = torch.linalg.vector_norm(d)
        if norm > 0:
            pos[:3] = pos[:3] + step * d / norm
    return replace(g, raw_position=pos, raw_scale=g.raw_scale.clone(),
                   raw_rotation=g.raw_rotation.clone(), raw_opacity=g.raw_opacity.clone(),
                   sh_coeffs=g.sh_coeffs.clone())


def mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    from scipy.spatial import cKDTree

    if len(points) < 2:
        return np.ones(len(points))
    k = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(d[:, 1:].mean(axis=1), 1e-7)


def _cloud_from_points(xyz: np.ndarray, rgb: np.ndarray, tau: np.ndarray, bbox, sh_degree,
                       dtype) -> GaussianCloud:
    n = len(xyz)
    dist = mean_knn_distance(xyz)
    pos = torch.from_numpy(np.concatenate([xyz, tau[:, None]], axis=1)).to(dtype)
    scale = torch.from_numpy(np.log(dist))[:, None].repeat(1, 3).to(dtype)
    rot = torch.zeros((n, 4), dtype=dtype)
    rot[:, 0] = 1.0
    opacity = inverse_sigmoid(torch.full((n,), INIT_OPACITY, dtype=dtype))
    sh = torch.zeros((n, 3, num_sh_coeffs(sh_degree)), dtype=dtype)
    sh[:, :, 0] = rgb_to_sh(torch.from_numpy(rgb).to(dtype))
    return GaussianCloud(pos, scale, rot, opacity, sh, bbox=bbox)


def init_random(count: int, bbox, seed: int, sh_degree: int = 1,
                dtype=torch.float32) -> GaussianCloud:
    """Uniform positions in ``bbox``, uniform tau in [0, 1], random colors."""
    if count < 1:
        raise ValueError("count must be >= 1")
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if not np.all(bbox[0] < bbox[1]):
        raise ValueError(f"invalid bbox {bbox.tolist()}")
    rs = np.random.default_rng(seed)
    xyz = rs.uniform(bbox[0], bbox[1], size=(count, 3))
    tau = rs.uniform(0.0, 1.0, size=count)
    rgb = rs.uniform(0.0, 1.0, size=(count, 3))
    return _cloud_from_points(xyz, rgb, tau, bbox, sh_degree, dtype)


def init_from_points(points: np.ndarray, colors: np.ndarray, seed: int = 0, bbox=None,
                     sh_degree: int = 1, dtype=torch.float32) -> GaussianCloud:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point cloud")
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if colors.max(initial=0.0) > 1.0:
        colors = colors / 255.0
    if bbox is None:
        lo, hi = points.min(axis=0), points.max(axis=0)
        pad = np.maximum(0.05 * (hi - lo), 1e-3)
        bbox = np.stack([lo - pad, hi + pad])
    tau = np.random.default_rng(seed).uniform(0.0, 1.0, size=len(points))
    return _cloud_from_points(points, colors, tau, bbox, sh_degree, dtype)


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray]:
    """Read x,y,z and r,g,b vertex properties from an ASCII PLY file."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props, count, element, i = [], 0, None, 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:1] == ["element"]:
            element = parts[1]
            if element == "vertex":
                count = int(parts[2])
        elif parts[:1] == ["property"] and element == "vertex":
            props.append(parts[-1])
        i += 1
    body = [ln.split() for ln in lines[i + 1:i + 1 + count] if ln.strip()]
    if count == 0 or not body:
        raise ValueError(f"{path}: point cloud is empty")
    data = np.array(body, dtype=np.float64)
    col = {name: j for j, name in enumerate(props)}
    for key in ("x", "y", "z"):
        if key not in col:
            raise ValueError(f"{path}: missing vertex property '{key}'")
    xyz = data[:, [col["x"], col["y"], col["z"]]]
    if all(c in col for c in ("red", "green", "blue")):
        rgb = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    elif all(c in col for c in ("r", "g", "b")):
        rgb = data[:, [col["r"], col["g"], col["b"]]]
        if rgb.max(initial=0.0) > 1.0:
            rgb = rgb / 255.0
    else:
        rgb = np.full_like(xyz, 0.5)
    return xyz, rgb


def write_ply_points(path, xyz: np.ndarray, rgb: np.ndarray):
    rgb8 = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(int)
    out = ["ply", "format ascii 1.0", f"element vertex {len(xyz)}",
           "property float x", "property float y", "property float z",
           "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    out += [f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}" for p, c in zip(xyz.tolist(), rgb8)]
    Path(path).write_text("\n".join(out) + "\n")
