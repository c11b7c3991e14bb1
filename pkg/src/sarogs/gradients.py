"""Finite-difference certification of every backward pass on the parameter -> loss path.

Backward passes come from autograd for plain tensor code and from the
hand-written compositor kernel for rasterization; this module checks both
against central differences in double precision.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable

import torch

SINGLE_OP_TOL = 1e-6
PIPELINE_TOL = 1e-4
# rounding floor of a central difference, in units of eps * |f| / h
NOISE_FACTOR = 16.0


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    failing: str | None
    h: float
    tol: float
    coords: int
    noise_limited: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.failing is None

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "passed": self.passed})


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_diff_check(fn: Callable[..., torch.Tensor], inputs: dict[str, torch.Tensor],
                      h: float = 1e-6, tol: float = SINGLE_OP_TOL, op: str = "op",
                      max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``fn(**inputs)`` against central differences.

    Non-scalar outputs are contracted with fixed random weights first.  With
    ``max_coords`` only that many coordinates per input are probed (chosen at
    random, seeded).  A coordinate whose disagreement is below the rounding
    floor of the difference quotient (``16 eps |f| / h``) cannot be resolved by
    finite differences; it is counted in ``noise_limited`` instead of failing.
    """
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    leaves = {k: v.detach().clone().double().requires_grad_(True) for k, v in inputs.items()}
    out = fn(**leaves)
    weights = torch.randn(out.shape, generator=gen, dtype=torch.float64) if out.dim() else None

    def scalar(o):
        return (o * weights).sum() if weights is not None else o

    grads = torch.autograd.grad(scalar(out), list(leaves.values()), allow_unused=True)
    worst, failing, n, noisy = 0.0, None, 0, 0
    eps = torch.finfo(torch.float64).eps
    with torch.no_grad():
        for (name, x), g in zip(leaves.items(), grads):
            g = torch.zeros_like(x) if g is None else g
            flat, gflat = x.view(-1), g.reshape(-1)
            idx = torch.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_coords].sort().values
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                fp = scalar(fn(**leaves)).item()
                flat[i] = orig - h
                fm = scalar(fn(**leaves)).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                analytic = gflat[i].item()
                n += 1
                err = relative_error(analytic, numeric)
                if err >= tol and abs(analytic - numeric) <= NOISE_FACTOR * eps * max(abs(fp), abs(fm)) / h:
                    noisy += 1
                    continue
                if err > worst:
                    worst = err
                if err >= tol and failing is None:
                    failing = f"{name}[{i}] analytic={analytic:.10g} numeric={numeric:.10g}"
    return GradCheckReport(op, worst, failing, h, tol, n, noisy, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Standard suite


def _rand(gen, *shape, lo=-1.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)


def micro_camera(size: int = 8):
    from .rasterizer import Camera

    return Camera(torch.eye(4, dtype=torch.float64), fx=float(size), fy=float(size),
                  cx=size / 2, cy=size / 2, width=size, height=size)


def micro_model(n: int = 3, seed: int = 0):
    """Tiny double-precision model with every head randomized (nothing trivially zero)."""
    from .gaussian4d import GaussianCloud
    from .model import ModelConfig, SaroModel

    gen = torch.Generator().manual_seed(seed)
    pos = torch.cat([_rand(gen, n, 2, lo=-0.25, hi=0.25), _rand(gen, n, 1, lo=2.0, hi=3.0),
                     _rand(gen, n, 1, lo=0.3, hi=0.7)], dim=1)
    scale = torch.log(_rand(gen, n, 3, lo=0.15, hi=0.3))
    rot = _rand(gen, n, 4)
    rot[:, 0] += 2.0
    opacity = _rand(gen, n, lo=-0.5, hi=1.0)
    sh = _rand(gen, n, 3, 4, lo=-0.5, hi=0.5)
    cloud = GaussianCloud(pos, scale, rot, opacity, sh, bbox=[[-1, -1, 1.5], [1, 1, 3.5]])
    cfg = ModelConfig(feature_dim=4, resolution=8, time_resolution=8, levels=3, hidden=16,
                      lifespan_hidden=8, init_lifespan=0.4, field_init_scale=0.5)
    model = SaroModel(cloud, cfg, generator=gen).double()
    with torch.no_grad():
        for lin in model.decoder.modules():
            if isinstance(lin, torch.nn.Linear):
                lin.weight.copy_(_rand(gen, *lin.weight.shape, lo=-0.3, hi=0.3))
                lin.bias.copy_(_rand(gen, *lin.bias.shape, lo=-0.1, hi=0.1))
    return model


def _functional(model, names):
    """Wrap ``model`` so the selected parameters become explicit function inputs."""
    params = dict(model.named_parameters())

    def call(body):
        def fn(**kw):
            saved = {}
            for name in names:
                mod, attr = _owner(model, name)
                saved[name] = getattr(mod, attr)
                delattr(mod, attr)
                setattr(mod, attr, kw[name.replace(".", "__")])
            try:
                return body()
            finally:
                for name in names:
                    mod, attr = _owner(model, name)
                    delattr(mod, attr)
                    setattr(mod, attr, saved[name])
        return fn

    return call, {n.replace(".", "__"): params[n].detach() for n in names}


def _owner(model, dotted):
    parts = dotted.split(".")
    mod = model
    for p in parts[:-1]:
        mod = getattr(mod, p) if not p.isdigit() else mod[int(p)]
    return mod, parts[-1]


def standard_checks(full: bool = True):
    """(name, fn, inputs, tol, max_coords) for every differentiable op and the full pipeline."""
    from . import decoder as dec
    from . import losses, projection, rasterizer, residual_field as rf, temporal
    from .gaussian4d import covariance_from_rs

    gen = torch.Generator().manual_seed(1234)
    checks = []

    def add(name, fn, inputs, tol=SINGLE_OP_TOL, max_coords=None):
        checks.append((name, fn, inputs, tol, max_coords))

    # temporal
    add("state_function",
        lambda tau, sigma, t: temporal.state_function(temporal.TemporalState(tau, sigma), t),
        dict(tau=_rand(gen, 6, lo=0, hi=1), sigma=_rand(gen, 6, lo=0.1, hi=1), t=_rand(gen, 6, lo=0, hi=1)))
    add("approx_normal_cdf", temporal.approx_normal_cdf, dict(x=_rand(gen, 8, lo=-3, hi=3)))
    add("temporal_integral",
        lambda tau, sigma: temporal.temporal_integral(temporal.TemporalState(tau, sigma), 0.0, 1.0),
        dict(tau=_rand(gen, 6, lo=-0.2, hi=1.2), sigma=_rand(gen, 6, lo=0.05, hi=2)))

    # geometry
    q = _rand(gen, 4, 4)
    add("covariance_from_rs", lambda q, s: covariance_from_rs(q / q.norm(dim=-1, keepdim=True), s),
        dict(q=q, s=_rand(gen, 4, 3, lo=0.2, hi=1.5)))
    add("sh_to_color", rasterizer.sh_to_color,
        dict(sh=_rand(gen, 5, 3, 16, lo=-0.3, hi=0.3), view_dir=_rand(gen, 5, 3)))

    # residual field
    add("bilinear", lambda plane, u, v: rf.bilinear(plane, u, v),
        dict(plane=_rand(gen, 3, 6, 5), u=_rand(gen, 7, lo=0.1, hi=0.9), v=_rand(gen, 7, lo=0.1, hi=0.9)))
    add("sample_spatial_through_pooling",
        lambda level0, uv, level: rf.sample_spatial(rf.build_thumbnails(level0, 3), uv, level),
        dict(level0=_rand(gen, 2, 8, 8), uv=_rand(gen, 5, 2, lo=0.1, hi=0.9),
             level=torch.tensor([0.3, 0.7, 1.2, 1.6, 0.55], dtype=torch.float64)))
    model = micro_model()
    names = [n for n, _ in model.field.named_parameters()]
    call, inputs = _functional(model.field, names)
    pos = model.cloud.raw_position.detach().clone()
    pos[:, :3] = _rand(gen, 3, 3, lo=-0.8, hi=0.8) + torch.tensor([0.0, 0.0, 2.5], dtype=torch.float64)
    sc = torch.tensor([[0.3, 0.45, 0.6], [0.8, 0.35, 0.55], [0.4, 0.7, 0.9]], dtype=torch.float64)
    add("query_residual_feature",
        lambda position, scale, **kw: call(lambda: model.field(position, scale))(**kw),
        dict(position=pos, scale=sc, **inputs), max_coords=120)

    # decoder
    names = [n for n, _ in model.decoder.named_parameters()]
    dcall, dinputs = _functional(model.decoder, names)
    f = _rand(gen, 4, 4)
    add("lifespan_head", lambda f, **kw: dcall(lambda: dec.lifespan_head(model.decoder, f))(**kw),
        dict(f=f, **dinputs), max_coords=60)

    def heads(f, dt, **kw):
        def body():
            r = dec.residual_heads(model.decoder, f, dt)
            return torch.cat([r.d_position, r.d_scale, r.d_rotation, r.d_sh.flatten(1)], dim=1)
        return dcall(body)(**kw)

    add("residual_heads", heads, dict(f=f, dt=_rand(gen, 4, lo=-0.5, hi=0.5), **dinputs), max_coords=60)

    # projection 4D -> 3D
    cloud_names = list(model.cloud.PARAM_NAMES)

    def compose(f, sigma, **kw):
        g = projection.Gaussian4D(*(kw[n] for n in cloud_names))
        g3 = projection.project_to_3d(g, f, sigma, 0.55, model.decoder, model.k)
        return torch.cat([g3.position, g3.rotation, g3.scale, g3.opacity[:, None],
                          g3.sh_coeffs.flatten(1)], dim=1)

    add("project_to_3d", compose,
        dict(f=_rand(gen, 3, 4), sigma=_rand(gen, 3, lo=0.2, hi=0.6),
             **{n: getattr(model.cloud, n).detach() for n in cloud_names}))

    cam = micro_camera()

    def splat_fn(position, rotation, scale, opacity, sh):
        s = rasterizer.project_splat(position, rotation / rotation.norm(dim=-1, keepdim=True),
                                     scale, opacity, sh, cam, cull=False)
        return torch.cat([s.means, s.cov.flatten(1), s.depth[:, None], s.color], dim=1)

    add("project_splat", splat_fn,
        dict(position=pos[:, :3], rotation=_rand(gen, 3, 4) + torch.tensor([2.0, 0, 0, 0], dtype=torch.float64),
             scale=sc, opacity=_rand(gen, 3, lo=0.3, hi=0.8), sh=_rand(gen, 3, 3, 4, lo=-0.3, hi=0.3)))

    means = torch.tensor([[3.2, 3.9], [4.6, 4.1], [3.7, 5.3], [5.5, 2.6], [2.4, 2.2]], dtype=torch.float64)
    cov = torch.stack([torch.tensor([[2.0 + i * 0.4, 0.3 * (-1) ** i], [0.3 * (-1) ** i, 1.6 + i * 0.3]],
                                    dtype=torch.float64) for i in range(5)])

    def raster_fn(means, cov, color, opacity):
        s = rasterizer.Splats(means, cov, torch.arange(5, dtype=torch.float64) + 1.0, color, opacity,
                              torch.arange(5))
        return rasterizer.rasterize(s, cam, (0.1, 0.2, 0.3)).image

    add("rasterize", raster_fn,
        dict(means=means, cov=cov, color=_rand(gen, 5, 3, lo=0, hi=1), opacity=_rand(gen, 5, lo=0.3, hi=0.85)),
        tol=PIPELINE_TOL)

    # losses
    img, ref = _rand(gen, 12, 12, 3, lo=0, hi=1), _rand(gen, 12, 12, 3, lo=0, hi=1)
    add("l1_loss", losses.l1_loss, dict(img=img, ref=ref))
    add("ssim", lambda img: losses.ssim(img, ref), dict(img=img), max_coords=80)
    add("dssim", lambda img: losses.dssim(img, ref), dict(img=img), max_coords=80)
    add("l_sr", lambda f, **kw: dcall(lambda: losses.l_sr(model, f))(**kw), dict(f=f, **dinputs), max_coords=60)
    add("total_loss", lambda img, f: losses.total_loss(img, ref, model, losses.LossWeights(), f=f),
        dict(img=img, f=f), max_coords=80)

    if full:
        add("full_pipeline", *full_pipeline_check(), tol=PIPELINE_TOL, max_coords=40)
    return checks


def full_pipeline_check(n_prims: int = 3, size: int = 8, times=(0.35, 0.65), seed: int = 7):
    """params -> L1 over an 8x8 render at two timestamps, every parameter tensor exposed."""
    from .losses import l1_loss
    from .projection import render

    model = micro_model(n_prims, seed)
    cam = micro_camera(size)
    gen = torch.Generator().manual_seed(seed)
    refs = [_rand(gen, size, size, 3, lo=0, hi=1) for _ in times]
    names = [n for n, _ in model.named_parameters()]
    call, inputs = _functional(model, names)

    def body():
        return sum(l1_loss(render(model, cam, t, (0.0, 0.0, 0.0)).image, r) for t, r in zip(times, refs))

    return (lambda **kw: call(body)(**kw)), inputs


def run_suite(full: bool = True, h: float = 1e-6) -> list[GradCheckReport]:
    reports = []
    for name, fn, inputs, tol, max_coords in standard_checks(full):
        reports.append(finite_diff_check(fn, inputs, h=h, tol=tol, op=name, max_coords=max_coords))
    return reports


def corrupt(fn, factor: float = 1.01):
    """Wrap ``fn`` (single tensor in/out) with a deliberately wrong backward (mutation testing)."""

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            with torch.enable_grad():
                xd = x.detach().requires_grad_(True)
                y = fn(xd)
            ctx.save_for_backward(xd)
            ctx.y = y
            return y.detach()

        @staticmethod
        def backward(ctx, g):
            (xd,) = ctx.saved_tensors
            (gx,) = torch.autograd.grad(ctx.y, xd, g)
            return gx * factor

    return Bad.apply

