"""Adam updates, the lifespan-aware per-primitive schedule, densification and training."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .decoder import lifespan_head, residual_heads
from .gaussian4d import (SPLIT_SCALE_DIVISOR, init_from_points, init_random,
                         inverse_sigmoid, quaternion_to_matrix, read_ply_points)
from .losses import LossWeights, dssim, l1_loss, psnr, scale_residual_penalty
from .model import ModelConfig, SaroModel
from .projection import primitive_features, project_to_3d, render_gaussians
from .temporal import TemporalState, temporal_integral

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
RESET_OPACITY = 0.01
# parameter groups that receive per-primitive lr multipliers
ADAPTIVE_GROUPS = ("raw_position", "raw_scale", "raw_rotation", "sh_coeffs")


@dataclass
class ScheduleConfig:
    iterations: int = 20000
    warmup: int = 1000
    batch_size: int = 4
    refresh_every: int = 50
    densify_every: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    opacity_reset_every: int = 2000
    kappa_base: float = 1e-3
    prune_opacity: float = 0.005
    size_threshold: float = 0.01  # fraction of the scene extent
    max_primitives: int = 200_000
    max_lr_multiplier: float = 100.0
    # (start, end) learning rates; position is multiplied by the scene extent
    lr_position: tuple = (1.6e-4, 1.6e-6)
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_field: tuple = (3.2e-3, 3.2e-6)
    lr_decoder: tuple = (1.6e-4, 1.6e-7)
    lambda1: float = 0.2
    lambda2: float = 0.8
    init: str = "random"  # or "points"
    init_count: int = 10000
    log_every: int = 100

    def __post_init__(self):
        for name in ("refresh_every", "densify_every", "opacity_reset_every", "batch_size", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kappa_base <= 0:
            raise ValueError(f"kappa_base must be > 0, got {self.kappa_base}")
        if self.iterations < 0 or self.warmup < 0:
            raise ValueError("iterations and warmup must be >= 0")
        if self.init not in ("random", "points"):
            raise ValueError(f"init must be 'random' or 'points', got {self.init!r}")
        self.lr_position = tuple(self.lr_position)
        self.lr_field = tuple(self.lr_field)
        self.lr_decoder = tuple(self.lr_decoder)

    def to_dict(self):
        return asdict(self)


PROFILES = {
    # monocular captures: static warm-up, random init, black background
    "dnerf": dict(iterations=20000, warmup=1000, opacity_reset_every=2000, densify_from=500,
                  densify_until=15000, init="random", init_count=10000),
    # multi-view captures: no warm-up, point-cloud init
    "multiview": dict(iterations=14000, warmup=0, opacity_reset_every=3000, densify_from=500,
                      densify_until=10000, init="points"),
}


def profile(name: str, iterations: int | None = None, **overrides) -> ScheduleConfig:
    """Built-in profile; a custom ``iterations`` rescales every phase boundary proportionally."""
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    base = dict(PROFILES[name])
    if iterations is not None and iterations != base["iterations"]:
        r = iterations / base["iterations"]
        for key in ("warmup", "opacity_reset_every", "densify_from", "densify_until"):
            base[key] = max(1, int(round(base[key] * r))) if base[key] else 0
        base["iterations"] = iterations
    base.update(overrides)
    return ScheduleConfig(**base)


# ---------------------------------------------------------------- schedule

def adaptive_schedule(integral, integral_max, kappa_base: float, lr_base: float,
                      max_multiplier: float = 100.0):
    """Per-primitive densify threshold and learning rate from the temporal integral.

    ``kappa_i = kappa_base * I_i / I_max`` and ``lr_i = lr_base * I_max / I_i``,
    with the multiplier ``I_max / I_i`` capped at ``max_multiplier``.
    """
    integral = torch.as_tensor(integral, dtype=torch.float64)
    integral_max = torch.as_tensor(integral_max, dtype=torch.float64)
    if torch.any(integral < 0) or torch.any(integral_max <= 0):
        raise ValueError("integrals must be >= 0 and I_max > 0")
    ratio = integral / integral_max
    mult = torch.clamp(integral_max / integral, max=max_multiplier)
    return kappa_base * ratio, lr_base * mult


def lr_decay(iteration: int, start: float, end: float, total: int) -> float:
    """Log-linear interpolation from ``start`` (iteration 0) to ``end`` (iteration ``total``)."""
    if total <= 0:
        return start
    r = min(max(iteration / total, 0.0), 1.0)
    return math.exp((1.0 - r) * math.log(start) + r * math.log(end))


@dataclass
class TrainState:
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    steps: dict = field(default_factory=dict)  # name -> int
    integrals: torch.Tensor | None = None
    integral_max: float = 1.0
    grad_accum: torch.Tensor | None = None
    grad_count: torch.Tensor | None = None
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def reset_accumulators(self, n: int):
        self.grad_accum = torch.zeros(n, dtype=torch.float64)
        self.grad_count = torch.zeros(n, dtype=torch.float64)


@torch.no_grad()
def refresh_integrals(model: SaroModel, state: TrainState, t_window=(0.0, 1.0)):
    """Recompute ``I_i`` over ``t_window`` from the current (tau_i, sigma_i)."""
    f = model.field(model.cloud.raw_position, torch.exp(model.cloud.raw_scale))
    sigma = lifespan_head(model.decoder, f).double()
    tau = model.cloud.raw_position[:, 3].double()
    integral = temporal_integral(TemporalState(tau, sigma, model.k), *t_window)
    integral = torch.clamp_min(integral, torch.finfo(torch.float64).tiny)
    state.integrals = integral
    state.integral_max = float(integral.max())
    return integral


def lr_multipliers(state: TrainState, max_multiplier: float = 100.0) -> torch.Tensor:
    if state.integrals is None:
        raise RuntimeError("refresh_integrals has not been called")
    return adaptive_schedule(state.integrals, state.integral_max, 1.0, 1.0, max_multiplier)[1]


def _expand_multiplier(name: str, mult: torch.Tensor, param: torch.Tensor) -> torch.Tensor:
    m = mult.to(param.dtype)
    if name == "sh_coeffs":
        out = torch.ones_like(param)
        out[:, :, 0] = m[:, None]
        return out
    return m.reshape(-1, *([1] * (param.dim() - 1)))


@torch.no_grad()
def adam_step(params: dict, state: TrainState, lrs: dict, multipliers: dict | None = None):
    """One Adam update.  ``multipliers[name]`` scales the lr per primitive (leading dim)."""
    b1, b2 = BETAS
    multipliers = multipliers or {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.moments:
            state.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
            state.steps[name] = 0
        m, v = state.moments[name]
        state.steps[name] += 1
        step = state.steps[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        update = lrs[name] * mhat / (torch.sqrt(vhat) + ADAM_EPS)
        if name in multipliers and multipliers[name] is not None:
            update = update * _expand_multiplier(name, multipliers[name], p)
        p.sub_(update)


def parameter_groups(model: SaroModel) -> dict:
    out = dict(model.cloud.tensors())
    for i, p in enumerate(model.field.spatial):
        out[f"field.spatial.{i}"] = p
    for i, p in enumerate(model.field.spacetime):
        out[f"field.spacetime.{i}"] = p
    for name, p in model.decoder.named_parameters():
        out[f"decoder.{name}"] = p
    return out


def scene_extent(bbox) -> float:
    bbox = torch.as_tensor(bbox, dtype=torch.float64).reshape(2, 3)
    return float(torch.linalg.vector_norm(bbox[1] - bbox[0]))


def learning_rates(cfg: ScheduleConfig, iteration: int, names, extent: float) -> dict:
    pos = lr_decay(iteration, cfg.lr_position[0] * extent, cfg.lr_position[1] * extent, cfg.iterations)
    fld = lr_decay(iteration, *cfg.lr_field, cfg.iterations)
    dec = lr_decay(iteration, *cfg.lr_decoder, cfg.iterations)
    fixed = {"raw_position": pos, "raw_scale": cfg.lr_scale, "raw_rotation": cfg.lr_rotation,
             "raw_opacity": cfg.lr_opacity, "sh_coeffs": cfg.lr_sh}
    out = {}
    for n in names:
        out[n] = fixed[n] if n in fixed else fld if n.startswith("field.") else dec
    return out


# ---------------------------------------------------------------- densification

def _rebuild(model: SaroModel, state: TrainState, src: torch.Tensor, fresh: torch.Tensor,
             edits: dict):
    """Gather rows ``src`` of every primitive array; rows flagged ``fresh`` get zero moments."""
    new = {}
    for name, p in model.cloud.tensors().items():
        t = p.detach()[src].clone()
        if name in edits:
            t = edits[name](t)
        new[name] = t
        if name in state.moments:
            m, v = state.moments[name]
            keep = (~fresh).to(m.dtype).reshape(-1, *([1] * (m.dim() - 1)))
            state.moments[name] = (m[src] * keep, v[src] * keep)
    model.cloud.replace_tensors(new)
    model.bump_version()
    state.reset_accumulators(len(src))
    if state.integrals is not None:
        state.integrals = state.integrals[src].clone()


@torch.no_grad()
def densify_and_prune(model: SaroModel, state: TrainState, kappa, cfg: ScheduleConfig,
                      generator: torch.Generator | None = None) -> dict:
    """Clone small and split large primitives whose mean gradient norm exceeds ``kappa``; prune faint ones."""
    cloud = model.cloud
    n = len(cloud)
    kappa = torch.as_tensor(kappa, dtype=torch.float64).expand(n)
    if state.grad_accum is None or len(state.grad_accum) != n:
        state.reset_accumulators(n)
    mean_grad = state.grad_accum / state.grad_count.clamp_min(1.0)
    selected = mean_grad > kappa
    scale = torch.exp(cloud.raw_scale.detach())
    small = scale.max(1).values <= cfg.size_threshold * scene_extent(cloud.bbox)
    room = max(cfg.max_primitives - n, 0)
    cand = torch.nonzero(selected).flatten()
    if len(cand) > room:
        order = torch.sort(-mean_grad[cand], stable=True).indices
        cand = torch.sort(cand[order[:room]]).values
    chosen = torch.zeros(n, dtype=torch.bool)
    chosen[cand] = True
    clone_idx = torch.nonzero(chosen & small).flatten()
    split_idx = torch.nonzero(chosen & ~small).flatten()

    # layout: kept originals, clone copies, then two children per split parent
    keep_orig = torch.nonzero(~(chosen & ~small)).flatten()
    src = torch.cat([keep_orig, clone_idx, split_idx, split_idx])
    fresh = torch.cat([torch.zeros(len(keep_orig), dtype=torch.bool),
                       torch.ones(len(clone_idx) + 2 * len(split_idx), dtype=torch.bool)])
    n_split = len(split_idx)
    first_child = len(keep_orig) + len(clone_idx)

    def edit_position(pos):
        if n_split == 0:
            return pos
        s = scale[split_idx].to(pos.dtype)
        rot = quaternion_to_matrix(torch.nn.functional.normalize(
            cloud.raw_rotation.detach()[split_idx], dim=-1)).to(pos.dtype)
        noise = torch.randn((2 * n_split, 3), generator=generator, dtype=torch.float64).to(pos.dtype)
        offs = ((noise * s.repeat(2, 1)).unsqueeze(1) @ rot.repeat(2, 1, 1).transpose(-1, -2)).squeeze(1)
        pos[first_child:, :3] += offs
        return pos

    def edit_scale(raw):
        raw[first_child:] -= math.log(SPLIT_SCALE_DIVISOR)
        return raw

    _rebuild(model, state, src, fresh, {"raw_position": edit_position, "raw_scale": edit_scale})

    opacity = torch.sigmoid(model.cloud.raw_opacity.detach())
    alive = opacity >= cfg.prune_opacity
    pruned = int((~alive).sum())
    if pruned:
        if pruned == len(alive):
            alive[torch.argmax(opacity)] = True  # never empty the cloud
            pruned -= 1
        idx = torch.nonzero(alive).flatten()
        _rebuild(model, state, idx, torch.zeros(len(idx), dtype=torch.bool), {})
    return {"cloned": len(clone_idx), "split": n_split, "pruned": pruned, "count": len(model.cloud)}


@torch.no_grad()
def opacity_reset(model: SaroModel, state: TrainState | None = None, value: float = RESET_OPACITY):
    """Clamp activated opacity to ``min(current, value)`` and clear the opacity moments."""
    raw = model.cloud.raw_opacity
    cap = inverse_sigmoid(torch.tensor(value, dtype=torch.float64)).to(raw.dtype)
    raw.copy_(torch.minimum(raw, cap))
    if state is not None and "raw_opacity" in state.moments:
        m, v = state.moments["raw_opacity"]
        m.zero_()
        v.zero_()
    model.bump_version()


# ---------------------------------------------------------------- training

class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``model`` still holds the last finite parameters."""

    def __init__(self, message, model, iteration):
        super().__init__(message)
        self.model = model
        self.iteration = iteration


@dataclass
class TrainResult:
    model: SaroModel
    state: TrainState
    log: list
    seconds: float


def _tensor_image(frame):
    if frame.image is None:
        raise ValueError(f"frame {frame.image_path} has no image loaded")
    return frame.image


def initial_model(dataset, cfg: ScheduleConfig, seed: int,
                  model_config: ModelConfig | None = None) -> SaroModel:
    model_config = model_config or ModelConfig()
    bbox = dataset.bbox
    cloud = None
    if cfg.init == "points" and dataset.root is not None and (dataset.root / "points.ply").exists():
        xyz, rgb = read_ply_points(dataset.root / "points.ply")
        cloud = init_from_points(xyz, rgb, seed=seed, bbox=bbox, sh_degree=model_config.sh_degree)
    if cloud is None:
        cloud = init_random(cfg.init_count, bbox, seed, sh_degree=model_config.sh_degree)
    gen = torch.Generator().manual_seed(seed)
    return SaroModel(cloud, model_config, generator=gen)


def batch_loss(model: SaroModel, dataset, frames, cfg: ScheduleConfig, static: bool):
    """Mean total loss over ``frames``; features and lifespans are shared across the batch."""
    w = LossWeights(cfg.lambda1, cfg.lambda2)
    f, sigma = primitive_features(model)
    l1_sum = ds_sum = 0.0
    visible = torch.zeros(len(model.cloud), dtype=torch.bool)
    for fr in frames:
        g3 = project_to_3d(model.cloud, f, sigma, fr.time, model.decoder, model.k, static)
        out, splats = render_gaussians(g3, dataset.camera(fr), dataset.background)
        ref = _tensor_image(fr).to(out.image.dtype)
        l1_sum = l1_sum + l1_loss(out.image, ref)
        ds_sum = ds_sum + dssim(out.image, ref)
        visible[splats.ids] = True
    nb = len(frames)
    l1, ds = l1_sum / nb, ds_sum / nb
    if w.lambda2 > 0:
        res = residual_heads(model.decoder, f, torch.zeros(f.shape[0], dtype=f.dtype))
        sr = scale_residual_penalty(res.d_scale)
    else:
        sr = f.new_zeros(())
    loss = (1 - w.lambda1) * l1 + w.lambda1 * ds + w.lambda2 * sr
    return loss, {"l1": l1.item(), "dssim": ds.item(), "l_sr": sr.item()}, visible


@torch.no_grad()
def heldout_psnr(model, dataset, frames) -> float | None:
    if not frames:
        return None
    vals = []
    f, sigma = primitive_features(model)
    for fr in frames:
        g3 = project_to_3d(model.cloud, f, sigma, fr.time, model.decoder, model.k)
        out, _ = render_gaussians(g3, dataset.camera(fr), dataset.background)
        vals.append(psnr(out.image, _tensor_image(fr)))
    return float(np.mean(vals))


def train(dataset, cfg: ScheduleConfig, seed: int = 0, model: SaroModel | None = None,
          model_config: ModelConfig | None = None, log_path=None, heldout: int = 4,
          callback=None) -> TrainResult:
    """Optimize a model on the train split of ``dataset``.

    Each iteration draws ``batch_size`` training frames, renders them without
    baking, and applies one Adam step on the mean loss.  During the first
    ``warmup`` iterations the scene is treated as static.  Every
    ``refresh_every`` iterations the temporal integrals (and with them the
    per-primitive lr multipliers and densify thresholds) are refreshed.
    """
    train_frames = dataset.split("train")
    if not train_frames:
        raise ValueError("dataset has no training frames")
    test_frames = dataset.split("test")[:heldout]
    t_start = time.perf_counter()
    if model is None:
        model = initial_model(dataset, cfg, seed, model_config)
    state = TrainState(rng=np.random.default_rng(seed))
    gen = torch.Generator().manual_seed(seed + 1)
    state.reset_accumulators(len(model.cloud))
    refresh_integrals(model, state)
    extent = scene_extent(model.cloud.bbox)
    log = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iterations):
            state.iteration = it
            static = it < cfg.warmup
            pick = state.rng.choice(len(train_frames), size=min(cfg.batch_size, len(train_frames)),
                                    replace=False)
            frames = [train_frames[i] for i in sorted(pick.tolist())]
            params = parameter_groups(model)
            for p in params.values():
                p.grad = None
            loss, terms, visible = batch_loss(model, dataset, frames, cfg, static)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at iteration {it}", model, it)
            loss.backward()

            with torch.no_grad():
                gpos = model.cloud.raw_position.grad
                if gpos is not None:
                    norm = torch.linalg.vector_norm(gpos.double(), dim=-1)
                    state.grad_accum[visible] += norm[visible]
                    state.grad_count[visible] += 1

            mult = lr_multipliers(state, cfg.max_lr_multiplier)
            lrs = learning_rates(cfg, it, params.keys(), extent)
            adam_step(params, state, lrs, {n: mult for n in ADAPTIVE_GROUPS})
            model.bump_version()
            step = it + 1

            if step % cfg.refresh_every == 0:
                refresh_integrals(model, state)
            event = None
            if (step > cfg.warmup and cfg.densify_from <= step <= cfg.densify_until
                    and step % cfg.densify_every == 0):
                kappa, _ = adaptive_schedule(state.integrals, state.integral_max, cfg.kappa_base, 1.0,
                                             cfg.max_lr_multiplier)
                event = densify_and_prune(model, state, kappa, cfg, gen)
                refresh_integrals(model, state)
            if step % cfg.log_every == 0 or step == cfg.iterations:
                rec = {"iter": step, "loss": loss.item(), **terms,
                       "psnr_heldout": heldout_psnr(model, dataset, test_frames),
                       "primitives": len(model.cloud)}
                if event:
                    rec["densify"] = event
                log.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
            if step % cfg.opacity_reset_every == 0 and step <= cfg.densify_until:
                opacity_reset(model, state)
            if callback is not None:
                callback(step, model, state)
    finally:
        if log_file:
            log_file.close()
    state.iteration = cfg.iterations
    for p in parameter_groups(model).values():
        p.grad = None
    return TrainResult(model, state, log, time.perf_counter() - t_start)
