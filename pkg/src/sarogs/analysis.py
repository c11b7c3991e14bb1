"""Lifespan-based static/dynamic segmentation and held-out evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .gaussian4d import GaussianCloud
from .losses import dssim_variants, l1_loss, psnr, ssim
from .model import SaroModel
from .projection import bake, primitive_features, render, render_from_baked

OTSU_BINS = 256


def otsu_threshold(values, bins: int = OTSU_BINS) -> float | None:
    """Otsu's threshold over a 1D sample; ``None`` when the sample has no spread."""
    x = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(x.min()), float(x.max())
    if not hi - lo > 1e-12 * max(1.0, abs(lo), abs(hi)):
        return None
    hist, edges = np.histogram(x, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[1:] + edges[:-1])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    mu0 = s0 / np.maximum(w0, 1)
    mu1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    i = int(np.argmax(between))
    # put the cut on the upper edge of the last bin of the lower class
    return float(edges[i + 1])


@dataclass
class Segmentation:
    dynamic: np.ndarray  # (N,) bool
    lifespan: np.ndarray  # (N,)
    threshold: float | None  # sigma* in lifespan units
    degenerate: bool

    @property
    def static(self) -> np.ndarray:
        return ~self.dynamic

    def to_json(self) -> dict:
        return {"threshold": self.threshold, "degenerate": self.degenerate,
                "dynamic": int(self.dynamic.sum()), "static": int(self.static.sum())}


def segment_lifespans(sigma, threshold: float | None = None) -> Segmentation:
    """Label ``sigma_i < sigma*`` as dynamic.  Without ``threshold`` Otsu runs on log sigma.

    If every lifespan is equal Otsu has nothing to split: all primitives are
    labelled static and ``degenerate`` is set.
    """
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if sigma.size == 0:
        raise ValueError("no primitives to segment")
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("lifespans must be finite and positive")
    if threshold is not None:
        if threshold <= 0:
            raise ValueError(f"lifespan threshold must be > 0, got {threshold}")
        return Segmentation(sigma < threshold, sigma, float(threshold), False)
    cut = otsu_threshold(np.log(sigma))
    if cut is None:
        return Segmentation(np.zeros(sigma.size, dtype=bool), sigma, None, True)
    thr = float(np.exp(cut))
    return Segmentation(sigma < thr, sigma, thr, False)


@torch.no_grad()
def model_lifespans(model: SaroModel) -> np.ndarray:
    _, sigma = primitive_features(model)
    return sigma.double().numpy()


def segment_by_lifespan(model: SaroModel, threshold: float | None = None) -> Segmentation:
    return segment_lifespans(model_lifespans(model), threshold)


@torch.no_grad()
def sub_model(model: SaroModel, mask) -> SaroModel:
    """Copy of ``model`` keeping only primitives where ``mask`` is true (field and decoder shared by value)."""
    idx = torch.as_tensor(np.flatnonzero(np.asarray(mask)), dtype=torch.long)
    if len(idx) == 0:
        raise ValueError("sub-cloud would be empty")
    c = model.cloud
    cloud = GaussianCloud(*(getattr(c, n).detach()[idx].clone() for n in c.PARAM_NAMES),
                          bbox=c.bbox.clone())
    out = SaroModel(cloud, model.config)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("cloud.")}
    out.load_state_dict({**state, **{f"cloud.{k}": v for k, v in cloud.state_dict().items()}})
    return out


@torch.no_grad()
def evaluate(model: SaroModel, dataset, split: str = "test", baked: bool = False,
             keep_images: bool = False) -> dict:
    """Average PSNR, SSIM, both D-SSIM variants and L1 over a split, plus render timing."""
    frames = dataset.split(split)
    if not frames:
        raise ValueError(f"split {split!r} is empty")
    baked_cloud = bake(model) if baked else None
    rows, images = [], []
    for fr in frames:
        if fr.image is None:
            raise ValueError(f"frame {fr.image_path} has no image loaded")
        cam = dataset.camera(fr)
        t0 = time.perf_counter()
        if baked_cloud is not None:
            out = render_from_baked(baked_cloud, model, fr.time, cam, dataset.background)
        else:
            out = render(model, cam, fr.time, dataset.background)
        ms = 1e3 * (time.perf_counter() - t0)
        img = out.image.double()
        ref = fr.image.double()
        row = {"image": fr.image_path, "time": fr.time, "psnr": psnr(img, ref),
               "ssim": float(ssim(img, ref)), "l1": float(l1_loss(img, ref)), "render_ms": ms,
               "blended": out.blended, **dssim_variants(img, ref)}
        rows.append(row)
        if keep_images:
            images.append((fr, out.image))
    keys = ("psnr", "ssim", "dssim_channel_mean", "dssim_global", "l1", "render_ms")
    report = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    report.update(split=split, frames=len(rows), primitives=len(model.cloud), baked=baked,
                  per_frame=rows)
    if keep_images:
        report["_images"] = images
    return report


def segmentation_accuracy(seg: Segmentation, labels, weights=None) -> float:
    """(Weighted) fraction of primitives whose predicted dynamic flag matches ``labels``."""
    labels = np.asarray(labels, dtype=bool)
    hit = (seg.dynamic == labels).astype(np.float64)
    if weights is None:
        return float(hit.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float((hit * w).sum() / w.sum())


def teacher_labels(model: SaroModel, teacher) -> np.ndarray:
    """Ground-truth flag per student primitive: label of the nearest teacher blob alive at its tau."""
    pos = model.cloud.raw_position.detach().double().numpy()
    labels = np.zeros(len(pos), dtype=bool)
    for i, (x, tau) in enumerate(zip(pos[:, :3], np.clip(pos[:, 3], 0.0, 1.0))):
        centers = teacher.position(float(tau))
        alive = teacher.gamma(float(tau)) >= 1e-3
        d = np.linalg.norm(centers - x, axis=1)
        d[~alive] = np.inf
        labels[i] = teacher.dynamic[int(np.argmin(d))]
    return labels
