"""Report figures written next to the CLI's JSON output (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 110


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(log: list[dict], path):
    """Loss terms and held-out PSNR against iteration."""
    it = [r["iter"] for r in log]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, style in (("loss", "k-"), ("l1", "C0--"), ("dssim", "C1--"), ("l_sr", "C2:")):
        vals = [r.get(key) for r in log]
        if any(v for v in vals):
            ax0.semilogy(it, np.maximum(vals, 1e-12), style, label=key)
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("loss")
    ax0.legend(fontsize=8)
    ax0.grid(alpha=0.3)
    ps = [r.get("psnr_heldout") for r in log]
    ax1.plot(it, [np.nan if p is None else p for p in ps], "C3o-", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("held-out PSNR [dB]")
    ax1.grid(alpha=0.3)
    ax2 = ax1.twinx()
    ax2.plot(it, [r["primitives"] for r in log], "C7-", lw=1)
    ax2.set_ylabel("primitives", color="C7")
    return _save(fig, path)


def lifespan_histogram(sigma, path, threshold=None, labels=None):
    """Histogram of log10 lifespans, split by reference labels when given."""
    logs = np.log10(np.asarray(sigma, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    bins = np.linspace(logs.min() - 0.05, logs.max() + 0.05, 50)
    if labels is None:
        ax.hist(logs, bins=bins, color="C0")
    else:
        labels = np.asarray(labels, dtype=bool)
        ax.hist(logs[~labels], bins=bins, color="C0", alpha=0.7, label="static (reference)")
        ax.hist(logs[labels], bins=bins, color="C3", alpha=0.7, label="dynamic (reference)")
        ax.legend(fontsize=8)
    if threshold is not None:
        ax.axvline(np.log10(threshold), color="k", ls="--", lw=1)
    ax.set_xlabel(r"$\log_{10}\sigma$")
    ax.set_ylabel("primitives")
    return _save(fig, path)


def frame_comparison(rows: list[tuple[str, np.ndarray, np.ndarray]], path, max_rows: int = 6):
    """Rows of (title, render, reference) shown with the absolute error."""
    rows = rows[:max_rows]
    fig, axes = plt.subplots(len(rows), 3, figsize=(6.3, 2.1 * len(rows)), squeeze=False)
    for (title, img, ref), ax in zip(rows, axes):
        img, ref = np.clip(img, 0, 1), np.clip(ref, 0, 1)
        ax[0].imshow(img, interpolation="nearest")
        ax[1].imshow(ref, interpolation="nearest")
        ax[2].imshow(np.abs(img - ref).mean(-1), cmap="magma", vmin=0, vmax=0.25,
                     interpolation="nearest")
        ax[0].set_ylabel(title, fontsize=7)
        for a in ax:
            a.set_xticks([])
            a.set_yticks([])
    axes[0][0].set_title("render", fontsize=9)
    axes[0][1].set_title("reference", fontsize=9)
    axes[0][2].set_title("|error|", fontsize=9)
    return _save(fig, path)


def gradcheck_summary(reports, path):
    """Worst relative error per checked operation against its tolerance."""
    names = [r.op for r in reports]
    errs = [max(r.max_rel_err, 1e-16) for r in reports]
    fig, ax = plt.subplots(figsize=(6.5, 0.28 * len(names) + 1.2))
    y = np.arange(len(names))
    ax.barh(y, errs, color=["C2" if r.passed else "C3" for r in reports])
    for yi, r in zip(y, reports):
        ax.plot([r.tol, r.tol], [yi - 0.4, yi + 0.4], "k-", lw=1)
    ax.set_xscale("log")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("max relative error (tick = tolerance)")
    return _save(fig, path)
