"""Numba kernels for the tiled compositor: forward pass and its analytic backward."""

from __future__ import annotations

import os

import numba as nb
import numpy as np

# the bundled TBB is too old for numba; avoid the startup warning
if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "workqueue"

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
# margin on the log-space early reject so it never drops a splat the exact test keeps
_REJECT_MARGIN = 1e-6


@nb.njit(cache=True)
def _power_floor(opacity):
    """Exponent below which ``opacity * exp(power)`` is surely under the alpha cutoff."""
    out = np.empty(opacity.shape[0], dtype=np.float64)
    for k in range(opacity.shape[0]):
        if opacity[k] > 0.0:
            out[k] = np.log(ALPHA_MIN / opacity[k]) - _REJECT_MARGIN
        else:
            out[k] = np.inf
    return out


@nb.njit(cache=True, parallel=True)
def composite_forward(means, conic, opacity, color, depth, tile_ptr, tile_idx, bg,
                      width, height, tile, tiles_x):
    n_tiles = tile_ptr.shape[0] - 1
    image = np.empty((height, width, 3), dtype=means.dtype)
    dmap = np.zeros((height, width), dtype=means.dtype)
    trans_out = np.ones((height, width), dtype=means.dtype)
    n_done = np.zeros((height, width), dtype=np.int32)
    pmin = _power_floor(opacity)
    for t in nb.prange(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        start, stop = tile_ptr[t], tile_ptr[t + 1]
        for row in range(ty * tile, min((ty + 1) * tile, height)):
            py = row + 0.5
            for col in range(tx * tile, min((tx + 1) * tile, width)):
                px = col + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                dsum = 0.0
                wsum = 0.0
                last = start
                for j in range(start, stop):
                    k = tile_idx[j]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < pmin[k]:
                        continue
                    alpha = min(ALPHA_MAX, opacity[k] * np.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    if T < T_MIN:
                        break
                    w = alpha * T
                    r += w * color[k, 0]
                    g += w * color[k, 1]
                    b += w * color[k, 2]
                    dsum += w * depth[k]
                    wsum += w
                    T = T * (1.0 - alpha)
                    last = j + 1
                image[row, col, 0] = r + T * bg[0]
                image[row, col, 1] = g + T * bg[1]
                image[row, col, 2] = b + T * bg[2]
                dmap[row, col] = dsum / wsum if wsum > 1e-10 else 0.0
                trans_out[row, col] = T
                n_done[row, col] = last
    return image, dmap, trans_out, n_done


@nb.njit(cache=True)
def composite_backward(means, conic, opacity, color, tile_ptr, tile_idx, bg, width, height,
                       tile, tiles_x, trans_final, n_done, grad_image):
    """Walk each pixel's contributors back to front, accumulating per-splat gradients.

    Serial on purpose: fixed reduction order keeps gradients bitwise reproducible.
    """
    p = means.shape[0]
    g_means = np.zeros((p, 2), dtype=means.dtype)
    g_conic = np.zeros((p, 3), dtype=means.dtype)
    g_opacity = np.zeros(p, dtype=means.dtype)
    g_color = np.zeros((p, 3), dtype=means.dtype)
    pmin = _power_floor(opacity)
    n_tiles = tile_ptr.shape[0] - 1
    for t in range(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        start = tile_ptr[t]
        for row in range(ty * tile, min((ty + 1) * tile, height)):
            py = row + 0.5
            for col in range(tx * tile, min((tx + 1) * tile, width)):
                px = col + 0.5
                gr = grad_image[row, col, 0]
                gg = grad_image[row, col, 1]
                gb = grad_image[row, col, 2]
                T = trans_final[row, col]
                br = T * bg[0]
                bgc = T * bg[1]
                bb = T * bg[2]
                for j in range(n_done[row, col] - 1, start - 1, -1):
                    k = tile_idx[j]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < pmin[k]:
                        continue
                    G = np.exp(power)
                    raw_alpha = opacity[k] * G
                    alpha = min(ALPHA_MAX, raw_alpha)
                    if alpha < ALPHA_MIN:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    g_color[k, 0] += w * gr
                    g_color[k, 1] += w * gg
                    g_color[k, 2] += w * gb
                    inv = 1.0 / (1.0 - alpha)
                    g_alpha = (gr * (T * color[k, 0] - br * inv)
                               + gg * (T * color[k, 1] - bgc * inv)
                               + gb * (T * color[k, 2] - bb * inv))
                    br += w * color[k, 0]
                    bgc += w * color[k, 1]
                    bb += w * color[k, 2]
                    if raw_alpha > ALPHA_MAX:
                        continue
                    g_opacity[k] += g_alpha * G
                    g_power = g_alpha * opacity[k] * G
                    g_conic[k, 0] += -0.5 * dx * dx * g_power
                    g_conic[k, 1] += -dx * dy * g_power
                    g_conic[k, 2] += -0.5 * dy * dy * g_power
                    g_means[k, 0] += (conic[k, 0] * dx + conic[k, 1] * dy) * g_power
                    g_means[k, 1] += (conic[k, 2] * dy + conic[k, 1] * dx) * g_power
    return g_means, g_conic, g_opacity, g_color
