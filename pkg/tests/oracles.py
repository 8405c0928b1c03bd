"""Independent brute-force reference implementations used by the tests.

These deliberately avoid the package's vectorized code paths: plain loops,
scipy interpolation, explicit windows.
"""

import math

import numpy as np
from scipy.ndimage import map_coordinates


def dice_bf(a, b):
    inter = na = nb = 0
    for x, y in zip(np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()):
        na += x
        nb += y
        inter += x and y
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def sample_bf(u, spacing, pts):
    """Trilinear field sample at mm points via scipy (edge-clamped)."""
    idx = (np.asarray(pts) / np.asarray(spacing)).T
    return np.stack([map_coordinates(u[..., c], idx, order=1, mode="nearest") for c in range(3)], -1)


def tre_bf(fixed, moving, u, spacing):
    mapped = fixed + sample_bf(u, spacing, fixed)
    d = [math.sqrt(sum((p - q) ** 2 for p, q in zip(a, b))) for a, b in zip(mapped.tolist(), moving.tolist())]
    return sum(d) / len(d), np.array(d)


def psnr_bf(p, t, region):
    s, n = 0.0, 0
    for a, b, r in zip(np.ravel(p).tolist(), np.ravel(t).tolist(), np.ravel(region).tolist()):
        if r:
            s += (a - b) ** 2
            n += 1
    mse = s / n
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(1 / mse))


def mi_bf(a, b, bins):
    counts = [[0] * bins for _ in range(bins)]
    for x, y in zip(np.ravel(a).tolist(), np.ravel(b).tolist()):
        i = min(max(int(math.floor(x * bins)), 0), bins - 1)
        j = min(max(int(math.floor(y * bins)), 0), bins - 1)
        counts[i][j] += 1
    n = float(np.size(a))
    px = [sum(r) / n for r in counts]
    py = [sum(counts[i][j] for i in range(bins)) / n for j in range(bins)]
    mi = 0.0
    for i in range(bins):
        for j in range(bins):
            if counts[i][j]:
                p = counts[i][j] / n
                mi += p * math.log(p / (px[i] * py[j]))
    return mi


def local_cc_bf(a, b, window=9, eps=1e-5):
    """Mean over voxels of squared NCC in the window clipped to the grid."""
    r = window // 2
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    total = 0.0
    for i, j, k in np.ndindex(a.shape):
        sl = tuple(slice(max(0, c - r), c + r + 1) for c in (i, j, k))
        wa, wb = a[sl].ravel(), b[sl].ravel()
        n = wa.size
        cross = (wa * wb).sum() - wa.sum() * wb.sum() / n
        va = (wa * wa).sum() - wa.sum() ** 2 / n
        vb = (wb * wb).sum() - wb.sum() ** 2 / n
        total += cross * cross / (max(va, 0) * max(vb, 0) + eps)
    return total / a.size


def conv3d_bf(x, w, b=None, stride=1):
    """Sliding-window cross-correlation with zero same-padding; x (C, X, Y, Z), w (O, C, k, k, k)."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    out_shape = [(n + 2 * p - k) // stride + 1 for n in x.shape[1:]]
    out = np.zeros((w.shape[0], *out_shape))
    for o in range(w.shape[0]):
        for i, j, l in np.ndindex(*out_shape):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, l * stride:l * stride + k]
            out[o, i, j, l] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


def gradient_bf(u, spacing):
    """Per-mm Jacobian via numpy's stencil (central interior, one-sided edges)."""
    return np.stack([np.stack(np.gradient(u[..., i], *spacing, edge_order=1), -1) for i in range(3)], -2)
