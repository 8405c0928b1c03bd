"""Overlap, distance, intensity-similarity and image-quality metrics.

The differentiable similarities (``soft_mi_t``, ``local_cc_t``) work on torch
tensors and are used directly as training losses; the array-level wrappers
accept ``Volume``/``BinaryMask`` objects or plain arrays.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .grid import BinaryMask, GridError, LandmarkSet, Volume, as_tensor
from .xform import DisplacementField, transport_landmarks

DEFAULT_BINS = 32
PSNR_CAP_DB = 99.0
CC_EPS = 1e-5


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, (Volume, BinaryMask)) else x)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise GridError(f"shape mismatch {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1."""
    a, b = _arr(a).astype(bool), _arr(b).astype(bool)
    _same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def tre(fixed_pts: LandmarkSet, moving_pts: LandmarkSet, f: DisplacementField) -> tuple[float, np.ndarray]:
    """Distances between transported fixed landmarks and their moving-space partners (mm)."""
    if len(fixed_pts) != len(moving_pts):
        raise ValueError(f"landmark count mismatch: {len(fixed_pts)} vs {len(moving_pts)}")
    mapped, _ = transport_landmarks(fixed_pts, f)
    d = np.linalg.norm(mapped.points - moving_pts.points, axis=1)
    return float(d.mean()) if len(d) else 0.0, d


def psnr(pred, truth, region) -> float:
    """10 log10(1 / MSE) over ``region`` for intensities in [0, 1], capped at 99 dB."""
    p, t = _arr(pred).astype(np.float64), _arr(truth).astype(np.float64)
    r = _arr(region).astype(bool)
    _same_shape(p, t)
    _same_shape(p, r)
    if not r.any():
        raise ValueError("psnr region is empty")
    mse = float(np.mean((p[r] - t[r]) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


# --------------------------------------------------------------------------
# mutual information


@dataclass
class JointHistogram:
    counts: np.ndarray
    edges: np.ndarray
    pxy: np.ndarray
    px: np.ndarray
    py: np.ndarray

    def mutual_information(self) -> float:
        nz = self.pxy > 0
        outer = np.outer(self.px, self.py)
        return float(np.sum(self.pxy[nz] * np.log(self.pxy[nz] / outer[nz])))


def bin_index(v: np.ndarray, bins: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(v, dtype=np.float64) * bins), 0, bins - 1).astype(np.int64)


def joint_histogram(a, b, bins: int = DEFAULT_BINS) -> JointHistogram:
    a, b = _arr(a).ravel(), _arr(b).ravel()
    _same_shape(a, b)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    ia, ib = bin_index(a, bins), bin_index(b, bins)
    counts = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins).astype(np.float64)
    pxy = counts / counts.sum()
    return JointHistogram(counts, np.linspace(0.0, 1.0, bins + 1), pxy, pxy.sum(axis=1), pxy.sum(axis=0))


def mutual_information(a, b, bins: int = DEFAULT_BINS) -> float:
    """Mutual information (nats) of the hard joint histogram over [0, 1]."""
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    return joint_histogram(a, b, bins).mutual_information()


def _plogp(p: torch.Tensor) -> torch.Tensor:
    pos = p > 0
    return torch.where(pos, p * torch.log(torch.where(pos, p, torch.ones_like(p))), torch.zeros_like(p))


def soft_weights(x: torch.Tensor, bins: int, bandwidth: float) -> torch.Tensor:
    """Gaussian Parzen weights of each value over bin centers, normalized per value: (..., N, bins)."""
    centers = (torch.arange(bins, dtype=x.dtype, device=x.device) + 0.5) / bins
    logits = -0.5 * ((x.unsqueeze(-1) - centers) / bandwidth) ** 2
    return torch.softmax(logits, dim=-1)


def soft_mi_t(a: torch.Tensor, b: torch.Tensor, bins: int = DEFAULT_BINS,
              bandwidth: float | None = None) -> torch.Tensor:
    """Parzen-window MI between flattened tensors; batched over a leading dim if 2D."""
    if bandwidth is None:
        bandwidth = 0.5 / bins
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if a.shape != b.shape:
        raise GridError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    batched = a.dim() == 2
    a2 = a.reshape(a.shape[0], -1) if batched else a.reshape(1, -1)
    b2 = b.reshape(b.shape[0], -1) if batched else b.reshape(1, -1)
    wa = soft_weights(a2, bins, bandwidth)
    wb = soft_weights(b2, bins, bandwidth)
    pxy = torch.einsum("bni,bnj->bij", wa, wb) / a2.shape[1]
    px, py = pxy.sum(dim=2), pxy.sum(dim=1)
    mi = _plogp(pxy).sum(dim=(1, 2)) - _plogp(px).sum(dim=1) - _plogp(py).sum(dim=1)
    return mi if batched else mi[0]


def soft_mutual_information(a, b, bins: int = DEFAULT_BINS, bandwidth: float | None = None) -> float:
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    return float(soft_mi_t(as_tensor(a, torch.float64).ravel(), as_tensor(b, torch.float64).ravel(),
                           bins, bandwidth))


# --------------------------------------------------------------------------
# local normalized cross-correlation


def box_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    """Sum over a cubic window (zero outside the grid) for x of shape (B, C, X, Y, Z).

    Separable running sums: pad, cumulative sum, difference of shifted copies.
    """
    pad = window // 2
    y = x
    for axis in (2, 3, 4):
        n = y.shape[axis]
        widths = [0, 0] * (4 - axis) + [pad + 1, pad]
        c = F.pad(y, widths).cumsum(axis)
        y = c.narrow(axis, window, n) - c.narrow(axis, 0, n)
    return y


def local_cc_t(a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = CC_EPS) -> torch.Tensor:
    """Mean squared local normalized cross-correlation of (B, C, X, Y, Z) tensors.

    Windows are truncated at the grid border (statistics use in-grid voxels only).
    """
    if a.shape != b.shape:
        raise GridError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be a positive odd integer")
    if window > min(a.shape[2:]):
        raise ValueError(f"window {window} exceeds grid shape {tuple(a.shape[2:])}")
    n = box_sum(torch.ones_like(a[:1, :1]), window)
    stats = box_sum(torch.cat([a, b, a * a, b * b, a * b], dim=1), window)
    C = a.shape[1]
    sa, sb, saa, sbb, sab = torch.split(stats, C, dim=1)
    cross = sab - sa * sb / n
    va = (saa - sa * sa / n).clamp(min=0)  # rounding can push flat windows below 0
    vb = (sbb - sb * sb / n).clamp(min=0)
    return (cross * cross / (va * vb + eps)).mean()


def local_cc(a, b, window: int = 9) -> float:
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    ta = as_tensor(a, torch.float64)[None, None]
    tb = as_tensor(b, torch.float64)[None, None]
    return float(local_cc_t(ta, tb, window))


def global_cc_t(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Pearson correlation of two tensors over all elements."""
    a = a - a.mean()
    b = b - b.mean()
    return (a * b).sum() / torch.sqrt((a * a).sum() * (b * b).sum() + eps)


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    dice: dict = field(default_factory=dict)
    tre_mean_mm: float | None = None
    tre_per_point_mm: list | None = None
    psnr_db: float | None = None
    mi_nats: float | None = None
    cc: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def _round(x, nd=10):
    return None if x is None else float(round(float(x), nd))


def evaluate(pred: Volume | None = None, truth: Volume | None = None, labels: dict | None = None,
             fixed_pts: LandmarkSet | None = None, moving_pts: LandmarkSet | None = None,
             field_: DisplacementField | None = None, region: BinaryMask | None = None,
             bins: int = DEFAULT_BINS, window: int = 9) -> MetricReport:
    """Collect whichever metrics the given inputs allow.

    ``labels`` maps a label name to a (predicted mask, reference mask) pair.
    """
    rep = MetricReport()
    for name, (a, b) in (labels or {}).items():
        rep.dice[name] = _round(dice(a, b))
    if fixed_pts is not None and moving_pts is not None and field_ is not None:
        mean, per = tre(fixed_pts, moving_pts, field_)
        rep.tre_mean_mm = _round(mean)
        rep.tre_per_point_mm = [_round(d) for d in per]
    if pred is not None and truth is not None:
        p = np.clip(_arr(pred), 0, 1)
        t = np.clip(_arr(truth), 0, 1)
        rep.psnr_db = _round(psnr(p, t, region if region is not None else np.ones(p.shape, bool)))
        rep.mi_nats = _round(mutual_information(p, t, bins))
        if min(p.shape) >= window:
            rep.cc = _round(local_cc(p, t, window))
    return rep
