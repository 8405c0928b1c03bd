"""Probe-artifact removal by masked-volume inpainting.

Mask convention throughout this module: 1 = valid voxel, 0 = hole. Masks that
mark the probe region (1 = probe) are inverted on ingestion with
``BinaryMask.invert``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .grid import BinaryMask, Grid, GridError, Volume, as_tensor, check_same_grid
from .metrics import psnr
from .neural import NetworkParams, TrainingAborted, UNet3D, build_unet, encoder_levels

log = logging.getLogger(__name__)

HOLE_WEIGHT = 6.0
DEFAULT_CHANNELS = (16, 32, 64, 64)
HOLE_BOUNDS = (0.001, 0.15)
REFERENCE_SHAPE = (256, 256, 128)  # full-scale grid the evaluation cube is defined on
REFERENCE_CUBE = (40, 40, 20)


# --------------------------------------------------------------------------
# hole shapes


@dataclass(frozen=True)
class MaskShapeSpec:
    kind: str  # "ball" | "bar"
    center: tuple[float, float, float]  # voxels
    radius: float = 0.0  # ball
    size: tuple[float, float, float] = (0.0, 0.0, 0.0)  # bar, full side lengths in voxels

    def __post_init__(self):
        if self.kind not in ("ball", "bar"):
            raise ValueError(f"unknown shape kind {self.kind!r}")

    def rasterize(self, shape) -> np.ndarray:
        idx = np.indices(shape, dtype=np.float64)
        c = np.asarray(self.center, np.float64).reshape(3, 1, 1, 1)
        if self.kind == "ball":
            return ((idx - c) ** 2).sum(axis=0) <= self.radius ** 2
        half = np.asarray(self.size, np.float64).reshape(3, 1, 1, 1) / 2
        return np.all(np.abs(idx - c) <= half, axis=0)


def rasterize_shapes(shape, shapes: Sequence[MaskShapeSpec]) -> np.ndarray:
    """Union of the shapes as a boolean hole map."""
    hole = np.zeros(shape, bool)
    for s in shapes:
        hole |= s.rasterize(shape)
    return hole


def _random_shape(shape, rng: np.random.Generator, centers: np.ndarray | None) -> MaskShapeSpec:
    shape_arr = np.asarray(shape, np.float64)
    if centers is not None and len(centers):
        c = centers[rng.integers(len(centers))].astype(np.float64)
    else:
        c = rng.uniform(0, shape_arr - 1)
    scale = min(shape) / 32.0
    if rng.random() < 0.5:
        return MaskShapeSpec("ball", tuple(c), radius=float(rng.uniform(1.5, 5.0) * scale))
    size = rng.uniform(2.0, 6.0, 3) * scale
    size[rng.integers(3)] *= rng.uniform(2.0, 4.0)  # one long axis
    return MaskShapeSpec("bar", tuple(c), size=tuple(size))


def sample_shapes(shape, rng: np.random.Generator, hole_bounds=HOLE_BOUNDS, region: np.ndarray | None = None,
                  max_tries: int = 200) -> list[MaskShapeSpec]:
    """Draw 2 or 3 balls/bars whose union covers a hole fraction within ``hole_bounds``."""
    lo, hi = hole_bounds
    total = int(np.prod(shape))
    if not (0 <= lo <= hi <= 1) or np.floor(hi * total) < max(1, np.ceil(lo * total)):
        raise ValueError(f"impossible hole-fraction bounds {hole_bounds} for shape {tuple(shape)}")
    centers = np.argwhere(region) if region is not None else None
    for _ in range(max_tries):
        shapes = [_random_shape(shape, rng, centers) for _ in range(int(rng.integers(2, 4)))]
        frac = rasterize_shapes(shape, shapes).sum() / total
        if lo <= frac <= hi:
            return shapes
    raise ValueError(f"could not meet hole-fraction bounds {hole_bounds} in {max_tries} draws")


def gen_masks(shape, seed: int, n_augment: int, spacing=(2.0, 2.0, 2.0), hole_bounds=HOLE_BOUNDS,
              region: np.ndarray | None = None) -> list[BinaryMask]:
    """``n_augment`` valid-masks (1 = valid). Mask i depends only on (seed, i)."""
    if n_augment < 1:
        raise ValueError("n_augment must be at least 1")
    return [mask_at(shape, seed, i, spacing, hole_bounds, region) for i in range(n_augment)]


def mask_at(shape, seed: int, index: int, spacing=(2.0, 2.0, 2.0), hole_bounds=HOLE_BOUNDS,
            region: np.ndarray | None = None) -> BinaryMask:
    rng = np.random.default_rng([seed, index])
    hole = rasterize_shapes(shape, sample_shapes(shape, rng, hole_bounds, region))
    return BinaryMask((~hole).astype(np.uint8), spacing)


# --------------------------------------------------------------------------
# geometry JSON (probe description in mm)


def rasterize_geometry(geometry: dict | str | Path, grid: Grid) -> BinaryMask:
    """Rasterize ``{"balls": [{center_mm, radius_mm}], "boxes": [{center_mm, size_mm}]}``.

    Returns the probe region (1 = inside a shape); invert it before inpainting.
    """
    if isinstance(geometry, Path) or (isinstance(geometry, str) and not geometry.lstrip().startswith("{")):
        geometry = json.loads(Path(geometry).read_text())
    elif isinstance(geometry, str):
        geometry = json.loads(geometry)
    unknown = set(geometry) - {"balls", "boxes"}
    if unknown:
        raise ValueError(f"unknown geometry keys: {sorted(unknown)}")
    x = grid.coords()
    region = np.zeros(grid.shape, bool)
    for b in geometry.get("balls", []):
        c, r = np.asarray(b["center_mm"], float), float(b["radius_mm"])
        if r <= 0:
            raise ValueError("ball radius must be positive")
        region |= ((x - c) ** 2).sum(-1) <= r * r
    for b in geometry.get("boxes", []):
        c, s = np.asarray(b["center_mm"], float), np.asarray(b["size_mm"], float)
        if np.any(s <= 0):
            raise ValueError("box sizes must be positive")
        region |= np.all(np.abs(x - c) <= s / 2, axis=-1)
    return BinaryMask(region.astype(np.uint8), grid.spacing)


# --------------------------------------------------------------------------
# network and training


def build_inpaint_net(conv_kind: str = "pconv", channels: Sequence[int] = DEFAULT_CHANNELS,
                      seed: int = 0) -> UNet3D:
    return build_unet(encoder_levels(1, channels), out_channels=1, conv_kind=conv_kind,
                      out_activation="sigmoid", seed=seed)


def _run(net: UNet3D, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    if net.conv_kind == "pconv":
        return net(x * m, m)[0]
    return net(x * m)


def inpaint_loss(pred: torch.Tensor, clean: torch.Tensor, m: torch.Tensor,
                 hole_weight: float = HOLE_WEIGHT) -> torch.Tensor:
    """L1 with holes weighted ``hole_weight`` times the valid region (normalized by all voxels)."""
    err = (pred - clean).abs()
    return (err * m).mean() + hole_weight * (err * (1 - m)).mean()


def train_inpaint(volumes: Sequence[Volume], masks: Sequence[BinaryMask] | Callable[[int], BinaryMask],
                  steps: int = 1000, seed: int = 0, conv_kind: str = "pconv",
                  channels: Sequence[int] = DEFAULT_CHANNELS, lr: float = 1e-3, hole_weight: float = HOLE_WEIGHT,
                  patch: tuple[int, int, int] | None = None, log_every: int = 50) -> NetworkParams:
    """Self-supervised training: corrupt clean volumes with sampled masks, reconstruct.

    ``masks`` is a list (cycled in a seeded order) or a callable index -> mask;
    masks must have the patch shape when ``patch`` is given, else the volume
    shape. Patches are cropped at seeded random positions.
    """
    if not volumes:
        raise ValueError("need at least one clean volume")
    net = build_inpaint_net(conv_kind, channels, seed)
    meta = {"kind": "inpaint", "conv_kind": conv_kind, "channels": list(channels), "steps": 0,
            "hole_weight": hole_weight, "loss_history": []}
    if steps == 0:
        return NetworkParams.from_module(net, seed, **meta)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    data = [as_tensor(v.data, torch.float32)[None, None] for v in volumes]
    get_mask = masks if callable(masks) else (lambda i: masks[i % len(masks)])
    mask_order = None if callable(masks) else rng.permutation(len(masks))
    last_good = NetworkParams.from_module(net, seed, **meta)
    acc, history = 0.0, []
    for step in range(steps):
        vol = data[int(rng.integers(len(data)))]
        if patch is not None:
            full = vol.shape[2:]
            if any(p > s for p, s in zip(patch, full)):
                raise GridError(f"patch {patch} larger than volume {tuple(full)}")
            o = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch, full)]
            vol = vol[..., o[0]:o[0] + patch[0], o[1]:o[1] + patch[1], o[2]:o[2] + patch[2]]
        mi = step if mask_order is None else int(mask_order[step % len(mask_order)])
        m = as_tensor(get_mask(mi).data, torch.float32)[None, None]
        if m.shape != vol.shape:
            raise GridError(f"mask shape {tuple(m.shape[2:])} does not match sample {tuple(vol.shape[2:])}")
        loss = inpaint_loss(_run(net, vol, m), vol, m, hole_weight)
        if not torch.isfinite(loss):
            raise TrainingAborted(f"non-finite inpainting loss at step {step}", last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        acc += loss.item()
        if log_every and ((step + 1) % log_every == 0 or step + 1 == steps):
            n = (step + 1) % log_every or log_every
            history.append(acc / n)
            acc = 0.0
            log.info("inpaint[%s] step %d loss %.5f", conv_kind, step + 1, history[-1])
            last_good = NetworkParams.from_module(net, seed, **{**meta, "steps": step + 1})
    meta.update(steps=steps, loss_history=history)
    return NetworkParams.from_module(net, seed, **meta)


def load_inpaint_net(params: NetworkParams) -> UNet3D:
    if params is None:
        raise ValueError("inpainting parameters are missing")
    net = build_inpaint_net(params.meta.get("conv_kind", "pconv"),
                            params.meta.get("channels", DEFAULT_CHANNELS), params.seed)
    return params.load_into(net).eval()


def inpaint_volume(corrupted: Volume, mask: BinaryMask, params: NetworkParams | UNet3D) -> Volume:
    """Fill mask == 0 with the network prediction; mask == 1 voxels are copied exactly."""
    check_same_grid(corrupted, mask)
    valid = np.asarray(mask.data, bool)
    if not valid.any():
        raise ValueError("mask has no valid voxels")
    data = np.asarray(corrupted.data)
    if valid.all():
        return Volume(data, corrupted.spacing, "inpCT")
    net = params if isinstance(params, UNet3D) else load_inpaint_net(params)
    # pad to a multiple of the total downsampling factor; padding is marked invalid
    mult = 2 ** (len(net.down))
    pads = [(-s) % mult for s in data.shape]
    x = F.pad(as_tensor(data, torch.float32)[None, None], [0, pads[2], 0, pads[1], 0, pads[0]])
    m = F.pad(as_tensor(valid, torch.float32)[None, None], [0, pads[2], 0, pads[1], 0, pads[0]])
    with torch.no_grad():
        pred = _run(net, x, m)[0, 0, :data.shape[0], :data.shape[1], :data.shape[2]].numpy()
    out = np.where(valid, data, pred.astype(data.dtype))
    return Volume(out, corrupted.spacing, "inpCT")


# --------------------------------------------------------------------------
# evaluation protocol


def scaled_cube(shape, reference_shape=REFERENCE_SHAPE, reference_cube=REFERENCE_CUBE) -> tuple[int, int, int]:
    """Evaluation cube scaled in proportion to the grid: 40x40x20 on 256x256x128 -> 10x10x5 on 64x64x32."""
    return tuple(max(1, int(round(c * s / r))) for c, s, r in zip(reference_cube, shape, reference_shape))


def cube_mask(shape, center_vox, size, spacing=(2.0, 2.0, 2.0)) -> BinaryMask:
    """Valid-mask with a ``size`` cube hole starting at ``center - size // 2``."""
    lo = [int(c) - s // 2 for c, s in zip(center_vox, size)]
    hi = [l + s for l, s in zip(lo, size)]
    if any(l < 0 for l in lo) or any(h > n for h, n in zip(hi, shape)):
        raise GridError(f"cube {tuple(size)} at {tuple(center_vox)} leaves the {tuple(shape)} grid")
    m = np.ones(shape, np.uint8)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 0
    return BinaryMask(m, spacing)


def eval_inpaint(clean: Volume, params: NetworkParams | UNet3D | None, center_vox,
                 size: tuple[int, int, int] | None = None) -> float:
    """Hole PSNR (dB) for a cubic hole; ``params=None`` scores the copy-through input (hole = 0)."""
    size = size or scaled_cube(clean.shape)
    mask = cube_mask(clean.shape, center_vox, size, clean.spacing)
    corrupted = Volume(np.asarray(clean.data) * mask.data, clean.spacing, clean.modality)
    out = corrupted if params is None else inpaint_volume(corrupted, mask, params)
    return psnr(out.data, clean.data, mask.data == 0)
