"""Deformable registration: the unsupervised network (UR-Net) and a classical
iterative mono-modal engine (rigid + CC-demons) for the pre-procedural stage."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import Grid, Volume, as_tensor, check_same_grid, sample_trilinear
from .metrics import global_cc_t, local_cc_t
from .neural import NetworkParams, TrainingAborted, build_unet, encoder_levels, stn_warp
from .xform import DisplacementField, RigidTransform, field_gradient, rotation_matrix, warp_tensor

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = (16, 32, 32)
DEFAULT_LAM = 0.05  # chosen on phantom runs; see scripts/sweep_lambda.py


# --------------------------------------------------------------------------
# loss


def smoothness_t(u: torch.Tensor, spacing) -> torch.Tensor:
    """Mean over voxels of the squared Frobenius norm of the per-mm field Jacobian."""
    return field_gradient(u, spacing).pow(2).sum(dim=(1, 2)).mean()


def urnet_loss_t(fixed: torch.Tensor, moving: torch.Tensor, u: torch.Tensor, spacing, lam: float,
                 window: int = 9) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    warped = stn_warp(moving, u, spacing)
    s = local_cc_t(fixed, warped, window)
    reg = smoothness_t(u, spacing)
    return -s + lam * reg, s, reg


def urnet_loss(fixed: Volume, moving: Volume, f: DisplacementField, lam: float = 1.0,
               window: int = 9) -> tuple[float, float, float]:
    """(L, S, Reg) with L = -S + lam * Reg."""
    check_same_grid(fixed, moving, f)
    t = lambda v: as_tensor(v.data, torch.float64)[None, None]
    L, s, reg = urnet_loss_t(t(fixed), t(moving), f.tensor(), f.spacing, lam, window)
    return float(L), float(s), float(reg)


# --------------------------------------------------------------------------
# UR-Net


class URNet(nn.Module):
    """Maps a (fixed, moving) pair to a displacement field in mm on the fixed grid.

    With ``pool > 1`` the stacked pair is average-pooled before the U-Net and
    the predicted field is upsampled trilinearly back to the input grid, a
    cheaper option for smooth motions.
    """

    def __init__(self, channels: Sequence[int] = DEFAULT_CHANNELS, seed: int = 0, pool: int = 1):
        super().__init__()
        self.channels, self.pool = tuple(channels), pool
        self.unet = build_unet(encoder_levels(2, channels), out_channels=3, zero_head=True, seed=seed)

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        x = torch.cat([fixed, moving], dim=1)
        if self.pool > 1:
            x = F.avg_pool3d(x, self.pool, ceil_mode=True)
        u = self.unet(x)
        if self.pool > 1:
            u = F.interpolate(u, size=fixed.shape[2:], mode="trilinear", align_corners=False)
        return u


@dataclass
class RegTrainState:
    net: URNet
    optimizer: torch.optim.Optimizer
    seed: int
    lam: float
    history: list = field(default_factory=list)  # (L, S, Reg) per step

    @property
    def steps(self) -> int:
        return len(self.history)

    def params(self) -> NetworkParams:
        return NetworkParams.from_module(self.net, self.seed, kind="urnet", channels=list(self.net.channels),
                                         pool=self.net.pool, lam=self.lam, steps=self.steps)


def _pair_tensors(pairs):
    out = []
    for moving, fixed in pairs:
        check_same_grid(fixed, moving)
        out.append((as_tensor(fixed.data, torch.float32)[None, None],
                    as_tensor(moving.data, torch.float32)[None, None], fixed.spacing))
    return out


def train_urnet(pairs: Sequence[tuple[Volume, Volume]], lam: float = DEFAULT_LAM, steps: int = 3000, seed: int = 0,
                lr: float = 1e-3, window: int = 9, channels: Sequence[int] = DEFAULT_CHANNELS, pool: int = 1,
                augment_swap: bool = False, cosine_lr: bool = True, log_every: int = 50) -> RegTrainState:
    """Unsupervised training on (moving=pCT, fixed=inpCT) pairs.

    With ``augment_swap`` each pair is presented with roles exchanged half of
    the time. ``cosine_lr`` anneals the learning rate to zero over ``steps``.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    torch.manual_seed(seed)
    net = URNet(channels, seed, pool)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1)) if cosine_lr else None
    state = RegTrainState(net, opt, seed, lam)
    data = _pair_tensors(pairs)
    rng = np.random.default_rng(seed)
    order: list[tuple[int, bool]] = []
    last_good = state.params()
    for step in range(steps):
        if not order:
            perm = rng.permutation(len(data))
            swaps = rng.random(len(data)) < 0.5 if augment_swap else np.zeros(len(data), bool)
            order = [(int(i), bool(sw)) for i, sw in zip(perm, swaps)]
        i, swap = order.pop(0)
        fixed, moving, spacing = data[i]
        if swap:
            fixed, moving = moving, fixed
        u = net(fixed, moving)
        L, s, reg = urnet_loss_t(fixed, moving, u, spacing, lam, window)
        if not torch.isfinite(L):
            raise TrainingAborted(f"non-finite UR-Net loss at step {step}", last_good)
        opt.zero_grad()
        L.backward()
        opt.step()
        if sched is not None:
            sched.step()
        state.history.append((L.item(), s.item(), reg.item()))
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean([h[0] for h in state.history[-log_every:]])
            log.info("urnet step %d loss %.4f", step + 1, recent)
            last_good = state.params()
    return state


def load_urnet(params: NetworkParams) -> URNet:
    if params is None:
        raise ValueError("UR-Net parameters are missing")
    if params.meta.get("kind") != "urnet":
        raise ValueError("checkpoint does not hold UR-Net parameters")
    net = URNet(params.meta["channels"], params.seed, params.meta.get("pool", 2))
    return params.load_into(net).eval()


@dataclass
class Prediction:
    field: DisplacementField
    seconds: float


def predict_field(params: NetworkParams | URNet, fixed: Volume, moving: Volume) -> Prediction:
    """One forward pass; the field lives on the fixed grid."""
    if params is None:
        raise ValueError("UR-Net parameters are missing")
    check_same_grid(fixed, moving)
    net = params if isinstance(params, URNet) else load_urnet(params)
    f = as_tensor(fixed.data, torch.float32)[None, None]
    m = as_tensor(moving.data, torch.float32)[None, None]
    t0 = time.perf_counter()
    with torch.no_grad():
        u = net(f, m)
    dt = time.perf_counter() - t0
    return Prediction(DisplacementField.from_tensor(u, fixed.spacing), dt)


# --------------------------------------------------------------------------
# classical engine


@dataclass
class ClassicalRegConfig:
    levels: Sequence[int] = (4, 2, 1)
    iterations: int = 50
    step_vox: float = 0.5
    sigma_fluid_mm: float = 3.0
    sigma_diff_mm: float = 1.5
    soft_floor: float = 0.1
    max_rises: int = 10
    cc_eps: float = 1e-8
    edge_kappa: float = 0.05
    window: int = 9
    rigid_iterations: int = 60
    rigid_lr_mm: float = 0.5
    rigid_lr_rad: float = 0.01

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("need at least one resolution level")
        if self.sigma_fluid_mm < 0 or self.sigma_diff_mm < 0:
            raise ValueError("smoothing sigmas must be non-negative")
        if self.edge_kappa < 0:
            raise ValueError("edge_kappa must be non-negative")


def gaussian_smooth(x: torch.Tensor, sigma_mm: float, spacing) -> torch.Tensor:
    """Separable Gaussian smoothing of (B, C, X, Y, Z) with replicate borders."""
    if sigma_mm <= 0:
        return x
    B, C = x.shape[:2]
    y = x.reshape(B * C, 1, *x.shape[2:])
    for axis, h in enumerate(spacing):
        s = sigma_mm / h
        r = max(1, int(math.ceil(3 * s)))
        t = torch.arange(-r, r + 1, dtype=x.dtype)
        k = torch.exp(-0.5 * (t / s) ** 2)
        k = k / k.sum()
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = 2 * r + 1
        pad = [0, 0, 0, 0, 0, 0]
        pad[2 * (2 - axis)] = pad[2 * (2 - axis) + 1] = r
        y = F.conv3d(F.pad(y, pad, mode="replicate"), k.view(shape))
    return y.reshape(x.shape)


def downsample(x: torch.Tensor, factor: int, spacing) -> tuple[torch.Tensor, tuple]:
    """Blur and subsample by ``factor``; coarse voxel j sits at fine voxel j*factor."""
    if factor == 1:
        return x, tuple(spacing)
    blurred = gaussian_smooth(x, 0.5 * factor * min(spacing), spacing)
    return blurred[..., ::factor, ::factor, ::factor], tuple(s * factor for s in spacing)


def resample_field_t(u: torch.Tensor, spacing, grid: Grid) -> torch.Tensor:
    """Field tensor on one grid sampled at the voxels of another grid (same origin)."""
    pos = as_tensor(grid.coords() / np.asarray(spacing), u.dtype)[None]
    return sample_trilinear(u, pos, padding="border")


def _window_for(shape, window):
    w = min(window, min(shape))
    return w if w % 2 == 1 else w - 1


def _rodrigues_t(rv: torch.Tensor) -> torch.Tensor:
    theta = torch.sqrt((rv * rv).sum() + 1e-30)
    k = rv / theta
    zero = torch.zeros((), dtype=rv.dtype)
    kx = torch.stack([torch.stack([zero, -k[2], k[1]]), torch.stack([k[2], zero, -k[0]]),
                      torch.stack([-k[1], k[0], zero])])
    return torch.eye(3, dtype=rv.dtype) + torch.sin(theta) * kx + (1 - torch.cos(theta)) * kx @ kx


@dataclass
class RigidResult:
    transform: RigidTransform
    converged: bool
    cc: float
    history: list = field(default_factory=list)


def classical_rigid(fixed: Volume, moving: Volume, config: ClassicalRegConfig | None = None) -> RigidResult:
    """Coarse-to-fine gradient ascent of global correlation over rotation and translation.

    The rotation is parameterized about the grid center.
    """
    cfg = config or ClassicalRegConfig()
    check_same_grid(fixed, moving)
    grid = fixed.grid
    f0 = as_tensor(fixed.data, torch.float64)[None, None]
    m0 = as_tensor(moving.data, torch.float64)[None, None]
    center = torch.tensor(grid.extent / 2)
    if f0.std() < 1e-8 or m0.std() < 1e-8:
        return RigidResult(RigidTransform.identity(), False, 0.0)
    rv = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    tr = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([{"params": [rv], "lr": cfg.rigid_lr_rad}, {"params": [tr], "lr": cfg.rigid_lr_mm}])
    history = []
    best = (-np.inf, rv.detach().clone(), tr.detach().clone())
    converged = False
    for factor in cfg.levels:
        f, sp = downsample(f0, factor, grid.spacing)
        m, _ = downsample(m0, factor, grid.spacing)
        x = as_tensor(Grid(tuple(f.shape[2:]), sp).coords(), torch.float64)
        best = (-np.inf, best[1], best[2])
        recent = []
        for it in range(cfg.rigid_iterations):
            R = _rodrigues_t(rv)
            u = (x - center) @ R.T + center + tr - x
            warped = warp_tensor(m, u.permute(3, 0, 1, 2)[None], sp)
            cc = global_cc_t(f, warped)
            if cc.item() > best[0]:
                best = (cc.item(), rv.detach().clone(), tr.detach().clone())
            history.append(cc.item())
            opt.zero_grad()
            (-cc).backward()
            prev = torch.cat([rv, tr]).detach().clone()
            opt.step()
            recent.append(float((torch.cat([rv, tr]).detach() - prev).abs().max()))
        # Adam keeps taking ~lr sized steps at an optimum, so judge the plateau of the objective too
        tail = history[-10:]
        converged = bool(np.max(recent[-10:]) < 0.05 * cfg.rigid_lr_mm or max(tail) - min(tail) < 1e-4)
        with torch.no_grad():
            rv.copy_(best[1])
            tr.copy_(best[2])
    R = rotation_matrix(best[1].numpy())
    c = grid.extent / 2
    t = c - R @ c + best[2].numpy()
    return RigidResult(RigidTransform(R, t), converged, best[0], history)


@dataclass
class DeformableResult:
    field: DisplacementField
    history: list
    stopped_early: bool


def edge_weight(img: torch.Tensor, spacing, kappa: float) -> torch.Tensor:
    """g^2 / (g^2 + (kappa * max g)^2) with g the gradient magnitude of the lightly smoothed image.

    Local CC is scale invariant, so windows of pure noise pull as hard as
    real edges; this gate keeps the force where the fixed image has structure.
    """
    if kappa == 0:
        return torch.ones_like(img)
    sm = gaussian_smooth(img, min(spacing), spacing)
    g = field_gradient(sm, spacing).pow(2).sum(dim=2)  # (1, 1, X, Y, Z)
    return g / (g + (kappa ** 2) * g.max().clamp_min(1e-12))


def classical_deformable(fixed: Volume, moving: Volume, config: ClassicalRegConfig | None = None,
                         init: DisplacementField | None = None) -> DeformableResult:
    """Multi-resolution CC-demons.

    Each iteration takes the gradient of local CC w.r.t. the field (the
    force) and smooths it with ``sigma_fluid``. The update is normalized per
    voxel, ``step * f / (|f| + soft_floor * max|f|)``, so weak interior forces
    still move by up to ``step_vox`` voxels. The accumulated field is then
    smoothed with ``sigma_diff``. A level ends early after ``max_rises``
    consecutive loss increases; each level hands on the best field seen.
    """
    cfg = config or ClassicalRegConfig()
    check_same_grid(fixed, moving)
    grid = fixed.grid
    dt = torch.float32
    f0 = as_tensor(fixed.data, dt)[None, None]
    m0 = as_tensor(moving.data, dt)[None, None]
    u_fine = init.tensor(dt) if init is not None else torch.zeros(1, 3, *grid.shape, dtype=dt)
    history, stopped = [], False
    if cfg.iterations == 0:
        return DeformableResult(DisplacementField.from_tensor(u_fine, grid.spacing), history, stopped)
    for factor in cfg.levels:
        f, sp = downsample(f0, factor, grid.spacing)
        m, _ = downsample(m0, factor, grid.spacing)
        lvl_grid = Grid(tuple(f.shape[2:]), sp)
        u = resample_field_t(u_fine, grid.spacing, lvl_grid) if factor != 1 else u_fine.clone()
        win = _window_for(lvl_grid.shape, cfg.window)
        step = cfg.step_vox * min(sp)
        best_loss, best_u, rises, prev = np.inf, u.clone(), 0, np.inf
        weight = edge_weight(f, sp, cfg.edge_kappa)
        for it in range(cfg.iterations + 1):
            u.requires_grad_(True)
            loss = -local_cc_t(f, warp_tensor(m, u, sp), win, cfg.cc_eps)
            (grad,) = torch.autograd.grad(loss, u)
            u = u.detach()
            lv = loss.item()
            history.append(lv)
            if lv < best_loss:
                best_loss, best_u = lv, u.clone()
            rises = rises + 1 if lv > prev else 0
            prev = lv
            if rises >= cfg.max_rises:
                stopped = True
                break
            if it == cfg.iterations:
                break  # last pass only scores the final update
            force = gaussian_smooth(-grad * weight, cfg.sigma_fluid_mm, sp)
            mag = force.norm(dim=1, keepdim=True)
            peak = mag.max()
            if peak <= 0:
                break
            u = gaussian_smooth(u + step * force / (mag + cfg.soft_floor * peak), cfg.sigma_diff_mm, sp)
        u_fine = resample_field_t(best_u, sp, grid) if factor != 1 else best_u
    return DeformableResult(DisplacementField.from_tensor(u_fine, grid.spacing), history, stopped)
