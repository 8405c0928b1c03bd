"""Rigid transforms, dense displacement fields, warping and composition.

Fields are stored in mm and follow the backward (pull) convention: the output
voxel at physical point ``x`` samples the moving image at ``x + u(x)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .grid import (Grid, GridError, LandmarkSet, Volume, _check_spacing, _frozen, as_tensor,
                   check_same_grid, read_nifti, sample_trilinear, write_nifti)


@dataclass(frozen=True)
class DisplacementField:
    u: np.ndarray  # (nx, ny, nz, 3), mm
    spacing: tuple[float, float, float]

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 4 or u.shape[-1] != 3:
            raise ValueError(f"field must have shape (nx, ny, nz, 3), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("field contains non-finite components")
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "u", _frozen(u))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.u.shape[:3])

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.spacing)

    @classmethod
    def zeros(cls, grid: Grid) -> "DisplacementField":
        return cls(np.zeros((*grid.shape, 3)), grid.spacing)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.u, axis=-1)

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        """(1, 3, X, Y, Z) tensor, the channel-first layout used by the networks."""
        return as_tensor(self.u, dtype).permute(3, 0, 1, 2)[None].contiguous()

    @classmethod
    def from_tensor(cls, t: torch.Tensor, spacing) -> "DisplacementField":
        return cls(t.detach()[0].permute(1, 2, 3, 0).double().cpu().numpy(), spacing)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation


def rotation_matrix(rotvec) -> np.ndarray:
    """Rodrigues formula for a rotation vector (radians)."""
    rv = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rv)
    if theta < 1e-15:
        return np.eye(3)
    k = rv / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


# --------------------------------------------------------------------------
# tensor-level primitives shared with the networks


def identity_positions(shape, dtype=torch.float64) -> torch.Tensor:
    """Voxel index grid, shape (1, X, Y, Z, 3)."""
    axes = [torch.arange(n, dtype=dtype) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)[None]


def warp_tensor(moving: torch.Tensor, u: torch.Tensor, spacing, moving_spacing=None,
                padding: str = "zeros") -> torch.Tensor:
    """Pull ``moving`` (B, C, ...) through field ``u`` (B, 3, X, Y, Z) given in mm."""
    moving_spacing = spacing if moving_spacing is None else moving_spacing
    shape = u.shape[2:]
    sp = torch.tensor(spacing, dtype=u.dtype)
    msp = torch.tensor(moving_spacing, dtype=u.dtype)
    pos = (identity_positions(shape, u.dtype) * sp + u.permute(0, 2, 3, 4, 1)) / msp
    return sample_trilinear(moving, pos, padding=padding)


def field_gradient(u: torch.Tensor, spacing) -> torch.Tensor:
    """Per-mm Jacobian of a field (B, 3, X, Y, Z) -> (B, 3, 3, X, Y, Z), [.., i, j] = du_i/dx_j.

    Central differences in the interior, one-sided at the borders.
    """
    grads = []
    for axis, h in zip(range(2, 5), spacing):
        n = u.shape[axis]
        if n < 2:
            raise ValueError("spatial gradient needs at least 2 voxels along every axis")
        lo = u.narrow(axis, 0, 1)
        hi = u.narrow(axis, n - 1, 1)
        first = (u.narrow(axis, 1, 1) - lo) / h
        last = (hi - u.narrow(axis, n - 2, 1)) / h
        parts = [first]
        if n > 2:
            parts.append((u.narrow(axis, 2, n - 2) - u.narrow(axis, 0, n - 2)) / (2 * h))
        parts.append(last)
        grads.append(torch.cat(parts, dim=axis))
    return torch.stack(grads, dim=2)


# --------------------------------------------------------------------------
# public operations


def warp(moving: Volume, f: DisplacementField, grid: Grid | None = None) -> Volume:
    """Trilinear pull of ``moving`` through ``f``; samples outside the moving grid read 0."""
    if grid is not None:
        check_same_grid(grid, f.grid)
    dtype = torch.float64 if moving.data.dtype == np.float64 else torch.float32
    img = as_tensor(moving.data, dtype)[None, None]
    out = warp_tensor(img, f.tensor(torch.float64), f.spacing, moving.spacing)
    return Volume(out[0, 0].numpy(), f.spacing, moving.modality)


def compose(f_outer: DisplacementField, f_inner: DisplacementField) -> DisplacementField:
    """Field ``g`` with warp(img, g) == warp(warp(img, f_inner), f_outer).

    g(x) = u_outer(x) + u_inner(x + u_outer(x)); ``u_inner`` is interpolated
    trilinearly with border extension.
    """
    check_same_grid(f_outer, f_inner)
    uo = f_outer.tensor()
    ui = f_inner.tensor()
    g = uo + warp_tensor(ui, uo, f_outer.spacing, padding="border")
    return DisplacementField.from_tensor(g, f_outer.spacing)


def rigid_to_field(r: RigidTransform, grid: Grid) -> DisplacementField:
    x = grid.coords()
    return DisplacementField(r.apply(x) - x, grid.spacing)


def sample_field(f: DisplacementField, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear field values at physical points; returns (values, outside flags)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    outside = ~np.all((pts >= 0) & (pts <= f.grid.extent), axis=1)
    pos = torch.from_numpy(pts / np.asarray(f.spacing))[None, :, None, None, :]
    vals = sample_trilinear(f.tensor(), pos, padding="border")
    return vals[0, :, :, 0, 0].T.numpy(), outside


def transport_landmarks(pts: LandmarkSet, f: DisplacementField) -> tuple[LandmarkSet, np.ndarray]:
    """Map fixed-space points x to x + u(x). Returns the new set and per-point outside flags."""
    vals, outside = sample_field(f, pts.points)
    if outside.any():
        warnings.warn(f"{int(outside.sum())} landmark(s) outside the field extent; sampled at the clamped border",
                      RuntimeWarning, stacklevel=2)
    return LandmarkSet(pts.points + vals, pts.names), outside


def spatial_gradient(f: DisplacementField) -> np.ndarray:
    """Jacobian of the field, shape (nx, ny, nz, 3, 3) with [..., i, j] = du_i/dx_j (per mm)."""
    if min(f.shape) < 2:
        raise ValueError("spatial gradient needs at least 2 voxels along every axis")
    g = field_gradient(f.tensor(), f.spacing)[0]
    return g.permute(2, 3, 4, 0, 1).numpy()


def invert_points(f: DisplacementField, targets: np.ndarray, iters: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Solve y + u(y) = target for each target (Newton steps with the trilinear Jacobian)."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    jac = spatial_gradient(f)
    rows_f = [DisplacementField(jac[..., i, :], f.spacing) for i in range(3)]
    y = targets.copy()
    for _ in range(iters):
        vals, _ = sample_field(f, y)
        r = y + vals - targets
        if np.max(np.abs(r)) < tol:
            break
        rows = np.stack([sample_field(c, y)[0] for c in rows_f], axis=1)  # (N, 3, 3): [n, i, j] = du_i/dx_j
        step = np.linalg.solve(np.eye(3) + rows, r[..., None])[..., 0]
        y = y - step
    return y


# --------------------------------------------------------------------------
# persistence


def write_field(f: DisplacementField, path) -> None:
    write_nifti(path, f.u.astype(np.float32), f.spacing, kind="field")


def read_field(path) -> DisplacementField:
    data, spacing, _ = read_nifti(path)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise GridError(f"expected a (nx, ny, nz, 3) field, got shape {data.shape}")
    return DisplacementField(data, spacing)


def write_rigid(r: RigidTransform, path) -> None:
    m = np.hstack([r.rotation, r.translation[:, None]])
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in m) + "\n")


def read_rigid(path) -> RigidTransform:
    vals = [float(v) for v in Path(path).read_text().split()]
    if len(vals) != 12:
        raise ValueError(f"rigid transform file needs 12 numbers, found {len(vals)}")
    m = np.array(vals).reshape(3, 4)
    return RigidTransform(m[:, :3], m[:, 3])
