"""Volumes, masks, landmarks, preprocessing and file IO.

Geometry convention: axis-aligned grids, voxel ``(0, 0, 0)`` centered at the
physical origin, so voxel ``i`` along an axis sits at ``i * spacing`` mm.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

MODALITIES = ("MR", "CT", "sCT", "inpCT", "phantom")

# default desk-scale grid
DEFAULT_SHAPE = (64, 64, 32)
DEFAULT_SPACING = (2.0, 2.0, 2.0)


class Grid(NamedTuple):
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def coords(self) -> np.ndarray:
        """Physical coordinates (mm) of every voxel, shape ``(*shape, 3)``."""
        axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(self.shape, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @property
    def extent(self) -> np.ndarray:
        """Physical coordinate of the last voxel center along each axis."""
        return (np.asarray(self.shape) - 1) * np.asarray(self.spacing)


class GridError(ValueError):
    """Grids of two objects that must agree do not."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    modality: str = "phantom"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite voxels")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.spacing)

    def replace(self, data=None, modality=None) -> "Volume":
        return Volume(self.data if data is None else data, self.spacing,
                      self.modality if modality is None else modality)


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.spacing)

    def invert(self) -> "BinaryMask":
        return BinaryMask(1 - self.data, self.spacing)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        names = tuple(self.names) or tuple(f"L{i}" for i in range(len(pts)))
        if len(names) != len(pts):
            raise ValueError("landmark names and points differ in length")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.points)

    def inside(self, grid: Grid) -> np.ndarray:
        return np.all((self.points >= 0) & (self.points <= grid.extent), axis=1)


def check_same_grid(*objs) -> Grid:
    grids = [o.grid if not isinstance(o, Grid) else o for o in objs]
    g0 = grids[0]
    for g in grids[1:]:
        if tuple(g.shape) != tuple(g0.shape) or not np.allclose(g.spacing, g0.spacing, rtol=0, atol=1e-9):
            raise GridError(f"grid mismatch: {g0} vs {g}")
    return g0


# --------------------------------------------------------------------------
# preprocessing


def clamp_intensity(v: Volume, lo: float, hi: float) -> Volume:
    if not lo < hi:
        raise ValueError(f"invalid intensity range [{lo}, {hi}]")
    return v.replace(np.clip(v.data, lo, hi))


def normalize_unit(v: Volume) -> Volume:
    """Affine rescale to [0, 1]. A constant volume maps to zeros with a warning."""
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        warnings.warn("normalize_unit: constant volume, returning zeros", RuntimeWarning, stacklevel=2)
        return v.replace(np.zeros_like(v.data))
    out = (data - lo) / (hi - lo)
    return v.replace(out.astype(v.data.dtype))


def as_tensor(a, dtype=None) -> torch.Tensor:
    """Copy an array (possibly read-only) into a fresh tensor."""
    t = torch.from_numpy(np.array(a, copy=True))
    return t if dtype is None else t.to(dtype)


def sample_trilinear(img: torch.Tensor, pos: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinear sampling of ``img`` (B, C, X, Y, Z) at voxel positions ``pos`` (B, ..., 3).

    ``padding="zeros"`` treats voxels outside the grid as 0 (corner-wise, so the
    result fades continuously at the border); ``"border"`` clamps positions to
    the grid. Differentiable in both ``img`` and ``pos``.
    """
    B, C = img.shape[:2]
    dims = img.shape[2:]
    out_shape = pos.shape[1:-1]
    pos = pos.reshape(B, -1, 3).to(img.dtype)
    if padding == "border":
        hi = torch.tensor([d - 1 for d in dims], dtype=pos.dtype, device=pos.device)
        pos = torch.minimum(torch.clamp(pos, min=0), hi)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    p0 = torch.floor(pos)
    frac = pos - p0
    p0 = p0.long()
    flat = img.reshape(B, C, -1)
    out = None
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = p0[..., 0] + cx
                iy = p0[..., 1] + cy
                iz = p0[..., 2] + cz
                wx = frac[..., 0] if cx else 1 - frac[..., 0]
                wy = frac[..., 1] if cy else 1 - frac[..., 1]
                wz = frac[..., 2] if cz else 1 - frac[..., 2]
                w = wx * wy * wz
                valid = (ix >= 0) & (ix < dims[0]) & (iy >= 0) & (iy < dims[1]) & (iz >= 0) & (iz < dims[2])
                lin = (ix.clamp(0, dims[0] - 1) * dims[1] + iy.clamp(0, dims[1] - 1)) * dims[2] + iz.clamp(0, dims[2] - 1)
                vals = flat.gather(2, lin.unsqueeze(1).expand(B, C, lin.shape[1]))
                term = vals * (w * valid).unsqueeze(1)
                out = term if out is None else out + term
    return out.reshape(B, C, *out_shape)


def resample(v: Volume, new_shape: Sequence[int], new_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling onto a new grid sharing the physical origin.

    Positions beyond the source extent take the nearest border value.
    """
    new_shape = tuple(int(n) for n in new_shape)
    if len(new_shape) != 3 or min(new_shape) <= 0:
        raise ValueError(f"invalid shape {new_shape!r}")
    new_spacing = _check_spacing(new_spacing)
    if new_shape == v.shape and new_spacing == v.spacing:
        return v.replace(v.data)
    coords = Grid(new_shape, new_spacing).coords() / np.asarray(v.spacing)
    img = as_tensor(v.data, torch.float64)[None, None]
    out = sample_trilinear(img, torch.from_numpy(coords)[None], padding="border")
    return Volume(out[0, 0].numpy().astype(v.data.dtype), new_spacing, v.modality)


def preprocess(v: Volume, clamp: tuple[float, float] | None = (-800.0, 800.0),
               shape: Sequence[int] | None = None, spacing: Sequence[float] | None = None) -> Volume:
    """clamp -> normalize to [0,1] -> resample. ``clamp=None`` skips clamping (MR)."""
    if clamp is not None:
        v = clamp_intensity(v, *clamp)
    v = normalize_unit(v)
    if shape is not None:
        v = resample(v, shape, spacing if spacing is not None else v.spacing)
        v = v.replace(np.clip(v.data, 0.0, 1.0))
    return v


# --------------------------------------------------------------------------
# NIfTI-1 single file (.nii), minimal subset


class NiftiError(ValueError):
    pass


class NiftiParseError(NiftiError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class NiftiIntegrityError(NiftiError):
    pass


_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64, 256: np.int8, 512: np.uint16}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
_HDR = 348
_EXT_CODE = 6  # NIFTI_ECODE_COMMENT, carries exact float64 spacing + modality as JSON


def _encode_nifti(data: np.ndarray, spacing, meta: dict) -> bytes:
    dt = np.dtype(data.dtype).newbyteorder("<")
    code = _CODES.get(np.dtype(data.dtype))
    if code is None:
        raise NiftiError(f"unsupported dtype {data.dtype}")
    ext = json.dumps({"spacing": list(spacing), **meta}).encode()
    ext += b"\0" * ((-len(ext) - 8) % 16)
    vox_offset = _HDR + 4 + 8 + len(ext)
    dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pixdim = [1.0] + list(spacing) + [1.0] * (7 - len(spacing))
    hdr = bytearray(_HDR)
    struct.pack_into("<i", hdr, 0, _HDR)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<hh", hdr, 70, code, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<fff", hdr, 108, float(vox_offset), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    hdr[344:348] = b"n+1\0"
    payload = np.asarray(data, dtype=dt).ravel(order="F").tobytes()
    return bytes(hdr) + b"\x01\0\0\0" + struct.pack("<ii", 8 + len(ext), _EXT_CODE) + ext + payload


def _decode_nifti(buf: bytes):
    if len(buf) < _HDR:
        raise NiftiParseError("truncated header", len(buf))
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != _HDR:
        raise NiftiParseError(f"bad sizeof_hdr {sizeof_hdr}", 0)
    if buf[344:347] != b"n+1":
        raise NiftiParseError("missing 'n+1' magic (only single-file NIfTI-1 is supported)", 344)
    dims = struct.unpack_from("<8h", buf, 40)
    ndim = dims[0]
    if not 1 <= ndim <= 7 or any(d <= 0 for d in dims[1:ndim + 1]):
        raise NiftiParseError(f"invalid dim field {dims}", 40)
    shape = tuple(dims[1:ndim + 1])
    code, bitpix = struct.unpack_from("<hh", buf, 70)
    if code not in _DTYPES:
        raise NiftiParseError(f"unsupported datatype {code}", 70)
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    if bitpix != dtype.itemsize * 8:
        raise NiftiParseError(f"bitpix {bitpix} does not match datatype {code}", 72)
    pixdim = struct.unpack_from("<8f", buf, 76)
    vox_offset, slope, inter = struct.unpack_from("<fff", buf, 108)
    vox_offset = int(vox_offset)
    if vox_offset < _HDR:
        raise NiftiParseError(f"invalid vox_offset {vox_offset}", 108)
    meta = {}
    if len(buf) >= _HDR + 4 and buf[_HDR] != 0:
        off = _HDR + 4
        while off + 8 <= vox_offset:
            esize, ecode = struct.unpack_from("<ii", buf, off)
            if esize < 8 or off + esize > vox_offset:
                raise NiftiParseError(f"bad extension size {esize}", off)
            if ecode == _EXT_CODE:
                try:
                    meta = json.loads(buf[off + 8:off + esize].rstrip(b"\0"))
                except ValueError:
                    meta = {}
            off += esize
    n = int(np.prod(shape)) * dtype.itemsize
    if len(buf) < vox_offset + n:
        raise NiftiIntegrityError(
            f"data section holds {max(len(buf) - vox_offset, 0)} bytes, header shape {shape} needs {n}")
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=vox_offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    if np.isfinite(slope) and slope != 0 and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter
    # float32 pixdim loses precision; prefer the exact copy from the extension
    spacing = meta.get("spacing") or [float(str(np.float32(p))) for p in pixdim[1:4]]
    return data, tuple(float(s) for s in spacing[:3]), meta


def write_nifti(path, data: np.ndarray, spacing, **meta) -> None:
    Path(path).write_bytes(_encode_nifti(np.asarray(data), spacing, meta))


def read_nifti(path):
    """Return ``(data, spacing, meta)``."""
    return _decode_nifti(Path(path).read_bytes())


def write_volume(v: Volume, path) -> None:
    write_nifti(path, v.data, v.spacing, modality=v.modality)


def read_volume(path) -> Volume:
    data, spacing, meta = read_nifti(path)
    if data.ndim != 3:
        raise NiftiIntegrityError(f"expected a 3D volume, got shape {data.shape}")
    return Volume(data, spacing, meta.get("modality", "phantom"))


def write_mask(m: BinaryMask, path) -> None:
    write_nifti(path, m.data, m.spacing, kind="mask")


def read_mask(path) -> BinaryMask:
    data, spacing, _ = read_nifti(path)
    if data.ndim != 3:
        raise NiftiIntegrityError(f"expected a 3D mask, got shape {data.shape}")
    return BinaryMask((data > 0.5).astype(np.uint8), spacing)


def write_landmarks(pts: LandmarkSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "x_mm", "y_mm", "z_mm"])
        for name, p in zip(pts.names, pts.points):
            w.writerow([name, *(repr(float(c)) for c in p)])


def read_landmarks(path) -> LandmarkSet:
    names, pts = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "name":
                continue
            names.append(row[0])
            pts.append([float(c) for c in row[1:4]])
    return LandmarkSet(np.array(pts).reshape(-1, 3), tuple(names))
