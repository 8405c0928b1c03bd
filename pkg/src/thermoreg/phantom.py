"""Synthetic pMR / pCT / iCT cases with known ground truth.

Anatomy is defined analytically in pMR space. The pCT is the same anatomy seen
through a pre-procedural field ``gt_pre`` (fixed pCT, moving pMR) and the iCT
through ``gt_intra`` (fixed iCT, moving pCT) on top of it, so every ground-truth
correspondence is a field in the registration convention used everywhere else.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .grid import (DEFAULT_SHAPE, DEFAULT_SPACING, BinaryMask, Grid, LandmarkSet, Volume, read_landmarks, sample_trilinear,
                   read_mask, read_volume, write_landmarks, write_mask, write_volume)
from .xform import (DisplacementField, RigidTransform, compose, invert_points, read_field, rigid_to_field,
                    rotation_matrix, write_field)

AIR, BODY, LIVER, TUMOR, VESSEL, SPINE = range(6)
LABEL_NAMES = ("air", "body", "liver", "tumor", "vessel", "spine")

# per-label intensities after normalization to [0, 1]
CT_LUT = np.array([0.0, 0.45, 0.56, 0.535, 0.70, 0.92])  # CT [-800, 800] HU window; tumor barely visible
MR_LUT = np.array([0.0, 0.60, 0.32, 0.85, 0.12, 0.20])  # T2-like: bright tumor, dark vessels/bone
NOISE_SIGMA = 0.01
BORDER_BAND = 3


@dataclass
class PhantomSpec:
    shape: tuple = DEFAULT_SHAPE
    spacing: tuple = DEFAULT_SPACING
    seed: int = 0
    body_axes_mm: tuple = (56.0, 46.0)
    liver_center_mm: tuple = (52.0, 58.0, 31.0)
    liver_axes_mm: tuple = (30.0, 22.0, 17.0)
    liver_angle_deg: float = 0.0
    tumor_center_mm: tuple = (52.0, 58.0, 31.0)
    tumor_radius_mm: float = 7.0
    spine_center_mm: tuple = (63.0, 96.0)
    spine_radius_mm: float = 8.0
    vessels: tuple = ()  # ((p0, p1, radius), ...) in mm
    pre_rigid_deg: tuple = (0.0, 0.0, 0.0)
    pre_rigid_mm: tuple = (0.0, 0.0, 0.0)
    pre_amplitude_mm: float = 4.0
    pre_sigma_mm: float = 14.0
    intra_amplitude_mm: float = 8.0
    intra_sigma_mm: float = 16.0
    breath_shift_mm: tuple = (0.0, 0.0, 0.0)
    mr_bias: float = 0.1
    texture_amplitude: float = 0.04
    texture_sigma_mm: float = 3.0
    probe: bool = True
    probe_radius_mm: float = 2.0
    streak_amplitude: float = 0.3
    streak_extent_mm: float = 10.0
    probe_entry_mm: tuple = (20.0, 30.0, 20.0)

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> Grid:
        return Grid(tuple(self.shape), tuple(float(s) for s in self.spacing))

    def validate(self) -> None:
        ext = self.grid.extent
        lc, la = np.asarray(self.liver_center_mm), np.asarray(self.liver_axes_mm)
        band = BORDER_BAND * np.asarray(self.spacing)
        if min(la) <= 0 or self.tumor_radius_mm <= 0:
            raise ValueError("structure sizes must be positive")
        rot = rotation_matrix(np.deg2rad([0, 0, self.liver_angle_deg]))
        half = np.sqrt(((rot * la) ** 2).sum(axis=1))
        if np.any(lc - half < band) or np.any(lc + half > ext - band):
            raise ValueError("liver does not fit inside the grid")
        rel = rot.T @ (np.asarray(self.tumor_center_mm) - lc)
        # tumor strictly inside liver: every point of the ball has ellipsoid radius < 1
        if np.linalg.norm(rel / la) + self.tumor_radius_mm / la.min() >= 1.0:
            raise ValueError("tumor is not strictly inside the liver")
        if self.intra_amplitude_mm < 0 or self.pre_amplitude_mm < 0:
            raise ValueError("deformation amplitudes must be non-negative")

    @classmethod
    def random(cls, seed: int, **overrides) -> "PhantomSpec":
        """Subject-like variation of geometry and motion, reproducible per seed."""
        rng = np.random.default_rng([seed, 7])
        axes = (rng.uniform(26, 32), rng.uniform(19, 24), rng.uniform(14, 17))
        center = (rng.uniform(46, 58), rng.uniform(54, 62), rng.uniform(29, 33))
        angle = rng.uniform(-20, 20)
        rot = rotation_matrix(np.deg2rad([0, 0, angle]))
        r_t = rng.uniform(5.0, 8.0)
        # tumor center at ellipsoid radius <= 0.4 keeps it well inside
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        t_rel = rng.uniform(0.0, 0.4) * d * np.asarray(axes)
        tumor = tuple(np.asarray(center) + rot @ t_rel)
        vessels = []
        for _ in range(3):
            a = rng.normal(size=3)
            a /= np.linalg.norm(a)
            p0 = np.asarray(center) + rot @ (0.8 * a * np.asarray(axes))
            b = -a + 0.6 * rng.normal(size=3)
            b /= np.linalg.norm(b)
            p1 = np.asarray(center) + rot @ (0.8 * b * np.asarray(axes))
            vessels.append((tuple(p0), tuple(p1), float(rng.uniform(1.5, 2.5))))
        breath = rng.normal(size=3) * np.array([2.0, 2.0, 1.0])
        breath = breath / np.linalg.norm(breath) * rng.uniform(6.0, 9.0)
        spec = dict(
            seed=seed, liver_center_mm=center, liver_axes_mm=axes, liver_angle_deg=angle,
            tumor_center_mm=tumor, tumor_radius_mm=r_t, vessels=tuple(vessels),
            body_axes_mm=(rng.uniform(54, 58), rng.uniform(44, 48)),
            pre_rigid_deg=tuple(rng.uniform(-3, 3, size=3)), pre_rigid_mm=tuple(rng.uniform(-3, 3, size=3)),
            breath_shift_mm=tuple(breath),
            probe_entry_mm=(rng.uniform(14, 24), rng.uniform(40, 60), rng.uniform(18, 44)),
        )
        spec.update(overrides)
        return cls(**spec)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        d = json.loads(text)
        d["vessels"] = tuple((tuple(p0), tuple(p1), r) for p0, p1, r in d.get("vessels", ()))
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


# --------------------------------------------------------------------------
# anatomy


def _segment_distance(pts: np.ndarray, p0, p1) -> tuple[np.ndarray, np.ndarray]:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    t = np.clip(((pts - p0) @ d) / max(d @ d, 1e-12), 0.0, 1.0)
    closest = p0 + t[..., None] * d
    return np.linalg.norm(pts - closest, axis=-1), closest


def label_at(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Tissue label of physical pMR-space points (..., 3)."""
    pts = np.asarray(pts, dtype=np.float64)
    ext = spec.grid.extent
    lab = np.full(pts.shape[:-1], AIR, dtype=np.uint8)
    cx, cy = ext[0] / 2, ext[1] / 2
    ax, ay = spec.body_axes_mm
    body = ((pts[..., 0] - cx) / ax) ** 2 + ((pts[..., 1] - cy) / ay) ** 2 <= 1.0
    lab[body] = BODY
    sx, sy = spec.spine_center_mm
    spine = body & ((pts[..., 0] - sx) ** 2 + (pts[..., 1] - sy) ** 2 <= spec.spine_radius_mm ** 2)
    lab[spine] = SPINE
    rot = rotation_matrix(np.deg2rad([0, 0, spec.liver_angle_deg]))
    rel = (pts - np.asarray(spec.liver_center_mm)) @ rot
    liver = np.sum((rel / np.asarray(spec.liver_axes_mm)) ** 2, axis=-1) <= 1.0
    lab[liver] = LIVER
    for p0, p1, r in spec.vessels:
        dist, _ = _segment_distance(pts, p0, p1)
        lab[liver & (dist <= r)] = VESSEL
    tumor = np.sum((pts - np.asarray(spec.tumor_center_mm)) ** 2, axis=-1) <= spec.tumor_radius_mm ** 2
    lab[tumor] = TUMOR
    return lab


def texture_at(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Smooth unit-variance tissue texture, fixed in pMR space, sampled at physical points."""
    grid = spec.grid
    rng = np.random.default_rng([spec.seed, 4])
    tex = ndimage.gaussian_filter(rng.normal(size=grid.shape), [spec.texture_sigma_mm / s for s in grid.spacing],
                                  mode="wrap")
    tex /= tex.std()
    pos = torch.from_numpy(np.asarray(pts, np.float64) / np.asarray(grid.spacing))
    out = sample_trilinear(torch.from_numpy(tex)[None, None], pos.reshape(1, -1, 1, 1, 3), padding="border")
    return out.reshape(pos.shape[:-1]).numpy()


def liver_of(labels: np.ndarray) -> np.ndarray:
    return np.isin(labels, (LIVER, TUMOR, VESSEL)).astype(np.uint8)


def tumor_of(labels: np.ndarray) -> np.ndarray:
    return (labels == TUMOR).astype(np.uint8)


def _bias_field(grid: Grid, strength: float, rng) -> np.ndarray:
    noise = rng.normal(size=grid.shape)
    smooth = ndimage.gaussian_filter(noise, sigma=[24.0 / s for s in grid.spacing], mode="nearest")
    smooth /= max(np.abs(smooth).max(), 1e-12)
    return 1.0 + strength * smooth


def render(labels: np.ndarray, lut: np.ndarray, grid: Grid, rng, bias: np.ndarray | None = None,
           texture: np.ndarray | None = None) -> np.ndarray:
    """Per-label lookup plus tissue texture, slight partial-volume blur, optional
    multiplicative bias, additive noise."""
    img = lut[labels].astype(np.float64)
    if texture is not None:
        img = img + texture * (labels != AIR)
    img = ndimage.gaussian_filter(img, sigma=0.5, mode="nearest")
    if bias is not None:
        img = img * bias
    img = img + rng.normal(scale=NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_anatomy(spec: PhantomSpec) -> tuple[np.ndarray, Volume, Volume]:
    """Labels, pseudo-MR and pseudo-CT of the same (undeformed) anatomy."""
    spec.validate()
    grid = spec.grid
    x = grid.coords()
    labels = label_at(spec, x)
    tex = spec.texture_amplitude * texture_at(spec, x)
    rng = np.random.default_rng([spec.seed, 1])
    mr = render(labels, MR_LUT, grid, rng, _bias_field(grid, spec.mr_bias, rng), tex)
    ct = render(labels, CT_LUT, grid, rng, texture=tex)
    return labels, Volume(mr, grid.spacing, "MR"), Volume(ct, grid.spacing, "CT")


# --------------------------------------------------------------------------
# deformations


def border_taper(grid: Grid, band: int = BORDER_BAND, ramp: int = 8) -> np.ndarray:
    """Weight that is 0 within ``band`` voxels of the border and rises smoothly to 1."""
    w = np.ones(grid.shape)
    for axis, n in enumerate(grid.shape):
        i = np.arange(n)
        d = np.minimum(i, n - 1 - i).astype(np.float64)
        t = np.clip((d - band + 1) / ramp, 0.0, 1.0)
        t = t * t * (3 - 2 * t)
        shape = [1, 1, 1]
        shape[axis] = n
        w = w * t.reshape(shape)
    return w


def gen_deformation(grid: Grid, amplitude: float, sigma: float, seed: int) -> DisplacementField:
    """Gaussian-smoothed random field, zero in the border band, max |u| = amplitude (mm)."""
    if sigma <= 0:
        raise ValueError("smoothness sigma must be positive")
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if amplitude == 0:
        return DisplacementField.zeros(grid)
    rng = np.random.default_rng([seed, 2])
    sig_vox = [sigma / s for s in grid.spacing]
    u = np.stack([ndimage.gaussian_filter(rng.normal(size=grid.shape), sig_vox, mode="wrap")
                  for _ in range(3)], axis=-1)
    u *= border_taper(grid)[..., None]
    u *= amplitude / np.linalg.norm(u, axis=-1).max()
    return DisplacementField(u, grid.spacing)


def breathing_field(grid: Grid, shift_mm, center_mm, radius_mm: float) -> DisplacementField:
    """Smooth localized translation: ``shift`` at ``center``, decaying as a Gaussian of ``radius``."""
    x = grid.coords()
    r2 = np.sum((x - np.asarray(center_mm)) ** 2, axis=-1)
    w = np.exp(-0.5 * r2 / radius_mm ** 2) * border_taper(grid)
    return DisplacementField(w[..., None] * np.asarray(shift_mm, float), grid.spacing)


# --------------------------------------------------------------------------
# probe


def add_probe(ct: Volume, entry, target, radius: float, streak_amplitude: float,
              streak_extent: float = 10.0, n_rays: int = 8) -> tuple[Volume, BinaryMask]:
    """Insert a bright probe cylinder with radial streaks along entry->target.

    Returns the modified volume and the probe mask (1 = probe and artifacts).
    Voxels outside the mask are untouched.
    """
    entry, target = np.asarray(entry, float), np.asarray(target, float)
    if np.linalg.norm(target - entry) < 1e-6 or radius <= 0:
        raise ValueError("degenerate probe segment")
    grid = ct.grid
    if not (np.all(entry >= 0) and np.all(entry <= grid.extent) and np.all(target >= 0)
            and np.all(target <= grid.extent)):
        raise ValueError("probe segment leaves the volume")
    x = grid.coords()
    dist, closest = _segment_distance(x, entry, target)
    zlo, zhi = min(entry[2], target[2]) - radius, max(entry[2], target[2]) + radius
    in_slices = (x[..., 2] >= zlo) & (x[..., 2] <= zhi)
    cyl = dist <= radius
    reach = radius + streak_extent
    mask = (dist <= reach) & (in_slices | cyl)
    data = ct.data.astype(np.float64).copy()
    if streak_amplitude > 0:
        rel = x - closest
        theta = np.arctan2(rel[..., 1], rel[..., 0])
        streak = streak_amplitude * np.cos(n_rays * theta) * radius / np.maximum(dist, radius)
        ring = mask & ~cyl
        data[ring] += streak[ring]
    data[cyl] = 1.0
    data[mask] = np.clip(data[mask], 0.0, 1.0)
    out = np.where(mask, data.astype(ct.data.dtype), ct.data)
    return ct.replace(out), BinaryMask(mask.astype(np.uint8), grid.spacing)


# --------------------------------------------------------------------------
# cases


@dataclass
class PhantomCase:
    spec: PhantomSpec
    pmr: Volume
    pct: Volume
    ict: Volume
    ict_clean: Volume
    labels_mr: np.ndarray
    labels_ct: np.ndarray
    labels_ict: np.ndarray
    gt_pre: DisplacementField    # fixed pCT, moving pMR
    gt_intra: DisplacementField  # fixed iCT, moving pCT
    gt_full: DisplacementField   # fixed iCT, moving pMR
    landmarks_mr: LandmarkSet
    landmarks_ct: LandmarkSet
    landmarks_ict: LandmarkSet
    probe_mask: BinaryMask       # 1 = probe / artifact region
    extras: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.spec.grid

    def mask(self, which: str, space: str) -> BinaryMask:
        labels = {"mr": self.labels_mr, "ct": self.labels_ct, "ict": self.labels_ict}[space]
        fn = {"liver": liver_of, "tumor": tumor_of}[which]
        return BinaryMask(fn(labels), self.grid.spacing)


def landmark_points(spec: PhantomSpec) -> LandmarkSet:
    """Liver ellipsoid poles, tumor center and tumor poles in pMR space."""
    rot = rotation_matrix(np.deg2rad([0, 0, spec.liver_angle_deg]))
    lc, la = np.asarray(spec.liver_center_mm), np.asarray(spec.liver_axes_mm)
    pts, names = [], []
    for i, ax in enumerate("xyz"):
        for sgn, tag in ((1, "+"), (-1, "-")):
            e = np.zeros(3)
            e[i] = sgn * la[i]
            pts.append(lc + rot @ e)
            names.append(f"liver{ax}{tag}")
    tc = np.asarray(spec.tumor_center_mm)
    pts.append(tc)
    names.append("tumor_center")
    for i, ax in enumerate("xyz"):
        for sgn, tag in ((1, "+"), (-1, "-")):
            e = np.zeros(3)
            e[i] = sgn * spec.tumor_radius_mm
            pts.append(tc + e)
            names.append(f"tumor{ax}{tag}")
    return LandmarkSet(np.array(pts), tuple(names))


def pre_field(spec: PhantomSpec) -> DisplacementField:
    grid = spec.grid
    center = grid.extent / 2
    rot = rotation_matrix(np.deg2rad(spec.pre_rigid_deg))
    rigid = RigidTransform(rot, center - rot @ center + np.asarray(spec.pre_rigid_mm))
    u = rigid_to_field(rigid, grid).u * border_taper(grid)[..., None]
    res = gen_deformation(grid, spec.pre_amplitude_mm, spec.pre_sigma_mm, spec.seed * 2 + 1)
    return DisplacementField(u + res.u, grid.spacing)


def intra_field(spec: PhantomSpec) -> DisplacementField:
    grid = spec.grid
    rnd = gen_deformation(grid, spec.intra_amplitude_mm, spec.intra_sigma_mm, spec.seed * 2 + 2)
    breath = breathing_field(grid, spec.breath_shift_mm, spec.liver_center_mm, 30.0)
    return DisplacementField(rnd.u + breath.u, grid.spacing)


def probe_geometry(spec: PhantomSpec, gt_full: DisplacementField) -> tuple[np.ndarray, np.ndarray]:
    """Entry and tip of the probe in iCT space; the tip lands on the tumor center."""
    target = invert_points(gt_full, [spec.tumor_center_mm])[0]
    return np.asarray(spec.probe_entry_mm, float), target


def gen_case(spec: PhantomSpec) -> PhantomCase:
    spec.validate()
    grid = spec.grid
    x = grid.coords()
    labels_mr, pmr, _ = gen_anatomy(spec)
    g1 = pre_field(spec)
    g2 = intra_field(spec)
    g12 = compose(g2, g1)
    labels_ct = label_at(spec, x + g1.u)
    labels_ict = label_at(spec, x + g12.u)
    rng = np.random.default_rng([spec.seed, 3])
    tex_ct = spec.texture_amplitude * texture_at(spec, x + g1.u)
    tex_ict = spec.texture_amplitude * texture_at(spec, x + g12.u)
    pct = Volume(render(labels_ct, CT_LUT, grid, rng, texture=tex_ct), grid.spacing, "CT")
    ict_clean = Volume(render(labels_ict, CT_LUT, grid, rng, texture=tex_ict), grid.spacing, "CT")
    if spec.probe:
        entry, tip = probe_geometry(spec, g12)
        ict, probe_mask = add_probe(ict_clean, entry, tip, spec.probe_radius_mm, spec.streak_amplitude,
                                    spec.streak_extent_mm)
    else:
        ict, probe_mask = ict_clean, BinaryMask(np.zeros(grid.shape, np.uint8), grid.spacing)
    lm_mr = landmark_points(spec)
    lm_ct = LandmarkSet(invert_points(g1, lm_mr.points), lm_mr.names)
    lm_ict = LandmarkSet(invert_points(g12, lm_mr.points), lm_mr.names)
    return PhantomCase(spec, pmr, pct, ict, ict_clean, labels_mr, labels_ct, labels_ict, g1, g2, g12,
                       lm_mr, lm_ct, lm_ict, probe_mask)


def gen_corpus(n_train: int = 28, n_test: int = 11, first_seed: int = 0, **overrides):
    """Train/test case lists from consecutive seeds (28/11 mirrors the clinical split)."""
    cases = [gen_case(PhantomSpec.random(s, **overrides)) for s in range(first_seed, first_seed + n_train + n_test)]
    return cases[:n_train], cases[n_train:]


# --------------------------------------------------------------------------
# persistence

_VOLUMES = ("pmr", "pct", "ict", "ict_clean")
_FIELDS = ("gt_pre", "gt_intra", "gt_full")
_LANDMARKS = {"landmarks_mr": "landmarks_mr", "landmarks_ct": "landmarks_pct", "landmarks_ict": "landmarks_ict"}


def save_case(case: PhantomCase, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in _VOLUMES:
        write_volume(getattr(case, name), out / f"{name}.nii")
    for space in ("mr", "ct", "ict"):
        write_volume(Volume(getattr(case, f"labels_{space}").astype(np.float32), case.grid.spacing),
                     out / f"labels_{space}.nii")
        write_mask(case.mask("liver", space), out / f"liver_{space}.nii")
        write_mask(case.mask("tumor", space), out / f"tumor_{space}.nii")
    for name in _FIELDS:
        write_field(getattr(case, name), out / f"{name}.nii")
    for attr, fname in _LANDMARKS.items():
        write_landmarks(getattr(case, attr), out / f"{fname}.csv")
    write_mask(case.probe_mask, out / "probe_mask.nii")
    (out / "spec.json").write_text(case.spec.to_json())
    return out


def load_case(case_dir) -> PhantomCase:
    d = Path(case_dir)
    spec = PhantomSpec.from_json((d / "spec.json").read_text())
    vols = {n: read_volume(d / f"{n}.nii") for n in _VOLUMES}
    labels = {s: read_volume(d / f"labels_{s}.nii").data.astype(np.uint8) for s in ("mr", "ct", "ict")}
    fields = {n: read_field(d / f"{n}.nii") for n in _FIELDS}
    lms = {attr: read_landmarks(d / f"{fname}.csv") for attr, fname in _LANDMARKS.items()}
    return PhantomCase(spec, vols["pmr"], vols["pct"], vols["ict"], vols["ict_clean"],
                       labels["mr"], labels["ct"], labels["ict"], fields["gt_pre"], fields["gt_intra"],
                       fields["gt_full"], lms["landmarks_mr"], lms["landmarks_ct"], lms["landmarks_ict"],
                       read_mask(d / "probe_mask.nii"))


def without_motion(spec: PhantomSpec, probe: bool = False) -> PhantomSpec:
    """Same anatomy with every deformation switched off."""
    return replace(spec, pre_rigid_deg=(0.0, 0.0, 0.0), pre_rigid_mm=(0.0, 0.0, 0.0), pre_amplitude_mm=0.0,
                   intra_amplitude_mm=0.0, breath_shift_mm=(0.0, 0.0, 0.0), probe=probe)
