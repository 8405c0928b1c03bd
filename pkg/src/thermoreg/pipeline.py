"""Two-stage registration pipeline: configuration, stage runners, manifest.

Pre-procedural stage: pMR -> sCT with the synthesis generator, then classical
rigid + deformable sCT -> pCT registration (phi1, fixed pCT).
Intra-procedural stage: iCT -> inpCT by inpainting the probe region, then
UR-Net pCT -> inpCT (phi2, fixed inpCT).
The final field phi = compose(phi2, phi1) pulls pMR onto the iCT grid with a
single resampling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .grid import (BinaryMask, GridError, LandmarkSet, Volume, read_mask, write_landmarks, write_mask,
                   write_volume)
from .inpaint import HOLE_WEIGHT, inpaint_volume, rasterize_geometry
from .metrics import MetricReport, dice, evaluate
from .neural import NetworkParams
from .phantom import PhantomCase, load_case
from .register import ClassicalRegConfig, classical_deformable, classical_rigid, predict_field
from .synthesis import SynthLossWeights, synthesize_volume
from .xform import (DisplacementField, compose, invert_points, read_field, rigid_to_field, warp,
                    write_field, write_rigid)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
STAGES = ("synthesis", "pre_registration", "inpainting", "intra_registration", "compose_warp", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage, self.cause = stage, cause


# --------------------------------------------------------------------------
# configuration


@dataclass
class SynthStageConfig:
    mode: str = "net"  # "net" uses the generator checkpoint; "identity" registers pMR directly
    checkpoint: str | None = None
    weights: SynthLossWeights = field(default_factory=SynthLossWeights)
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    base: int = 32
    n_res: int = 4


@dataclass
class InpaintStageConfig:
    mode: str = "net"  # "none" registers against the raw iCT
    checkpoint: str | None = None
    probe_mask: str | None = None  # NIfTI, 1 = probe; defaults to the case's probe_mask.nii
    probe_geometry: str | None = None  # JSON balls/boxes in mm
    conv_kind: str = "pconv"
    channels: tuple = (16, 32, 64, 64)
    steps: int = 1500
    lr: float = 1e-3
    hole_weight: float = HOLE_WEIGHT
    n_augment: int = 500


@dataclass
class RegStageConfig:
    checkpoint: str | None = None
    lam: float = 0.05
    steps: int = 3000
    lr: float = 1e-3
    channels: tuple = (16, 32, 32)
    pool: int = 1
    window: int = 9
    train_fixed: str = "inpct"  # fixed image for training pairs: inpct | ict_clean | ict


@dataclass
class PipelineConfig:
    case_dir: str | None = None
    out_dir: str = "run"
    train_cases: list = field(default_factory=list)
    seed: int = 0
    grid_shape: tuple | None = None  # checked against every case when set
    grid_spacing: tuple | None = None
    synth: SynthStageConfig = field(default_factory=SynthStageConfig)
    inpaint: InpaintStageConfig = field(default_factory=InpaintStageConfig)
    reg: RegStageConfig = field(default_factory=RegStageConfig)
    classical: ClassicalRegConfig = field(default_factory=ClassicalRegConfig)
    render_png: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.synth.mode not in ("net", "identity"):
            raise ValueError(f"synth.mode must be net or identity, got {self.synth.mode!r}")
        if self.inpaint.mode not in ("net", "none"):
            raise ValueError(f"inpaint.mode must be net or none, got {self.inpaint.mode!r}")
        if self.reg.train_fixed not in ("inpct", "ict_clean", "ict"):
            raise ValueError(f"reg.train_fixed must be inpct, ict_clean or ict, got {self.reg.train_fixed!r}")
        if self.inpaint.conv_kind not in ("conv", "pconv"):
            raise ValueError("inpaint.conv_kind must be conv or pconv")
        for name, v in (("reg.lam", self.reg.lam), ("inpaint.hole_weight", self.inpaint.hole_weight)):
            if not v >= 0:
                raise ValueError(f"{name} must be non-negative")
        for name, v in (("synth.steps", self.synth.steps), ("inpaint.steps", self.inpaint.steps),
                        ("reg.steps", self.reg.steps)):
            if v < 0:
                raise ValueError(f"{name} must be non-negative")
        for name, v in (("synth.lr", self.synth.lr), ("inpaint.lr", self.inpaint.lr), ("reg.lr", self.reg.lr)):
            if not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.reg.window % 2 != 1 or self.reg.pool < 1 or self.inpaint.n_augment < 1:
            raise ValueError("reg.window must be odd, reg.pool and inpaint.n_augment at least 1")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        cfg = cls.from_json(Path(path).read_text())
        base = Path(path).resolve().parent
        # relative paths in a config file are relative to that file
        cfg.case_dir = _rel(base, cfg.case_dir)
        cfg.out_dir = _rel(base, cfg.out_dir)
        cfg.train_cases = [_rel(base, p) for p in cfg.train_cases]
        for sec, key in (("synth", "checkpoint"), ("inpaint", "checkpoint"), ("inpaint", "probe_mask"),
                         ("inpaint", "probe_geometry"), ("reg", "checkpoint")):
            sub = getattr(cfg, sec)
            setattr(sub, key, _rel(base, getattr(sub, key)))
        return cfg


def _rel(base: Path, p):
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ValueError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        f = known[name]
        default = f.default_factory() if callable(f.default_factory) else f.default
        if is_dataclass(default):
            kw[name] = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


# --------------------------------------------------------------------------
# manifest


@dataclass
class StageRecord:
    name: str
    status: str = "skipped"  # ok | skipped | failed
    seconds: float = 0.0
    metrics: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class RunManifest:
    config: dict
    stages: list
    checksums: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    composed_field: str | None = None
    metrics_path: str | None = None
    status: str = "ok"
    error: str | None = None
    tool_version: str = __version__
    schema_version: int = MANIFEST_SCHEMA

    def stage(self, name: str) -> StageRecord:
        return next(s for s in self.stages if s.name == name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        if d.get("schema_version") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema {d.get('schema_version')!r}")
        d["stages"] = [StageRecord(**s) for s in d["stages"]]
        return cls(**d)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_files(config: PipelineConfig) -> list[Path]:
    files = []
    if config.case_dir:
        files += sorted(p for p in Path(config.case_dir).iterdir() if p.is_file())
    for p in (config.synth.checkpoint, config.inpaint.checkpoint, config.inpaint.probe_mask,
              config.inpaint.probe_geometry, config.reg.checkpoint):
        if p:
            files.append(Path(p))
    return files


def checksums(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths if Path(p).is_file()}


class _Stage:
    """Times a stage and records ok/failed on its manifest entry."""

    def __init__(self, rec: StageRecord):
        self.rec = rec

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self.rec

    def __exit__(self, exc_type, exc, tb):
        self.rec.seconds = time.perf_counter() - self.t0
        if exc is None:
            self.rec.status = "ok"
            return False
        self.rec.status = "failed"
        self.rec.error = f"{type(exc).__name__}: {exc}"
        log.debug("stage %s failed\n%s", self.rec.name, "".join(traceback.format_exception(exc_type, exc, tb)))
        raise StageError(self.rec.name, exc) from exc


# --------------------------------------------------------------------------
# helpers


def _load_params(path, what: str) -> NetworkParams:
    if not path:
        raise ValueError(f"no {what} checkpoint configured")
    return NetworkParams.load(path)


def _check_case_grid(case: PhantomCase, config: PipelineConfig) -> None:
    if config.grid_shape is not None and tuple(case.grid.shape) != tuple(config.grid_shape):
        raise GridError(f"case grid {case.grid.shape} differs from configured {tuple(config.grid_shape)}")
    if config.grid_spacing is not None and tuple(case.grid.spacing) != tuple(map(float, config.grid_spacing)):
        raise GridError(f"case spacing {case.grid.spacing} differs from configured {tuple(config.grid_spacing)}")


def warp_mask(mask: BinaryMask | np.ndarray, f: DisplacementField) -> np.ndarray:
    """Pull a binary mask through a field (trilinear, threshold 0.5)."""
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    return warp(Volume(data.astype(np.float32), f.spacing), f).data > 0.5


def valid_mask_for(case: PhantomCase, config: PipelineConfig) -> BinaryMask:
    """Inpainting valid-mask (1 = keep) from the configured probe description.

    Probe files and geometry describe the probe (1 = probe); they are
    inverted here, at the pipeline boundary.
    """
    if config.inpaint.probe_geometry:
        probe = rasterize_geometry(Path(config.inpaint.probe_geometry), case.grid)
    elif config.inpaint.probe_mask:
        probe = read_mask(config.inpaint.probe_mask)
    elif case.probe_mask is not None:
        probe = case.probe_mask
    else:
        raise ValueError("no probe mask available (file, geometry or case)")
    if probe.shape != case.grid.shape:
        raise GridError(f"probe mask shape {probe.shape} differs from the case grid {case.grid.shape}")
    return probe.invert()


# --------------------------------------------------------------------------
# stages


def run_pre_procedural(case: PhantomCase, config: PipelineConfig, G_params: NetworkParams | None = None,
                       out_dir=None, records: dict | None = None) -> tuple[DisplacementField, Volume]:
    """sCT = G(pMR); phi1 = classical rigid then deformable registration of sCT onto pCT."""
    records = records if records is not None else {n: StageRecord(n) for n in STAGES}
    out = Path(out_dir) if out_dir else None
    with _Stage(records["synthesis"]) as rec:
        if config.synth.mode == "identity":
            sct = case.pmr.replace(modality="sCT")
        else:
            G_params = G_params if G_params is not None else _load_params(config.synth.checkpoint, "generator")
            sct = synthesize_volume(case.pmr, G_params)
        rec.metrics["mode"] = config.synth.mode
        if out:
            write_volume(sct, out / "sct.nii")
            rec.outputs["sct"] = "sct.nii"
    with _Stage(records["pre_registration"]) as rec:
        rigid = classical_rigid(case.pct, sct, config.classical)
        phi_rigid = rigid_to_field(rigid.transform, case.grid)
        res = classical_deformable(case.pct, sct, config.classical, init=phi_rigid)
        phi1 = res.field
        liver_ct = case.mask("liver", "ct").data
        rec.metrics.update(
            rigid_converged=rigid.converged, deformable_stopped_early=res.stopped_early,
            liver_dice_initial=float(dice(case.mask("liver", "mr").data, liver_ct)),
            liver_dice_rigid=float(dice(warp_mask(case.mask("liver", "mr"), phi_rigid), liver_ct)),
            liver_dice=float(dice(warp_mask(case.mask("liver", "mr"), phi1), liver_ct)))
        if out:
            write_rigid(rigid.transform, out / "rigid.txt")
            write_field(phi_rigid, out / "phi1_rigid.nii")
            write_field(phi1, out / "phi1.nii")
            rec.outputs.update(rigid="rigid.txt", phi1_rigid="phi1_rigid.nii", phi1="phi1.nii")
    return phi1, sct


def make_inpct(case: PhantomCase, config: PipelineConfig, inpaint_params: NetworkParams | None = None,
               valid: BinaryMask | None = None) -> Volume:
    """iCT with the probe region inpainted (the raw iCT when ``inpaint.mode`` is none or nothing is masked)."""
    valid = valid if valid is not None else valid_mask_for(case, config)
    if config.inpaint.mode == "none" or valid.data.all():
        return case.ict.replace(modality="inpCT")
    params = inpaint_params if inpaint_params is not None else _load_params(config.inpaint.checkpoint, "inpainting")
    return inpaint_volume(case.ict, valid, params)


def run_intra_procedural(case: PhantomCase, config: PipelineConfig, inpaint_params: NetworkParams | None = None,
                         urnet_params: NetworkParams | None = None, out_dir=None,
                         records: dict | None = None) -> tuple[DisplacementField, Volume]:
    """inpCT = inpaint(iCT, probe mask); phi2 = UR-Net(fixed=inpCT, moving=pCT)."""
    records = records if records is not None else {n: StageRecord(n) for n in STAGES}
    out = Path(out_dir) if out_dir else None
    with _Stage(records["inpainting"]) as rec:
        valid = valid_mask_for(case, config)
        inpct = make_inpct(case, config, inpaint_params, valid)
        rec.metrics.update(mode=config.inpaint.mode, hole_voxels=int((valid.data == 0).sum()))
        if out:
            write_volume(inpct, out / "inpct.nii")
            write_mask(valid, out / "valid_mask.nii")
            rec.outputs.update(inpct="inpct.nii", valid_mask="valid_mask.nii")
    with _Stage(records["intra_registration"]) as rec:
        params = urnet_params if urnet_params is not None else _load_params(config.reg.checkpoint, "UR-Net")
        pred = predict_field(params, inpct, case.pct)
        phi2 = pred.field
        liver_ict = case.mask("liver", "ict").data
        rec.metrics.update(
            predict_seconds=pred.seconds,
            liver_dice_initial=float(dice(case.mask("liver", "ct").data, liver_ict)),
            liver_dice=float(dice(warp_mask(case.mask("liver", "ct"), phi2), liver_ict)))
        if out:
            write_field(phi2, out / "phi2.nii")
            rec.outputs["phi2"] = "phi2.nii"
    return phi2, inpct


def render_overlay(path, ict: Volume, warped_pmr: Volume, liver_pred: np.ndarray, liver_true: np.ndarray) -> None:
    """Mid-slice render: iCT with the true (green) and registered (red) liver outlines, plus warped pMR."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    k = ict.shape[2] // 2
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, img, title in ((axes[0], ict.data[:, :, k], "iCT"), (axes[1], warped_pmr.data[:, :, k], "pMR on iCT")):
        ax.imshow(img.T, cmap="gray", origin="lower", vmin=0, vmax=1)
        ax.contour(liver_true[:, :, k].T.astype(float), [0.5], colors="lime", linewidths=1)
        ax.contour(liver_pred[:, :, k].T.astype(float), [0.5], colors="red", linewidths=1)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def run_full(case: PhantomCase | None, config: PipelineConfig, G_params: NetworkParams | None = None,
             inpaint_params: NetworkParams | None = None, urnet_params: NetworkParams | None = None,
             out_dir=None) -> RunManifest:
    """Both stages, phi = compose(phi2, phi1), warp pMR/labels/landmarks onto iCT, evaluate, report.

    A stage failure stops the run; the manifest (with the failure cause) is
    still written and returned, later stages stay ``skipped``.
    """
    t_start = time.perf_counter()
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = {n: StageRecord(n) for n in STAGES}
    manifest = RunManifest(config=config.to_dict(), stages=list(records.values()))
    inputs = input_files(config)
    manifest.checksums["inputs_before"] = checksums(inputs)
    try:
        if case is None:
            if not config.case_dir:
                raise ValueError("no case given and no case_dir configured")
            case = load_case(config.case_dir)
        _check_case_grid(case, config)
        phi1, sct = run_pre_procedural(case, config, G_params, out, records)
        phi2, inpct = run_intra_procedural(case, config, inpaint_params, urnet_params, out, records)
        with _Stage(records["compose_warp"]) as rec:
            phi = compose(phi2, phi1)
            warped_pmr = warp(case.pmr, phi)
            liver = warp_mask(case.mask("liver", "mr"), phi)
            tumor = warp_mask(case.mask("tumor", "mr"), phi)
            lm_on_ict = LandmarkSet(invert_points(phi, case.landmarks_mr.points), case.landmarks_mr.names)
            write_field(phi, out / "phi.nii")
            write_volume(warped_pmr, out / "pmr_on_ict.nii")
            write_mask(BinaryMask(liver.astype(np.uint8), phi.spacing), out / "liver_on_ict.nii")
            write_mask(BinaryMask(tumor.astype(np.uint8), phi.spacing), out / "tumor_on_ict.nii")
            write_landmarks(lm_on_ict, out / "landmarks_mr_on_ict.csv")
            rec.outputs.update(phi="phi.nii", pmr="pmr_on_ict.nii", liver="liver_on_ict.nii",
                               tumor="tumor_on_ict.nii", landmarks="landmarks_mr_on_ict.csv")
            manifest.composed_field = "phi.nii"
        with _Stage(records["evaluate"]) as rec:
            liver_true = case.mask("liver", "ict").data
            tumor_true = case.mask("tumor", "ict").data  # phantom-only ground truth
            phi1_rigid = read_field(out / "phi1_rigid.nii")
            rigid_only = warp_mask(case.mask("liver", "mr"), phi1_rigid)
            report = evaluate(labels={"liver": (liver, liver_true), "tumor": (tumor, tumor_true),
                                      "liver_initial": (case.mask("liver", "mr").data, liver_true),
                                      "liver_rigid_only": (rigid_only, liver_true)},
                              fixed_pts=case.landmarks_ict, moving_pts=case.landmarks_mr, field_=phi)
            (out / "metrics.json").write_text(report.to_json())
            manifest.metrics_path = "metrics.json"
            rec.metrics = json.loads(report.to_json())
            if config.render_png:
                render_overlay(out / "overlay.png", case.ict, warped_pmr, liver, liver_true)
                rec.outputs["overlay"] = "overlay.png"
            rec.outputs["metrics"] = "metrics.json"
    except StageError as e:
        manifest.status, manifest.error = "failed", str(e)
        log.error("%s", e)
    except Exception as e:  # failures before any stage started (loading, grid checks)
        manifest.status, manifest.error = "failed", f"{type(e).__name__}: {e}"
        log.error("run failed before the first stage: %s", e)
    manifest.checksums["inputs_after"] = checksums(inputs)
    manifest.checksums["config"] = hashlib.sha256(config.to_json().encode()).hexdigest()
    manifest.total_seconds = time.perf_counter() - t_start
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def read_metrics(run_dir) -> MetricReport:
    return MetricReport.from_json((Path(run_dir) / "metrics.json").read_text())
