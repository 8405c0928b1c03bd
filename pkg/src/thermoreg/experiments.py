"""Phantom experiments behind the acceptance criteria and the scripts/ runners.

Each function takes generated cases and returns a plain dict of numbers
(plus trained parameters where later experiments reuse them), so results
can be dumped to JSON as-is.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .inpaint import eval_inpaint, mask_at, train_inpaint
from .metrics import dice, mutual_information, tre
from .neural import NetworkParams
from .phantom import PhantomCase
from .pipeline import PipelineConfig, make_inpct, run_pre_procedural, warp_mask
from .register import URNet, load_urnet, predict_field, train_urnet
from .synthesis import SynthLossWeights, synthesize_volume, train_synthesis, volume_slices
from .xform import DisplacementField


def liver_dice_intra(case: PhantomCase, field: DisplacementField) -> float:
    """Liver of pCT pulled onto the iCT grid, against the iCT liver."""
    return dice(warp_mask(case.mask("liver", "ct"), field).data, case.mask("liver", "ict").data)


def _mean(xs) -> float:
    return float(np.mean(xs))


# --------------------------------------------------------------------------
# UR-Net recovery


@dataclass
class RecoverySettings:
    lam: float = 0.05
    steps: int = 3000
    lr: float = 1e-3
    channels: tuple = (16, 32, 32)
    pool: int = 1
    seed: int = 0


def registration_recovery(train: list[PhantomCase], test: list[PhantomCase],
                          settings: RecoverySettings | None = None) -> tuple[dict, NetworkParams]:
    """Train UR-Net on (pCT -> clean iCT) pairs, score liver Dice and TRE on the test cases."""
    s = settings or RecoverySettings()
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    state = train_urnet([(c.pct, c.ict_clean) for c in train], s.lam, s.steps, s.seed, s.lr,
                        channels=s.channels, pool=s.pool)
    train_s = time.perf_counter() - t0
    params = state.params()
    net = load_urnet(params)
    rows = []
    for c in test:
        zero = DisplacementField.zeros(c.grid)
        pred = predict_field(net, c.ict_clean, c.pct)
        rows.append({"seed": c.spec.seed,
                     "dice_initial": liver_dice_intra(c, zero), "dice": liver_dice_intra(c, pred.field),
                     "tre_initial": tre(c.landmarks_ict, c.landmarks_ct, zero)[0],
                     "tre": tre(c.landmarks_ict, c.landmarks_ct, pred.field)[0],
                     "predict_seconds": pred.seconds})
    res = {"settings": asdict(s), "cases": rows, "train_seconds": train_s,
           "seconds": time.perf_counter() - t0,
           **{f"mean_{k}": _mean([r[k] for r in rows]) for k in ("dice_initial", "dice", "tre_initial", "tre")}}
    res["tre_improvement"] = 1 - res["mean_tre"] / res["mean_tre_initial"]
    return res, params


# --------------------------------------------------------------------------
# inpainting ablation


@dataclass
class InpaintSettings:
    steps: int = 600
    channels: tuple = (16, 32, 64, 64)
    lr: float = 1e-3
    n_augment: int = 500
    seed: int = 0


def liver_center_vox(case: PhantomCase) -> tuple[int, int, int]:
    idx = np.argwhere(case.mask("liver", "ct").data > 0)
    return tuple(int(v) for v in idx.mean(axis=0).round())


def inpainting_ablation(train: list[PhantomCase], test: list[PhantomCase],
                        settings: InpaintSettings | None = None) -> tuple[dict, dict]:
    """Partial-conv vs standard-conv U-Net (same config) vs copy-through, cubic hole at the liver center."""
    s = settings or InpaintSettings()
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    shape, spacing = train[0].grid.shape, train[0].grid.spacing
    masks = lambda i: mask_at(shape, s.seed, i % s.n_augment, spacing)
    clean = [c.pct for c in train]
    params, res = {}, {"settings": asdict(s)}
    centers = [liver_center_vox(c) for c in test]
    res["psnr_copy"] = _mean([eval_inpaint(c.pct, None, ctr) for c, ctr in zip(test, centers)])
    for kind in ("pconv", "conv"):
        params[kind] = train_inpaint(clean, masks, s.steps, s.seed, kind, s.channels, s.lr)
        res[f"psnr_{kind}"] = _mean([eval_inpaint(c.pct, params[kind], ctr) for c, ctr in zip(test, centers)])
    res["seconds"] = time.perf_counter() - t0
    return res, params


# --------------------------------------------------------------------------
# synthesis ablation


@dataclass
class SynthSettings:
    steps: int = 1500
    n_slices: int = 400
    batch_size: int = 4
    lr: float = 2e-4
    base: int = 16
    n_res: int = 3
    seed: int = 0


def synthesis_ablation(train: list[PhantomCase], test: list[PhantomCase], settings: SynthSettings | None = None,
                       config: PipelineConfig | None = None) -> tuple[dict, dict]:
    """MI constraint on/off (same seed and steps), then classical pre-registration sCT vs direct pMR."""
    s = settings or SynthSettings()
    cfg = config or PipelineConfig()
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    rng = np.random.default_rng(s.seed)
    mr, ct = volume_slices([c.pmr for c in train]), volume_slices([c.pct for c in train])
    mr = mr[rng.permutation(len(mr))[:s.n_slices]]
    ct = ct[rng.permutation(len(ct))[:s.n_slices]]
    res, gens = {"settings": asdict(s)}, {}
    for tag, w_mi in (("mi", 1.0), ("no_mi", 0.0)):
        state = train_synthesis(mr, ct, SynthLossWeights(mi=w_mi), s.steps, s.seed, s.batch_size, s.lr, s.base,
                                s.n_res)
        gens[tag] = state.params()["G"]
        res[f"test_mi_{tag}"] = _mean([mutual_information(np.clip(c.pmr.data, 0, 1),
                                                          synthesize_volume(c.pmr, gens[tag]).data) for c in test])
    rows = []
    for c in test:
        row = {"seed": c.spec.seed, "dice_initial": dice(c.mask("liver", "mr").data, c.mask("liver", "ct").data)}
        for tag, mode in (("sct", "net"), ("direct", "identity")):
            cfg.synth.mode = mode
            phi1, _ = run_pre_procedural(c, cfg, G_params=gens["mi"])
            row[f"dice_{tag}"] = dice(warp_mask(c.mask("liver", "mr"), phi1).data, c.mask("liver", "ct").data)
        rows.append(row)
    res.update(cases=rows, **{f"mean_{k}": _mean([r[k] for r in rows]) for k in ("dice_initial", "dice_sct",
                                                                                  "dice_direct")})
    res["seconds"] = time.perf_counter() - t0
    return res, gens


# --------------------------------------------------------------------------
# inpainting in front of registration


def inpainting_helps_registration(test: list[PhantomCase], urnet: NetworkParams | URNet,
                                  inpaint: NetworkParams) -> dict:
    """UR-Net against inpCT vs against the raw (probe-corrupted) iCT, same cases and net."""
    net = urnet if isinstance(urnet, URNet) else load_urnet(urnet)
    cfg = PipelineConfig()
    rows = []
    for c in test:
        inpct = make_inpct(c, cfg, inpaint)
        rows.append({"seed": c.spec.seed, "streak_amplitude": c.spec.streak_amplitude,
                     "dice_inpct": liver_dice_intra(c, predict_field(net, inpct, c.pct).field),
                     "dice_ict": liver_dice_intra(c, predict_field(net, c.ict, c.pct).field)})
    return {"cases": rows, "mean_dice_inpct": _mean([r["dice_inpct"] for r in rows]),
            "mean_dice_ict": _mean([r["dice_ict"] for r in rows])}


# --------------------------------------------------------------------------
# latency


def latency_scaling(net: URNet, small=(32, 32, 32), large=(64, 64, 128), repeats: int = 3) -> dict:
    """Per-voxel UR-Net inference time at two grid sizes; factor 1 means exactly linear."""
    torch.set_num_threads(1)
    out = {}
    for tag, shape in (("small", small), ("large", large)):
        f = torch.rand(1, 1, *shape)
        with torch.no_grad():
            net(f, f)  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                net(f, f)
                times.append(time.perf_counter() - t0)
        out[f"seconds_{tag}"] = float(np.median(times))
    ratio = float(np.prod(large) / np.prod(small))
    out["voxel_ratio"] = ratio
    out["linear_factor"] = out["seconds_large"] / out["seconds_small"] / ratio
    return out
