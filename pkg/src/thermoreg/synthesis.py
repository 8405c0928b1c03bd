"""Unpaired MR -> CT slice translation: a Cycle-GAN whose generators also
maximize mutual information between their input and output.

Generators work on single transverse slices (B, 1, H, W) in [0, 1]; volumes
are translated slice by slice along z.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .grid import Volume
from .metrics import DEFAULT_BINS, soft_mi_t
from .neural import LEAK, NetworkParams, TrainingAborted

log = logging.getLogger(__name__)

Generator = Callable[[torch.Tensor], torch.Tensor]


# --------------------------------------------------------------------------
# networks


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(ch, affine=True))

    def forward(self, x):
        return x + self.body(x)


class ResidualGenerator(nn.Module):
    """Full-res stem, one stride-2 downsampling, residual blocks at half resolution,
    nearest upsampling back, sigmoid output."""

    def __init__(self, base: int = 32, n_res: int = 4):
        super().__init__()
        self.base, self.n_res = base, n_res
        wide = 2 * base

        def norm_act(c):
            return [nn.InstanceNorm2d(c, affine=True), nn.ReLU(inplace=True)]

        self.net = nn.Sequential(
            nn.Conv2d(1, base, 7, padding=3, padding_mode="reflect"), *norm_act(base),
            nn.Conv2d(base, wide, 3, stride=2, padding=1), *norm_act(wide),
            *[ResBlock(wide) for _ in range(n_res)],
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(wide, base, 3, padding=1, padding_mode="reflect"), *norm_act(base),
            nn.Conv2d(base, 1, 7, padding=3, padding_mode="reflect"),
            nn.Sigmoid())

    def forward(self, x):
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """Four conv layers; three stride-2 steps, then a 1-channel patch score map."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, base, 4, stride=2, padding=1), nn.LeakyReLU(LEAK),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * base, affine=True),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(2 * base, 4 * base, 4, stride=2, padding=1), nn.InstanceNorm2d(4 * base, affine=True),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(4 * base, 1, 3, padding=1))

    def forward(self, x):
        return self.net(x)


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class SynthLossWeights:
    adv: float = 1.0
    cyc: float = 10.0
    mi: float = 1.0

    def __post_init__(self):
        if min(self.adv, self.cyc, self.mi) < 0:
            raise ValueError("loss weights must be non-negative")


def _finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise TrainingAborted(f"non-finite values in {what}")
    return t


def cycle_loss(x_mr: torch.Tensor, x_ct: torch.Tensor, G: Generator, F_: Generator) -> torch.Tensor:
    """mean |F(G(x_mr)) - x_mr| + mean |G(F(x_ct)) - x_ct|"""
    rec_mr = _finite(F_(G(x_mr)), "MR reconstruction")
    rec_ct = _finite(G(F_(x_ct)), "CT reconstruction")
    return (rec_mr - x_mr).abs().mean() + (rec_ct - x_ct).abs().mean()


def adversarial_loss(d_real: torch.Tensor | None, d_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Least-squares GAN loss on patch scores."""
    if side == "discriminator":
        return ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()
    if side == "generator":
        return ((d_fake - 1) ** 2).mean()
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def mi_loss(x: torch.Tensor, G: Generator, bins: int = DEFAULT_BINS, bandwidth: float | None = None,
            out: torch.Tensor | None = None) -> torch.Tensor:
    """Negative soft MI between each input slice and its translation, averaged over the batch."""
    y = G(x) if out is None else out
    b = x.shape[0]
    return -soft_mi_t(x.reshape(b, -1), y.reshape(b, -1), bins, bandwidth).mean()


# --------------------------------------------------------------------------
# training


@dataclass
class LossReport:
    step: int
    g_adv: float
    cycle: float
    mi: float
    g_total: float
    d_total: float


@dataclass
class SynthTrainState:
    G: ResidualGenerator
    F: ResidualGenerator
    D_mr: PatchDiscriminator
    D_ct: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    weights: SynthLossWeights
    seed: int
    step: int = 0
    history: list = field(default_factory=list)  # LossReport per logging interval

    def params(self) -> dict[str, NetworkParams]:
        meta = {"kind": "synth", "steps": self.step, "weights": asdict(self.weights),
                "base": self.G.base, "n_res": self.G.n_res}
        return {name: NetworkParams.from_module(getattr(self, name), self.seed, net=name, **meta)
                for name in ("G", "F", "D_mr", "D_ct")}


def volume_slices(volumes: Sequence[Volume]) -> np.ndarray:
    """Stack the transverse (x, y) slices of every volume: (N, X, Y) float32."""
    return np.concatenate([np.moveaxis(np.asarray(v.data, np.float32), 2, 0) for v in volumes])


def _all_finite(mods) -> bool:
    return all(torch.isfinite(p).all() for m in mods for p in m.parameters())


def train_synthesis(mr_slices: np.ndarray, ct_slices: np.ndarray, weights: SynthLossWeights | None = None,
                    steps: int = 1000, seed: int = 0, batch_size: int = 4, lr: float = 2e-4,
                    base: int = 32, n_res: int = 4, bins: int = DEFAULT_BINS, log_every: int = 50) -> SynthTrainState:
    """Alternating LSGAN training of G (MR->CT), F (CT->MR) and two patch critics.

    MR and CT batches are drawn independently (unpaired). The MI term is
    applied to both directions: MI(x_mr, G(x_mr)) and MI(x_ct, F(x_ct)).
    """
    mr = np.asarray(mr_slices, np.float32)
    ct = np.asarray(ct_slices, np.float32)
    if len(mr) < 1 or len(ct) < 1:
        raise ValueError("need at least one slice per domain")
    w = weights or SynthLossWeights()
    torch.manual_seed(seed)
    G, F_ = ResidualGenerator(base, n_res), ResidualGenerator(base, n_res)
    D_mr, D_ct = PatchDiscriminator(base), PatchDiscriminator(base)
    opt_g = torch.optim.Adam([*G.parameters(), *F_.parameters()], lr=lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam([*D_mr.parameters(), *D_ct.parameters()], lr=lr, betas=(0.5, 0.999))
    state = SynthTrainState(G, F_, D_mr, D_ct, opt_g, opt_d, w, seed)
    rng = np.random.default_rng(seed)
    last_good = state.params() if steps else None
    acc = np.zeros(5)
    for step in range(steps):
        x = torch.from_numpy(mr[rng.integers(0, len(mr), batch_size)])[:, None]
        y = torch.from_numpy(ct[rng.integers(0, len(ct), batch_size)])[:, None]

        # generators
        fake_ct, fake_mr = G(x), F_(y)
        l_adv = (adversarial_loss(None, D_ct(fake_ct), "generator")
                 + adversarial_loss(None, D_mr(fake_mr), "generator"))
        l_cyc = (F_(fake_ct) - x).abs().mean() + (G(fake_mr) - y).abs().mean()
        l_mi = mi_loss(x, G, bins, out=fake_ct) + mi_loss(y, F_, bins, out=fake_mr)
        l_g = w.adv * l_adv + w.cyc * l_cyc + w.mi * l_mi
        if not torch.isfinite(l_g):
            raise TrainingAborted(f"non-finite generator loss at step {step}", last_good)
        opt_g.zero_grad()
        l_g.backward()
        opt_g.step()

        # critics
        l_d = (adversarial_loss(D_ct(y), D_ct(fake_ct.detach()), "discriminator")
               + adversarial_loss(D_mr(x), D_mr(fake_mr.detach()), "discriminator"))
        if not torch.isfinite(l_d):
            raise TrainingAborted(f"non-finite discriminator loss at step {step}", last_good)
        opt_d.zero_grad()
        l_d.backward()
        opt_d.step()
        if not _all_finite((G, F_, D_mr, D_ct)):
            raise TrainingAborted(f"non-finite parameters after step {step}", last_good)

        state.step += 1
        acc += [l_adv.item(), l_cyc.item(), l_mi.item(), l_g.item(), l_d.item()]
        if log_every and (state.step % log_every == 0 or state.step == steps):
            n = state.step % log_every or log_every
            state.history.append(LossReport(state.step, *(acc / n).tolist()))
            log.info("synth step %d  G %.4f  cyc %.4f  mi %.4f  D %.4f", state.step, *(acc / n)[[3, 1, 2, 4]])
            acc[:] = 0
            last_good = state.params()
    return state


def load_generator(params: NetworkParams) -> ResidualGenerator:
    if params is None:
        raise ValueError("generator parameters are missing")
    if params.meta.get("steps", 1) == 0:
        raise ValueError("generator is untrained (0 steps)")
    meta = params.meta
    g = ResidualGenerator(meta.get("base", 32), meta.get("n_res", 4))
    return params.load_into(g).eval()


def synthesize_volume(v_mr: Volume, G: nn.Module | NetworkParams | Generator) -> Volume:
    """Translate each transverse slice, restack along z; tagged sCT."""
    if isinstance(G, NetworkParams):
        G = load_generator(G)
    if G is None:
        raise ValueError("generator is missing")
    if isinstance(G, nn.Module):
        if not _all_finite([G]):
            raise ValueError("generator has non-finite parameters")
        G.eval()
    data = np.asarray(v_mr.data, np.float32)
    out = np.empty_like(data)
    with torch.no_grad():
        for k in range(data.shape[2]):
            s = G(torch.from_numpy(np.ascontiguousarray(data[:, :, k]))[None, None])
            out[:, :, k] = s[0, 0].numpy()
    if not np.all(np.isfinite(out)):
        raise ValueError("generator produced non-finite output")
    return Volume(out, v_mr.spacing, "sCT")
