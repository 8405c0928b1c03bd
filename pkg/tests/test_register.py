import numpy as np
import pytest
import torch

from conftest import smooth_field, smooth_volume
from thermoreg.grid import Grid, GridError, Volume
from thermoreg.neural import NetworkParams
from thermoreg.phantom import PhantomSpec, gen_anatomy, gen_deformation
from thermoreg.register import (ClassicalRegConfig, URNet, classical_deformable, classical_rigid, load_urnet,
                                predict_field, train_urnet, urnet_loss)
from thermoreg.xform import DisplacementField, spatial_gradient, warp

SMALL = dict(channels=(4, 8), pool=1)


def vol(a, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(a, np.float32), spacing)


# loss


def test_loss_identity_optimum():
    a = vol(smooth_volume((16, 16, 16), seed=1))
    L, s, reg = urnet_loss(a, a, DisplacementField.zeros(a.grid))
    assert s >= 0.999 and reg == 0 and L <= -0.999


def test_loss_constant_field_unpenalized():
    a = vol(smooth_volume((12, 12, 12), seed=2))
    u = np.broadcast_to(np.array([1.5, -0.5, 2.0]), (12, 12, 12, 3)).copy()
    _, _, reg = urnet_loss(a, a, DisplacementField(u, a.spacing))
    assert reg == 0


def test_loss_linear_field_reg():
    alpha, spacing = 0.07, (2.0, 1.0, 1.5)
    g = Grid((12, 11, 10), spacing)
    u = np.zeros((*g.shape, 3))
    u[..., 0] = alpha * g.coords()[..., 0]
    f = DisplacementField(u, spacing)
    a = vol(smooth_volume(g.shape, seed=3), spacing)
    _, _, reg = urnet_loss(a, a, f)
    # finite-difference oracle: mean over voxels of the squared Jacobian
    oracle = np.mean(np.sum(np.stack(np.gradient(u[..., 0], *spacing), -1) ** 2, -1))
    assert abs(reg - alpha ** 2) <= 1e-6 and abs(reg - oracle) <= 1e-6


def test_loss_decomposes_exactly(rng):
    a, b = vol(rng.random((10, 10, 10))), vol(rng.random((10, 10, 10)))
    f = smooth_field((10, 10, 10), amplitude=1.0, seed=5)
    for lam in (0.0, 0.3, 2.0):
        L, s, reg = urnet_loss(a, b, f, lam)
        assert L == pytest.approx(-s + lam * reg, abs=1e-12)
        assert reg > 0


def test_loss_grid_mismatch():
    a = vol(np.zeros((6, 6, 6)))
    with pytest.raises(GridError):
        urnet_loss(a, vol(np.zeros((6, 6, 7))), DisplacementField.zeros(a.grid))


# UR-Net


def toy_pairs(n=2, shape=(16, 16, 10)):
    out = []
    for i in range(n):
        img = vol(smooth_volume(shape, seed=10 + i, sigma=2))
        f = smooth_field(shape, amplitude=1.5, sigma=3, seed=20 + i)
        out.append((img, warp(img, f)))  # (moving, fixed)
    return out


def test_untrained_net_predicts_zero_field():
    state = train_urnet(toy_pairs(), steps=0, **SMALL)
    assert state.steps == 0
    for moving, fixed in toy_pairs():
        assert np.all(predict_field(state.params(), fixed, moving).field.u == 0)


def test_first_step_loss_is_plain_cc():
    from thermoreg.metrics import local_cc
    (moving, fixed), = toy_pairs(1)
    state = train_urnet([(moving, fixed)], steps=1, cosine_lr=False, **SMALL)
    L, s, reg = state.history[0]
    assert reg == 0 and s == pytest.approx(local_cc(fixed.data, moving.data), abs=1e-5)


def test_identical_pairs_stay_at_optimum():
    a = vol(smooth_volume((16, 16, 10), seed=4, sigma=2))
    state = train_urnet([(a, a)], lam=1.0, steps=100, **SMALL)
    losses = np.array([h[0] for h in state.history])
    assert np.abs(losses - losses[0]).max() <= 1e-3


def test_training_deterministic_and_reduces_loss():
    pairs = toy_pairs()
    a = train_urnet(pairs, steps=60, lr=3e-3, **SMALL)
    b = train_urnet(pairs, steps=60, lr=3e-3, **SMALL)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params().tensors, b.params().tensors))
    first = np.mean([h[0] for h in a.history[:10]])
    last = np.mean([h[0] for h in a.history[-10:]])
    assert last < first


def test_predict_deterministic_and_asymmetric():
    pairs = toy_pairs()
    p = train_urnet(pairs, steps=40, lr=3e-3, **SMALL).params()
    moving, fixed = pairs[0]
    f1 = predict_field(p, fixed, moving).field.u
    f2 = predict_field(p, fixed, moving).field.u
    assert f1.tobytes() == f2.tobytes()
    assert not np.array_equal(predict_field(p, moving, fixed).field.u, f1)


def test_predict_requires_params_and_common_grid():
    a = vol(np.zeros((8, 8, 8)))
    with pytest.raises(ValueError):
        predict_field(None, a, a)
    with pytest.raises(GridError):
        predict_field(URNet((4,), pool=1), a, vol(np.zeros((8, 8, 4))))
    with pytest.raises(ValueError):
        load_urnet(NetworkParams(["w"], [np.zeros(1, np.float32)], 0, {"kind": "inpaint"}))


def test_urnet_checkpoint_round_trip(tmp_path):
    pairs = toy_pairs(1)
    p = train_urnet(pairs, steps=5, **SMALL).params()
    p.save(tmp_path / "u.ckpt")
    q = NetworkParams.load(tmp_path / "u.ckpt")
    moving, fixed = pairs[0]
    assert np.array_equal(predict_field(q, fixed, moving).field.u, predict_field(p, fixed, moving).field.u)


def test_urnet_output_shape_with_pooling():
    net = URNet((4, 8), pool=2)
    x = torch.rand(1, 1, 18, 14, 10)
    assert net(x, x).shape == (1, 3, 18, 14, 10)


# classical


def test_rigid_identity():
    a = vol(smooth_volume((24, 24, 24), seed=6, sigma=3), (2.0, 2.0, 2.0))
    r = classical_rigid(a, a)
    assert np.abs(r.transform.translation).max() <= 0.5
    angle = np.degrees(np.arccos(np.clip((np.trace(r.transform.rotation) - 1) / 2, -1, 1)))
    assert angle <= 0.5


def test_rigid_recovers_translation():
    spec = PhantomSpec.random(2)
    _, _, pct = gen_anatomy(spec)
    shifted = warp(pct, DisplacementField(np.broadcast_to([-4.0, 0, 0], (*pct.shape, 3)).copy(), pct.spacing))
    r = classical_rigid(pct, shifted)
    assert abs(r.transform.translation[0] - 4.0) <= 0.5
    assert np.abs(r.transform.translation[1:]).max() <= 0.5


def test_rigid_featureless_not_converged():
    c = vol(np.full((16, 16, 16), 0.3))
    assert classical_rigid(c, c).converged is False


def test_deformable_zero_iterations():
    a = vol(smooth_volume((16, 16, 16), seed=7))
    b = vol(smooth_volume((16, 16, 16), seed=8))
    out = classical_deformable(a, b, ClassicalRegConfig(iterations=0)).field
    assert np.all(out.u == 0)


def test_deformable_self_registration():
    a = vol(smooth_volume((32, 32, 16), seed=9, sigma=2), (2.0, 2.0, 2.0))
    out = classical_deformable(a, a).field
    assert np.linalg.norm(out.u, axis=-1).max() <= 0.5


@pytest.fixture(scope="module")
def known_pair():
    spec = PhantomSpec.random(4)
    labels, _, pct = gen_anatomy(spec)
    gt = gen_deformation(pct.grid, 6.0, 16.0, 1)
    return pct, warp(pct, gt), gt, labels > 0


def test_deformable_recovers_known_field(known_pair):
    moving, fixed, gt, body = known_pair
    est = classical_deformable(fixed, moving).field
    epe = np.linalg.norm(est.u - gt.u, axis=-1)[body].mean()
    before = np.linalg.norm(gt.u, axis=-1)[body].mean()
    assert epe <= 2.0 and epe < before


def test_deformable_smoothing_reduces_gradient_energy():
    a = vol(smooth_volume((24, 24, 16), seed=11, sigma=2), (2.0, 2.0, 2.0))
    b = warp(a, smooth_field((24, 24, 16), (2.0, 2.0, 2.0), amplitude=3.0, sigma=4, seed=12))
    cfg = dict(levels=(2, 1), iterations=20)
    smooth = classical_deformable(b, a, ClassicalRegConfig(**cfg)).field
    raw = classical_deformable(b, a, ClassicalRegConfig(sigma_fluid_mm=0.0, sigma_diff_mm=0.0, **cfg)).field
    energy = lambda f: np.mean(spatial_gradient(f) ** 2)
    assert energy(smooth) <= energy(raw)


def test_classical_config_validation():
    with pytest.raises(ValueError):
        ClassicalRegConfig(levels=())
    with pytest.raises(ValueError):
        ClassicalRegConfig(sigma_fluid_mm=-1.0)
