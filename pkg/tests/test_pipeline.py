import dataclasses
import json

import numpy as np
import pytest

from conftest import chain_inside, smooth_volume
from thermoreg.grid import Volume, read_mask
from thermoreg.metrics import dice
from thermoreg.phantom import PhantomSpec, gen_anatomy, gen_case, save_case, without_motion
from thermoreg.pipeline import (STAGES, PipelineConfig, RunManifest, checksums, input_files, run_full,
                                run_intra_procedural, run_pre_procedural, warp_mask)
from thermoreg.register import train_urnet
from thermoreg.xform import read_field, warp

SMALL = dict(shape=(32, 32, 16), spacing=(4.0, 4.0, 4.0))


def fast_config(**kw):
    cfg = PipelineConfig.from_dict({"synth": {"mode": "identity"}, "inpaint": {"mode": "none"},
                                    "classical": {"iterations": 15, "rigid_iterations": 30}, "render_png": False})
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def urnet_params():
    pairs = [(c.pct, c.ict_clean) for c in (gen_case(PhantomSpec.random(s, **SMALL)) for s in (20, 21))]
    return train_urnet(pairs, lam=0.1, steps=20, channels=(4, 8), pool=1).params()


def ct_looking_mr(case):
    # the fast configs use G = identity, so hand them a pMR that already has CT contrast
    _, _, ct = gen_anatomy(case.spec)
    return dataclasses.replace(case, pmr=Volume(ct.data, ct.spacing, "MR"))


@pytest.fixture(scope="module")
def still_case():
    # pMR is the pCT image itself, so with G = identity there is nothing to register
    case = gen_case(without_motion(PhantomSpec.random(5, **SMALL)))
    return dataclasses.replace(case, pmr=Volume(case.pct.data, case.pct.spacing, "MR"))


@pytest.fixture(scope="module")
def moving_case():
    return ct_looking_mr(gen_case(PhantomSpec.random(6, **SMALL)))


# config


def test_config_json_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict({"seed": 3, "reg": {"lam": 0.2, "channels": [8, 8]},
                                    "classical": {"levels": [2, 1]}, "synth": {"weights": {"mi": 0.0}}})
    back = PipelineConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.reg.channels == (8, 8) and back.classical.levels == (2, 1) and back.synth.weights.mi == 0.0


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"reg": {"lamda": 1.0}})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"reg": {"lam": -1.0}})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"synth": {"mode": "magic"}})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"inpaint": {"lr": 0.0}})


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"case_dir": "case", "reg": {"checkpoint": "u.ckpt"}}))
    cfg = PipelineConfig.load(tmp_path / "c.json")
    assert cfg.case_dir == str(tmp_path / "case") and cfg.reg.checkpoint == str(tmp_path / "u.ckpt")


# stages


def test_pre_stage_already_aligned(still_case):
    phi1, sct = run_pre_procedural(still_case, fast_config())
    assert sct.modality == "sCT"
    assert np.linalg.norm(phi1.u, axis=-1).max() <= 1.0


def test_pre_stage_improves_dice(moving_case):
    phi1, _ = run_pre_procedural(moving_case, fast_config())
    truth = moving_case.mask("liver", "ct").data
    before = dice(moving_case.mask("liver", "mr").data, truth)
    after = dice(warp_mask(moving_case.mask("liver", "mr"), phi1), truth)
    assert after > before


def test_intra_stage_no_harm_without_motion(still_case, urnet_params):
    phi2, inpct = run_intra_procedural(still_case, fast_config(), urnet_params=urnet_params)
    truth = still_case.mask("liver", "ict").data
    before = dice(still_case.mask("liver", "ct").data, truth)
    assert dice(warp_mask(still_case.mask("liver", "ct"), phi2), truth) >= before - 0.01
    assert np.array_equal(inpct.data, still_case.ict.data)


def test_intra_stage_missing_mask(still_case, urnet_params, tmp_path):
    cfg = fast_config()
    cfg.inpaint.probe_mask = str(tmp_path / "nope.nii")
    with pytest.raises(Exception):
        run_intra_procedural(still_case, cfg, urnet_params=urnet_params)


# full runs


def test_full_identity_case(still_case, urnet_params, tmp_path):
    m = run_full(still_case, fast_config(render_png=True), urnet_params=urnet_params, out_dir=tmp_path)
    assert m.status == "ok"
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["dice"]["liver"] >= 0.97
    for name in ("phi.nii", "pmr_on_ict.nii", "liver_on_ict.nii", "tumor_on_ict.nii", "landmarks_mr_on_ict.csv",
                 "overlay.png", "manifest.json", "sct.nii", "phi1.nii", "inpct.nii", "phi2.nii"):
        assert (tmp_path / name).is_file(), name


def test_full_manifest_contract(moving_case, urnet_params, tmp_path):
    case_dir = save_case(moving_case, tmp_path / "case")
    before = checksums(sorted((case_dir).iterdir()))
    cfg = fast_config(case_dir=str(case_dir))
    m = run_full(None, cfg, urnet_params=urnet_params, out_dir=tmp_path / "run")
    assert m.status == "ok"
    assert [s.name for s in m.stages] == list(STAGES)
    assert all(s.status == "ok" for s in m.stages)
    assert sum(s.seconds for s in m.stages) <= m.total_seconds
    assert m.checksums["inputs_before"] == m.checksums["inputs_after"]
    assert checksums(sorted(case_dir.iterdir())) == before
    back = RunManifest.from_json((tmp_path / "run" / "manifest.json").read_text())
    assert back.config == cfg.to_dict() and back.composed_field == "phi.nii"
    d = m.stage("evaluate").metrics["dice"]
    assert d["liver"] > d["liver_initial"]


def test_full_run_deterministic(moving_case, urnet_params, tmp_path):
    for name in ("a", "b"):
        run_full(moving_case, fast_config(), urnet_params=urnet_params, out_dir=tmp_path / name)
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_composed_field_matches_sequential_warps(moving_case, urnet_params, tmp_path):
    run_full(moving_case, fast_config(), urnet_params=urnet_params, out_dir=tmp_path)
    phi1, phi2 = read_field(tmp_path / "phi1.nii"), read_field(tmp_path / "phi2.nii")
    phi = read_field(tmp_path / "phi.nii")
    # a smooth probe image, so double resampling does not blur away noise and confound the check
    img = Volume(smooth_volume(moving_case.grid.shape, seed=1, sigma=3).astype(np.float32), moving_case.grid.spacing)
    once = warp(img, phi).data
    seq = warp(warp(img, phi1), phi2).data
    ok = chain_inside(phi2, phi1)
    assert np.abs(once - seq)[ok].max() <= 0.01 * np.ptp(img.data)


def test_stage_failure_gives_partial_manifest(moving_case, tmp_path):
    cfg = fast_config()
    cfg.reg.checkpoint = str(tmp_path / "missing.ckpt")
    m = run_full(moving_case, cfg, out_dir=tmp_path / "run")
    assert m.status == "failed"
    status = {s.name: s.status for s in m.stages}
    assert status == {"synthesis": "ok", "pre_registration": "ok", "inpainting": "ok",
                      "intra_registration": "failed", "compose_warp": "skipped", "evaluate": "skipped"}
    assert "FileNotFoundError" in m.stage("intra_registration").error
    assert (tmp_path / "run" / "phi1.nii").is_file() and (tmp_path / "run" / "manifest.json").is_file()


def test_probe_geometry_is_inverted_at_boundary(moving_case, urnet_params, tmp_path):
    geo = {"balls": [{"center_mm": [60, 60, 30], "radius_mm": 8}]}
    (tmp_path / "g.json").write_text(json.dumps(geo))
    cfg = fast_config()
    cfg.inpaint.probe_geometry = str(tmp_path / "g.json")
    run_intra_procedural(moving_case, cfg, urnet_params=urnet_params, out_dir=tmp_path)
    valid = read_mask(tmp_path / "valid_mask.nii").data
    x = moving_case.grid.coords()
    ball = ((x - [60, 60, 30]) ** 2).sum(-1) <= 64
    assert np.array_equal(valid == 0, ball)
