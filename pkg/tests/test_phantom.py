import numpy as np
import pytest

from thermoreg.grid import Grid, Volume
from thermoreg.metrics import dice, mutual_information, tre
from thermoreg.phantom import (BORDER_BAND, PhantomSpec, add_probe, gen_anatomy, gen_case, gen_deformation, liver_of,
                               load_case, save_case, tumor_of, without_motion)
from thermoreg.xform import spatial_gradient, warp

G = Grid((32, 32, 16), (4.0, 4.0, 4.0))


def small_spec(seed, **kw):
    return PhantomSpec.random(seed, shape=G.shape, spacing=G.spacing, **kw)


def case_bytes(c):
    parts = [c.pmr.data, c.pct.data, c.ict.data, c.labels_mr, c.labels_ict, c.gt_full.u, c.probe_mask.data,
             c.landmarks_ict.points]
    return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


# spec / anatomy


def test_spec_rejects_bad_geometry():
    with pytest.raises(ValueError):
        PhantomSpec(tumor_center_mm=(52.0, 58.0, 31.0), tumor_radius_mm=20.0)
    with pytest.raises(ValueError):
        PhantomSpec(liver_center_mm=(10.0, 58.0, 31.0))
    with pytest.raises(ValueError):
        PhantomSpec(intra_amplitude_mm=-1.0)


def test_spec_json_round_trip():
    s = small_spec(4)
    assert PhantomSpec.from_json(s.to_json()) == s


def test_anatomy_tumor_inside_liver_and_unit_range():
    labels, pmr, pct = gen_anatomy(small_spec(2))
    tumor, liver = tumor_of(labels).astype(bool), liver_of(labels).astype(bool)
    assert tumor.any() and np.all(liver[tumor])
    for v in (pmr, pct):
        assert v.data.min() >= 0 and v.data.max() <= 1


def test_anatomy_modalities_share_information(rng):
    _, pmr, pct = gen_anatomy(small_spec(5))
    shuffled = rng.permutation(pct.data.ravel())
    assert mutual_information(pmr.data, pct.data) > mutual_information(pmr.data.ravel(), shuffled) + 0.1


def test_tumor_contrast_higher_in_mr():
    labels, pmr, pct = gen_anatomy(small_spec(6))
    t = tumor_of(labels).astype(bool)
    l = liver_of(labels).astype(bool) & ~t
    c_mr = abs(pmr.data[t].mean() - pmr.data[l].mean())
    c_ct = abs(pct.data[t].mean() - pct.data[l].mean())
    assert c_mr > 3 * c_ct


# deformation


def test_deformation_zero_amplitude():
    assert np.all(gen_deformation(G, 0.0, 8.0, 0).u == 0)


@pytest.mark.parametrize("amp", [1.0, 4.5, 10.0])
def test_deformation_max_norm_and_border(amp):
    f = gen_deformation(G, amp, 12.0, 3)
    assert abs(np.linalg.norm(f.u, axis=-1).max() - amp) <= 1e-6
    b = BORDER_BAND
    inner = np.zeros(G.shape, bool)
    inner[b:-b, b:-b, b:-b] = True
    assert np.all(f.u[~inner] == 0)


def test_deformation_smoother_with_larger_sigma():
    g = Grid((48, 48, 48), (1.0, 1.0, 1.0))
    energy = [np.mean(spatial_gradient(gen_deformation(g, 3.0, s, 9)) ** 2) for s in (2.0, 4.0, 8.0)]
    assert energy[0] > energy[1] > energy[2]


def test_deformation_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gen_deformation(G, 1.0, 0.0, 0)
    with pytest.raises(ValueError):
        gen_deformation(G, -1.0, 4.0, 0)


# probe


def probe_args():
    return dict(entry=(20.0, 40.0, 20.0), target=(60.0, 64.0, 36.0), radius=3.0)


def test_probe_without_streaks_changes_only_cylinder():
    v = Volume(np.full(G.shape, 0.4, np.float32), G.spacing, "CT")
    out, mask = add_probe(v, streak_amplitude=0.0, **probe_args())
    changed = out.data != v.data
    assert changed.any() and np.all(out.data[changed] == 1.0)
    # changed voxels are the cylinder: within radius of the segment
    from thermoreg.phantom import _segment_distance
    dist, _ = _segment_distance(G.coords(), np.array(probe_args()["entry"]), np.array(probe_args()["target"]))
    assert np.array_equal(changed, dist <= 3.0)


def test_probe_locality_and_contrast(small_case):
    c = small_case
    v = c.ict_clean
    out, mask = add_probe(v, streak_amplitude=0.3, **probe_args())
    m = mask.data.astype(bool)
    assert out.data[~m].tobytes() == v.data[~m].tobytes()
    diff = np.abs(out.data.astype(np.float64) - v.data)
    assert diff[m].mean() > 10 * max(diff[~m].mean(), 1e-12)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_probe_degenerate_segment():
    v = Volume(np.zeros(G.shape), G.spacing)
    with pytest.raises(ValueError):
        add_probe(v, (20, 20, 20), (20, 20, 20), 2.0, 0.3)
    with pytest.raises(ValueError):
        add_probe(v, (20, 20, 20), (500, 20, 20), 2.0, 0.3)


# cases


def test_case_deterministic():
    a, b = gen_case(small_spec(11)), gen_case(small_spec(11))
    assert case_bytes(a) == case_bytes(b)
    assert case_bytes(a) != case_bytes(gen_case(small_spec(12)))


def test_case_without_motion_has_identical_anatomy():
    c = gen_case(without_motion(small_spec(7)))
    assert np.array_equal(c.labels_ct, c.labels_ict)
    assert np.array_equal(c.labels_mr, c.labels_ict)
    assert np.all(c.gt_full.u == 0)
    assert c.probe_mask.count == 0 and np.array_equal(c.ict.data, c.ict_clean.data)


def test_case_landmarks_consistent_with_fields(small_case):
    c = small_case
    assert tre(c.landmarks_ict, c.landmarks_ct, c.gt_intra)[0] <= 0.1
    assert tre(c.landmarks_ct, c.landmarks_mr, c.gt_pre)[0] <= 0.1
    assert tre(c.landmarks_ict, c.landmarks_mr, c.gt_full)[0] <= 0.1


@pytest.fixture(scope="module")
def full_case():
    return gen_case(PhantomSpec.random(1))


def test_case_gt_warp_reproduces_labels(full_case):
    c = full_case
    for moving, fixed, f in (("ct", "ict", c.gt_intra), ("mr", "ct", c.gt_pre), ("mr", "ict", c.gt_full)):
        liver = Volume(c.mask("liver", moving).data.astype(np.float32), c.grid.spacing)
        warped = warp(liver, f).data > 0.5
        assert dice(warped, c.mask("liver", fixed).data) >= 0.97


def test_case_motion_is_substantial(small_case):
    c = small_case
    assert dice(c.mask("liver", "ct").data, c.mask("liver", "ict").data) < 0.95
    assert c.probe_mask.count > 0


@pytest.mark.parametrize("seed", [0, 27, 38])
def test_corpus_seeds_regenerable(seed):
    assert case_bytes(gen_case(PhantomSpec.random(seed))) == case_bytes(gen_case(PhantomSpec.random(seed)))


def test_case_save_load_round_trip(tmp_path, small_case):
    save_case(small_case, tmp_path / "case")
    back = load_case(tmp_path / "case")
    assert back.spec == small_case.spec
    for name in ("pmr", "pct", "ict", "ict_clean"):
        assert np.array_equal(getattr(back, name).data, getattr(small_case, name).data.astype(np.float32))
    assert np.array_equal(back.labels_ict, small_case.labels_ict)
    assert np.allclose(back.gt_full.u, small_case.gt_full.u, atol=1e-5)
    assert np.allclose(back.landmarks_ict.points, small_case.landmarks_ict.points)
    assert np.array_equal(back.probe_mask.data, small_case.probe_mask.data)
