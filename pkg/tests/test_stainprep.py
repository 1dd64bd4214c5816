import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_doh, disk_image, solve_concentrations

from virtualstain.domain import ClassRatioConfig, Patch, SampleRecord
from virtualstain.phantom import PhantomConfig, generate_pair, render_pair
from virtualstain.stainprep import (
    DAB,
    DEFAULT_DOH_SIGMAS,
    DEFAULT_STAIN_VECTORS,
    N_DIHEDRAL,
    CandidateSet,
    ConfigurationError,
    DegenerateClassError,
    Detection,
    StainMatrix,
    augment,
    augment_array,
    color_deconvolve,
    compose_ops,
    detect_negative_candidates,
    detect_positive_candidates,
    from_concentrations,
    inverted_luminance,
    rebalance,
)

S = StainMatrix()


# ---------------------------------------------------------------- deconvolution


def test_white_patch_has_zero_concentration():
    conc = color_deconvolve(Patch(np.ones((8, 8, 3)), "HE"))
    assert np.array_equal(conc, np.zeros((8, 8, 3)))


def test_pure_dab_pixel_recovered():
    px = np.exp(-0.7 * DEFAULT_STAIN_VECTORS[DAB])[None, None, :]
    conc = color_deconvolve(px)
    assert conc[0, 0] == pytest.approx([0.0, 0.0, 0.7], abs=1e-6)
    assert np.allclose(conc, solve_concentrations(px, DEFAULT_STAIN_VECTORS), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=3, max_size=3))
def test_deconvolution_inverts_forward_model(c):
    c = np.array(c)
    px = from_concentrations(c[None, None, :], S)
    assert np.max(np.abs(color_deconvolve(px, S)[0, 0] - c)) < 1e-6


def test_deconvolution_matches_direct_solve_on_phantom():
    he, ph, _ = generate_pair(PhantomConfig(seed=4), 0)
    for patch in (he, ph):
        ours = color_deconvolve(patch)
        ref = solve_concentrations(patch.pixels[::7, ::7], DEFAULT_STAIN_VECTORS)
        assert np.allclose(ours[::7, ::7], ref, atol=1e-10)


def test_deconvolution_error_at_default_noise():
    # Pooled relative error ||c_hat - c|| / ||c|| over a batch of default-noise
    # phantom pairs; includes 8-bit quantization.
    cfg = PhantomConfig(seed=21)
    num = den = 0.0
    for i in range(20):
        pair = render_pair(cfg, i)
        for patch, truth in ((pair.he, pair.he_concentrations), (pair.phh3, pair.phh3_concentrations)):
            num += np.sum((color_deconvolve(patch, StainMatrix(cfg.stain_matrix)) - truth) ** 2)
            den += np.sum(truth**2)
    assert np.sqrt(num / den) < 0.05


def test_dab_peak_at_mitosis_center():
    cfg = PhantomConfig(seed=8, mitosis_rate=1.0, nuclei_per_patch=(1, 1))
    for i in range(10):
        _, ph, truth = generate_pair(cfg, i)
        dab = color_deconvolve(ph)[..., DAB]
        peak = np.unravel_index(np.argmax(dab), dab.shape)
        (r, c), _ = truth[0]
        assert np.hypot(peak[0] - r, peak[1] - c) <= 3, (i, peak)


def test_singular_stain_matrix_rejected():
    with pytest.raises(ConfigurationError):
        StainMatrix(np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1.0]]))
    with pytest.raises(ConfigurationError):
        StainMatrix(np.array([[2, 0, 0], [0, 1, 0], [0, 0, 1.0]]))


# ---------------------------------------------------------------- candidates


def test_positive_candidates_empty_without_mitoses():
    _, ph, _ = generate_pair(PhantomConfig(seed=1, mitosis_rate=0.0), 0)
    assert len(detect_positive_candidates(ph)) == 0


def test_infinite_threshold_gives_nothing():
    _, ph, _ = generate_pair(PhantomConfig(seed=1, mitosis_rate=1.0), 0)
    assert len(detect_positive_candidates(ph, dab_threshold=np.inf)) == 0


def test_selector_can_veto():
    _, ph, _ = generate_pair(PhantomConfig(seed=1, mitosis_rate=1.0), 0)
    assert len(detect_positive_candidates(ph)) > 0
    assert len(detect_positive_candidates(ph, selector=lambda p, d: False)) == 0


def test_positive_detection_requires_phh3():
    he, _, _ = generate_pair(PhantomConfig(), 0)
    with pytest.raises(ValueError):
        detect_positive_candidates(he)


def test_uniform_patch_has_no_blobs():
    assert len(detect_negative_candidates(Patch(np.full((100, 100, 3), 0.8), "HE"))) == 0


def test_single_disk_localized_and_matches_oracle():
    img = disk_image(100, (50, 50), 8)
    found = detect_negative_candidates(Patch(img, "HE"))
    assert len(found) == 1
    (r, c) = found.centers[0]
    assert np.hypot(r - 50, c - 50) <= 2
    oracle = brute_force_doh(inverted_luminance(img), DEFAULT_DOH_SIGMAS)
    k, orr, occ = np.unravel_index(np.argmax(oracle), oracle.shape)
    assert np.hypot(orr - r, occ - c) <= 1
    assert found.detections[0].sigma == DEFAULT_DOH_SIGMAS[k]


@pytest.mark.parametrize("center", [(30, 64), (71, 40)])
def test_disk_off_center(center):
    found = detect_negative_candidates(Patch(disk_image(100, center, 6), "HE"))
    assert len(found) == 1
    assert np.hypot(found.centers[0][0] - center[0], found.centers[0][1] - center[1]) <= 2


def test_blob_at_positive_center_is_excluded():
    patch = Patch(disk_image(100, (50, 50), 8), "HE")
    pos = CandidateSet((Detection((51, 49), 1.0),), kind="positive_phh3")
    assert len(detect_negative_candidates(patch, pos)) == 0


def test_empty_sigmas_is_config_error():
    with pytest.raises(ConfigurationError):
        detect_negative_candidates(Patch(np.ones((20, 20, 3)), "HE"), doh_sigmas=[])


def _rot_point(p, size, k):
    r, c = p
    for _ in range(k % 4):
        r, c = size - 1 - c, r
    return r, c


def test_doh_rotation_equivariance():
    cfg = PhantomConfig(seed=13)
    for i in range(6):
        he, _, _ = generate_pair(cfg, i)
        base = detect_negative_candidates(he).centers
        for k in (1, 2, 3):
            rotated = detect_negative_candidates(augment(he, k)).centers
            expect = sorted(_rot_point(p, 100, k) for p in base)
            assert len(rotated) == len(expect), (i, k)
            for p in rotated:
                d = min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in expect)
                assert d <= 1, (i, k, p)


def test_phantom_cell_bodies_found_with_min_separation():
    cfg = PhantomConfig(seed=17, mitosis_rate=0.0)
    for i in range(10):
        he, _, truth = generate_pair(cfg, i)
        found = detect_negative_candidates(he)
        centers = np.array(found.centers)
        for (r, c), _ in truth:
            assert np.min(np.hypot(centers[:, 0] - r, centers[:, 1] - c)) <= 3
        d = np.hypot(*(centers[:, None, :] - centers[None, :, :]).transpose(2, 0, 1))
        assert np.all(d[np.triu_indices(len(centers), 1)] >= 10)
        assert np.all((centers >= 0) & (centers < 100))


# ---------------------------------------------------------------- rebalance


def _records(n_pos, n_neg):
    labels = ["mitosis"] * n_pos + ["non_mitosis"] * n_neg
    np.random.default_rng(n_pos * 1000 + n_neg).shuffle(labels)
    return [SampleRecord(f"r{i}", lab, "HE", "cls_train", "s", (0, 0)) for i, lab in enumerate(labels)]


def test_rebalance_paper_ratio():
    chosen, w = rebalance(_records(100, 6000), ClassRatioConfig(), seed=0)
    pos = [r for r in chosen if r.label.is_positive]
    assert len(pos) == 100 and len(chosen) - len(pos) == 500
    assert np.all(w[[r.label.is_positive for r in chosen]] == 5.0)
    assert np.all(w[[not r.label.is_positive for r in chosen]] == 1.0)


def test_rebalance_insufficient_negatives_warns():
    with pytest.warns(UserWarning):
        chosen, _ = rebalance(_records(10, 20), seed=0)
    assert len(chosen) == 30


def test_rebalance_deterministic():
    recs = _records(30, 900)
    assert rebalance(recs, seed=3)[0] == rebalance(recs, seed=3)[0]
    assert rebalance(recs, seed=3)[0] != rebalance(recs, seed=4)[0]


def test_rebalance_without_positives_is_degenerate():
    with pytest.raises(DegenerateClassError):
        rebalance(_records(0, 10))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 400), st.integers(0, 2**31 - 1))
def test_rebalance_cardinality(p, n, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        chosen, w = rebalance(_records(p, n), seed=seed)
    n_sel = sum(not r.label.is_positive for r in chosen)
    assert n_sel == min(5 * p, n)
    assert sum(r.label.is_positive for r in chosen) == p
    assert len(set(r.patch_ref for r in chosen)) == len(chosen)
    assert all(wi == 5.0 for r, wi in zip(chosen, w) if r.label.is_positive)


# ---------------------------------------------------------------- augmentation


def test_identity_op(rng):
    p = Patch(rng.random((10, 10, 3)), "HE", "s", (3, 4))
    assert np.array_equal(augment(p, 0).pixels, p.pixels)


def test_four_quarter_turns(rng):
    a = rng.random((10, 10, 3))
    out = a
    for _ in range(4):
        out = augment_array(out, 1)
    assert np.array_equal(out, a)


def test_ops_preserve_pixel_multiset(rng):
    a = rng.random((12, 12, 3))
    results = [augment_array(a, k) for k in range(N_DIHEDRAL)]
    for out in results:
        assert np.array_equal(np.sort(out.ravel()), np.sort(a.ravel()))
        assert out.sum() == pytest.approx(a.sum(), rel=1e-12)
    # all eight transforms are distinct on a generic array
    assert len({r.tobytes() for r in results}) == 8


def test_augment_keeps_metadata(rng):
    p = Patch(rng.random((10, 10, 3)), "PHH3", "slide3", (7, 9))
    q = augment(p, 6)
    assert (q.stain, q.source_id, q.center) == (p.stain, p.source_id, p.center)


@pytest.mark.parametrize("bad", [-1, 8])
def test_op_out_of_range(bad):
    with pytest.raises(ValueError):
        augment_array(np.zeros((4, 4, 3)), bad)


def test_dihedral_closure():
    probe = np.arange(16).reshape(4, 4)
    for a in range(8):
        for b in range(8):
            k = compose_ops(a, b)
            assert np.array_equal(augment_array(augment_array(probe, a), b), augment_array(probe, k))
