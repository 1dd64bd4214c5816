import numpy as np
import pytest

from virtualstain.domain import Label, Split, validate_record
from virtualstain.phantom import (
    PROTOCOL_SPLIT,
    PhantomConfig,
    generate_corpus,
    generate_pair,
    protocol_split_sizes,
    render_pair,
    slide_splits,
)
from virtualstain.stainprep import (
    DAB,
    ConfigurationError,
    color_deconvolve,
    detect_positive_candidates,
)


def _match_all(found, truth, tol):
    """Greedy 1-to-1 matching; True if every truth point gets a partner within tol."""
    left = list(found)
    for t in truth:
        d = [np.hypot(f[0] - t[0], f[1] - t[1]) for f in left]
        if not d or min(d) > tol:
            return False
        left.pop(int(np.argmin(d)))
    return not left


def test_no_mitoses_means_no_brown():
    cfg = PhantomConfig(seed=3, mitosis_rate=0.0)
    for i in range(10):
        _, ph, truth = generate_pair(cfg, i)
        assert all(lab is Label.NON_MITOSIS for _, lab in truth)
        assert not np.any(color_deconvolve(ph)[..., DAB] > 0.3)


def test_all_mitoses_recovered_by_candidates():
    cfg = PhantomConfig(seed=5, mitosis_rate=1.0, nuclei_per_patch=(3, 3))
    for i in range(10):
        _, ph, truth = generate_pair(cfg, i)
        assert len(truth) == 3 and all(lab is Label.MITOSIS for _, lab in truth)
        found = detect_positive_candidates(ph).centers
        assert _match_all(found, [c for c, _ in truth], 3.0), (i, found, truth)


def test_same_index_same_pixels():
    cfg = PhantomConfig(seed=11)
    a = generate_pair(cfg, 4)
    b = generate_pair(cfg, 4)
    assert np.array_equal(a[0].pixels, b[0].pixels)
    assert np.array_equal(a[1].pixels, b[1].pixels)
    assert a[2] == b[2]
    assert not np.array_equal(a[0].pixels, generate_pair(cfg, 5)[0].pixels)


def test_pair_is_aligned_and_tagged():
    he, ph, truth = generate_pair(PhantomConfig(), 0)
    assert he.shape == ph.shape == (100, 100, 3)
    assert he.stain.value == "HE" and ph.stain.value == "PHH3"
    assert truth[0][0] == (50, 50)


def test_mitosis_darker_in_he_than_normal_nucleus():
    cfg = PhantomConfig(seed=2, mitosis_rate=0.5, noise_level=0.0)
    mit, norm = [], []
    for i in range(40):
        pair = render_pair(cfg, i)
        for (r, c), lab in pair.ground_truth:
            window = pair.he_concentrations[max(r - 4, 0):r + 5, max(c - 4, 0):c + 5, 0]
            (mit if lab.is_positive else norm).append(window.max())
    assert min(mit) > max(norm)


def test_empty_nuclei_range_is_config_error():
    with pytest.raises(ConfigurationError):
        PhantomConfig(nuclei_per_patch=(4, 2))
    with pytest.raises(ConfigurationError):
        PhantomConfig(mitosis_rate=1.5)
    with pytest.raises(ConfigurationError):
        PhantomConfig(stain_od_matrix=((1, 1, 0), (0, 1, 0), (0, 0, 1)))


def test_default_rate_tracks_imbalance_target():
    assert PhantomConfig().rate == pytest.approx(1 / 61)
    assert PhantomConfig(imbalance_target=9).rate == pytest.approx(0.1)


def test_protocol_split_sizes():
    assert protocol_split_sizes(18) == PROTOCOL_SPLIT == (5, 9, 4)
    splits = slide_splits(18)
    assert [splits.count(s) for s in (Split.GAN_TRAIN, Split.CLS_TRAIN, Split.TEST)] == [5, 9, 4]


def test_corpus_split_counts_follow_protocol(tmp_path):
    m = generate_corpus(PhantomConfig(seed=1), 18, 1, tmp_path, (5, 9, 4))
    per_split = {s: {r.source_id for r in m.select(split=s)} for s in Split}
    assert [len(per_split[s]) for s in (Split.GAN_TRAIN, Split.CLS_TRAIN, Split.TEST)] == [5, 9, 4]


def test_too_few_slides(tmp_path):
    with pytest.raises(ValueError):
        generate_corpus(PhantomConfig(), 2, 1, tmp_path)


def test_positive_count_near_binomial_expectation():
    # 6100 focal draws at rate 1/61 -> ~100 positives. Small single-nucleus
    # patches keep this cheap; the label draw does not depend on patch size.
    cfg = PhantomConfig(seed=0, patch_size=32, nuclei_per_patch=(1, 1))
    n_pos = 0
    for i in range(6100):
        n_pos += _focal_is_mitosis(cfg, i)
    assert 80 <= n_pos <= 120


def _focal_is_mitosis(cfg, index):
    return render_pair(cfg, index).ground_truth[0][1].is_positive


def test_every_record_pair_resolves_and_validates(small_corpus):
    assert len(small_corpus) == 2 * 36
    for rec in small_corpus:
        other = small_corpus.lookup(rec.paired_ref)
        assert other.stain is rec.stain.opposite and other.center == rec.center
        res = validate_record(rec, small_corpus)
        assert res.ok, res.violations


def test_corpus_is_deterministic(tmp_path):
    cfg = PhantomConfig(seed=9)
    generate_corpus(cfg, 3, 2, tmp_path / "a")
    generate_corpus(cfg, 3, 2, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
