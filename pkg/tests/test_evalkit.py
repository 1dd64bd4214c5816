import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import counts_by_loop, f1_by_hand

from virtualstain.evalkit import (
    PINNED_THRESHOLD,
    TABLE_COLUMNS,
    ConfusionCounts,
    EvalReport,
    confusion,
    default_thresholds,
    f1,
    read_predictions,
    render_report,
    sweep,
    write_predictions,
)


def fixture_5_5_10():
    return [(0.9, True)] * 5 + [(0.8, False)] * 5 + [(0.1, True)] * 10 + [(0.2, False)] * 7


def test_fixture_counts_and_scores():
    c = confusion(fixture_5_5_10(), 0.5)
    assert (c.tp, c.fp, c.fn, c.tn) == (5, 5, 10, 7)
    m = f1(c)
    assert (m.precision, m.recall, m.f1) == (0.5, 1 / 3, 0.4)
    assert (m.precision, m.recall, m.f1) == pytest.approx(f1_by_hand(5, 5, 10), abs=0)


def test_perfect_predictions():
    c = confusion([(0.9, True), (0.2, False), (0.7, True)], 0.5)
    assert c.fp == c.fn == 0
    assert f1(c).f1 == 1.0


def test_threshold_one_calls_nothing():
    c = confusion([(1.0, True), (0.99, False)], 1.0)
    assert c.tp + c.fp == 0


def test_strict_inequality_at_threshold():
    assert confusion([(0.5, True)], 0.5).tp == 0
    assert confusion([(0.5000001, True)], 0.5).tp == 1


def test_degenerate_convention():
    m = f1(ConfusionCounts(0, 0, 0, 3))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0) and m.degenerate


def test_empty_and_bad_input():
    with pytest.raises(ValueError):
        confusion([], 0.5)
    with pytest.raises(ValueError):
        confusion([(1.2, True)], 0.5)
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_symmetric_and_bounded(tp, fp, fn):
    a = f1(ConfusionCounts(tp, fp, fn, 0))
    b = f1(ConfusionCounts(tp, fn, fp, 0))
    assert a.f1 == b.f1 and 0 <= a.f1 <= 1
    assert (a.precision, a.recall) == (b.recall, b.precision)
    if tp:
        assert a.f1 == pytest.approx(2 * a.precision * a.recall / (a.precision + a.recall), rel=1e-12)


def test_default_grid():
    g = default_thresholds()
    assert g[0] == 0.5 and g[-1] == 0.99 and len(g) == 50
    assert PINNED_THRESHOLD in g and g == sorted(set(g))


def _write_epochs(tmp_path, rng, epochs=(10, 20, 30), n=200):
    labels = rng.random(n) < 0.1
    files = {}
    for e in epochs:
        probs = np.clip(0.5 * labels + rng.random(n) * 0.6, 0, 1)
        files[e] = write_predictions(tmp_path / f"e{e}.tsv", [f"s{i}" for i in range(n)], probs, labels)
    return files


def test_prediction_file_round_trip(tmp_path, rng):
    probs = rng.random(30)
    labels = rng.random(30) < 0.3
    ids, p, y = read_predictions(write_predictions(tmp_path / "p.tsv", [f"x{i}" for i in range(30)], probs, labels))
    assert np.array_equal(p, probs) and np.array_equal(y.astype(bool), labels)
    assert (tmp_path / "p.tsv").read_text().splitlines()[0] == "sample_id\tprobability\tlabel"


def test_sweep_matches_independent_recomputation(tmp_path, rng):
    files = _write_epochs(tmp_path, rng)
    rep = sweep(files)
    assert len(rep.cells) == 3 * len(default_thresholds())
    for e, path in files.items():
        _, probs, labels = read_predictions(path)
        for t in rep.thresholds:
            tp, fp, fn = counts_by_loop(probs, labels, t)
            p, r, f = f1_by_hand(tp, fp, fn)
            m = rep.cells[(e, t)]
            assert (m.precision, m.recall) == (p, r)
            assert m.f1 == pytest.approx(f, rel=1e-15, abs=0)
            assert m.f1 == (2 * tp / (2 * tp + fp + fn) if tp else 0.0)


def test_sweep_exposes_pinned_cell(tmp_path, rng):
    rep = sweep(_write_epochs(tmp_path, rng, epochs=(5,)))
    assert (5, 0.97) in rep.cells


def test_extreme_thresholds_monotone(tmp_path, rng):
    rep = sweep(_write_epochs(tmp_path, rng, epochs=(1,)), [0.0, 0.97, 1.0])
    assert rep.cells[(1, 0.0)].recall >= rep.cells[(1, 1.0)].recall
    assert rep.cells[(1, 1.0)].recall == 0.0


def test_grid_validation(tmp_path, rng):
    files = _write_epochs(tmp_path, rng, epochs=(1,))
    with pytest.raises(ValueError):
        sweep(files, [0.5, 0.9])
    with pytest.raises(ValueError):
        sweep(files, [0.97, 0.5])
    with pytest.raises(ValueError):
        sweep(files, [])


def test_missing_epoch_listed_absent(tmp_path, rng):
    files = _write_epochs(tmp_path, rng)
    files[40] = tmp_path / "missing.tsv"
    rep = sweep(files)
    assert rep.absent == [40]
    assert len(rep.cells) == (len(rep.epochs) - len(rep.absent)) * len(rep.thresholds)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=60))
def test_recall_and_calls_non_increasing(preds):
    prev_r, prev_c = 2.0, 10**9
    for t in default_thresholds():
        c = confusion(preds, t)
        r = f1(c).recall
        assert r <= prev_r and c.tp + c.fp <= prev_c
        prev_r, prev_c = r, c.tp + c.fp


def test_argmax_consistent(tmp_path, rng):
    rep = sweep(_write_epochs(tmp_path, rng))
    e, t = rep.argmax
    assert rep.cells[(e, t)].f1 == max(m.f1 for m in rep.cells.values())


def test_report_json_round_trip(tmp_path, rng):
    rep = sweep(_write_epochs(tmp_path, rng), scenario="baseline")
    back = EvalReport.read(rep.write(tmp_path / "r.json"))
    assert back.cells == rep.cells and back.argmax == rep.argmax and back.absent == rep.absent


def test_render_four_scenarios(tmp_path, rng):
    reports = []
    for k, name in enumerate(["baseline", "synthetic_paired", "synthetic_unpaired", "gan_features"]):
        reports.append(sweep(_write_epochs(tmp_path / name, np.random.default_rng(k)), scenario=name))
    files = render_report(reports, tmp_path / "out")
    curves = sorted((tmp_path / "out").glob("curves_*.tsv"))
    assert len(curves) == 4 and (tmp_path / "out" / "comparison.tsv").exists()
    assert len(list((tmp_path / "out").glob("f1_*.png"))) == 4
    rows = (tmp_path / "out" / "comparison.tsv").read_text().splitlines()
    assert rows[0].split("\t") == list(TABLE_COLUMNS)
    for rep, row in zip(reports, rows[1:]):
        cols = row.split("\t")
        e, t = rep.argmax
        assert cols[0] == rep.scenario and int(cols[2]) == e and float(cols[3]) == t
        assert float(cols[6]) == pytest.approx(rep.best.f1, abs=1e-6)
    before = files["table"].read_bytes()
    render_report(reports, tmp_path / "out")
    assert files["table"].read_bytes() == before


def test_render_marks_absent_scenario(tmp_path, rng):
    present = sweep(_write_epochs(tmp_path, rng), scenario="baseline")
    gone = sweep({10: tmp_path / "nope.tsv"}, scenario="gan_features")
    render_report([present, gone], tmp_path / "out", plots=False)
    rows = (tmp_path / "out" / "comparison.tsv").read_text().splitlines()
    assert rows[2].split("\t")[:2] == ["gan_features", "absent"]
    assert not (tmp_path / "out" / "curves_gan_features.tsv").exists()


def test_render_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        render_report([], tmp_path)
