import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtualstain.domain import (
    MANIFEST_FIELDS,
    ClassRatioConfig,
    DatasetManifest,
    EpochRecord,
    FeatureMap,
    Label,
    Patch,
    SampleRecord,
    Split,
    StainDomain,
    TrainingTrace,
    count_pair_reads,
    save_image,
    validate_record,
    validate_sample,
)


def _record(ref="a.png", split="test", source="s0", paired=None, stain="HE", label="mitosis"):
    return SampleRecord(ref, label, stain, split, source, (50, 50), paired)


def _patch(shape=(100, 100, 3), stain="HE", source="s0", center=(50, 50)):
    return Patch(np.full(shape, 0.5), stain, source, center)


def test_consistent_sample_is_ok():
    rec = _record(paired="b.png")
    res = validate_sample(rec, _patch(), paired=_patch(stain="PHH3"))
    assert res.ok, res.violations


def test_short_patch_reports_shape():
    res = validate_sample(_record(), _patch(shape=(99, 100, 3)))
    assert not res.ok
    assert any(v.startswith("shape") for v in res.violations)


def test_split_leakage_flagged():
    a = _record("a.png", split="test", source="slideX")
    b = _record("b.png", split="cls_train", source="slideX")
    manifest = DatasetManifest([a, b])
    res = validate_sample(a, _patch(source="slideX"), manifest=manifest)
    assert any(v.startswith("leakage") for v in res.violations)


def test_pair_with_same_stain_flagged():
    res = validate_sample(_record(paired="b.png"), _patch(), paired=_patch(stain="HE"))
    assert any(v.startswith("pair") for v in res.violations)


def test_stain_mismatch_flagged():
    res = validate_sample(_record(stain="PHH3"), _patch(stain="HE"))
    assert any(v.startswith("stain") for v in res.violations)


def test_missing_file_is_unreadable_not_crash(tmp_path):
    manifest = DatasetManifest([_record("nope.png")], tmp_path)
    res = validate_record(manifest.records[0], manifest)
    assert res.unreadable and not res.ok


def test_validate_record_from_disk(tmp_path):
    save_image(tmp_path / "a.png", np.full((100, 100, 3), 0.4))
    save_image(tmp_path / "b.png", np.full((100, 100, 3), 0.6))
    a = _record("a.png", paired="b.png")
    b = _record("b.png", paired="a.png", stain="PHH3")
    manifest = DatasetManifest([a, b], tmp_path)
    assert validate_record(a, manifest).ok
    assert validate_record(b, manifest).ok


def test_patch_rejects_bad_values():
    with pytest.raises(ValueError):
        Patch(np.full((4, 4, 3), 1.5), "HE")
    with pytest.raises(ValueError):
        Patch(np.full((4, 4, 3), np.nan), "HE")
    with pytest.raises(ValueError):
        Patch(np.zeros((4, 4)), "HE")


def test_patch_is_immutable():
    p = _patch()
    with pytest.raises(ValueError):
        p.pixels[0, 0, 0] = 0.1


def test_feature_map_shape_enforced():
    FeatureMap(np.zeros((25, 25, 256)), "x")
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((25, 25, 128)), "x")
    with pytest.raises(ValueError):
        FeatureMap(np.full((25, 25, 256), np.inf), "x")


def test_stain_opposite():
    assert StainDomain.HE.opposite is StainDomain.PHH3
    assert StainDomain.PHH3.opposite is StainDomain.HE


def test_ratio_config_requires_balanced_exposure():
    ClassRatioConfig(60, 5, 5)
    with pytest.raises(ValueError):
        ClassRatioConfig(60, 5, 3)


def test_manifest_schema_field_names(tmp_path):
    path = DatasetManifest([_record(paired="b.png")]).write(tmp_path / "m.jsonl")
    row = json.loads(path.read_text().splitlines()[0])
    assert tuple(row) == MANIFEST_FIELDS
    assert MANIFEST_FIELDS == (
        "patch_ref", "label", "stain", "paired_ref", "split", "source_id", "center_row", "center_col",
    )


def test_manifest_missing_field_is_error(tmp_path):
    path = tmp_path / "m.jsonl"
    row = _record().to_dict()
    del row["split"]
    path.write_text(json.dumps(row) + "\n")
    with pytest.raises(ValueError, match="split"):
        DatasetManifest.read(path)


records = st.builds(
    SampleRecord,
    patch_ref=st.text(min_size=1, max_size=20),
    label=st.sampled_from(list(Label)),
    stain=st.sampled_from(list(StainDomain)),
    split=st.sampled_from(list(Split)),
    source_id=st.text(max_size=10),
    center=st.tuples(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6)),
    paired_ref=st.none() | st.text(min_size=1, max_size=20),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(records, max_size=8))
def test_manifest_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("m") / "manifest.jsonl"
    back = DatasetManifest.read(DatasetManifest(recs).write(path))
    assert back.records == recs


def test_phantom_manifest_split_is_function_of_source(small_corpus):
    for source, splits in small_corpus.split_of_sources().items():
        assert len(splits) == 1, source


def test_pair_reads_are_counted():
    rec = _record(paired="b.png")
    with count_pair_reads() as c:
        _ = rec.paired_ref
        _ = rec.paired_ref
        _ = rec.label
    assert c.n == 2


def test_trace_round_trip(tmp_path):
    tr = TrainingTrace(initial_loss=0.7)
    tr.add(EpochRecord(1, {"loss": 0.5}, 0.1))
    tr.add(EpochRecord(2, {"loss": 0.4}, 0.1))
    tr.checkpoints[2] = "x.npz"
    back = TrainingTrace.read(tr.write(tmp_path / "t.jsonl"))
    assert back.losses("loss") == [0.5, 0.4]
    assert back.initial_loss == 0.7 and back.checkpoints == {2: "x.npz"}
    with pytest.raises(ValueError):
        tr.add(EpochRecord(5, {"loss": 0.1}, 0.1))
