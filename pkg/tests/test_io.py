import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import jitter
from mqreid import cvfr, io, synth, vcc
from mqreid.core import VIEWPOINTS, DataError, ModelError, make_rng
from mqreid.inference import FeatureRecord


def features(seed, n=5, d_a=6, d_v=3):
    rng = make_rng(seed)
    out = []
    for i in range(n):
        a, v = rng.normal(size=d_a), rng.normal(size=d_v)
        out.append(FeatureRecord(f"r{i}", f"v{i % 2}", f"c{i}", VIEWPOINTS[i % 3], a / np.linalg.norm(a), v / np.linalg.norm(v)))
    return out


@given(st.integers(0, 2**32))
def test_feature_jsonl_is_byte_stable(seed):
    recs = features(seed)
    text = io.dumps_features(recs)
    back, groups = io.loads_features(text)
    assert groups == [None] * 5
    assert io.dumps_features(back) == text
    for a, b in zip(recs, back):
        assert a.record_id == b.record_id and np.allclose(a.appearance, b.appearance, atol=1e-6)


def test_feature_line_key_order():
    line = io.feature_line(features(0)[0], "q7")
    assert list(json.loads(line)) == [
        "record_id", "vehicle_id", "camera_id", "viewpoint", "query_set", "appearance", "viewpoint_feature",
    ]


def test_binary_cache_round_trip(tmp_path):
    recs = features(1, n=7)
    groups = ["a", "a", None, "b", None, "b", "c"]
    blob = io.pack_features(recs, groups)
    assert blob.startswith(io.MAGIC)
    back, back_groups = io.unpack_features(blob)
    assert back_groups == groups
    assert io.dumps_features(back) == io.dumps_features(recs)
    path = tmp_path / "f.murf"
    path.write_bytes(blob)
    assert io.dumps_features(io.read_features(path)[0]) == io.dumps_features(recs)
    with pytest.raises(DataError):
        io.unpack_features(blob[:-3])
    with pytest.raises(DataError):
        io.unpack_features(blob + b"x")


def test_feature_validation():
    good = io.feature_line(features(0)[0])
    doc = json.loads(good)
    doc["appearance"] = [2.0] + doc["appearance"][1:]
    with pytest.raises(DataError, match="norm"):
        io.loads_features(json.dumps(doc))
    doc = json.loads(good)
    del doc["camera_id"]
    with pytest.raises(DataError, match="camera_id"):
        io.loads_features(json.dumps(doc))
    with pytest.raises(DataError):
        io.loads_features("{not json")
    mixed = io.dumps_features(features(0, n=1)) + io.dumps_features(features(0, n=1, d_a=4))
    with pytest.raises(DataError, match="dims"):
        io.loads_features(mixed)
    with pytest.raises(DataError):
        io.read_features("/nonexistent/file.jsonl")


def test_query_set_grouping():
    recs = features(2, n=5)
    groups = ["q1", "q1", "q2", "q2", "q2"]
    for r in recs[:2]:
        object.__setattr__(r, "vehicle_id", "v0")
    for r in recs[2:]:
        object.__setattr__(r, "vehicle_id", "v1")
    sets = io.group_query_sets(recs, groups)
    assert [qs.query_id for qs in sets] == ["q1", "q2"]
    assert sets[0].missing == ("rear",) and sets[1].missing == ()
    back, back_groups = io.loads_features(io.query_lines(sets))
    assert back_groups == groups
    with pytest.raises(DataError):
        io.group_query_sets(recs, [None] * 5)


def test_raw_round_trip():
    data = synth.generate(synth.SynthConfig(num_identities=2, num_train_identities=2, num_cameras=10,
                                            cameras_per_identity=(3, 5), input_dim=4))
    text = io.dumps_raw(data.gallery)
    back, _ = io.loads_raw(text)
    assert all(np.array_equal(a.x, b.x) and a.illumination == b.illumination for a, b in zip(data.gallery, back))
    assert io.dumps_raw(back) == text
    bad = json.loads(text.splitlines()[0])
    bad["viewpoint"] = "top"
    with pytest.raises(DataError):
        io.loads_raw(json.dumps(bad))


def test_model_documents_round_trip(tmp_path):
    rng = make_rng(0)
    model = jitter(vcc.init_vcc(5, 3, rng, 8, 4, (8, 6), identities=("a", "b", "c")), rng)
    path = tmp_path / "vcc.json"
    path.write_text(io.dumps_json(io.vcc_to_dict(model)))
    back = io.load_model(path, "vcc")
    assert all(np.array_equal(a, b) for a, b in zip(model.parameters(), back.parameters()))
    assert back.identities == ("a", "b", "c")

    rec = cvfr.init_cvfr(4, 3, rng, width=5)
    rec = rec.with_centroids({v: np.eye(3)[i] for i, v in enumerate(VIEWPOINTS)})
    path = tmp_path / "cvfr.json"
    path.write_text(io.dumps_json(io.cvfr_to_dict(rec)))
    back = io.load_model(path, "cvfr")
    assert all(np.array_equal(a, b) for a, b in zip(rec.parameters(), back.parameters()))
    assert np.array_equal(back.viewpoint_centroids["rear"], [0, 0, 1])

    with pytest.raises(ModelError):
        io.load_model(path, "vcc")
    with pytest.raises(ModelError):
        io.load_model(tmp_path / "missing.json", "vcc")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ModelError):
        io.load_model(tmp_path / "bad.json", "cvfr")
