import pytest

from mqreid import cvfr, experiments, synth, vcc
from mqreid.core import DataError

SYNTH = synth.SynthConfig(num_identities=5, num_train_identities=10, num_cameras=40, cameras_per_identity=(12, 14),
                          input_dim=8, viewpoint_offset=2.0, extra_queries=1, seed=4)
VCC = vcc.VccTrainConfig(epochs=3, viewpoint_hidden=12, viewpoint_dim=6, appearance_hidden=(16, 8),
                         identities_per_batch=4, instances_per_identity=4, seed=4)
CVFR = cvfr.CvfrTrainConfig(epochs=2, latent_dim=4, batch_size=16, seed=4)


@pytest.fixture(scope="module")
def prep():
    return experiments.prepare(4, SYNTH, VCC, CVFR)


def test_prepare(prep):
    assert len(prep.query_sets) == 5 and all(len(qs.records) == 4 for qs in prep.query_sets)
    assert prep.cvfr_model.viewpoint_centroids is not None
    assert set(prep.timings) == {"generate", "train_vcc", "train_cvfr"}


def test_drop_views(prep):
    full = [qs.first(3) for qs in prep.query_sets]
    dropped, views = experiments.drop_views(full, 4)
    assert all(len(qs.records) == 2 and qs.missing == (v,) for qs, v in zip(dropped, views))
    assert experiments.drop_views(full, 4)[1] == views
    with pytest.raises(DataError):
        experiments.drop_views(prep.query_sets, 4)  # four records per set


def test_table5_rows(prep):
    prep3 = experiments.Prepared(**{**prep.__dict__, "query_sets": [qs.first(3) for qs in prep.query_sets]})
    rows, reports, cosine = experiments.table5(prep3)
    assert [r["setting"][:3] for r in rows] == ["(a)", "(b)", "(c)", "(d)", "(e)"]
    assert [rep.config["row"] for rep in reports] == ["a", "b", "c", "d", "e"]
    assert -1 <= cosine <= 1


def test_fig10_labels_repeats(prep):
    rows, _ = experiments.fig10(prep, counts=(1, 2, 3, 4))
    assert [r["setting"] for r in rows] == ["1", "2", "3", "3+repeat(1)"]
    with pytest.raises(DataError):
        experiments.fig10(prep, counts=(5,))


def test_fig8_rows(prep):
    rows, reports = experiments.fig8(prep, (0, 2))
    assert [r["add_k"] for r in rows] == [0, 2]
    assert reports[0].config["experiment"] == "fig8"


def test_single_choices_are_seeded(prep):
    a = experiments.single_choices(prep.query_sets, 1)
    assert a == experiments.single_choices(prep.query_sets, 1)
    assert all(0 <= i < 4 for i in a)
