"""End-to-end pipelines: generate, train, extract, and run the comparative experiments."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import cvfr as cvfr_mod
from . import synth, vcc
from .core import VIEWPOINTS, DataError, child_seed, cosine_sim, make_rng
from .inference import FeatureRecord, Gallery, QuerySet, run_mode
from .metrics import EvalReport, MetricConfig, evaluate

DEFAULT_PER_IDENTITY = 4

TABLE5_ROWS = (
    ("a", "single"),
    ("b", "average"),
    ("c", "cvfr+average"),
    ("d", "multi(2 views)"),
    ("e", "cvfr+multi"),
)


def extract(model: vcc.VccModel, records: Sequence[synth.RawRecord]) -> list[FeatureRecord]:
    """Embed raw records into feature records (batched)."""
    if not records:
        return []
    app, view = vcc.embed(model, np.stack([r.x for r in records]))
    return [
        FeatureRecord(r.record_id, r.vehicle_id, r.camera_id, r.viewpoint, a, v)
        for r, a, v in zip(records, app, view)
    ]


def build_query_sets(raw_sets: Sequence[synth.RawQuerySet], model: vcc.VccModel) -> list[QuerySet]:
    out = []
    for qs in raw_sets:
        feats = extract(model, qs.records)
        out.append(QuerySet(tuple(feats), (), qs.vehicle_id, qs.query_id, allow_repeats=len(feats) > 3))
    return out


@dataclass
class Prepared:
    seed: int
    dataset: synth.SynthDataset
    vcc_model: vcc.VccModel
    vcc_trace: list
    cvfr_model: cvfr_mod.CvfrModel | None
    cvfr_trace: list
    train_features: list[FeatureRecord]
    query_sets: list[QuerySet]
    gallery: list[FeatureRecord]
    timings: dict = field(default_factory=dict)


def train_recovery(
    train_features: Sequence[FeatureRecord], config: cvfr_mod.CvfrTrainConfig, per_identity: int = DEFAULT_PER_IDENTITY
) -> tuple[cvfr_mod.CvfrModel, list]:
    """Train the recovery model on training-split features and attach viewpoint centroids."""
    aligned = cvfr_mod.aligned_triplets(
        [f.vehicle_id for f in train_features],
        [f.viewpoint for f in train_features],
        np.stack([f.appearance for f in train_features]),
        per_identity,
        child_seed(config.seed, "aligned"),
    )
    model, trace = cvfr_mod.train_cvfr(aligned, config)
    centroids = cvfr_mod.viewpoint_centroids(
        np.stack([f.viewpoint_feature for f in train_features]), [f.viewpoint for f in train_features]
    )
    return model.with_centroids(centroids), trace


def prepare(
    seed: int,
    synth_config: synth.SynthConfig | None = None,
    vcc_config: vcc.VccTrainConfig | None = None,
    cvfr_config: cvfr_mod.CvfrTrainConfig | None = None,
    with_cvfr: bool = True,
) -> Prepared:
    """Generate a dataset for ``seed``, train both models and extract every feature."""
    synth_config = synth_config or synth.SynthConfig(seed=seed)
    vcc_config = vcc_config or vcc.VccTrainConfig(seed=seed)
    timings = {}
    t0 = time.perf_counter()
    data = synth.generate(synth_config)
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model, trace = vcc.train_vcc(data.train, vcc_config)
    timings["train_vcc"] = time.perf_counter() - t0
    train_feats = extract(model, data.train)
    gallery = extract(model, data.gallery)
    query_sets = build_query_sets(data.query_sets, model)

    rec_model, rec_trace = None, []
    if with_cvfr:
        cvfr_config = cvfr_config or cvfr_mod.CvfrTrainConfig(seed=seed)
        t0 = time.perf_counter()
        rec_model, rec_trace = train_recovery(train_feats, cvfr_config)
        timings["train_cvfr"] = time.perf_counter() - t0
    return Prepared(seed, data, model, trace, rec_model, rec_trace, train_feats, query_sets, gallery, timings)


def single_choices(query_sets: Sequence[QuerySet], seed: int) -> list[int]:
    """One seeded-random record index per query set for the single-query baseline."""
    rng = make_rng(child_seed(seed, "single"))
    return [int(rng.integers(len(qs.records))) for qs in query_sets]


def run_eval(
    mode: str,
    query_sets: Sequence[QuerySet],
    gallery,
    metric_config: MetricConfig | None = None,
    cvfr=None,
    junk_filter: bool = True,
    seed: int = 0,
    run_config: dict | None = None,
    fusion: str = "weighted_sum",
) -> EvalReport:
    g = gallery if isinstance(gallery, Gallery) else Gallery.from_records(gallery)
    choice = single_choices(query_sets, seed) if mode == "single" else None
    result = run_mode(mode, query_sets, g, cvfr, junk_filter, fusion, choice)
    doc = {"mode": mode, "junk_filter": junk_filter, "fusion": fusion}
    if run_config:
        doc.update(run_config)
    return evaluate(result.judged, metric_config, result.query_ids, seed, doc)


def summary_row(setting: str, report: EvalReport, **extra) -> dict:
    return {"setting": setting, **extra, **report.aggregates}


def fig8(prep: Prepared, add_ks=(0, 5, 10), metric_config: MetricConfig | None = None):
    """Multi-query metrics on galleries with same-scene duplicates swapped in."""
    rows, reports = [], []
    for k in add_ks:
        raw = synth.modify_gallery(prep.dataset.gallery, k, prep.seed)
        gallery = extract(prep.vcc_model, raw)
        report = run_eval("multi", prep.query_sets, gallery, metric_config, seed=prep.seed,
                          run_config={"experiment": "fig8", "add_k": k})
        reports.append(report)
        rows.append(summary_row(f"add_k={k}", report, add_k=k))
    return rows, reports


def drop_views(query_sets: Sequence[QuerySet], seed: int) -> tuple[list[QuerySet], list[str]]:
    """Remove one seeded-random viewpoint from every query set."""
    rng = make_rng(child_seed(seed, "drop_view"))
    dropped, views = [], []
    for qs in query_sets:
        present = [r.viewpoint for r in qs.records]
        if sorted(present) != sorted(VIEWPOINTS):
            raise DataError(f"query set {qs.query_id} does not hold exactly one record per viewpoint")
        view = present[int(rng.integers(len(present)))]
        dropped.append(qs.drop(view))
        views.append(view)
    return dropped, views


def recovery_cosines(model: cvfr_mod.CvfrModel, full: Sequence[QuerySet], dropped: Sequence[QuerySet],
                     views: Sequence[str]) -> np.ndarray:
    out = []
    for qs_full, qs, view in zip(full, dropped, views):
        truth = next(r.appearance for r in qs_full.records if r.viewpoint == view)
        out.append(cosine_sim(cvfr_mod.recover(model, qs.available(), view), truth))
    return np.array(out)


def table5(prep: Prepared, metric_config: MetricConfig | None = None):
    """Missing-viewpoint ablation: rows (a)-(e) plus the mean recovery cosine."""
    if prep.cvfr_model is None:
        raise DataError("table5 needs a trained recovery model")
    dropped, views = drop_views(prep.query_sets, prep.seed)
    two_views = [qs.without_missing() for qs in dropped]
    gallery = Gallery.from_records(prep.gallery)
    settings = {
        "a": ("single", two_views, None),
        "b": ("average", two_views, None),
        "c": ("average", dropped, prep.cvfr_model),
        "d": ("multi", two_views, None),
        "e": ("multi", dropped, prep.cvfr_model),
    }
    cosines = recovery_cosines(prep.cvfr_model, prep.query_sets, dropped, views)
    rows, reports = [], []
    for label, name in TABLE5_ROWS:
        mode, sets, model = settings[label]
        report = run_eval(mode, sets, gallery, metric_config, cvfr=model, seed=prep.seed,
                          run_config={"experiment": "table5", "row": label})
        reports.append(report)
        rows.append(summary_row(f"({label}) {name}", report))
    return rows, reports, float(cosines.mean())


def fig10(prep: Prepared, counts=(1, 2, 3), metric_config: MetricConfig | None = None):
    """Multi-query metrics as the query set grows; counts above 3 reuse viewpoints."""
    rng = make_rng(child_seed(prep.seed, "fig10"))
    orders = [np.concatenate([rng.permutation(3), np.arange(3, len(qs.records))]) for qs in prep.query_sets]
    gallery = Gallery.from_records(prep.gallery)
    rows, reports = [], []
    for n in counts:
        sets = []
        for qs, order in zip(prep.query_sets, orders):
            if n > len(qs.records):
                raise DataError(f"query set {qs.query_id} has only {len(qs.records)} records, {n} requested")
            recs = tuple(qs.records[i] for i in order[:n])
            sets.append(QuerySet(recs, (), qs.vehicle_id, qs.query_id, allow_repeats=n > 3))
        label = str(n) if n <= 3 else f"3+repeat({n - 3})"
        report = run_eval("multi", sets, gallery, metric_config, seed=prep.seed,
                          run_config={"experiment": "fig10", "queries": n})
        reports.append(report)
        rows.append(summary_row(label, report, queries=n))
    return rows, reports
