"""Acceptance criteria, one test per criterion.

Every test appends a PASS/FAIL line to ``RESULTS`` before asserting; the
lines are printed at the end of the session by the hook in conftest.py.
Run just this file with ``pytest tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

import oracles
import sys

from helpers import smooth_jitter
from mqreid import cvfr, experiments, io, losses, synth, vcc
from mqreid.core import VIEWPOINTS, make_rng
from mqreid.inference import FeatureRecord, Gallery, QuerySet, multi_scores, run_mode, score_average, score_multi
from mqreid.inference import viewpoint_weights
from mqreid.metrics import JudgedList, average_precision, cgm, cmc_at_k, csp, inp
from mqreid.mlp import ParamBundle, grad_check, init_mlp, mlp_backward, mlp_forward

SEEDS = (0, 1, 2, 3, 4)
RESULTS: list[str] = []


def record(number: int, passed: bool, detail: str):
    RESULTS.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def runs():
    """Default-config pipeline for every seed, with all experiment outputs."""
    out = {}
    for seed in SEEDS:
        prep = experiments.prepare(seed)
        modes = {m: experiments.run_eval(m, prep.query_sets, prep.gallery, seed=seed).aggregates
                 for m in ("single", "average", "multi")}
        t0 = time.perf_counter()
        fig8_rows, _ = experiments.fig8(prep)
        fig8_time = time.perf_counter() - t0
        t5_rows, _, cosine = experiments.table5(prep)
        fig10_rows, _ = experiments.fig10(prep)
        held_out = list(prep.dataset.gallery) + [r for qs in prep.dataset.query_sets for r in qs.records]
        out[seed] = {
            "prep": prep,
            "modes": modes,
            "fig8": fig8_rows,
            "fig8_time": fig8_time,
            "table5": t5_rows,
            "cosine": cosine,
            "fig10": fig10_rows,
            "view_acc": vcc.viewpoint_accuracy(prep.vcc_model, held_out),
        }
    return out


# 1 ---------------------------------------------------------------------------------

def _bundle_check(fn, arrays, seed):
    return grad_check(fn, ParamBundle(arrays), probe_count=20, epsilon=1e-5, seed=seed)


def _gradient_errors(seed: int) -> tuple[dict[str, float], int]:
    """Relative errors per loss, plus how many jitter draws were rejected.

    Model checks redraw the jitter until no ReLU pre-activation is within
    1e-4 of zero (ten probe steps), since a central difference across a kink is meaningless.
    """
    rng = make_rng(seed)
    n = int(rng.integers(4, 9))
    d = int(rng.integers(3, 7))
    k = int(rng.integers(2, 6))
    margin = float(rng.uniform(0.3, 2.0))
    errs = {}

    logits = rng.normal(size=(n, 3))
    views = rng.integers(0, 3, size=n)

    def view(b):
        value, g = losses.loss_view(b.arrays[0], views, grad=True)
        return value, [g]

    errs["viewpoint cross-entropy"] = _bundle_check(view, [logits], seed)

    n_ids = 3
    id_logits = rng.normal(size=(n, n_ids))
    ids = rng.integers(0, n_ids, size=n)
    trip = [rng.normal(size=(n, d)) for _ in range(3)]

    def appearance(b):
        value, grads = losses.loss_appearance(b.arrays[0], ids, tuple(b.arrays[1:]), margin, grad=True)
        return value, list(grads)

    errs["appearance ce + triplet"] = _bundle_check(appearance, [id_logits, *trip], seed)

    x = rng.normal(size=(6, d))
    pk_ids = np.array([0, 0, 1, 1, 2, 2])
    pk_views = rng.integers(0, 3, size=6)

    def combined(m):
        total, _, grads = vcc.vcc_batch_loss(m, x, pk_ids, pk_views, margin)
        return total, grads

    model, rejected = smooth_jitter(vcc.init_vcc(d, n_ids, rng, 6, 4, (7, 5)), combined, rng, [vcc])
    redraws = rejected
    errs["combined embedding loss"] = grad_check(combined, model, probe_count=30, epsilon=1e-5, seed=seed)

    target, recon = rng.normal(size=(n, d)), rng.normal(size=(n, d))

    def rec(b):
        value, g = losses.loss_recon(target, b.arrays[0], grad=True)
        return value, [g]

    errs["reconstruction"] = _bundle_check(rec, [recon], seed)

    z1, z2 = rng.normal(size=(n, k)), rng.normal(size=(n, k))

    def contrastive(b):
        value, grads = losses.loss_contrastive(*b.arrays, alpha=9.0, grad=True)
        return value, list(grads)

    errs["contrastive"] = _bundle_check(contrastive, [z1, z2], seed)

    def prediction(b):
        value, g = losses.loss_prediction(b.arrays[0], z2, grad=True)
        return value, [g]

    errs["dual prediction"] = _bundle_check(prediction, [z1], seed)

    batch = {v: rng.normal(size=(n, d)) for v in VIEWPOINTS}

    def recovery(m):
        total, _, grads = cvfr.cvfr_loss(m, batch, 9.0)
        return total, grads

    rec_model, rejected = smooth_jitter(cvfr.init_cvfr(d, k, rng, width=5), recovery, rng, [cvfr])
    redraws += rejected
    errs["recovery total (recon, contrastive, prediction, decoded prediction)"] = grad_check(
        recovery, rec_model, probe_count=30, epsilon=1e-5, seed=seed
    )

    xin, cond, goal = rng.normal(size=(n, d)), rng.normal(size=(n, 4)), rng.normal(size=(n, 3))

    def conditioned(m):
        cache = mlp_forward(m, xin, cond)
        diff = cache.output - goal
        return float(np.sum(diff**2)), mlp_backward(m, cache, 2 * diff).as_list()

    net, rejected = smooth_jitter(init_mlp([d, 6, 5, 3], rng, condition_dim=4), conditioned, rng,
                                  [sys.modules[__name__]])
    redraws += rejected
    errs["conditioned mlp"] = grad_check(conditioned, net, probe_count=30, epsilon=1e-5, seed=seed)
    return errs, redraws


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    redraws = 0
    for seed in range(100):
        errs, rejected = _gradient_errors(seed)
        redraws += rejected
        for name, err in errs.items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    passed = top < 1e-4 and elapsed < 60
    record(1, passed, f"max relative error {top:.2e} over 100 configs x {len(worst)} checks, {elapsed:.1f}s "
                      f"({redraws} jitter draws rejected for a ReLU within 1e-4 of its kink)")
    assert top < 1e-4, worst
    assert elapsed < 60


# 2 ---------------------------------------------------------------------------------

def test_criterion_02_metric_oracles():
    rng = make_rng(2024)
    worst = 0.0
    cmc_mismatch = 0
    for _ in range(1000):
        n = int(rng.integers(1, 31))
        flags = rng.random(n) < rng.uniform(0.05, 0.8)
        cams = [f"c{c}" for c in rng.integers(0, int(rng.integers(1, 6)), size=n)]
        views = rng.normal(size=(n, 4))
        views /= np.linalg.norm(views, axis=1, keepdims=True)
        eps = float(rng.uniform(0.1, 1.5))
        judged = JudgedList.from_flags(flags, cams, views)
        f, v = flags.tolist(), views.tolist()
        for k in (1, 5, 10):
            cmc_mismatch += cmc_at_k(judged, k) != oracles.cmc(f, k)
        worst = max(
            worst,
            abs(average_precision(judged) - oracles.ap(f)),
            abs(inp(judged) - oracles.inp(f)),
            abs(cgm(judged) - oracles.cgm(f, cams)),
            abs(csp(judged, eps) - oracles.csp(f, cams, v, eps)),
        )
    passed = worst <= 1e-12 and cmc_mismatch == 0
    record(2, passed, f"1000 lists: max |impl - oracle| {worst:.1e}, CMC mismatches {cmc_mismatch}")
    assert cmc_mismatch == 0
    assert worst <= 1e-12


# 3 ---------------------------------------------------------------------------------

def test_criterion_03_csp_fixture():
    v = np.array([1.0, 0.0])
    v_near = np.array([np.cos(0.1), np.sin(0.1)])
    u = np.array([0.0, 1.0])
    neg = np.array([-1.0, 0.0])
    eps = 0.5
    assert np.linalg.norm(v - v_near) < eps
    judged = JudgedList.from_flags([1, 1, 0, 1, 0], ["c1", "c1", "c3", "c2", "c4"], [v, v_near, neg, u, neg])
    csp_value = csp(judged, eps)
    ap_value = average_precision(judged)
    oracle_ap = oracles.ap([True, True, False, True, False])
    csp_ok = abs(csp_value - 5 / 6) <= 1e-12
    ap_ok = abs(ap_value - 0.756) <= 0.001
    record(3, csp_ok and ap_ok,
           f"CSP {csp_value:.6f} (target 5/6 to 1e-12), AP {ap_value:.6f} (oracle {oracle_ap:.6f}, target 0.756 +- 0.001)")
    assert csp_ok
    assert ap_ok


# 4 ---------------------------------------------------------------------------------

def test_criterion_04_fig8(runs):
    names = ("rank1", "map", "minp", "mcsp")
    held = dict.fromkeys(names, 0)
    agree = 0
    lines = []
    for seed in SEEDS:
        rows = runs[seed]["fig8"]
        ok = {m: all(rows[i + 1][m] >= rows[i][m] for i in range(2)) for m in names[:3]}
        ok["mcsp"] = all(rows[i + 1]["mcsp"] < rows[i]["mcsp"] for i in range(2))
        for m in names:
            held[m] += ok[m]
        agree += all(ok.values())
        lines.append(f"seed {seed}: " + " ".join(m + " " + "/".join(f"{r[m]:.4f}" for r in rows) for m in names))
    elapsed = sum(runs[s]["fig8_time"] for s in SEEDS)
    passed = agree == 5 and elapsed < 120
    record(4, passed, f"{agree}/5 seeds agree in every direction (Rank1 up {held['rank1']}/5, mAP up {held['map']}/5, "
                      f"mINP up {held['minp']}/5, mCSP strictly down {held['mcsp']}/5), evaluation {elapsed:.1f}s; "
                      + "; ".join(lines))
    assert agree == 5
    assert elapsed < 120


# 5 ---------------------------------------------------------------------------------

def test_criterion_05_mode_ordering(runs):
    ordered = 0
    csp_better = 0
    parts = []
    for seed in SEEDS:
        m = runs[seed]["modes"]
        ordered += m["multi"]["map"] > m["average"]["map"] > m["single"]["map"]
        csp_better += m["multi"]["mcsp"] > m["single"]["mcsp"]
        parts.append(f"seed {seed}: mAP {m['single']['map']:.4f}/{m['average']['map']:.4f}/{m['multi']['map']:.4f}")
    passed = ordered >= 4 and csp_better == 5
    record(5, passed, f"mAP multi > average > single on {ordered}/5 seeds, mCSP multi > single on "
                      f"{csp_better}/5; " + "; ".join(parts))
    assert ordered >= 4
    assert csp_better == 5


# 6 ---------------------------------------------------------------------------------

def test_criterion_06_missing_view(runs):
    labels = "abcde"
    pair_counts = [0] * 4
    ordered = 0
    parts = []
    for seed in SEEDS:
        maps = [row["map"] for row in runs[seed]["table5"]]  # rows (a) .. (e)
        pairs = [maps[i + 1] >= maps[i] for i in range(4)]
        pair_counts = [c + p for c, p in zip(pair_counts, pairs)]
        ordered += all(pairs)
        parts.append(f"seed {seed}: " + "/".join(f"{x:.4f}" for x in maps))
    cosine = float(np.mean([runs[s]["cosine"] for s in SEEDS]))
    passed = ordered >= 4 and cosine > 0.8
    pairwise = ", ".join(f"({labels[i]})<=({labels[i + 1]}) {pair_counts[i]}/5" for i in range(4))
    record(6, passed, f"full ordering on {ordered}/5 seeds ({pairwise}), mean recovery cosine {cosine:.4f}; "
                      "mAP (a)/(b)/(c)/(d)/(e) " + "; ".join(parts))
    assert ordered >= 4
    assert cosine > 0.8


# 7 ---------------------------------------------------------------------------------

def test_criterion_07_query_count(runs):
    agree = 0
    others = 0
    parts = []
    for seed in SEEDS:
        rows = runs[seed]["fig10"]
        agree += all(rows[i + 1]["map"] >= rows[i]["map"] for i in range(2))
        others += all(rows[i + 1][m] >= rows[i][m] for i in range(2) for m in ("rank1", "minp", "mcsp"))
        parts.append(f"seed {seed}: " + "/".join(f"{r['map']:.4f}" for r in rows))
    record(7, agree == 5, f"mAP non-decreasing 1->2->3 on {agree}/5 seeds (Rank1/mINP/mCSP too on "
                          f"{others}/5); " + "; ".join(parts))
    assert agree == 5


# 8 ---------------------------------------------------------------------------------

def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_criterion_08_vaf_contract():
    rng = make_rng(8)
    worst = 0.0
    for _ in range(50):
        qs = QuerySet(tuple(FeatureRecord(f"q{i}", "a", f"c{i}", v, _unit(rng.normal(size=8)), _unit(rng.normal(size=4)))
                            for i, v in enumerate(VIEWPOINTS)))
        gallery = Gallery.from_records(
            [FeatureRecord(f"g{j}", "b", "c", "front", _unit(rng.normal(size=8)), _unit(rng.normal(size=4)))
             for j in range(40)]
        )
        _, weights = multi_scores(qs, gallery, np.arange(40))
        worst = max(worst, float(np.max(np.abs(weights.sum(axis=0) - 1))), float(-weights.min()))
    simplex_ok = worst <= 1e-9

    e = np.eye(3)
    fixture_qs = QuerySet(tuple(FeatureRecord(f"q{i}", "a", "c", v, _unit([1, 0]), e[i]) for i, v in enumerate(VIEWPOINTS)))
    w = viewpoint_weights(fixture_qs, e[0])
    fixture_ok = bool(np.all(np.abs(w - [0.5761, 0.2119, 0.2119]) <= 1e-4))

    two = QuerySet((FeatureRecord("qf", "a", "c1", "front", _unit([1, 0]), e[0]),
                    FeatureRecord("qr", "a", "c2", "rear", _unit([0, 1]), e[2])))
    gallery = [FeatureRecord("g1", "a", "c3", "front", _unit([1, 0]), e[0]),
               FeatureRecord("g2", "b", "c4", "side", _unit([0.6, 0.8]), e[1])]
    weighted = score_multi(two, gallery).indices.tolist()
    averaged = score_average(two, gallery).indices.tolist()
    differs = weighted != averaged

    passed = simplex_ok and fixture_ok and differs
    record(8, passed, f"simplex deviation {worst:.1e}, softmax(1,0,0) -> ({w[0]:.4f}, {w[1]:.4f}, {w[2]:.4f}), "
                      f"weighted ranking {weighted} vs averaged {averaged}")
    assert simplex_ok and fixture_ok and differs


# 9 ---------------------------------------------------------------------------------

def test_criterion_09_determinism_and_speed(runs):
    first = runs[0]["prep"]
    again = synth.generate(synth.SynthConfig(seed=0))
    same_data = all(
        io.dumps_raw(a) == io.dumps_raw(b)
        for a, b in ((first.dataset.train, again.train), (first.dataset.gallery, again.gallery))
    )
    model, _ = vcc.train_vcc(again.train, vcc.VccTrainConfig(seed=0))
    same_vcc = io.dumps_json(io.vcc_to_dict(model)) == io.dumps_json(io.vcc_to_dict(first.vcc_model))
    feats = experiments.extract(model, again.train)
    rec_model, _ = experiments.train_recovery(feats, cvfr.CvfrTrainConfig(seed=0))
    same_cvfr = io.dumps_json(io.cvfr_to_dict(rec_model)) == io.dumps_json(io.cvfr_to_dict(first.cvfr_model))
    reports = [experiments.run_eval("multi", first.query_sets, first.gallery, seed=0).to_json() for _ in range(2)]
    rebuilt = experiments.build_query_sets(again.query_sets, model)
    reports.append(experiments.run_eval("multi", rebuilt, experiments.extract(model, again.gallery), seed=0).to_json())
    same_reports = len(set(reports)) == 1

    rng = make_rng(9)

    def unit_rows(n, d):
        m = rng.normal(size=(n, d))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    n_gallery = 10_000
    gallery = Gallery([f"g{i:05d}" for i in range(n_gallery)], [f"v{i % 500}" for i in range(n_gallery)],
                      [f"c{i % 200}" for i in range(n_gallery)], [VIEWPOINTS[i % 3] for i in range(n_gallery)],
                      unit_rows(n_gallery, 64), unit_rows(n_gallery, 16))
    query_sets = []
    for q in range(100):
        app, view = unit_rows(3, 64), unit_rows(3, 16)
        query_sets.append(QuerySet(tuple(FeatureRecord(f"q{q}_{i}", f"v{q}", f"qc{i}", v, app[i], view[i])
                                         for i, v in enumerate(VIEWPOINTS)), query_id=f"q{q}"))
    start = time.perf_counter()
    result = run_mode("multi", query_sets, gallery)
    elapsed = time.perf_counter() - start
    assert len(result.ranked) == 100
    throughput = 100 / elapsed
    fast = elapsed < 5.0

    passed = same_data and same_vcc and same_cvfr and same_reports and fast
    record(9, passed, f"byte-identical data {same_data}, VCC {same_vcc}, CVFR {same_cvfr}, reports {same_reports}; "
                      f"100 query sets x 10000 gallery in {elapsed:.2f}s ({throughput:.1f} sets/s, "
                      f"{throughput * n_gallery:.3g} gallery scores/s)")
    assert same_data and same_vcc and same_cvfr and same_reports
    assert fast


# 10 --------------------------------------------------------------------------------

def test_criterion_10_viewpoint_classifier(runs):
    accs = [runs[s]["view_acc"] for s in SEEDS]
    passed = min(accs) >= 0.9
    record(10, passed, "held-out viewpoint accuracy " + ", ".join(f"{a:.3f}" for a in accs))
    assert passed


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
