"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 model error.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
import time
from pathlib import Path


from . import cvfr as cvfr_mod
from . import experiments, io, synth, vcc
from .core import DataError, InvalidInputError, ModelError
from .metrics import EvalReport, MetricConfig, config_hash

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

RAW_FILES = {"train": "train.jsonl", "query": "query.jsonl", "gallery": "gallery.jsonl"}
FEATURE_FILES = {"train": "train_features.jsonl", "query": "query_features.jsonl", "gallery": "gallery_features.jsonl"}


class UsageError(InvalidInputError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return doc


def _reject_unknown(doc: dict, known, what: str):
    unknown = set(doc) - set(known)
    if unknown:
        raise UsageError(f"unknown {what} config keys: {sorted(unknown)}")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def _trace_csv(trace: list[dict]) -> str:
    buf = _io.StringIO()
    cols = list(trace[0])
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in trace:
        writer.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in cols])
    return buf.getvalue()


def _rows_csv(rows: list[dict]) -> str:
    buf = _io.StringIO()
    cols = list(rows[0])
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return buf.getvalue()


def _truth_doc(truth: synth.GroundTruth) -> dict:
    return {
        "identity_codes": {k: v.tolist() for k, v in truth.identity_codes.items()},
        "view_offsets": truth.view_offsets.tolist(),
        "view_rotations": truth.view_rotations.tolist(),
        "camera_styles": truth.camera_styles.tolist(),
        "illumination_direction": truth.illumination_direction.tolist(),
        "cameras_of": truth.cameras_of,
        "vehicle_model_of": truth.vehicle_model_of,
    }


# commands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = _load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    config = synth.SynthConfig.from_dict(doc)
    data = synth.generate(config)
    out = Path(args.out)
    _write(out / RAW_FILES["train"], io.dumps_raw(data.train))
    q_recs = [r for qs in data.query_sets for r in qs.records]
    q_ids = [qs.query_id for qs in data.query_sets for _ in qs.records]
    _write(out / RAW_FILES["query"], io.dumps_raw(q_recs, q_ids))
    _write(out / RAW_FILES["gallery"], io.dumps_raw(data.gallery))
    _write(out / "truth.json", json.dumps(_truth_doc(data.truth)) + "\n")
    config_doc = config.to_dict()
    manifest = {
        "files": dict(RAW_FILES),
        "ground_truth": "truth.json",
        "seed": config.seed,
        "config": config_doc,
        "config_hash": config_hash(config_doc),
        "counts": {"train": len(data.train), "query_sets": len(data.query_sets), "gallery": len(data.gallery)},
    }
    _write(out / "manifest.json", _json(manifest))
    print(f"wrote {len(data.train)} train, {len(q_recs)} query and {len(data.gallery)} gallery records to {out}")
    return EXIT_OK


def _load_raw(data_dir: Path, split: str):
    return io.loads_raw(_read_text(data_dir / RAW_FILES[split]), str(data_dir / RAW_FILES[split]))


def _raw_query_sets(records, groups) -> list[synth.RawQuerySet]:
    if any(g is None for g in groups):
        raise DataError("every query record needs a query_set key")
    order: dict[str, list] = {}
    for rec, g in zip(records, groups):
        order.setdefault(g, []).append(rec)
    return [synth.RawQuerySet(qid, recs[0].vehicle_id, tuple(recs)) for qid, recs in order.items()]


def cmd_extract(args) -> int:
    model = io.load_model(args.model, "vcc")
    data_dir, out = Path(args.data), Path(args.out)
    for split in ("train", "query", "gallery"):
        path = data_dir / RAW_FILES[split]
        if not path.exists():
            if split == "train":
                continue
            raise DataError(f"missing data file {path}")
        records, groups = _load_raw(data_dir, split)
        if records and records[0].x.size != model.input_dim:
            raise DataError(f"{path}: input dim {records[0].x.size} does not match the model's {model.input_dim}")
        feats = experiments.extract(model, records)
        text = io.dumps_features(feats, groups if split == "query" else None)
        _write(out / FEATURE_FILES[split], text)
        if args.binary:
            blob = io.pack_features(feats, groups if split == "query" else None)
            (out / FEATURE_FILES[split]).with_suffix(".murf").write_bytes(blob)
    print(f"wrote features to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    data_dir, out = Path(args.data), Path(args.out)
    if args.kind == "vcc":
        config = vcc.VccTrainConfig.from_dict(doc)
        records, _ = _load_raw(data_dir, "train")
        model, trace = vcc.train_vcc(records, config)
        _write(out / "vcc.json", io.dumps_json(io.vcc_to_dict(model)))
        _write(out / "vcc_trace.csv", _trace_csv(trace))
    else:
        per_identity = int(doc.pop("per_identity", experiments.DEFAULT_PER_IDENTITY))
        config = cvfr_mod.CvfrTrainConfig.from_dict(doc)
        path = data_dir / FEATURE_FILES["train"]
        feats, _ = io.read_features(path)
        model, trace = experiments.train_recovery(feats, config, per_identity)
        _write(out / "cvfr.json", io.dumps_json(io.cvfr_to_dict(model)))
        _write(out / "cvfr_trace.csv", _trace_csv(trace))
    print(f"trained {args.kind}: loss {trace[0]['loss']:.6g} -> {trace[-1]['loss']:.6g}")
    return EXIT_OK


def _metric_config(doc: dict, args) -> MetricConfig:
    metrics = dict(doc.get("metrics", {}))
    if args.metric_epsilon is not None:
        metrics["epsilon"] = args.metric_epsilon
    return MetricConfig.from_dict(metrics)


def _write_report(report: EvalReport, out: Path, stem: str):
    _write(out / f"{stem}.json", report.to_json())
    _write(out / f"{stem}.csv", report.to_csv())


def cmd_eval(args) -> int:
    doc = _load_config(args.config)
    _reject_unknown(doc, ("metrics", "fusion"), "eval")
    metric_config = _metric_config(doc, args)
    fusion = doc.get("fusion", "weighted_sum")
    q_recs, groups = io.read_features(args.query)
    query_sets = io.group_query_sets(q_recs, groups)
    gallery, _ = io.read_features(args.gallery)
    if not gallery or not query_sets:
        raise DataError("query and gallery files must not be empty")
    if q_recs[0].appearance.size != gallery[0].appearance.size or (
        q_recs[0].viewpoint_feature.size != gallery[0].viewpoint_feature.size
    ):
        raise DataError("query and gallery feature dims differ")
    model = io.load_model(args.cvfr, "cvfr") if args.cvfr else None
    if model is not None and model.feature_dim != gallery[0].appearance.size:
        raise ModelError("recovery model dim does not match the features")
    seed = 0 if args.seed is None else args.seed
    start = time.perf_counter()
    report = experiments.run_eval(
        args.mode, query_sets, gallery, metric_config, cvfr=model, junk_filter=not args.no_junk_filter,
        seed=seed, fusion=fusion,
        run_config={"query": Path(args.query).name, "gallery": Path(args.gallery).name,
                    "cvfr": Path(args.cvfr).name if args.cvfr else None},
    )
    elapsed = time.perf_counter() - start
    out = Path(args.out)
    _write_report(report, out, f"report_{args.mode}")
    agg = report.aggregates
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    print(f"{len(query_sets)} query sets in {elapsed:.3f}s", file=sys.stderr)
    return EXIT_OK


def cmd_experiment(args) -> int:
    doc = _load_config(args.config)
    _reject_unknown(doc, ("metrics", "add_k", "counts"), "experiment")
    metric_config = _metric_config(doc, args)
    models = Path(args.models)
    vcc_path, cvfr_path = models / "vcc.json", models / "cvfr.json"
    if not vcc_path.exists():
        raise ModelError(f"experiment {args.name} needs the VCC model {vcc_path}")
    if args.name == "table5" and not cvfr_path.exists():
        raise ModelError(f"experiment table5 needs the recovery model {cvfr_path}")
    vcc_model = io.load_model(vcc_path, "vcc")
    cvfr_model = io.load_model(cvfr_path, "cvfr") if args.name == "table5" else None

    data_dir = Path(args.data)
    g_raw, _ = _load_raw(data_dir, "gallery")
    q_raw, q_groups = _load_raw(data_dir, "query")
    seed = 0 if args.seed is None else args.seed
    data = synth.SynthDataset(synth.SynthConfig(seed=seed), [], _raw_query_sets(q_raw, q_groups), g_raw, None)
    prep = experiments.Prepared(
        seed, data, vcc_model, [], cvfr_model, [], [],
        experiments.build_query_sets(data.query_sets, vcc_model), experiments.extract(vcc_model, g_raw),
    )

    extra = {}
    if args.name == "fig8":
        rows, reports = experiments.fig8(prep, tuple(doc.get("add_k", (0, 5, 10))), metric_config)
    elif args.name == "table5":
        rows, reports, cosine = experiments.table5(prep, metric_config)
        extra["recovery_cosine"] = cosine
    else:
        rows, reports = experiments.fig10(prep, tuple(doc.get("counts", (1, 2, 3))), metric_config)

    out = Path(args.out)
    for i, report in enumerate(reports):
        _write_report(report, out, f"{args.name}_{i}")
    _write(out / f"{args.name}_summary.csv", _rows_csv(rows))
    if extra:
        _write(out / f"{args.name}_extra.json", _json(extra))
    for row in rows:
        print(row["setting"], " ".join(f"{k}={row[k]:.4f}" for k in ("rank1", "map", "minp", "mcsp")))
    for k, v in extra.items():
        print(f"{k}={v:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mqreid", description="Multi-query vehicle re-identification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", metavar="PATH")
        if seed:
            p.add_argument("--seed", type=_u64, metavar="U64")
        p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="embed raw records with a trained VCC model")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--binary", action="store_true", help="also write MURF1 binary caches")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the VCC or CVFR model")
    p.add_argument("kind", choices=("vcc", "cvfr"))
    p.add_argument("--data", required=True, metavar="DIR")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank a gallery and score the result")
    p.add_argument("--mode", choices=("single", "average", "multi"), required=True)
    p.add_argument("--query", required=True, metavar="PATH")
    p.add_argument("--gallery", required=True, metavar="PATH")
    p.add_argument("--cvfr", metavar="PATH")
    p.add_argument("--metric-epsilon", type=float, metavar="F64")
    p.add_argument("--no-junk-filter", action="store_true")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run fig8, table5 or fig10")
    p.add_argument("name", choices=("fig8", "table5", "fig10"))
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--models", required=True, metavar="DIR")
    p.add_argument("--metric-epsilon", type=float, metavar="F64")
    common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidInputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
