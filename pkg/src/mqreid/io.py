"""File formats: feature JSONL, raw-record JSONL, the packed binary cache, and model documents.

Feature files hold one record per line with a fixed key order and float32
values written in their shortest round-trip form, so loading and rewriting
a file reproduces it byte for byte. Raw-record files keep full float64
precision because they feed training.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import cvfr as cvfr_mod
from .core import VIEWPOINTS, DataError, ModelError
from .inference import UNIT_NORM_TOL, FeatureRecord, QuerySet
from .mlp import mlp_from_dict, mlp_to_dict
from .synth import RawRecord
from .vcc import VccModel

FILE_NORM_TOL = 1e-4
MAGIC = b"MURF1"


def _f32(values) -> str:
    return "[" + ",".join(str(v) for v in np.asarray(values, dtype=np.float32)) + "]"


def _f64(values) -> str:
    return "[" + ",".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64)) + "]"


def _header(fields: Sequence[tuple[str, str]]) -> str:
    return ",".join(f"{json.dumps(k)}:{json.dumps(v)}" for k, v in fields)


def feature_line(rec: FeatureRecord, query_set: str | None = None) -> str:
    fields = [
        ("record_id", rec.record_id),
        ("vehicle_id", rec.vehicle_id),
        ("camera_id", rec.camera_id),
        ("viewpoint", rec.viewpoint),
    ]
    if query_set is not None:
        fields.append(("query_set", query_set))
    return (
        "{" + _header(fields)
        + f',"appearance":{_f32(rec.appearance)},"viewpoint_feature":{_f32(rec.viewpoint_feature)}}}'
    )


def dumps_features(records: Iterable[FeatureRecord], query_sets: Sequence[str] | None = None) -> str:
    records = list(records)
    if query_sets is None:
        return "".join(feature_line(r) + "\n" for r in records)
    return "".join(feature_line(r, q) + "\n" for r, q in zip(records, query_sets, strict=True))


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > FILE_NORM_TOL:
        raise DataError(f"{what} has norm {norm:.6f}, expected 1 within {FILE_NORM_TOL}")
    # rounding beyond the in-memory tolerance is normalised away
    return vec / norm if abs(norm - 1.0) > UNIT_NORM_TOL else vec


def _parse_feature(doc: dict, where: str) -> tuple[FeatureRecord, str | None]:
    try:
        app = np.asarray(doc["appearance"], dtype=np.float64)
        view = np.asarray(doc["viewpoint_feature"], dtype=np.float64)
        if app.ndim != 1 or view.ndim != 1:
            raise DataError(f"{where}: features must be flat lists")
        rec = FeatureRecord(
            str(doc["record_id"]),
            str(doc["vehicle_id"]),
            str(doc["camera_id"]),
            str(doc["viewpoint"]),
            _unit(app, f"{where} appearance"),
            _unit(view, f"{where} viewpoint_feature"),
        )
    except KeyError as exc:
        raise DataError(f"{where}: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{where}: malformed record ({exc})") from exc
    return rec, doc.get("query_set")


def loads_features(text: str, source: str = "<features>") -> tuple[list[FeatureRecord], list[str | None]]:
    records, groups = [], []
    dims = None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{source}:{n}: invalid JSON ({exc.msg})") from exc
        rec, group = _parse_feature(doc, f"{source}:{n}")
        d = (rec.appearance.size, rec.viewpoint_feature.size)
        if dims is None:
            dims = d
        elif d != dims:
            raise DataError(f"{source}:{n}: feature dims {d} differ from the file's {dims}")
        records.append(rec)
        groups.append(group)
    return records, groups


def group_query_sets(records: Sequence[FeatureRecord], groups: Sequence[str | None]) -> list[QuerySet]:
    """Group query records by their ``query_set`` key (file order); absent views become missing."""
    if any(g is None for g in groups):
        raise DataError("every query record needs a query_set key")
    by_set: OrderedDict[str, list[FeatureRecord]] = OrderedDict()
    for rec, g in zip(records, groups):
        by_set.setdefault(g, []).append(rec)
    out = []
    for qid, recs in by_set.items():
        vehicles = {r.vehicle_id for r in recs}
        if len(vehicles) != 1:
            raise DataError(f"query set {qid} mixes vehicles {sorted(vehicles)}")
        present = {r.viewpoint for r in recs}
        repeats = len(present) != len(recs)
        missing = () if repeats else tuple(v for v in VIEWPOINTS if v not in present)
        out.append(QuerySet(tuple(recs), missing, recs[0].vehicle_id, qid, allow_repeats=repeats))
    return out


def query_lines(query_sets: Sequence[QuerySet]) -> str:
    recs, groups = [], []
    for qs in query_sets:
        for r in qs.records:
            recs.append(r)
            groups.append(qs.query_id)
    return dumps_features(recs, groups)


# raw records -----------------------------------------------------------------

def raw_line(rec: RawRecord, query_set: str | None = None) -> str:
    fields = [
        ("record_id", rec.record_id),
        ("vehicle_id", rec.vehicle_id),
        ("camera_id", rec.camera_id),
        ("viewpoint", rec.viewpoint),
        ("illumination", rec.illumination),
    ]
    if query_set is not None:
        fields.append(("query_set", query_set))
    return "{" + _header(fields) + f',"x":{_f64(rec.x)}}}'


def dumps_raw(records: Iterable[RawRecord], query_sets: Sequence[str] | None = None) -> str:
    records = list(records)
    if query_sets is None:
        return "".join(raw_line(r) + "\n" for r in records)
    return "".join(raw_line(r, q) + "\n" for r, q in zip(records, query_sets, strict=True))


def loads_raw(text: str, source: str = "<raw>") -> tuple[list[RawRecord], list[str | None]]:
    records, groups = [], []
    dim = None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            x = np.asarray(doc["x"], dtype=np.float64)
            rec = RawRecord(
                str(doc["record_id"]), str(doc["vehicle_id"]), str(doc["camera_id"]),
                str(doc["viewpoint"]), x, str(doc.get("illumination", "morning")),
            )
        except json.JSONDecodeError as exc:
            raise DataError(f"{source}:{n}: invalid JSON ({exc.msg})") from exc
        except KeyError as exc:
            raise DataError(f"{source}:{n}: missing key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise DataError(f"{source}:{n}: malformed record ({exc})") from exc
        if rec.viewpoint not in VIEWPOINTS:
            raise DataError(f"{source}:{n}: unknown viewpoint {rec.viewpoint!r}")
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise DataError(f"{source}:{n}: x must be a finite flat list")
        if dim is None:
            dim = x.size
        elif x.size != dim:
            raise DataError(f"{source}:{n}: input dim {x.size} differs from the file's {dim}")
        records.append(rec)
        groups.append(doc.get("query_set"))
    return records, groups


# packed binary cache ----------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError("string too long for the binary cache")
    return struct.pack("<H", len(raw)) + raw


def pack_features(records: Sequence[FeatureRecord], query_sets: Sequence[str | None] | None = None) -> bytes:
    """Little-endian binary cache: magic, counts and dims, then per record strings and f32 vectors."""
    records = list(records)
    if query_sets is None:
        query_sets = [None] * len(records)
    d_a = records[0].appearance.size if records else 0
    d_v = records[0].viewpoint_feature.size if records else 0
    parts = [MAGIC, struct.pack("<III", len(records), d_a, d_v)]
    for rec, q in zip(records, query_sets, strict=True):
        if rec.appearance.size != d_a or rec.viewpoint_feature.size != d_v:
            raise DataError("feature dims must be constant for the binary cache")
        parts.append(struct.pack("<B", 0 if q is None else 1))
        for s in (rec.record_id, rec.vehicle_id, rec.camera_id, rec.viewpoint, q or ""):
            parts.append(_pack_str(s))
        parts.append(np.asarray(rec.appearance, dtype="<f4").tobytes())
        parts.append(np.asarray(rec.viewpoint_feature, dtype="<f4").tobytes())
    return b"".join(parts)


def unpack_features(blob: bytes) -> tuple[list[FeatureRecord], list[str | None]]:
    if blob[:5] != MAGIC:
        raise DataError("not a feature cache (bad magic)")
    try:
        count, d_a, d_v = struct.unpack_from("<III", blob, 5)
        pos = 17
        records, groups = [], []
        for i in range(count):
            (has_q,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            fields = []
            for _ in range(5):
                (n,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                fields.append(blob[pos : pos + n].decode("utf-8"))
                pos += n
            app = np.frombuffer(blob, dtype="<f4", count=d_a, offset=pos).astype(np.float64)
            pos += 4 * d_a
            view = np.frombuffer(blob, dtype="<f4", count=d_v, offset=pos).astype(np.float64)
            pos += 4 * d_v
            where = f"cache record {i}"
            records.append(
                FeatureRecord(fields[0], fields[1], fields[2], fields[3],
                              _unit(app, f"{where} appearance"), _unit(view, f"{where} viewpoint_feature"))
            )
            groups.append(fields[4] if has_q else None)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"truncated or corrupt feature cache ({exc})") from exc
    if pos != len(blob):
        raise DataError("trailing bytes after the last cached record")
    return records, groups


def read_features(path) -> tuple[list[FeatureRecord], list[str | None]]:
    """Load a JSONL feature file or a binary cache (detected by its magic)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if blob.startswith(MAGIC):
        return unpack_features(blob)
    return loads_features(blob.decode("utf-8"), str(path))


# models -------------------------------------------------------------------------

def vcc_to_dict(model: VccModel) -> dict:
    branch = mlp_to_dict(model.appearance_branch.without_conditioning())
    return {
        "vcc": {
            "viewpoint_branch": {
                "trunk": mlp_to_dict(model.viewpoint_trunk),
                "head": mlp_to_dict(model.viewpoint_head),
            },
            "appearance_branch": branch,
            "conditioning": mlp_to_dict(model.appearance_branch)["conditioning"],
            "id_head": mlp_to_dict(model.id_head),
            "identities": list(model.identities),
        }
    }


def vcc_from_dict(doc: dict) -> VccModel:
    try:
        body = doc["vcc"]
        branch_doc = dict(body["appearance_branch"])
        branch_doc["conditioning"] = body["conditioning"]
        return VccModel(
            mlp_from_dict(body["viewpoint_branch"]["trunk"]),
            mlp_from_dict(body["viewpoint_branch"]["head"]),
            mlp_from_dict(branch_doc),
            mlp_from_dict(body["id_head"]),
            tuple(body.get("identities", ())),
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed VCC model document: {exc}") from exc


def _vec(values) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64)]


def cvfr_to_dict(model: cvfr_mod.CvfrModel) -> dict:
    body = {
        "encoders": {v: mlp_to_dict(model.encoders[v]) for v in VIEWPOINTS},
        "decoders": {v: mlp_to_dict(model.decoders[v]) for v in VIEWPOINTS},
        "predictors": {cvfr_mod.pair_key(*p): mlp_to_dict(model.predictors[cvfr_mod.pair_key(*p)])
                       for p in cvfr_mod.ORDERED_PAIRS},
        "latent_dim": model.latent_dim,
        "feature_scale": model.feature_scale,
    }
    if model.feature_means is not None:
        body["feature_means"] = {v: _vec(model.feature_means[v]) for v in VIEWPOINTS}
    if model.viewpoint_centroids is not None:
        body["viewpoint_centroids"] = {v: _vec(model.viewpoint_centroids[v]) for v in VIEWPOINTS}
    return {"cvfr": body}


def cvfr_from_dict(doc: dict) -> cvfr_mod.CvfrModel:
    try:
        body = doc["cvfr"]
        means = body.get("feature_means")
        centroids = body.get("viewpoint_centroids")
        return cvfr_mod.CvfrModel(
            {v: mlp_from_dict(body["encoders"][v]) for v in VIEWPOINTS},
            {v: mlp_from_dict(body["decoders"][v]) for v in VIEWPOINTS},
            {k: mlp_from_dict(d) for k, d in body["predictors"].items()},
            int(body["latent_dim"]),
            None if centroids is None else {v: np.asarray(centroids[v], dtype=np.float64) for v in VIEWPOINTS},
            None if means is None else {v: np.asarray(means[v], dtype=np.float64) for v in VIEWPOINTS},
            float(body.get("feature_scale", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed CVFR model document: {exc}") from exc


def dumps_json(doc) -> str:
    return json.dumps(doc, sort_keys=False, separators=(",", ":")) + "\n"


def load_model(path, kind: str):
    """Read a model document; ``kind`` is "vcc" or "cvfr"."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ModelError(f"cannot read model {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ModelError(f"model {path} is not valid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or kind not in doc:
        raise ModelError(f"{path} is not a {kind} model document")
    return vcc_from_dict(doc) if kind == "vcc" else cvfr_from_dict(doc)
