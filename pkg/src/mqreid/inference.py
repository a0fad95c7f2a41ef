"""Single, average and viewpoint-weighted multi-query retrieval.

Scores are cosine similarities between unit-norm appearance features. In
multi-query mode every gallery item gets its own softmax weights over the
queries, computed from viewpoint-feature cosines, and its score is the
weighted sum of the per-query appearance cosines. Rankings sort scores in
descending order and break ties by ascending ``record_id``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import VIEW_INDEX, DataError, InvalidInputError, ModelError, cosine_matrix, softmax
from .metrics import JudgedList

UNIT_NORM_TOL = 1e-6
FUSION_MODES = ("weighted_sum", "fused_cosine")


@dataclass(frozen=True)
class FeatureRecord:
    record_id: str
    vehicle_id: str
    camera_id: str
    viewpoint: str
    appearance: np.ndarray
    viewpoint_feature: np.ndarray

    def __post_init__(self):
        if self.viewpoint not in VIEW_INDEX:
            raise DataError(f"record {self.record_id}: unknown viewpoint {self.viewpoint!r}")
        for name in ("appearance", "viewpoint_feature"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise DataError(f"record {self.record_id}: {name} must be a finite 1-D vector")
            if abs(np.linalg.norm(vec) - 1.0) > UNIT_NORM_TOL:
                raise DataError(f"record {self.record_id}: {name} is not unit-norm")
            object.__setattr__(self, name, vec)


class Gallery:
    """Column view of gallery records for batched scoring."""

    def __init__(
        self,
        record_ids: Sequence[str],
        vehicle_ids: Sequence[str],
        camera_ids: Sequence[str],
        viewpoints: Sequence[str],
        appearance: np.ndarray,
        viewpoint_features: np.ndarray,
    ):
        self.record_ids = np.asarray(record_ids, dtype=object)
        self.vehicle_ids = np.asarray(vehicle_ids, dtype=object)
        self.camera_ids = np.asarray(camera_ids, dtype=object)
        self.viewpoints = np.asarray(viewpoints, dtype=object)
        self.appearance = np.asarray(appearance, dtype=np.float64)
        self.viewpoint_features = np.asarray(viewpoint_features, dtype=np.float64)
        n = len(self.record_ids)
        for col in (self.vehicle_ids, self.camera_ids, self.viewpoints):
            if len(col) != n:
                raise DataError("gallery columns have different lengths")
        if self.appearance.shape[0] != n or self.viewpoint_features.shape[0] != n:
            raise DataError("gallery feature matrices do not match the record count")
        if len(set(self.record_ids.tolist())) != n:
            raise DataError("gallery record ids are not unique")
        # position of each record in ascending record_id order, the tie-break key
        self.id_rank = np.empty(n, dtype=np.int64)
        self.id_rank[np.argsort(self.record_ids.astype(str), kind="stable")] = np.arange(n)
        self._app_norm = np.linalg.norm(self.appearance, axis=1) if n else np.zeros(0)
        self._view_norm = np.linalg.norm(self.viewpoint_features, axis=1) if n else np.zeros(0)

    @classmethod
    def from_records(cls, records: Iterable[FeatureRecord]) -> "Gallery":
        records = list(records)
        if not records:
            return cls([], [], [], [], np.zeros((0, 0)), np.zeros((0, 0)))
        return cls(
            [r.record_id for r in records],
            [r.vehicle_id for r in records],
            [r.camera_id for r in records],
            [r.viewpoint for r in records],
            np.stack([r.appearance for r in records]),
            np.stack([r.viewpoint_feature for r in records]),
        )

    def __len__(self) -> int:
        return len(self.record_ids)

    def record(self, i: int) -> FeatureRecord:
        return FeatureRecord(
            str(self.record_ids[i]),
            str(self.vehicle_ids[i]),
            str(self.camera_ids[i]),
            str(self.viewpoints[i]),
            self.appearance[i],
            self.viewpoint_features[i],
        )

    def appearance_cosines(self, queries: np.ndarray, idx: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(queries)
        if q.shape[1] != self.appearance.shape[1]:
            raise InvalidInputError(
                f"query appearance dim {q.shape[1]} != gallery dim {self.appearance.shape[1]}"
            )
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        return (qn @ self.appearance[idx].T) / self._app_norm[idx]

    def viewpoint_cosines(self, queries: np.ndarray, idx: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(queries)
        if q.shape[1] != self.viewpoint_features.shape[1]:
            raise InvalidInputError(
                f"query viewpoint dim {q.shape[1]} != gallery dim {self.viewpoint_features.shape[1]}"
            )
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        return (qn @ self.viewpoint_features[idx].T) / self._view_norm[idx]


def _as_gallery(gallery) -> Gallery:
    return gallery if isinstance(gallery, Gallery) else Gallery.from_records(gallery)


@dataclass(frozen=True)
class QuerySet:
    records: tuple[FeatureRecord, ...]
    missing: tuple[str, ...] = ()
    vehicle_id: str | None = None
    query_id: str = "q"
    allow_repeats: bool = False

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "missing", tuple(self.missing))
        labels = [r.viewpoint for r in self.records]
        if not self.allow_repeats and len(set(labels)) != len(labels):
            raise DataError(f"query set {self.query_id}: viewpoints must be distinct")
        for view in self.missing:
            if view not in VIEW_INDEX:
                raise DataError(f"query set {self.query_id}: unknown missing viewpoint {view!r}")
            if view in labels:
                raise DataError(f"query set {self.query_id}: viewpoint {view} is both present and missing")
        if len(set(self.missing)) != len(self.missing):
            raise DataError(f"query set {self.query_id}: duplicate missing viewpoints")
        if self.vehicle_id is None and self.records:
            object.__setattr__(self, "vehicle_id", self.records[0].vehicle_id)

    def available(self) -> dict[str, np.ndarray]:
        return {r.viewpoint: r.appearance for r in self.records}

    def drop(self, view: str) -> "QuerySet":
        """The same query set with ``view`` removed and declared missing."""
        kept = tuple(r for r in self.records if r.viewpoint != view)
        if len(kept) == len(self.records):
            raise DataError(f"query set {self.query_id} has no {view} record")
        return QuerySet(kept, self.missing + (view,), self.vehicle_id, self.query_id, self.allow_repeats)

    def without_missing(self) -> "QuerySet":
        """Use only the available records; nothing is to be recovered."""
        return QuerySet(self.records, (), self.vehicle_id, self.query_id, self.allow_repeats)

    def first(self, n: int) -> "QuerySet":
        return QuerySet(self.records[:n], (), self.vehicle_id, self.query_id, self.allow_repeats)


@dataclass(frozen=True)
class RankedList:
    indices: np.ndarray  # gallery indices, best first
    scores: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.scores):
            raise InvalidInputError("indices and scores differ in length")

    def __len__(self) -> int:
        return len(self.indices)


def admit_gallery(queryset, gallery, junk_filter: bool = True) -> np.ndarray:
    """Gallery indices left after dropping records that share vehicle AND camera with a query."""
    g = _as_gallery(gallery)
    if not junk_filter:
        return np.arange(len(g))
    records = queryset.records if isinstance(queryset, QuerySet) else [queryset]
    pairs = {(r.vehicle_id, r.camera_id) for r in records if r.camera_id}
    if not pairs:
        return np.arange(len(g))
    junk = np.fromiter(
        ((v, c) in pairs for v, c in zip(g.vehicle_ids, g.camera_ids)), dtype=bool, count=len(g)
    )
    return np.flatnonzero(~junk)


def _rank(g: Gallery, admitted: np.ndarray, scores: np.ndarray) -> RankedList:
    order = np.lexsort((g.id_rank[admitted], -scores))
    return RankedList(admitted[order], scores[order])


def _admitted(queryset, g: Gallery, junk_filter: bool) -> np.ndarray:
    admitted = admit_gallery(queryset, g, junk_filter)
    if admitted.size == 0:
        raise DataError("no gallery records left to rank")
    return admitted


def score_single(query: FeatureRecord, gallery, junk_filter: bool = True) -> RankedList:
    g = _as_gallery(gallery)
    admitted = _admitted(query, g, junk_filter)
    scores = g.appearance_cosines(query.appearance, admitted)[0]
    return _rank(g, admitted, scores)


def score_average(queryset: QuerySet, gallery, junk_filter: bool = True) -> RankedList:
    """Rank by cosine to the normalised mean of the query appearance features."""
    if not queryset.records:
        raise DataError(f"query set {queryset.query_id} is empty")
    g = _as_gallery(gallery)
    admitted = _admitted(queryset, g, junk_filter)
    mean = np.mean([r.appearance for r in queryset.records], axis=0)
    if np.linalg.norm(mean) <= 1e-12:
        raise DataError(f"query set {queryset.query_id}: mean appearance feature has zero norm")
    scores = g.appearance_cosines(mean, admitted)[0]
    return _rank(g, admitted, scores)


def viewpoint_weights(queryset: QuerySet, gallery_item) -> np.ndarray:
    """Softmax over the queries of viewpoint-feature cosines to one gallery item."""
    if not queryset.records:
        raise DataError(f"query set {queryset.query_id} is empty")
    if queryset.missing:
        raise DataError(
            f"query set {queryset.query_id}: viewpoint features missing for {list(queryset.missing)}"
        )
    target = gallery_item.viewpoint_feature if isinstance(gallery_item, FeatureRecord) else gallery_item
    sims = cosine_matrix(np.stack([r.viewpoint_feature for r in queryset.records]), np.atleast_2d(target))[:, 0]
    return softmax(sims)


def complete_queryset(queryset: QuerySet, cvfr) -> QuerySet:
    """Fill every missing viewpoint with a recovered appearance feature.

    The recovered record's viewpoint feature is the model's training
    centroid for that viewpoint class. It carries no camera, so the junk
    filter ignores it.
    """
    if not queryset.missing:
        return queryset
    if cvfr is None:
        raise ModelError(
            f"query set {queryset.query_id} misses {list(queryset.missing)} and no recovery model was given"
        )
    centroids = getattr(cvfr, "viewpoint_centroids", None)
    if centroids is None:
        raise ModelError("recovery model carries no viewpoint centroids")
    from .cvfr import recover

    available = queryset.available()
    records = list(queryset.records)
    for view in queryset.missing:
        app = recover(cvfr, available, view)
        records.append(
            FeatureRecord(
                f"{queryset.query_id}:recovered:{view}",
                queryset.vehicle_id or "",
                "",
                view,
                app,
                np.asarray(centroids[view], dtype=np.float64),
            )
        )
    records.sort(key=lambda r: VIEW_INDEX[r.viewpoint])
    return QuerySet(tuple(records), (), queryset.vehicle_id, queryset.query_id, queryset.allow_repeats)


def multi_scores(queryset: QuerySet, g: Gallery, admitted: np.ndarray, fusion: str = "weighted_sum"):
    """(scores, weights) for the admitted gallery items; weights are (n_queries, n_admitted)."""
    if fusion not in FUSION_MODES:
        raise InvalidInputError(f"unknown fusion mode {fusion!r}")
    q_view = np.stack([r.viewpoint_feature for r in queryset.records])
    q_app = np.stack([r.appearance for r in queryset.records])
    weights = softmax(g.viewpoint_cosines(q_view, admitted).T).T
    if fusion == "weighted_sum":
        scores = np.sum(weights * g.appearance_cosines(q_app, admitted), axis=0)
    else:
        # cosine of the weighted feature sum, one fused query per gallery item
        fused = weights.T @ q_app
        norms = np.linalg.norm(fused, axis=1)
        if np.any(norms <= 1e-12):
            raise DataError(f"query set {queryset.query_id}: fused feature has zero norm")
        g_app = g.appearance[admitted]
        scores = np.sum(fused * g_app, axis=1) / (norms * np.linalg.norm(g_app, axis=1))
    return scores, weights


def score_multi(
    queryset: QuerySet,
    gallery,
    cvfr=None,
    junk_filter: bool = True,
    fusion: str = "weighted_sum",
) -> RankedList:
    """Viewpoint-adaptive fusion of the query set; missing views are recovered first."""
    if not queryset.records:
        raise DataError(f"query set {queryset.query_id} is empty")
    g = _as_gallery(gallery)
    full = complete_queryset(queryset, cvfr)
    admitted = _admitted(full, g, junk_filter)
    scores, _ = multi_scores(full, g, admitted, fusion)
    return _rank(g, admitted, scores)


def judge(ranked: RankedList, vehicle_id: str, gallery) -> JudgedList:
    """Attach ground truth (match flag, camera, viewpoint) to a ranked list."""
    g = _as_gallery(gallery)
    idx = ranked.indices
    return JudgedList(
        g.vehicle_ids[idx] == vehicle_id,
        g.camera_ids[idx],
        g.viewpoint_features[idx],
        g.viewpoints[idx],
    )


@dataclass
class ModeResult:
    ranked: list[RankedList] = field(default_factory=list)
    judged: list[JudgedList] = field(default_factory=list)
    query_ids: list[str] = field(default_factory=list)


def run_mode(
    mode: str,
    query_sets: Sequence[QuerySet],
    gallery,
    cvfr=None,
    junk_filter: bool = True,
    fusion: str = "weighted_sum",
    single_choice: Sequence[int] | None = None,
) -> ModeResult:
    """Rank the gallery for every query set under one inference mode.

    ``single_choice[i]`` picks which record of query set ``i`` serves as the
    single query (default: the first).
    """
    g = _as_gallery(gallery)
    out = ModeResult()
    for i, qs in enumerate(query_sets):
        if mode == "single":
            pick = 0 if single_choice is None else single_choice[i]
            ranked = score_single(qs.records[pick], g, junk_filter)
        elif mode == "average":
            completed = complete_queryset(qs, cvfr) if cvfr is not None else qs.without_missing()
            ranked = score_average(completed, g, junk_filter)
        elif mode == "multi":
            ranked = score_multi(qs, g, cvfr, junk_filter, fusion)
        else:
            raise InvalidInputError(f"unknown inference mode {mode!r}")
        out.ranked.append(ranked)
        out.judged.append(judge(ranked, qs.vehicle_id, g))
        out.query_ids.append(qs.query_id)
    return out

