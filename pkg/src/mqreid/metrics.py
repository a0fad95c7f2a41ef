"""Ranking metrics for re-identification.

All metrics read a :class:`JudgedList`: for every rank position, whether the
gallery item is a true match, which camera took it, and its viewpoint
feature (or label). Lists are 0-indexed arrays; ranks in formulas are
1-based.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import InvalidInputError

METRIC_KEYS = ("map", "minp", "mcgm", "mcsp")


@dataclass(frozen=True)
class JudgedList:
    positives: np.ndarray  # bool, rank order
    cameras: np.ndarray  # camera token per position
    viewpoints: np.ndarray | None = None  # (n, D_v) unit-norm features
    view_labels: np.ndarray | None = None  # fallback when features are absent

    def __post_init__(self):
        n = len(self.positives)
        if n < 1:
            raise InvalidInputError("a judged list needs at least one position")
        if len(self.cameras) != n:
            raise InvalidInputError("camera column length differs from the list length")
        if self.viewpoints is not None and len(self.viewpoints) != n:
            raise InvalidInputError("viewpoint column length differs from the list length")
        if self.view_labels is not None and len(self.view_labels) != n:
            raise InvalidInputError("viewpoint label column length differs from the list length")

    def __len__(self) -> int:
        return len(self.positives)

    @classmethod
    def from_flags(cls, flags, cameras=None, viewpoints=None, view_labels=None) -> "JudgedList":
        flags = np.asarray(flags, dtype=bool)
        if cameras is None:
            cameras = [f"c{i}" for i in range(len(flags))]
        vp = None if viewpoints is None else np.asarray(viewpoints, dtype=np.float64)
        vl = None if view_labels is None else np.asarray(view_labels)
        return cls(flags, np.asarray(cameras), vp, vl)

    def subset(self, keep: np.ndarray) -> "JudgedList":
        return JudgedList(
            self.positives[keep],
            self.cameras[keep],
            None if self.viewpoints is None else self.viewpoints[keep],
            None if self.view_labels is None else self.view_labels[keep],
        )


def cmc_at_k(judged: JudgedList, k: int) -> int:
    """1 when a true match appears in the first ``k`` positions (k beyond the end clips)."""
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    return int(np.any(judged.positives[:k]))


def _ap_from_flags(flags: np.ndarray) -> float:
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        return 0.0
    precision = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision.mean())


def average_precision(judged: JudgedList) -> float:
    """Mean of precision@r over the ranks r of the true matches (0 with none)."""
    return _ap_from_flags(judged.positives)


def inp(judged: JudgedList) -> float:
    """Inverse negative penalty: number of true matches / rank of the last one."""
    hits = np.flatnonzero(judged.positives)
    if hits.size == 0:
        return 0.0
    return float(hits.size / (hits[-1] + 1))


def cgm_keep_mask(judged: JudgedList) -> np.ndarray:
    keep = np.ones(len(judged), dtype=bool)
    seen: set = set()
    for i in np.flatnonzero(judged.positives):
        cam = judged.cameras[i]
        if cam in seen:
            keep[i] = False
        else:
            seen.add(cam)
    return keep


def cgm(judged: JudgedList) -> float:
    """Camera-group variant: each camera keeps only its best-ranked match, then AP."""
    return _ap_from_flags(judged.positives[cgm_keep_mask(judged)])


def csp_keep_mask(judged: JudgedList, epsilon: float, mode: str = "feature") -> np.ndarray:
    """False at true matches suppressed as same-camera, similar-viewpoint repeats.

    Matches are scanned in rank order. A match is suppressed when some
    already retained match from the same camera has a viewpoint feature
    closer than ``epsilon`` (Euclidean). In ``"label"`` mode two matches are
    similar when their viewpoint labels are equal. Non-matches are kept.
    """
    if mode == "feature":
        if epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")
        if judged.viewpoints is None:
            raise InvalidInputError("feature mode needs viewpoint features")
    elif mode == "label":
        if judged.view_labels is None:
            raise InvalidInputError("label mode needs viewpoint labels")
    else:
        raise InvalidInputError(f"unknown viewpoint mode {mode!r}")

    keep = np.ones(len(judged), dtype=bool)
    retained: dict = {}
    for i in np.flatnonzero(judged.positives):
        cam = judged.cameras[i]
        previous = retained.setdefault(cam, [])
        if previous:
            if mode == "feature":
                ref = judged.viewpoints[previous]
                similar = bool(np.any(np.linalg.norm(ref - judged.viewpoints[i], axis=1) < epsilon))
            else:
                similar = bool(np.any(judged.view_labels[previous] == judged.view_labels[i]))
            if similar:
                keep[i] = False
                continue
        previous.append(i)
    return keep


def csp(judged: JudgedList, epsilon: float = 0.5, mode: str = "feature") -> float:
    """Cross-scene precision: AP over the list with same-scene repeats deleted."""
    return _ap_from_flags(judged.positives[csp_keep_mask(judged, epsilon, mode)])


def cross_scene_count(judged: JudgedList, epsilon: float = 0.5, mode: str = "feature") -> int:
    """Number of matches that survive suppression."""
    keep = csp_keep_mask(judged, epsilon, mode)
    return int(np.sum(judged.positives & keep))


@dataclass(frozen=True)
class MetricConfig:
    ranks: tuple[int, ...] = (1, 5, 10)
    epsilon: float = 0.5
    viewpoint_mode: str = "feature"
    empty_policy: str = "zero"  # "zero": score 0 and flag; "skip": leave out of the means

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")
        if not self.ranks or min(self.ranks) < 1:
            raise InvalidInputError("ranks must be positive integers")
        if self.viewpoint_mode not in ("feature", "label"):
            raise InvalidInputError(f"unknown viewpoint mode {self.viewpoint_mode!r}")
        if self.empty_policy not in ("zero", "skip"):
            raise InvalidInputError(f"unknown empty-positive policy {self.empty_policy!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown metric config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "ranks" in doc:
            doc["ranks"] = tuple(int(r) for r in doc["ranks"])
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["ranks"] = list(self.ranks)
        doc["cgm"] = "CGM-variant (per-camera best match, then AP)"
        return doc


def score_list(judged: JudgedList, config: MetricConfig) -> dict:
    """Every metric for one query, plus bookkeeping counts and flags."""
    row: dict = {}
    for k in config.ranks:
        row[f"rank{k}"] = float(cmc_at_k(judged, k))
    row["map"] = average_precision(judged)
    row["minp"] = inp(judged)
    row["mcgm"] = cgm(judged)
    keep = csp_keep_mask(judged, config.epsilon, config.viewpoint_mode)
    row["mcsp"] = _ap_from_flags(judged.positives[keep])
    n_pos = int(judged.positives.sum())
    n_cs = int(np.sum(judged.positives & keep))
    row["num_positives"] = n_pos
    row["num_cross_scene"] = n_cs
    flags = []
    if n_pos == 0:
        flags.append("no_positives")
    elif n_cs == 0:
        flags.append("no_cross_scene_positives")
    row["flags"] = flags
    return row


def config_hash(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    aggregates: dict
    per_query: list[dict]
    config: dict
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def metric_names(self) -> list[str]:
        return list(self.aggregates)

    def to_dict(self) -> dict:
        config = dict(self.config)
        config["seed"] = self.seed
        config["config_hash"] = config_hash(self.config)
        doc = {"config": config, "aggregates": self.aggregates, "per_query": self.per_query}
        if self.extra:
            doc["extra"] = self.extra
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        metric_cols = list(self.aggregates)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["query_id", *metric_cols, "num_positives", "num_cross_scene", "flags"])
        for row in self.per_query:
            writer.writerow(
                [row["query_id"]]
                + [_fmt(row[m]) for m in metric_cols]
                + [row["num_positives"], row["num_cross_scene"], ";".join(row["flags"])]
            )
        return buf.getvalue()


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def evaluate(
    judged_lists: Sequence[JudgedList],
    config: MetricConfig | None = None,
    query_ids: Sequence[str] | None = None,
    seed: int | None = None,
    run_config: dict | None = None,
) -> EvalReport:
    """Score every query and average; aggregates are plain means of per-query values."""
    config = config or MetricConfig()
    if not judged_lists:
        raise InvalidInputError("nothing to evaluate")
    if query_ids is None:
        query_ids = [f"q{i:05d}" for i in range(len(judged_lists))]
    if len(query_ids) != len(judged_lists):
        raise InvalidInputError("query id count differs from the number of ranked lists")

    names = [f"rank{k}" for k in config.ranks] + list(METRIC_KEYS)
    per_query = []
    for qid, judged in zip(query_ids, judged_lists):
        row = score_list(judged, config)
        if config.empty_policy == "skip" and "no_positives" in row["flags"]:
            for name in names:
                row[name] = None
        per_query.append({"query_id": qid, **row})

    aggregates = {}
    for name in names:
        values = [row[name] for row in per_query if row[name] is not None]
        aggregates[name] = float(np.mean(values)) if values else 0.0
    doc = {"metrics": config.to_dict()}
    if run_config:
        doc.update(run_config)
    return EvalReport(aggregates, per_query, doc, seed)
