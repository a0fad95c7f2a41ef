"""Synthetic multi-camera vehicle observations with known generative factors.

Each raw observation of vehicle ``i`` seen from viewpoint ``v`` by camera
``c`` under illumination ``l`` is

    x = b_i + beta * o_v + kappa * R_v b_i + sigma_c * s_c + shift_l * d + sigma_a * e

where ``b_i`` is the identity code, ``o_v`` a viewpoint offset shared by all
vehicles, ``R_v`` a per-viewpoint rotation (so the view-dependent part of
the appearance is specific to each vehicle), ``s_c`` a camera style, ``d``
an illumination direction and ``e`` i.i.d. noise. Vector factors are drawn
as ``N(0, 1/D)`` so they have roughly unit norm. With ``vehicle_models > 0``
identity codes are mixed with a shared make/model code, so vehicles of the
same family are hard negatives for each other.

Evaluation and training vehicles are disjoint sets. Every evaluation vehicle
contributes one query pool (one record per viewpoint, plus optional extra
records) and the rest of its records to the gallery.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .core import VIEWPOINTS, DataError, InvalidInputError, child_seed, make_rng

ILLUMINATIONS = ("morning", "afternoon", "night")


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 50
    num_train_identities: int = 500
    num_cameras: int = 200
    cameras_per_identity: tuple[int, int] = (30, 50)
    # extra cameras above the minimum ~ Binomial(range, p); 0.23 * 20 = 4.6 -> mean 34.6
    camera_excess_p: float = 0.23
    records_per_camera: tuple[int, int] = (1, 2)
    input_dim: int = 32
    appearance_noise: float = 0.3
    camera_noise: float = 0.3
    illumination_shift: dict = field(
        default_factory=lambda: {"morning": 0.0, "afternoon": 0.3, "night": 0.6}
    )
    viewpoint_offset: float = 2.0
    viewpoint_rotation: float = 2.5
    # identities share make/model families; a code is sqrt(s) * family + sqrt(1 - s) * own.
    # Same-family vehicles are the hard negatives that keep retrieval off the ceiling.
    vehicle_models: int = 25
    model_similarity: float = 0.97
    extra_queries: int = 0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cameras_per_identity
        if self.num_identities < 1 or self.num_train_identities < 2:
            raise InvalidInputError("need at least 1 evaluation and 2 training identities")
        if self.input_dim < 1 or self.num_cameras < 1:
            raise InvalidInputError("dims and camera count must be positive")
        if lo < 3:
            raise InvalidInputError(
                f"cameras_per_identity minimum {lo} cannot cover the three viewpoints"
            )
        if lo > hi or hi > self.num_cameras:
            raise InvalidInputError(
                f"cameras_per_identity range {lo}-{hi} is infeasible with {self.num_cameras} cameras"
            )
        rlo, rhi = self.records_per_camera
        if rlo < 1 or rlo > rhi:
            raise InvalidInputError(f"records_per_camera range {rlo}-{rhi} is invalid")
        if not 0.0 <= self.camera_excess_p <= 1.0:
            raise InvalidInputError("camera_excess_p must lie in [0, 1]")
        if set(self.illumination_shift) != set(ILLUMINATIONS):
            raise InvalidInputError(f"illumination_shift needs exactly the keys {ILLUMINATIONS}")
        if min(self.appearance_noise, self.camera_noise, self.viewpoint_offset, self.viewpoint_rotation) < 0:
            raise InvalidInputError("noise and offset magnitudes must be non-negative")
        if self.vehicle_models < 0 or not 0.0 <= self.model_similarity < 1.0:
            raise InvalidInputError("vehicle_models must be >= 0 and model_similarity in [0, 1)")
        if self.model_similarity > 0 and self.vehicle_models == 0:
            raise InvalidInputError("model_similarity needs vehicle_models > 0")
        if self.extra_queries < 0:
            raise InvalidInputError("extra_queries must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown synth config keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("cameras_per_identity", "records_per_camera"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["cameras_per_identity"] = list(self.cameras_per_identity)
        doc["records_per_camera"] = list(self.records_per_camera)
        return doc


@dataclass(frozen=True)
class RawRecord:
    record_id: str
    vehicle_id: str
    camera_id: str
    viewpoint: str
    x: np.ndarray
    illumination: str = "morning"


@dataclass(frozen=True)
class RawQuerySet:
    query_id: str
    vehicle_id: str
    # one record per viewpoint in VIEWPOINTS order, then any extra records
    records: tuple[RawRecord, ...]


@dataclass
class GroundTruth:
    identity_codes: dict[str, np.ndarray]
    view_offsets: np.ndarray  # (3, D)
    view_rotations: np.ndarray  # (3, D, D)
    camera_styles: np.ndarray  # (num_cameras, D)
    illumination_direction: np.ndarray
    cameras_of: dict[str, list[str]]
    vehicle_model_of: dict[str, int] = field(default_factory=dict)

    def clean_code(self, vehicle_id: str, viewpoint: str, config: SynthConfig) -> np.ndarray:
        v = VIEWPOINTS.index(viewpoint)
        b = self.identity_codes[vehicle_id]
        return b + config.viewpoint_offset * self.view_offsets[v] + config.viewpoint_rotation * (
            self.view_rotations[v] @ b
        )


@dataclass
class SynthDataset:
    config: SynthConfig
    train: list[RawRecord]
    query_sets: list[RawQuerySet]
    gallery: list[RawRecord]
    truth: GroundTruth


def _random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def camera_name(index: int) -> str:
    return f"c{index:04d}"


def generate(config: SynthConfig | None = None) -> SynthDataset:
    config = config or SynthConfig()
    dim = config.input_dim
    scale = 1.0 / np.sqrt(dim)
    factor_rng = make_rng(child_seed(config.seed, "factors"))
    view_offsets = factor_rng.normal(scale=scale, size=(3, dim))
    view_rotations = np.stack([_random_rotation(factor_rng, dim) for _ in VIEWPOINTS])
    camera_styles = factor_rng.normal(scale=scale, size=(config.num_cameras, dim))
    illum_dir = factor_rng.normal(size=dim)
    illum_dir /= np.linalg.norm(illum_dir)
    families = factor_rng.normal(scale=scale, size=(config.vehicle_models, dim))

    truth = GroundTruth({}, view_offsets, view_rotations, camera_styles, illum_dir, {})
    lo, hi = config.cameras_per_identity

    def observe(vehicle_id: str, rng: np.random.Generator) -> list[RawRecord]:
        code = rng.normal(scale=scale, size=dim)
        if config.vehicle_models:
            family = int(rng.integers(config.vehicle_models))
            sim = config.model_similarity
            code = np.sqrt(sim) * families[family] + np.sqrt(1.0 - sim) * code
            truth.vehicle_model_of[vehicle_id] = family
        truth.identity_codes[vehicle_id] = code
        n_cams = min(hi, lo + int(rng.binomial(hi - lo, config.camera_excess_p)))
        cams = np.sort(rng.choice(config.num_cameras, size=n_cams, replace=False))
        truth.cameras_of[vehicle_id] = [camera_name(c) for c in cams]
        views = np.concatenate([rng.permutation(3), rng.integers(0, 3, size=n_cams - 3)])
        views = views[rng.permutation(n_cams)]
        clean = [
            code + config.viewpoint_offset * view_offsets[v] + config.viewpoint_rotation * (view_rotations[v] @ code)
            for v in range(3)
        ]
        records = []
        rlo, rhi = config.records_per_camera
        for cam, v in zip(cams, views):
            for k in range(int(rng.integers(rlo, rhi + 1))):
                illum = ILLUMINATIONS[int(rng.integers(0, 3))]
                x = (
                    clean[v]
                    + config.camera_noise * camera_styles[cam]
                    + config.illumination_shift[illum] * illum_dir
                    + config.appearance_noise * rng.normal(scale=scale, size=dim)
                )
                records.append(
                    RawRecord(
                        f"{vehicle_id}_{camera_name(cam)}_{k}",
                        vehicle_id,
                        camera_name(cam),
                        VIEWPOINTS[v],
                        x,
                        illum,
                    )
                )
        return records

    train: list[RawRecord] = []
    for i in range(config.num_train_identities):
        vid = f"t{i:04d}"
        train.extend(observe(vid, make_rng(child_seed(config.seed, "train", i))))

    query_sets: list[RawQuerySet] = []
    gallery: list[RawRecord] = []
    for i in range(config.num_identities):
        vid = f"v{i:04d}"
        rng = make_rng(child_seed(config.seed, "eval", i))
        records = observe(vid, rng)
        picked = []
        for view in VIEWPOINTS:
            candidates = [j for j, r in enumerate(records) if r.viewpoint == view]
            picked.append(candidates[int(rng.integers(len(candidates)))])
        rest = [j for j in range(len(records)) if j not in picked]
        if config.extra_queries:
            if config.extra_queries > len(rest) - 1:
                raise DataError(f"identity {vid} has too few records for {config.extra_queries} extra queries")
            extra = rng.choice(len(rest), size=config.extra_queries, replace=False)
            picked.extend(rest[e] for e in extra)
        chosen = set(picked)
        query_sets.append(RawQuerySet(f"q{i:04d}", vid, tuple(records[j] for j in picked)))
        gallery.extend(r for j, r in enumerate(records) if j not in chosen)

    return SynthDataset(config, train, query_sets, gallery, truth)


def modify_gallery(
    gallery: list[RawRecord], add_k: int, seed: int, noise: float = 0.02
) -> list[RawRecord]:
    """Swap ``add_k`` cross-camera records per vehicle for same-scene near-duplicates.

    For every vehicle one record is picked at random; ``add_k`` noisy copies
    of it (same camera, same viewpoint) are appended and ``add_k`` records of
    that vehicle from other cameras are dropped, so each vehicle keeps its
    record count.
    """
    if add_k < 0:
        raise InvalidInputError("add_k must be non-negative")
    if add_k == 0:
        return list(gallery)
    by_vehicle: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(gallery):
        by_vehicle[rec.vehicle_id].append(i)

    rng = make_rng(child_seed(seed, "modify_gallery", add_k))
    removed: set[int] = set()
    added: list[RawRecord] = []
    for vid in sorted(by_vehicle):
        idx = by_vehicle[vid]
        base = gallery[idx[int(rng.integers(len(idx)))]]
        removable = [i for i in idx if gallery[i].camera_id != base.camera_id]
        if len(removable) < add_k:
            raise DataError(
                f"vehicle {vid} has {len(removable)} cross-camera records, cannot remove {add_k}"
            )
        removed.update(int(i) for i in rng.choice(removable, size=add_k, replace=False))
        dim = base.x.shape[0]
        for j in range(add_k):
            x = base.x + noise * rng.normal(scale=1.0 / np.sqrt(dim), size=dim)
            added.append(
                RawRecord(f"{base.record_id}_dup{j:02d}", vid, base.camera_id, base.viewpoint, x, base.illumination)
            )
    return [r for i, r in enumerate(gallery) if i not in removed] + added


def camera_counts(dataset: SynthDataset) -> dict[str, int]:
    """Number of distinct cameras each vehicle was observed by."""
    return {vid: len(cams) for vid, cams in dataset.truth.cameras_of.items()}
