"""Cross-view recovery of a missing viewpoint's appearance feature.

One encoder/decoder pair per viewpoint maps appearance features to a
latent code and back; a predictor per ordered viewpoint pair maps one
view's latent code onto another's. Training sums, over the three unordered
viewpoint pairs, the reconstruction error, the contrastive information
loss between the two latent batches, the cross-view prediction error and
the reconstruction error of decoded predictions.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import losses
from .core import VIEWPOINTS, DataError, InvalidInputError, ModelError, make_rng
from .mlp import MlpModel, init_mlp, mlp_backward, mlp_forward, sgd_step

ORDERED_PAIRS = tuple(itertools.permutations(VIEWPOINTS, 2))
UNORDERED_PAIRS = tuple(itertools.combinations(VIEWPOINTS, 2))


def pair_key(src: str, dst: str) -> str:
    return f"{src}->{dst}"


@dataclass(frozen=True)
class CvfrModel:
    encoders: dict[str, MlpModel]
    decoders: dict[str, MlpModel]
    predictors: dict[str, MlpModel]  # keyed "src->dst"
    latent_dim: int
    viewpoint_centroids: dict[str, np.ndarray] | None = None
    # inputs are standardised per view as (x - mean[view]) / scale before encoding
    feature_means: dict[str, np.ndarray] | None = None
    feature_scale: float = 1.0

    def __post_init__(self):
        if set(self.encoders) != set(VIEWPOINTS) or set(self.decoders) != set(VIEWPOINTS):
            raise ModelError("need one encoder and one decoder per viewpoint")
        if set(self.predictors) != {pair_key(*p) for p in ORDERED_PAIRS}:
            raise ModelError("need one predictor per ordered viewpoint pair")
        for view in VIEWPOINTS:
            enc, dec = self.encoders[view], self.decoders[view]
            if enc.out_dim != self.latent_dim or dec.in_dim != self.latent_dim:
                raise ModelError(f"{view} encoder/decoder do not use latent dim {self.latent_dim}")
            if dec.out_dim != enc.in_dim:
                raise ModelError(f"{view} decoder output dim differs from encoder input dim")
        for key, pred in self.predictors.items():
            if pred.in_dim != self.latent_dim or pred.out_dim != self.latent_dim:
                raise ModelError(f"predictor {key} must map latent dim to latent dim")
        if not self.feature_scale > 0:
            raise ModelError("feature scale must be positive")
        if self.feature_means is not None and set(self.feature_means) != set(VIEWPOINTS):
            raise ModelError("feature means need one entry per viewpoint")

    @property
    def feature_dim(self) -> int:
        return self.encoders[VIEWPOINTS[0]].in_dim

    def _nets(self) -> list[MlpModel]:
        return (
            [self.encoders[v] for v in VIEWPOINTS]
            + [self.decoders[v] for v in VIEWPOINTS]
            + [self.predictors[pair_key(*p)] for p in ORDERED_PAIRS]
        )

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self._nets() for p in net.parameters()]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "CvfrModel":
        params = list(params)
        nets = []
        start = 0
        for net in self._nets():
            n = len(net.parameters())
            nets.append(net.with_parameters(params[start : start + n]))
            start += n
        if start != len(params):
            raise InvalidInputError(f"expected {start} parameter arrays, got {len(params)}")
        enc = dict(zip(VIEWPOINTS, nets[0:3]))
        dec = dict(zip(VIEWPOINTS, nets[3:6]))
        pred = {pair_key(*p): net for p, net in zip(ORDERED_PAIRS, nets[6:])}
        return CvfrModel(
            enc, dec, pred, self.latent_dim, self.viewpoint_centroids, self.feature_means, self.feature_scale
        )

    def copy(self) -> "CvfrModel":
        return self.with_parameters([p.copy() for p in self.parameters()])

    def standardize(self, view: str, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.feature_means is not None:
            x = x - self.feature_means[view]
        return x / self.feature_scale

    def destandardize(self, view: str, y: np.ndarray) -> np.ndarray:
        y = y * self.feature_scale
        if self.feature_means is not None:
            y = y + self.feature_means[view]
        return y

    def with_centroids(self, centroids: Mapping[str, np.ndarray]) -> "CvfrModel":
        return dataclasses.replace(
            self, viewpoint_centroids={v: np.asarray(centroids[v], dtype=np.float64) for v in VIEWPOINTS}
        )


def init_cvfr(feature_dim: int, latent_dim: int, rng: np.random.Generator, width: int | None = None) -> CvfrModel:
    width = width or 4 * latent_dim
    enc = {v: init_mlp([feature_dim, width, width, latent_dim], rng) for v in VIEWPOINTS}
    dec = {v: init_mlp([latent_dim, width, width, feature_dim], rng) for v in VIEWPOINTS}
    pred = {pair_key(*p): init_mlp([latent_dim, width, width, latent_dim], rng) for p in ORDERED_PAIRS}
    return CvfrModel(enc, dec, pred, latent_dim)


@dataclass(frozen=True)
class CvfrTrainConfig:
    epochs: int = 60
    learning_rate: float = 3e-5
    latent_dim: int = 32
    alpha: float = losses.DEFAULT_ALPHA
    batch_size: int = 64
    hidden_width: int | None = None
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise InvalidInputError("latent dim must be at least 2")
        if self.alpha < 0:
            raise InvalidInputError("alpha must be non-negative")
        if self.epochs < 1 or self.batch_size < 2:
            raise InvalidInputError("need at least one epoch and batches of at least 2")
        if self.learning_rate < 0:
            raise InvalidInputError("learning rate must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "CvfrTrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown cvfr config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class _Grads:
    """Per-network gradient accumulator keyed like the model's networks."""

    model: CvfrModel
    store: dict = field(default_factory=dict)

    def add(self, name: str, grads: list[np.ndarray]):
        if name in self.store:
            self.store[name] = [a + b for a, b in zip(self.store[name], grads)]
        else:
            self.store[name] = grads

    def as_list(self) -> list[np.ndarray]:
        names = (
            [("enc", v) for v in VIEWPOINTS]
            + [("dec", v) for v in VIEWPOINTS]
            + [("pred", pair_key(*p)) for p in ORDERED_PAIRS]
        )
        out = []
        for net, name in zip(self.model._nets(), names):
            out.extend(self.store.get(name, [np.zeros_like(p) for p in net.parameters()]))
        return out


def cvfr_loss(model: CvfrModel, batches: Mapping[str, np.ndarray], alpha: float, grad: bool = True):
    """Total training objective on one aligned batch (row t of every view is one vehicle)."""
    xs = {v: np.asarray(batches[v], dtype=np.float64) for v in VIEWPOINTS}
    m = xs[VIEWPOINTS[0]].shape[0]
    if any(x.shape[0] != m for x in xs.values()):
        raise DataError("aligned batches differ in size")

    enc_c = {v: mlp_forward(model.encoders[v], xs[v]) for v in VIEWPOINTS}
    z = {v: enc_c[v].output for v in VIEWPOINTS}
    rec_c = {v: mlp_forward(model.decoders[v], z[v]) for v in VIEWPOINTS}
    d_z = {v: np.zeros_like(z[v]) for v in VIEWPOINTS}
    d_rec = {v: np.zeros_like(xs[v]) for v in VIEWPOINTS}
    acc = _Grads(model)
    parts = {"recon": 0.0, "contrastive": 0.0, "prediction": 0.0, "generation": 0.0}

    for u, v in UNORDERED_PAIRS:
        l_rec, (g_ru, g_rv) = losses.loss_recon([xs[u], xs[v]], [rec_c[u].output, rec_c[v].output], grad=True)
        d_rec[u] += g_ru
        d_rec[v] += g_rv
        l_cl, (g_zu, g_zv) = losses.loss_contrastive(z[u], z[v], alpha, grad=True)
        d_z[u] += g_zu
        d_z[v] += g_zv
        parts["recon"] += l_rec
        parts["contrastive"] += l_cl

        for src, dst in ((u, v), (v, u)):
            key = pair_key(src, dst)
            p_c = mlp_forward(model.predictors[key], z[src])
            l_pre, g_pred = losses.loss_prediction(p_c.output, z[dst], grad=True)
            # the target latent also receives the opposite gradient
            d_z[dst] -= g_pred
            gen_c = mlp_forward(model.decoders[dst], p_c.output)
            l_gen, g_gen = losses.loss_recon(xs[dst], gen_c.output, grad=True)
            parts["prediction"] += l_pre
            parts["generation"] += l_gen
            if grad:
                gd = mlp_backward(model.decoders[dst], gen_c, g_gen)
                acc.add(("dec", dst), gd.as_list())
                gp = mlp_backward(model.predictors[key], p_c, g_pred + gd.d_input)
                acc.add(("pred", key), gp.as_list())
                d_z[src] += gp.d_input

    total = sum(parts.values())
    if not grad:
        return total, parts
    for v in VIEWPOINTS:
        gd = mlp_backward(model.decoders[v], rec_c[v], d_rec[v])
        acc.add(("dec", v), gd.as_list())
        d_z[v] += gd.d_input
        ge = mlp_backward(model.encoders[v], enc_c[v], d_z[v])
        acc.add(("enc", v), ge.as_list())
    return total, parts, acc.as_list()


def _aligned_arrays(aligned) -> dict[str, np.ndarray]:
    if isinstance(aligned, Mapping):
        missing = [v for v in VIEWPOINTS if v not in aligned]
        if missing:
            raise DataError(f"aligned training data lacks viewpoint(s) {missing}")
        arrays = {v: np.asarray(aligned[v], dtype=np.float64) for v in VIEWPOINTS}
    else:
        rows = list(aligned)
        if not rows:
            raise DataError("empty aligned training set")
        for row in rows:
            if any(x is None for x in row) or len(row) != 3:
                raise DataError("every training identity must supply front, side and rear features")
        arrays = {v: np.stack([np.asarray(r[i], dtype=np.float64) for r in rows]) for i, v in enumerate(VIEWPOINTS)}
    n = arrays[VIEWPOINTS[0]].shape[0]
    if any(a.ndim != 2 or a.shape[0] != n for a in arrays.values()):
        raise DataError("aligned arrays must be (n, D) with equal n")
    if n < 2:
        raise DataError("aligned training set needs at least 2 rows")
    return arrays


def train_cvfr(aligned, config: CvfrTrainConfig | None = None):
    """Train on aligned (front, side, rear) feature triplets.

    ``aligned`` is either a mapping viewpoint -> (n, D_a) array with aligned
    rows or a sequence of 3-tuples. Returns ``(model, trace)`` where
    ``trace[0]`` is the initial loss on the first batch.
    """
    config = config or CvfrTrainConfig()
    arrays = _aligned_arrays(aligned)
    n, dim = arrays[VIEWPOINTS[0]].shape
    rng = make_rng(config.seed)
    model = init_cvfr(dim, config.latent_dim, rng, config.hidden_width)
    if config.standardize:
        means = {v: arrays[v].mean(axis=0) for v in VIEWPOINTS}
        centred = np.concatenate([arrays[v] - means[v] for v in VIEWPOINTS])
        scale = float(np.sqrt(np.mean(centred * centred)))
        if scale > 0:
            model = dataclasses.replace(model, feature_means=means, feature_scale=scale)
    arrays = {v: model.standardize(v, arrays[v]) for v in VIEWPOINTS}
    batch = min(config.batch_size, n)
    steps = max(1, n // batch)

    trace = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total_sum = 0.0
        part_sums: dict[str, float] = {}
        for s in range(steps):
            idx = perm[s * batch : (s + 1) * batch]
            total, parts, grads = cvfr_loss(model, {v: arrays[v][idx] for v in VIEWPOINTS}, config.alpha)
            if not np.isfinite(total):
                raise FloatingPointError(f"recovery training diverged in epoch {epoch + 1}")
            if not trace:
                trace.append({"epoch": 0, "loss": total, **parts})
            model = sgd_step(model, grads, config.learning_rate)
            total_sum += total
            for k, val in parts.items():
                part_sums[k] = part_sums.get(k, 0.0) + val
        trace.append({"epoch": epoch + 1, "loss": total_sum / steps, **{k: val / steps for k, val in part_sums.items()}})
    return model, trace


def autoencode(model: CvfrModel, view: str, x) -> np.ndarray:
    z = mlp_forward(model.encoders[view], model.standardize(view, x)).output
    return model.destandardize(view, mlp_forward(model.decoders[view], z).output)


def translate(model: CvfrModel, src: str, dst: str, x) -> np.ndarray:
    """Decoded prediction of ``dst``'s feature from a ``src`` feature (rows)."""
    z = mlp_forward(model.encoders[src], model.standardize(src, x)).output
    g = mlp_forward(model.predictors[pair_key(src, dst)], z).output
    return model.destandardize(dst, mlp_forward(model.decoders[dst], g).output)


def recover(model: CvfrModel, available: Mapping[str, np.ndarray], missing: str) -> np.ndarray:
    """Unit-norm estimate of the ``missing`` view's appearance feature.

    Each available view yields one candidate; candidates are averaged in the
    fixed front/side/rear order, so the result does not depend on the
    mapping's iteration order.
    """
    if missing not in VIEWPOINTS:
        raise InvalidInputError(f"unknown viewpoint {missing!r}")
    if not available:
        raise InvalidInputError("recovery needs at least one available viewpoint")
    if missing in available:
        raise InvalidInputError(f"viewpoint {missing} is listed as available")
    unknown = set(available) - set(VIEWPOINTS)
    if unknown:
        raise InvalidInputError(f"unknown viewpoint(s) {sorted(unknown)}")
    candidates = [translate(model, src, missing, np.asarray(available[src], dtype=np.float64))[0]
                  for src in VIEWPOINTS if src in available]
    mean = np.mean(candidates, axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise InvalidInputError("recovered feature has zero norm")
    return mean / norm


def aligned_triplets(vehicle_ids, viewpoints, features, per_identity: int, seed: int) -> dict[str, np.ndarray]:
    """Sample ``per_identity`` aligned triplets per vehicle by drawing one record of each view."""
    vehicle_ids = np.asarray(vehicle_ids, dtype=object)
    viewpoints = np.asarray(viewpoints, dtype=object)
    features = np.asarray(features, dtype=np.float64)
    rng = make_rng(seed)
    out = {v: [] for v in VIEWPOINTS}
    for vid in sorted(set(vehicle_ids.tolist())):
        pools = {v: np.flatnonzero((vehicle_ids == vid) & (viewpoints == v)) for v in VIEWPOINTS}
        empty = [v for v, pool in pools.items() if pool.size == 0]
        if empty:
            raise DataError(f"training vehicle {vid} lacks viewpoint(s) {empty}")
        for v in VIEWPOINTS:
            out[v].append(features[rng.choice(pools[v], size=per_identity, replace=True)])
    return {v: np.concatenate(out[v]) for v in VIEWPOINTS}


def viewpoint_centroids(viewpoint_features, viewpoints) -> dict[str, np.ndarray]:
    """Unit-norm mean viewpoint feature of each viewpoint class."""
    feats = np.asarray(viewpoint_features, dtype=np.float64)
    labels = np.asarray(viewpoints, dtype=object)
    out = {}
    for v in VIEWPOINTS:
        rows = feats[labels == v]
        if rows.size == 0:
            raise DataError(f"no training features for viewpoint {v}")
        mean = rows.mean(axis=0)
        out[v] = mean / np.linalg.norm(mean)
    return out
