"""Viewpoint-conditioned embedding network.

Two branches read the same raw vector. The viewpoint branch (trunk + 3-way
head) yields a viewpoint feature; the appearance branch adds a learned
projection of that feature to the pre-activation of each of its hidden
layers. An identity head on top of the appearance feature supplies the
classification term of the training loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import losses
from .core import VIEW_INDEX, VIEWPOINTS, DataError, InvalidInputError, ModelError, make_rng, softmax
from .mlp import MlpModel, init_mlp, mlp_backward, mlp_forward, sgd_step


@dataclass(frozen=True)
class VccModel:
    viewpoint_trunk: MlpModel  # D_in -> ... -> D_v, linear last layer
    viewpoint_head: MlpModel  # D_v -> 3
    appearance_branch: MlpModel  # D_in -> ... -> D_a, every layer conditioned on D_v
    id_head: MlpModel  # D_a -> number of training identities
    identities: tuple[str, ...] = ()

    def __post_init__(self):
        if self.viewpoint_head.out_dim != 3:
            raise ModelError("viewpoint head must have exactly 3 outputs")
        if self.viewpoint_head.in_dim != self.viewpoint_trunk.out_dim:
            raise ModelError("viewpoint head does not read the trunk output")
        if self.appearance_branch.in_dim != self.viewpoint_trunk.in_dim:
            raise ModelError("branches must read the same input dim")
        if self.appearance_branch.condition_dim != self.viewpoint_trunk.out_dim:
            raise ModelError("conditioning projections must read the viewpoint feature")
        if self.id_head.in_dim != self.appearance_branch.out_dim:
            raise ModelError("identity head does not read the appearance feature")
        if self.identities and len(self.identities) != self.id_head.out_dim:
            raise ModelError("identity head width must equal the number of training identities")

    @property
    def input_dim(self) -> int:
        return self.viewpoint_trunk.in_dim

    @property
    def appearance_dim(self) -> int:
        return self.appearance_branch.out_dim

    @property
    def viewpoint_dim(self) -> int:
        return self.viewpoint_trunk.out_dim

    def _parts(self):
        return (self.viewpoint_trunk, self.viewpoint_head, self.appearance_branch, self.id_head)

    def parameters(self) -> list[np.ndarray]:
        return [p for part in self._parts() for p in part.parameters()]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "VccModel":
        params = list(params)
        parts = []
        start = 0
        for part in self._parts():
            n = len(part.parameters())
            parts.append(part.with_parameters(params[start : start + n]))
            start += n
        if start != len(params):
            raise InvalidInputError(f"expected {start} parameter arrays, got {len(params)}")
        return VccModel(*parts, identities=self.identities)

    def copy(self) -> "VccModel":
        return self.with_parameters([p.copy() for p in self.parameters()])

    def zero_conditioning(self) -> "VccModel":
        return dataclasses.replace(self, appearance_branch=self.appearance_branch.zero_conditioning())


def init_vcc(
    input_dim: int,
    num_identities: int,
    rng: np.random.Generator,
    viewpoint_hidden: int = 64,
    viewpoint_dim: int = 16,
    appearance_hidden: Sequence[int] = (128, 64),
    identities: Sequence[str] = (),
) -> VccModel:
    trunk = init_mlp([input_dim, viewpoint_hidden, viewpoint_dim], rng)
    head = init_mlp([viewpoint_dim, 3], rng)
    dims = [input_dim, *appearance_hidden]
    # linear output layer: a ReLU here can zero the whole feature for some inputs
    n_layers = len(dims) - 1
    branch = init_mlp(
        dims,
        rng,
        activations=["relu"] * (n_layers - 1) + ["identity"],
        condition_dim=viewpoint_dim,
        conditioned_layers=range(n_layers),
    )
    id_head = init_mlp([dims[-1], num_identities], rng)
    return VccModel(trunk, head, branch, id_head, tuple(identities))


def _input_batch(model: VccModel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != model.input_dim:
        raise InvalidInputError(f"input dim {arr.shape[1]} != model input dim {model.input_dim}")
    return arr, single


def _normalize_rows(a: np.ndarray, what: str) -> np.ndarray:
    norm = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidInputError(f"{what} collapsed to the zero vector")
    return a / norm


def embed(model: VccModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm (appearance feature, viewpoint feature) for one input or a batch."""
    arr, single = _input_batch(model, x)
    f_v = mlp_forward(model.viewpoint_trunk, arr).output
    f_a = mlp_forward(model.appearance_branch, arr, condition=f_v).output
    app = _normalize_rows(f_a, "appearance feature")
    view = _normalize_rows(f_v, "viewpoint feature")
    if single:
        return app[0], view[0]
    return app, view


def appearance_given_condition(model: VccModel, x, condition) -> np.ndarray:
    """Un-normalised appearance activation for an explicitly supplied viewpoint feature."""
    arr, _ = _input_batch(model, x)
    return mlp_forward(model.appearance_branch, arr, condition=np.atleast_2d(condition)).output


def predict_viewpoint(model: VccModel, x):
    """(label, probabilities); ties go to the smallest class index."""
    arr, single = _input_batch(model, x)
    f_v = mlp_forward(model.viewpoint_trunk, arr).output
    probs = softmax(mlp_forward(model.viewpoint_head, f_v).output)
    labels = [VIEWPOINTS[i] for i in np.argmax(probs, axis=1)]
    if single:
        return labels[0], probs[0]
    return labels, probs


def viewpoint_accuracy(model: VccModel, records) -> float:
    """Fraction of records whose predicted viewpoint matches the label."""
    if not records:
        raise DataError("no records to score")
    labels, _ = predict_viewpoint(model, np.stack([r.x for r in records]))
    return float(np.mean([p == r.viewpoint for p, r in zip(labels, records)]))


@dataclass(frozen=True)
class VccTrainConfig:
    epochs: int = 20
    base_lr: float = 0.05
    warmup_fraction: float = 0.05
    decay_points: tuple[float, ...] = (0.75, 0.94)
    decay_factor: float = 0.1
    identities_per_batch: int = 6
    instances_per_identity: int = 6
    margin: float = losses.DEFAULT_MARGIN
    steps_per_epoch: int | None = None
    viewpoint_hidden: int = 64
    viewpoint_dim: int = 16
    appearance_hidden: tuple[int, ...] = (128, 64)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be at least 1")
        if self.identities_per_batch < 2 or self.instances_per_identity < 2:
            raise InvalidInputError("batches need at least 2 identities with 2 instances each")
        if self.base_lr < 0 or self.margin < 0:
            raise InvalidInputError("learning rate and margin must be non-negative")

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.instances_per_identity

    @classmethod
    def from_dict(cls, doc: dict) -> "VccTrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown vcc config keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("decay_points", "appearance_hidden"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["decay_points"] = list(self.decay_points)
        doc["appearance_hidden"] = list(self.appearance_hidden)
        return doc


def learning_rate(step: int, total_steps: int, epochs: int, steps_per_epoch: int, config) -> float:
    """Linear warmup, then step decay at fixed fractions of the epoch budget."""
    warmup = max(1, int(round(config.warmup_fraction * total_steps)))
    if step < warmup:
        lr = config.base_lr * (step + 1) / warmup
    else:
        lr = config.base_lr
    epoch = step // steps_per_epoch
    for point in config.decay_points:
        if epoch >= int(round(point * epochs)):
            lr *= config.decay_factor
    return lr


def _unpack_training(records) -> tuple[np.ndarray, list[str], np.ndarray]:
    xs, ids, views = [], [], []
    for rec in records:
        if isinstance(rec, tuple):
            x, identity, view = rec
        else:
            x, identity, view = rec.x, rec.vehicle_id, rec.viewpoint
        if view not in VIEW_INDEX:
            raise DataError(f"unknown viewpoint label {view!r}")
        xs.append(np.asarray(x, dtype=np.float64))
        ids.append(str(identity))
        views.append(VIEW_INDEX[view])
    if not xs:
        raise DataError("empty training set")
    return np.stack(xs), ids, np.asarray(views)


def vcc_batch_loss(model: VccModel, x, id_labels, view_labels, margin: float, grad: bool = True):
    """Combined viewpoint + appearance loss on one batch, with parameter gradients."""
    c_trunk = mlp_forward(model.viewpoint_trunk, x)
    f_v = c_trunk.output
    c_head = mlp_forward(model.viewpoint_head, f_v)
    c_app = mlp_forward(model.appearance_branch, x, condition=f_v)
    feat = c_app.output
    c_id = mlp_forward(model.id_head, feat)

    l_view, d_vlogits = losses.loss_view(c_head.output, view_labels, grad=True)
    l_ce, d_idlogits = losses.cross_entropy(c_id.output, id_labels, grad=True)
    l_tri, d_feat_tri = losses.loss_batch_hard(feat, id_labels, margin, grad=True)
    total = losses.loss_vcc(l_view, l_ce + l_tri)
    parts = {"view": l_view, "id": l_ce, "triplet": l_tri}
    if not grad:
        return total, parts

    g_id = mlp_backward(model.id_head, c_id, d_idlogits)
    g_app = mlp_backward(model.appearance_branch, c_app, g_id.d_input + d_feat_tri)
    g_head = mlp_backward(model.viewpoint_head, c_head, d_vlogits)
    g_trunk = mlp_backward(model.viewpoint_trunk, c_trunk, g_head.d_input + g_app.d_condition)
    grads = g_trunk.as_list() + g_head.as_list() + g_app.as_list() + g_id.as_list()
    return total, parts, grads


def train_vcc(records, config: VccTrainConfig | None = None):
    """Train from scratch on ``(x, identity, viewpoint)`` records.

    Returns ``(model, trace)``; ``trace[0]`` is the loss of the initial model
    on the first batch, later entries are per-epoch means recorded while
    training.
    """
    config = config or VccTrainConfig()
    x_all, id_tokens, views = _unpack_training(records)
    identities = sorted(set(id_tokens))
    if len(identities) < 2:
        raise DataError("training needs at least 2 identities")
    missing = [VIEWPOINTS[v] for v in range(3) if v not in set(views.tolist())]
    if missing:
        raise DataError(f"training set lacks viewpoint class(es): {missing}")
    if len(identities) < config.identities_per_batch:
        raise DataError(
            f"{len(identities)} identities cannot fill batches of {config.identities_per_batch}"
        )
    label_of = {vid: i for i, vid in enumerate(identities)}
    labels = np.asarray([label_of[t] for t in id_tokens])
    members = [np.flatnonzero(labels == i) for i in range(len(identities))]
    short = [identities[i] for i, m in enumerate(members) if len(m) < config.instances_per_identity]
    if short:
        raise DataError(
            f"identities with fewer than {config.instances_per_identity} instances: {short[:5]}"
        )

    rng = make_rng(config.seed)
    model = init_vcc(
        x_all.shape[1],
        len(identities),
        rng,
        config.viewpoint_hidden,
        config.viewpoint_dim,
        config.appearance_hidden,
        identities,
    )
    steps_per_epoch = config.steps_per_epoch or max(1, len(x_all) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    order = rng.permutation(len(identities))
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        picked = []
        while len(picked) < config.identities_per_batch:
            if cursor >= len(order):
                order = rng.permutation(len(identities))
                cursor = 0
            if order[cursor] not in picked:
                picked.append(order[cursor])
            cursor += 1
        idx = np.concatenate(
            [rng.choice(members[i], size=config.instances_per_identity, replace=False) for i in picked]
        )
        return idx

    trace = []
    step = 0
    for epoch in range(config.epochs):
        sums = {"loss": 0.0, "view": 0.0, "id": 0.0, "triplet": 0.0}
        lr = 0.0
        for _ in range(steps_per_epoch):
            idx = next_batch()
            total, parts, grads = vcc_batch_loss(model, x_all[idx], labels[idx], views[idx], config.margin)
            if not np.isfinite(total):
                raise FloatingPointError(f"training diverged at step {step}")
            if epoch == 0 and step == 0:
                trace.append({"epoch": 0, "loss": total, **parts, "lr": 0.0})
            lr = learning_rate(step, total_steps, config.epochs, steps_per_epoch, config)
            model = sgd_step(model, grads, lr)
            sums["loss"] += total
            for key, value in parts.items():
                sums[key] += value
            step += 1
        trace.append(
            {"epoch": epoch + 1, **{k: v / steps_per_epoch for k, v in sums.items()}, "lr": lr}
        )
    return model, trace


def evaluate_vcc_loss(model: VccModel, records, margin: float = losses.DEFAULT_MARGIN, seed: int = 0,
                      identities_per_batch: int = 6, instances_per_identity: int = 6, batches: int = 20) -> float:
    """Mean combined loss over seeded P x K batches drawn from ``records``."""
    x_all, id_tokens, views = _unpack_training(records)
    label_of = {vid: i for i, vid in enumerate(model.identities)}
    labels = np.asarray([label_of[t] for t in id_tokens])
    members = [np.flatnonzero(labels == i) for i in range(len(model.identities))]
    members = [m for m in members if len(m) >= instances_per_identity]
    rng = make_rng(seed)
    values = []
    for _ in range(batches):
        picked = rng.choice(len(members), size=identities_per_batch, replace=False)
        idx = np.concatenate(
            [rng.choice(members[i], size=instances_per_identity, replace=False) for i in picked]
        )
        total, _ = vcc_batch_loss(model, x_all[idx], labels[idx], views[idx], margin, grad=False)
        values.append(total)
    return float(np.mean(values))
