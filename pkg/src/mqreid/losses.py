"""Training objectives for the embedding and recovery networks.

Each loss returns its scalar value; with ``grad=True`` it returns
``(value, gradients)`` where the gradients are taken with respect to the
array arguments, in argument order.
"""

from __future__ import annotations

import sys

import numpy as np

from .core import InvalidInputError, log_softmax, softmax

NUM_VIEW_CLASSES = 3
DEFAULT_MARGIN = 0.3
DEFAULT_ALPHA = 9.0
_EPS = sys.float_info.epsilon


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise InvalidInputError("labels must be a non-empty 1-D sequence")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidInputError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidInputError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits, labels, grad: bool = False):
    """Mean negative log-likelihood of the true class under a softmax."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, c = logits.shape
    labels = _check_labels(labels, c)
    if labels.shape[0] != n:
        raise InvalidInputError(f"{n} logit rows but {labels.shape[0]} labels")
    logp = log_softmax(logits)
    value = float(-logp[np.arange(n), labels].mean())
    if not grad:
        return value
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return value, d / n


def loss_view(logits, labels, grad: bool = False):
    """Viewpoint classification loss over front/side/rear."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[1] != NUM_VIEW_CLASSES:
        raise InvalidInputError(f"viewpoint logits need {NUM_VIEW_CLASSES} columns, got {logits.shape[1]}")
    return cross_entropy(logits, labels, grad=grad)


def _pair_dist(x, y):
    diff = x - y
    d = np.sqrt(np.sum(diff * diff, axis=1))
    return d, diff


def loss_triplet(anchor, positive, negative, margin: float = DEFAULT_MARGIN, grad: bool = False):
    """Mean hinge ``max(0, m + d(a, p) - d(a, n))`` with Euclidean ``d``."""
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positive, dtype=np.float64))
    n = np.atleast_2d(np.asarray(negative, dtype=np.float64))
    if not (a.shape == p.shape == n.shape):
        raise InvalidInputError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if margin < 0:
        raise InvalidInputError("margin must be non-negative")
    d_ap, diff_ap = _pair_dist(a, p)
    d_an, diff_an = _pair_dist(a, n)
    hinge = margin + d_ap - d_an
    active = hinge > 0.0
    value = float(np.where(active, hinge, 0.0).mean())
    if not grad:
        return value
    batch = a.shape[0]
    # d/dx ||x - y|| = (x - y) / ||x - y||, taken as 0 at coincident points
    u_ap = np.divide(diff_ap, d_ap[:, None], out=np.zeros_like(diff_ap), where=d_ap[:, None] > 0)
    u_an = np.divide(diff_an, d_an[:, None], out=np.zeros_like(diff_an), where=d_an[:, None] > 0)
    w = active[:, None] / batch
    da = w * (u_ap - u_an)
    dp = -w * u_ap
    dn = w * u_an
    return value, (da, dp, dn)


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.sqrt(np.maximum(d2, 0.0))


def mine_batch_hard(features, labels) -> tuple[np.ndarray, np.ndarray]:
    """Hardest positive (farthest) and hardest negative (closest) per anchor.

    Ties resolve to the smallest index. Every anchor needs at least one other
    same-label sample and at least one different-label sample.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    dist = pairwise_distances(x)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(len(labels), dtype=bool)
    pos_mask = same & not_self
    neg_mask = ~same
    if not np.all(pos_mask.any(axis=1)) or not np.all(neg_mask.any(axis=1)):
        raise InvalidInputError("batch-hard mining needs a positive and a negative for every anchor")
    pos_idx = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    return pos_idx, neg_idx


def loss_batch_hard(features, labels, margin: float = DEFAULT_MARGIN, grad: bool = False):
    """Triplet loss on batch-hard mined triplets; gradient w.r.t. ``features``."""
    x = np.asarray(features, dtype=np.float64)
    pos_idx, neg_idx = mine_batch_hard(x, labels)
    if not grad:
        return loss_triplet(x, x[pos_idx], x[neg_idx], margin)
    value, (da, dp, dn) = loss_triplet(x, x[pos_idx], x[neg_idx], margin, grad=True)
    dx = da.copy()
    np.add.at(dx, pos_idx, dp)
    np.add.at(dx, neg_idx, dn)
    return value, dx


def loss_appearance(logits, labels, triplets, margin: float = DEFAULT_MARGIN, grad: bool = False):
    """Identity cross-entropy plus triplet loss, summed without weights.

    ``triplets`` is an ``(anchor, positive, negative)`` tuple of equal-shape
    arrays.
    """
    anchor, positive, negative = triplets
    if not grad:
        return cross_entropy(logits, labels) + loss_triplet(anchor, positive, negative, margin)
    ce, d_logits = cross_entropy(logits, labels, grad=True)
    tri, (da, dp, dn) = loss_triplet(anchor, positive, negative, margin, grad=True)
    return ce + tri, (d_logits, da, dp, dn)


def loss_vcc(view_loss: float, appearance_loss: float) -> float:
    if not (np.isfinite(view_loss) and np.isfinite(appearance_loss)):
        raise InvalidInputError("loss terms must be finite")
    return float(view_loss) + float(appearance_loss)


def _as_batches(x, name):
    if isinstance(x, np.ndarray):
        return [x] if x.ndim <= 2 else list(x)
    return [np.asarray(b, dtype=np.float64) for b in x]


def loss_recon(originals, reconstructions, grad: bool = False):
    """Sum of squared errors over every view and sample.

    Arguments are either one array or a sequence of arrays (one per view);
    the gradient is returned for the reconstructions only, in the same layout.
    """
    single = isinstance(reconstructions, np.ndarray) and reconstructions.ndim <= 2
    xs = _as_batches(originals, "originals")
    ys = _as_batches(reconstructions, "reconstructions")
    if len(xs) != len(ys):
        raise InvalidInputError(f"{len(xs)} original views vs {len(ys)} reconstructions")
    total = 0.0
    grads = []
    for x, y in zip(xs, ys):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise InvalidInputError(f"shape mismatch: {x.shape} vs {y.shape}")
        diff = y - x
        total += float(np.sum(diff * diff))
        grads.append(2.0 * diff)
    if not grad:
        return total
    return total, (grads[0] if single else grads)


def loss_prediction(predicted, targets, grad: bool = False):
    """Squared error between predicted latents and the other view's latents."""
    return loss_recon(targets, predicted, grad=grad)


def joint_distribution(z1, z2) -> np.ndarray:
    """Symmetrised batch joint of the row-softmaxes of two latent batches."""
    s1 = softmax(np.asarray(z1, dtype=np.float64))
    s2 = softmax(np.asarray(z2, dtype=np.float64))
    p = s1.T @ s2 / s1.shape[0]
    return (p + p.T) / 2.0


def information_terms(z1, z2) -> tuple[float, float, float]:
    """Mutual information and the two marginal entropies (nats)."""
    p = joint_distribution(z1, z2)
    pi = p.sum(axis=1)
    pj = p.sum(axis=0)
    pc = np.maximum(p, _EPS)
    mi = float(np.sum(p * (np.log(pc) - np.log(np.maximum(pi, _EPS))[:, None] - np.log(np.maximum(pj, _EPS))[None, :])))
    h1 = float(-np.sum(pi * np.log(np.maximum(pi, _EPS))))
    h2 = float(-np.sum(pj * np.log(np.maximum(pj, _EPS))))
    return mi, h1, h2


def loss_contrastive(z1, z2, alpha: float = DEFAULT_ALPHA, grad: bool = False):
    """Negative of ``I(Z1; Z2) + alpha * (H(Z1) + H(Z2))`` on the batch joint."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise InvalidInputError(f"latent batches must share shape (m, K): {z1.shape} vs {z2.shape}")
    m, k = z1.shape
    if m < 2:
        raise InvalidInputError("contrastive loss needs a batch of at least 2")
    if alpha < 0:
        raise InvalidInputError("alpha must be non-negative")

    s1 = softmax(z1)
    s2 = softmax(z2)
    q = s1.T @ s2 / m
    p = (q + q.T) / 2.0
    pi = p.sum(axis=1)
    pj = p.sum(axis=0)
    log_p = np.log(np.maximum(p, _EPS))
    log_pi = np.log(np.maximum(pi, _EPS))
    log_pj = np.log(np.maximum(pj, _EPS))
    # -(I + a(H1 + H2)) = -sum p (log p - (a + 1) log pi - (a + 1) log pj)
    value = float(-np.sum(p * (log_p - (alpha + 1.0) * log_pi[:, None] - (alpha + 1.0) * log_pj[None, :])))
    if not grad:
        return value

    # derivative of x log x is log x + 1; clamped entries contribute log(eps) only
    dlog_p = log_p + (p > _EPS)
    dlog_pi = log_pi + (pi > _EPS)
    dlog_pj = log_pj + (pj > _EPS)
    g_p = -dlog_p + (alpha + 1.0) * (dlog_pi[:, None] + dlog_pj[None, :])
    g_q = (g_p + g_p.T) / 2.0
    g_s1 = s2 @ g_q.T / m
    g_s2 = s1 @ g_q / m
    g_z1 = s1 * (g_s1 - np.sum(g_s1 * s1, axis=1, keepdims=True))
    g_z2 = s2 * (g_s2 - np.sum(g_s2 * s2, axis=1, keepdims=True))
    return value, (g_z1, g_z2)
