import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mqreid import losses
from mqreid.core import InvalidInputError, make_rng
from mqreid.mlp import ParamBundle, grad_check


def test_cross_entropy_hand_value():
    # uniform logits over 3 classes -> log 3
    assert losses.cross_entropy(np.zeros((2, 3)), [0, 2]) == pytest.approx(math.log(3))
    logits = np.array([[2.0, 0.0, -1.0]])
    expected = -2.0 + math.log(math.exp(2) + 1 + math.exp(-1))
    assert losses.loss_view(logits, [0]) == pytest.approx(expected)


@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(2, 5))
def test_cross_entropy_matches_oracle(seed, n, c):
    rng = make_rng(seed)
    logits = rng.normal(scale=3, size=(n, c))
    labels = rng.integers(0, c, size=n)
    assert losses.cross_entropy(logits, labels) == pytest.approx(
        oracles.cross_entropy(logits.tolist(), labels.tolist()), abs=1e-12
    )


def test_label_validation():
    with pytest.raises(InvalidInputError):
        losses.cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(InvalidInputError):
        losses.cross_entropy(np.zeros((2, 3)), [0.5, 1.0])
    with pytest.raises(InvalidInputError):
        losses.loss_view(np.zeros((2, 4)), [0, 1])


def test_triplet_hand_values():
    a, p, n = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]])
    assert losses.loss_triplet(a, p, n, margin=0.3) == 0.0
    assert losses.loss_triplet(a, p, n, margin=1.5) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        losses.loss_triplet(a, p, n, margin=-0.1)


def test_batch_hard_mining_picks_extremes():
    x = np.array([[0.0], [1.0], [3.0], [10.0], [4.0]])
    labels = np.array([0, 0, 0, 1, 1])
    pos, neg = losses.mine_batch_hard(x, labels)
    assert pos.tolist() == [2, 2, 0, 4, 3]
    assert neg.tolist() == [4, 4, 4, 2, 2]
    with pytest.raises(InvalidInputError):
        losses.mine_batch_hard(x, np.array([0, 0, 0, 0, 1]))


def test_recon_and_prediction_are_sums_of_squares():
    x = np.array([[1.0, 2.0], [0.0, 0.0]])
    y = np.array([[1.5, 2.0], [0.0, -1.0]])
    assert losses.loss_recon(x, y) == pytest.approx(1.25)
    assert losses.loss_recon([x, x], [y, x]) == pytest.approx(1.25)
    assert losses.loss_prediction(y, x) == pytest.approx(1.25)
    with pytest.raises(InvalidInputError):
        losses.loss_recon(x, y[:1])


@given(st.integers(0, 2**32), st.integers(2, 6), st.integers(2, 5), st.sampled_from([0.0, 1.0, 9.0]))
def test_contrastive_matches_oracle(seed, m, k, alpha):
    rng = make_rng(seed)
    z1, z2 = rng.normal(scale=2, size=(m, k)), rng.normal(scale=2, size=(m, k))
    assert losses.loss_contrastive(z1, z2, alpha) == pytest.approx(
        oracles.contrastive(z1.tolist(), z2.tolist(), alpha), rel=1e-10, abs=1e-10
    )


@given(st.integers(0, 2**32))
def test_contrastive_is_symmetric_and_matches_information_terms(seed):
    rng = make_rng(seed)
    z1, z2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert losses.loss_contrastive(z1, z2) == pytest.approx(losses.loss_contrastive(z2, z1), abs=1e-12)
    mi, h1, h2 = losses.information_terms(z1, z2)
    assert losses.loss_contrastive(z1, z2) == pytest.approx(-(mi + 9.0 * (h1 + h2)), abs=1e-10)
    # joint is a symmetric probability table
    p = losses.joint_distribution(z1, z2)
    assert np.allclose(p, p.T) and p.sum() == pytest.approx(1.0)
    # entropy of a K-way marginal is at most log K
    assert h1 <= math.log(4) + 1e-12 and mi >= -1e-12


def test_contrastive_rewards_agreeing_confident_codes():
    # each sample is confidently assigned to its own cluster in both views
    eye = 10.0 * np.eye(4)
    shuffled = 10.0 * np.eye(4)[[1, 2, 3, 0]]
    assert losses.loss_contrastive(eye, eye) < losses.loss_contrastive(eye, shuffled)


def test_contrastive_validation():
    with pytest.raises(InvalidInputError):
        losses.loss_contrastive(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        losses.loss_contrastive(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(InvalidInputError):
        losses.loss_contrastive(np.zeros((2, 3)), np.zeros((2, 3)), alpha=-1)


def _check(fn, arrays, seed):
    return grad_check(fn, ParamBundle(arrays), probe_count=12, seed=seed)


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients(seed):
    rng = make_rng(seed)
    logits, labels = rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)
    def view(b):
        value, g = losses.loss_view(b.arrays[0], labels, grad=True)
        return value, [g]

    assert _check(view, [logits], seed) < 1e-6

    a, p, n = (rng.normal(size=(4, 3)) for _ in range(3))

    def tri(b):
        value, grads = losses.loss_triplet(*b.arrays, margin=2.0, grad=True)
        return value, list(grads)

    assert _check(tri, [a, p, n], seed) < 1e-6

    feats = rng.normal(size=(6, 3))
    ids = np.array([0, 0, 1, 1, 2, 2])

    def hard(b):
        value, g = losses.loss_batch_hard(b.arrays[0], ids, margin=2.0, grad=True)
        return value, [g]

    assert _check(hard, [feats], seed) < 1e-6

    def app(b):
        value, (dl, da, dp, dn) = losses.loss_appearance(b.arrays[0], labels, tuple(b.arrays[1:]), 2.0, grad=True)
        return value, [dl, da, dp, dn]

    assert _check(app, [logits, a, p, n], seed) < 1e-6

    x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

    def rec(b):
        value, g = losses.loss_recon(x, b.arrays[0], grad=True)
        return value, [g]

    assert _check(rec, [y], seed) < 1e-6

    z1, z2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))

    def con(b):
        value, grads = losses.loss_contrastive(*b.arrays, alpha=9.0, grad=True)
        return value, list(grads)

    assert _check(con, [z1, z2], seed) < 1e-5


def test_contrastive_information_extremes():
    k = 4
    onehot = 50.0 * np.eye(k)
    mi, h1, h2 = losses.information_terms(onehot, onehot)
    assert mi == pytest.approx(math.log(k), abs=1e-9)
    assert h1 == pytest.approx(math.log(k), abs=1e-9) and h2 == pytest.approx(math.log(k), abs=1e-9)
    # with identical near-one-hot codes the information equals the marginal entropy
    assert mi == pytest.approx(h1, abs=1e-9)
    mi, h1, h2 = losses.information_terms(np.zeros((6, k)), np.zeros((6, k)))
    assert mi == pytest.approx(0.0, abs=1e-12) and h1 == pytest.approx(math.log(k))
