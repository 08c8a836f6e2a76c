import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from knowe.classifier import (
    ClassifierHead,
    InitSpec,
    augment,
    cross_entropy,
    frobenius_block_norm,
    logits,
    normalized_weight_grad,
    predict,
    predict_proba,
    support_loss_grad,
)
from knowe.errors import LabelError, NumericError, ShapeError
from knowe.numerics import finite_diff_grad, rel_error


def _head(rng, d=6, blocks=(3, 2), normalize=True, lam=0.5):
    n = sum(blocks)
    frozen = np.zeros(n, dtype=bool)
    frozen[: blocks[0]] = True
    return ClassifierHead(rng.normal(size=(d, n)), frozen, list(blocks), normalize, lam)


def explicit_update(W, F, y, lam):
    """Per-sample update of each column written out explicitly, averaged over the batch."""
    d, n = W.shape
    out = np.zeros_like(W)
    for x, c in zip(F, y):
        nx = np.linalg.norm(x)
        o = np.array([x @ W[:, i] / (nx * np.linalg.norm(W[:, i])) for i in range(n)]) / lam
        p = np.exp(o - o.max())
        p /= p.sum()
        for i in range(n):
            w = W[:, i]
            nw = np.linalg.norm(w)
            proj = x / (nx * nw) - w * (x @ w) / (nx * nw**3)
            out[:, i] += (p[i] - (i == c)) * proj / lam
    return out / len(F)


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 4), elements=finite), arrays(np.float64, (3, 5), elements=finite))
def test_cosine_logits_bounded(W, F):
    if np.any(np.linalg.norm(W, axis=0) < 1e-3) or np.any(np.linalg.norm(F, axis=1) < 1e-3):
        return
    head = ClassifierHead(W, np.zeros(4, bool), [4], True, 0.5)
    o = logits(head, F)
    assert np.all(np.abs(o) <= 1.0)


def test_logits_single_vector_and_proba_rows():
    rng = np.random.default_rng(0)
    head = _head(rng)
    f = rng.normal(size=6)
    assert logits(head, f).shape == (5,)
    P = predict_proba(head, rng.normal(size=(4, 6)))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=1e-12)


@pytest.mark.parametrize("normalize,lam", [(False, 1.0), (True, 1.0), (True, 0.5)])
def test_cross_entropy_matches_finite_differences(normalize, lam):
    rng = np.random.default_rng(1)
    for _ in range(10):
        W = rng.normal(size=(5, 4))
        F = rng.normal(size=(6, 5))
        y = rng.integers(0, 4, size=6)
        _, dW, dF = cross_entropy(W, F, y, normalize, lam)
        assert rel_error(dW, finite_diff_grad(lambda w: cross_entropy(w, F, y, normalize, lam)[0], W)) < 1e-6
        assert rel_error(dF, finite_diff_grad(lambda f: cross_entropy(W, f, y, normalize, lam)[0], F)) < 1e-6


@pytest.mark.parametrize("lam", [1.0, 0.5])
def test_normalized_gradient_equals_explicit_update(lam):
    rng = np.random.default_rng(2)
    for _ in range(10):
        W = rng.normal(size=(5, 4))
        F = rng.normal(size=(7, 5))
        y = rng.integers(0, 4, size=7)
        _, dW, _ = cross_entropy(W, F, y, True, lam)
        np.testing.assert_allclose(dW, explicit_update(W, F, y, lam), rtol=1e-10, atol=1e-13)


def test_normalized_gradient_orthogonal_to_columns():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(5, 4))
    _, dW, _ = cross_entropy(W, rng.normal(size=(8, 5)), rng.integers(0, 4, 8), True, 0.5)
    np.testing.assert_allclose(np.sum(W * dW, axis=0), 0.0, atol=1e-13)


def test_unit_column_gradient():
    rng = np.random.default_rng(4)
    head = _head(rng)
    F = rng.normal(size=(5, 6))
    y = rng.integers(3, 5, size=5)
    g = normalized_weight_grad(head, F, y)
    Wh = head.W / np.linalg.norm(head.W, axis=0)
    Fh = F / np.linalg.norm(F, axis=1, keepdims=True)
    # with unit columns held free, the cosine logit is a plain dot product
    fd = finite_diff_grad(lambda wh: cross_entropy(wh, Fh, y, False, head.lam)[0], Wh)
    fd[:, head.frozen] = 0.0
    assert rel_error(g, fd) < 1e-6
    assert np.all(g[:, head.frozen] == 0)


def test_frozen_columns_get_exact_zero_gradient():
    rng = np.random.default_rng(5)
    head = _head(rng)
    F = rng.normal(size=(4, 6))
    _, dW = support_loss_grad(head, F, [3, 4, 3, 4], 1)
    assert np.all(dW[:, :3] == 0.0)
    assert np.any(dW[:, 3:] != 0.0)


def test_support_labels_must_lie_in_block():
    head = _head(np.random.default_rng(6))
    with pytest.raises(LabelError):
        support_loss_grad(head, np.ones((1, 6)), [0], 1)
    with pytest.raises(LabelError):
        support_loss_grad(head, np.ones((1, 6)), [0], 0)


def test_augment_appends_and_freezes():
    rng = np.random.default_rng(7)
    head = _head(rng)
    head.frozen[:] = False
    old = head.W.copy()
    new = augment(head, 4, InitSpec(), rng)
    assert new.blocks == [3, 2, 4]
    assert new.n_columns == 9
    assert new.frozen.tolist() == [True] * 5 + [False] * 4
    np.testing.assert_array_equal(new.W[:, :5], old)
    assert new.block_slice(2) == slice(5, 9)


def test_appending_columns_keeps_existing_logits_bitwise():
    rng = np.random.default_rng(8)
    for normalize in (False, True):
        head = _head(rng, d=32, normalize=normalize)
        F = rng.normal(size=(20, 32))
        before = logits(head, F)
        after = logits(augment(head, 7, InitSpec(), rng), F)
        assert np.array_equal(after[:, :5], before)


def test_argmax_ties_go_to_lowest_index():
    W = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    head = ClassifierHead(W, np.zeros(3, bool), [3], True, 0.5)
    assert predict(head, np.array([[1.0, 0.0]])).tolist() == [0]


def test_zero_norm_column_raises():
    head = ClassifierHead(np.zeros((3, 2)), np.zeros(2, bool), [2], True, 0.5)
    with pytest.raises(NumericError):
        logits(head, np.ones(3))
    raw = ClassifierHead(np.zeros((3, 2)), np.zeros(2, bool), [2], False, 1.0)
    assert np.all(logits(raw, np.ones(3)) == 0)


def test_feature_dim_mismatch():
    head = _head(np.random.default_rng(9))
    with pytest.raises(ShapeError):
        logits(head, np.ones(4))


def test_block_norm():
    W = np.zeros((2, 3))
    W[:, 2] = [3.0, 4.0]
    head = ClassifierHead(W, np.zeros(3, bool), [2, 1], False, 1.0)
    assert frobenius_block_norm(head, 1) == 5.0
    assert frobenius_block_norm(head, 0) == 0.0
