import numpy as np
import pytest

from miattack.tensor import (as_tensor, batch_cosine, batch_l1, batch_l2, batch_linf,
                             cosine_similarity, l1_norm, l2_norm, linf_norm, sign)


@pytest.mark.parametrize("t, expected", [([2, -2], 4), ([0, 0, 0], 0), ([0.5, -0.5, 1.0], 2.0)])
def test_l1_norm(t, expected):
    assert l1_norm(np.array(t, dtype=float)) == expected


@pytest.mark.parametrize("t, expected", [([3, 4], 5), ([0, 0], 0), ([1, 1, 1, 1], 2)])
def test_l2_norm(t, expected):
    assert l2_norm(np.array(t, dtype=float)) == expected


def test_sign_examples():
    assert sign([0.2, -0.1, 0]).tolist() == [1, -1, 0]
    assert np.all(sign(np.random.default_rng(0).uniform(0.1, 1, 20)) == 1)


def test_sign_idempotent_and_does_not_alias():
    t = np.random.default_rng(1).normal(size=50)
    s = sign(t)
    assert np.array_equal(sign(s), s)
    s[0] = 7
    assert t[0] != 7


@pytest.mark.parametrize("a, b, expected", [([1, 0], [0, 1], 0.0), ([1, 1], [2, 2], 1.0),
                                            ([1, 0], [-1, 0], -1.0)])
def test_cosine_examples(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_is_zero():
    assert cosine_similarity([0, 0], [1, 2]) == 0.0


def test_cosine_shape_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity([1, 2], [1, 2, 3])


def test_as_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    assert as_tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)


def test_batch_helpers_match_single():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 2, 3)), rng.normal(size=(5, 2, 3))
    assert np.allclose(batch_l1(a), [l1_norm(r) for r in a], rtol=0, atol=1e-12)
    assert np.allclose(batch_l2(a), [l2_norm(r) for r in a], rtol=0, atol=1e-12)
    assert np.allclose(batch_linf(a), [linf_norm(r) for r in a], rtol=0, atol=0)
    cos, degenerate = batch_cosine(a, b)
    assert np.allclose(cos, [cosine_similarity(x, y) for x, y in zip(a, b)], atol=1e-12)
    assert not degenerate.any()


def test_batch_cosine_flags_zero_rows():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    cos, degenerate = batch_cosine(a, np.ones_like(a))
    assert degenerate.tolist() == [True, False]
    assert cos[0] == 0.0
