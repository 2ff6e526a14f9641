import numpy as np
import pytest
from hypothesis import given, strategies as st

from syntaxmt.corpus import DepTree, linear_tree
from syntaxmt.parse import (
    IGNORE,
    DecodedParse,
    corpus_uas,
    decode_parse,
    dep_target,
    diagonal_precision,
    diagonal_target,
    uas,
)

from oracles import brute_diagonal_precision, brute_uas


@st.composite
def trees(draw, max_n=10):
    n = draw(st.integers(1, max_n))
    # each word attaches to an earlier word or ROOT, then permute positions
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n + 1)]
    perm = draw(st.permutations(range(1, n + 1)))
    pos = {i: perm[i - 1] for i in range(1, n + 1)}
    heads = [0] * n
    for i, p in enumerate(parents, start=1):
        heads[pos[i] - 1] = 0 if p == 0 else pos[p]
    return DepTree(tuple(heads))


def test_dep_target_example():
    t = dep_target(DepTree((0, 3, 1, 0)), 4)
    assert t.matrix.shape == (5, 5)
    assert t.matrix[0].sum() == 0
    for row, col in zip(range(1, 5), (0, 3, 1, 0)):
        assert t.matrix[row, col] == 1 and t.matrix[row].sum() == 1
    assert t.head_indices() == [IGNORE, 0, 3, 1, 0]
    single = dep_target(DepTree((0,)), 1)
    assert single.matrix[1, 0] == 1 and single.matrix.sum() == 1


def test_dep_target_length_mismatch():
    with pytest.raises(ValueError):
        dep_target(DepTree((0, 1)), 3)


@given(trees())
def test_dep_target_one_hot_count(tree):
    n = len(tree)
    assert dep_target(tree, n).matrix[1:].sum() == n


def test_diagonal_target():
    t = diagonal_target(7)
    ones = list(zip(*np.nonzero(t.matrix)))
    assert ones == [(i, i - 1) for i in range(1, 8)]
    assert list(zip(*np.nonzero(diagonal_target(1).matrix))) == [(1, 0)]
    with pytest.raises(ValueError):
        diagonal_target(0)


@given(st.integers(1, 30))
def test_diagonal_equals_linear_tree(n):
    np.testing.assert_array_equal(diagonal_target(n).matrix, dep_target(linear_tree(n), n).matrix)


@given(trees())
def test_decode_round_trip(tree):
    n = len(tree)
    assert decode_parse(dep_target(tree, n).matrix, n).heads == tree.heads


def test_decode_uniform_ties_to_root():
    assert decode_parse(np.full((6, 6), 1 / 6), 5).heads == (0,) * 5


def test_decode_random_matches_row_scan():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random((7, 7))
        a /= a.sum(axis=1, keepdims=True)
        expected = []
        for i in range(1, 7):
            best = 0
            for j in range(7):
                if a[i, j] > a[i, best]:
                    best = j
            expected.append(best)
        assert list(decode_parse(a, 6).heads) == expected


@given(st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5), st.floats(0.1, 5.0))
def test_decode_monotone_rescaling(row, scale):
    a = np.tile(np.asarray(row), (5, 1))
    b = np.exp(scale * a)  # strictly monotone transform per row
    assert decode_parse(a, 4) == decode_parse(b, 4)


def test_uas_examples():
    assert uas(DepTree((0, 3, 1, 0)), DepTree((0, 3, 1, 0))) == 1.0
    assert uas((0, 3, 1, 0), DecodedParse((0, 3, 1, 3))) == 0.75
    with pytest.raises(ValueError):
        uas((0, 1), (0,))


def test_uas_random_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        g = tuple(int(x) for x in rng.integers(0, n + 1, n))
        p = tuple(int(x) for x in rng.integers(0, n + 1, n))
        assert uas(g, p) == brute_uas(g, p)
        assert uas(g, p) == uas(p, g)
        assert (uas(g, p) == 1.0) == (g == p)


def test_diagonal_precision():
    assert diagonal_precision(DecodedParse(tuple(range(10)))) == 1.0
    wrong = list(range(10))
    wrong[4] = 0
    assert diagonal_precision(DecodedParse(tuple(wrong))) == 0.9
    p = DecodedParse((0, 0, 1, 2))
    assert diagonal_precision(p) == uas(linear_tree(4), p)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        p = tuple(int(x) for x in rng.integers(0, n + 1, n))
        assert diagonal_precision(DecodedParse(p)) == brute_diagonal_precision(p)


def test_decoded_parse_range():
    with pytest.raises(ValueError):
        DecodedParse((0, 5))
    # cycles are allowed in predictions
    assert DecodedParse((2, 1)).heads == (2, 1)


def test_corpus_uas_word_weighted():
    assert corpus_uas([(0,), (0, 1, 2)], [(1 - 1,), (0, 0, 0)]) == 2 / 4
