from math import comb, factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.relations import (Relation, all_injective, bits_of, count_relations, decode, encode,
                                enumerate_relations, expand_relation_state, full_size_only, growth_product,
                                identity_relations, image_bits_distinct, image_prefix_distinct,
                                restricted_set_check)

N = 4
pairs = st.tuples(st.integers(0, N - 1), st.integers(0, N - 1))
relations = st.lists(pairs, max_size=4).map(lambda ps: Relation(N, tuple(ps)))


@given(relations)
def test_relation_is_canonical(r):
    assert Relation(N, tuple(reversed(r.pairs))) == r
    assert list(r.pairs) == sorted(r.pairs)


@given(relations, pairs)
def test_insert_remove_roundtrip(r, p):
    assert r.insert(p).remove_one(p) == r
    assert len(r.insert(p)) == len(r) + 1


@given(relations)
def test_encode_decode(r):
    assert decode(N, encode(r)) == r


@given(relations)
@settings(max_examples=40)
def test_relation_state_is_unit_and_symmetric(r):
    v = expand_relation_state(r)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    k = len(r)
    if k >= 2:
        t = v.reshape((N * N,) * k)
        assert np.allclose(t, np.swapaxes(t, 0, 1))


def test_injective_and_bijective():
    assert Relation(N, ((0, 1), (1, 2))).is_injective()
    assert not Relation(N, ((0, 1), (1, 1))).is_injective()
    assert not Relation(N, ((0, 1), (0, 2))).is_bijective()
    with pytest.raises(ValueError):
        Relation(N, ((0, 4),))


@pytest.mark.parametrize("size", [0, 1, 2, 3])
def test_enumeration_counts(size):
    # multisets of size k over N^2 symbols; injective: choose k distinct images, multiset of inputs
    assert len(enumerate_relations(N, size, "all")) == comb(N * N + size - 1, size) == count_relations(N, size)
    # injective: a set of k distinct images, each paired with any of N inputs
    inj = comb(N, size) * N ** size
    assert len(enumerate_relations(N, size, "injective")) == inj


def test_bits_of_big_endian():
    assert bits_of(0b101, 3, [0]) == 1
    assert bits_of(0b101, 3, [1]) == 0
    assert bits_of(0b101, 3, [0, 2]) == 0b11


def test_example_prefix_distinct():
    # first example: consistent, uniform, t_max = 2^k
    s = image_prefix_distinct(3, 2)
    assert s.t_max == 4
    rep = restricted_set_check(s)
    assert rep.consistent and rep.uniform_growth
    # Z_t = (2^k - t) * 2^(n-k)
    assert rep.z_table == {t: (4 - t) * 2 for t in range(4)}


def test_example_identity_relations():
    rep = restricted_set_check(identity_relations(N))
    assert rep.consistent and rep.uniform_growth
    assert rep.z_table == {t: 1 for t in range(N)}
    literal = restricted_set_check(identity_relations(N, injective=True))
    assert not literal.consistent and not literal.uniform_growth


def test_example_full_size_only():
    rep = restricted_set_check(full_size_only(N))
    assert not rep.consistent and not rep.uniform_growth
    assert rep.z_table is None


def test_all_injective_growth():
    s = all_injective(N)
    rep = restricted_set_check(s)
    assert rep.z_table == {t: N - t for t in range(N)}
    assert growth_product(s, 3) == pytest.approx(1.0)


@pytest.mark.parametrize("positions", [[0], [1], [0, 1], [1, 2]])
def test_growth_product_closed_form(positions):
    n, t = 3, 2
    s = image_bits_distinct(n, positions, t_max=t)
    k = len(positions)
    z = [(2 ** k - i) * 2 ** (n - k) for i in range(t)]
    want = np.prod(z) * factorial(8 - t) / factorial(8)
    assert growth_product(s, t) == pytest.approx(want)


@given(st.sampled_from([[0], [2], [0, 1]]), st.integers(0, 1))
@settings(max_examples=10, deadline=None)
def test_extensions_count_matches_z(positions, size):
    s = image_bits_distinct(3, positions, t_max=2)
    rep = restricted_set_check(s)
    for r in s.members(size)[:10]:
        for x in range(8):
            assert s.z(x, r) == rep.z_table[size]
            for y in s.extensions(r, x):
                assert s.contains(r.insert((x, y)))
