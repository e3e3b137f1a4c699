import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from artifact import cnum
from artifact.cnum import (KahanSum, clifford_group, clifford_order, derive_rng, distinct_projector,
                           epr_projector, eq_projector, haar_batch, haar_unitary, kron, operator_norm,
                           partial_trace, sym_projector, trace_distance, twirl_average, weingarten_table)

seeds = st.integers(min_value=0, max_value=2 ** 31)


@given(seeds, st.integers(1, 8))
@settings(max_examples=30, deadline=None)
def test_haar_is_unitary(seed, dim):
    u = haar_unitary(dim, derive_rng(seed))
    assert np.allclose(u.conj().T @ u, np.eye(dim), atol=1e-12)


def test_haar_first_moment_matches_weingarten():
    # E|U_00|^2 = 1/d; E|U_00|^4 = 2/(d(d+1))
    d = 3
    us = haar_batch(d, 20000, derive_rng(4))
    x = np.abs(us[:, 0, 0]) ** 2
    assert abs(x.mean() - 1 / d) < 5 * x.std() / np.sqrt(len(x))
    assert abs((x ** 2).mean() - 2 / (d * (d + 1))) < 5 * (x ** 2).std() / np.sqrt(len(x))


def test_derive_rng_is_reproducible_and_chunk_sensitive():
    a = derive_rng(7, 3).standard_normal(4)
    b = derive_rng(7, 3).standard_normal(4)
    c = derive_rng(7, 4).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


@pytest.mark.parametrize("n", [1, 2])
def test_clifford_group_order_and_closure(n):
    cl = clifford_group(n)
    assert len(cl) == clifford_order(n) == {1: 24, 2: 11520}[n]
    e = cl.elements
    assert np.allclose(np.einsum("kji,kjl->kil", e.conj(), e), np.eye(2 ** n)[None], atol=1e-12)


def test_weingarten_small_case():
    # d=3, t=2: Wg(id) = 1/(d^2-1), Wg(swap) = -1/(d(d^2-1))
    perms, wg = weingarten_table(3, 2)
    assert perms == ((0, 1), (1, 0))
    assert np.allclose(wg, [[1 / 8, -1 / 24], [-1 / 24, 1 / 8]])


def test_weingarten_reproduces_haar_second_moment():
    # E[U_00 U_11 conj(U_00 U_11)] from Wg against a direct Monte-Carlo estimate
    d = 2
    perms, wg = weingarten_table(d, 2)
    i, j = (0, 1), (0, 1)
    exact = sum(wg[a, b] * all(i[k] == i[s[k]] for k in range(2)) * all(j[k] == j[u[k]] for k in range(2))
                for a, s in enumerate(perms) for b, u in enumerate(perms))
    us = haar_batch(d, 40000, derive_rng(11))
    x = np.abs(us[:, 0, 0] * us[:, 1, 1]) ** 2
    assert abs(x.mean() - exact) < 5 * x.std() / np.sqrt(len(x))


@pytest.mark.parametrize("n", [1, 2])
def test_twirl_identities(n):
    N = 2 ** n
    cl = clifford_group(n)
    assert np.allclose(twirl_average(cl, eq_projector(N)), 2 / (N + 1) * sym_projector(N, 2), atol=1e-12)
    epr = epr_projector(N)
    mixed = twirl_average(cl, eq_projector(N), "U-conj")
    assert np.allclose(mixed, epr + (np.eye(N * N) - epr) / (N + 1), atol=1e-12)


def test_twirl_rejects_bad_mode_and_shape():
    cl = clifford_group(1)
    with pytest.raises(ValueError):
        twirl_average(cl, eq_projector(2), "bad")
    with pytest.raises(ValueError):
        twirl_average(cl, np.eye(3))


def test_projectors_are_projectors():
    for p in (sym_projector(3, 2), distinct_projector(3, 3), epr_projector(4)):
        assert np.allclose(p @ p, p)
        assert np.allclose(p, p.conj().T)
    assert np.trace(sym_projector(3, 2)).real == pytest.approx(6)
    assert np.trace(distinct_projector(4, 2)).real == pytest.approx(12)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_trace_distance_properties(seed):
    rng = derive_rng(seed)

    def rand_state(d):
        a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        r = a @ a.conj().T
        return r / np.trace(r)

    r, s, q = rand_state(4), rand_state(4), rand_state(4)
    d = trace_distance(r, s)
    assert 0 <= d <= 1 + 1e-12
    assert d == pytest.approx(trace_distance(s, r))
    assert trace_distance(r, q) <= trace_distance(r, s) + trace_distance(s, q) + 1e-12
    assert trace_distance(r, r) == pytest.approx(0, abs=1e-12)


def test_partial_trace_of_product():
    a = np.diag([0.25, 0.75]).astype(complex)
    b = np.diag([0.5, 0.3, 0.2]).astype(complex)
    assert np.allclose(partial_trace(kron(a, b), [2, 3], [0]), a)
    assert np.allclose(partial_trace(kron(a, b), [2, 3], [1]), b)


@given(seeds)
@settings(max_examples=15, deadline=None)
def test_operator_norm_agrees_with_svd(seed):
    rng = derive_rng(seed)
    a = rng.standard_normal((40, 30)) + 1j * rng.standard_normal((40, 30))
    exact = np.linalg.norm(a, 2)
    assert operator_norm(sp.csr_matrix(a)) == pytest.approx(exact, rel=1e-6)
    assert operator_norm(sp.csr_matrix(a), method="lanczos", cross_check=False) == pytest.approx(exact, rel=1e-6)


def test_operator_norm_zero_operator():
    assert operator_norm(sp.csr_matrix((50, 50), dtype=complex), method="lanczos") == 0.0


def test_kahan_sum_beats_naive_accumulation():
    ks = KahanSum((1,), dtype=float)
    naive = np.zeros(1)
    for _ in range(100000):
        ks.add(np.array([0.1]))
        naive += 0.1
    assert abs(ks.total[0] - 10000.0) <= abs(naive[0] - 10000.0)
    assert abs(ks.total[0] - 10000.0) < 1e-9
    assert ks.count == 100000


def test_permutation_and_phase_unitaries_validate():
    with pytest.raises(ValueError):
        cnum.permutation_unitary([0, 0])
    with pytest.raises(ValueError):
        cnum.phase_unitary([0, 3], q=3)
    p = cnum.permutation_unitary([1, 2, 0])
    assert np.allclose(p @ np.eye(3)[:, 0], np.eye(3)[:, 1])
