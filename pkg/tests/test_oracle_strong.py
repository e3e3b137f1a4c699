from math import sqrt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import oracle_strong as so
from artifact.cnum import CapacityError, derive_rng, haar_unitary
from artifact.relations import Relation


@pytest.mark.parametrize("N,t", [(2, 2), (2, 3), (4, 2)])
def test_basis_dimension_closed_form(N, t):
    b = so.truncated_basis(N, t)
    assert b.dim == so.TruncatedBasis.closed_form_dim(N, t)


def test_basis_index_entry_roundtrip():
    b = so.truncated_basis(2, 3)
    for idx in range(0, b.dim, 7):
        a, L, R = b.entry(idx)
        assert b.index(a, L, R) == idx
    with pytest.raises(CapacityError):
        b.index(0, Relation(2, ((0, 0),) * 2), Relation(2, ((0, 0),) * 2))


@pytest.mark.parametrize("N", [2, 4])
def test_partial_isometries(N):
    b = so.truncated_basis(N, 2)
    for op in (so.build_W(b), so.build_VL(b), so.build_VR(b), so.build_symmetric_V(b)):
        x = op.mat
        assert abs(x @ x.conj().T @ x - x).max() < 1e-12


def test_vl_on_empty_record():
    # V^L|x, {}, {}> = sum_y |y, {(x,y)}, {}>/sqrt N
    b = so.truncated_basis(2, 1)
    vl = so.build_VL(b).toarray()
    col = vl[:, b.index(1, Relation.empty(2), Relation.empty(2))]
    for y in range(2):
        assert col[b.index(y, Relation(2, ((1, y),)), Relation.empty(2))] == pytest.approx(1 / sqrt(2))
    assert np.count_nonzero(np.abs(col) > 1e-14) == 2


def test_w_restriction_identities():
    b = so.truncated_basis(4, 3)
    W, V = so.build_W(b), so.build_symmetric_V(b)
    leq = so.pi_leq(b, 2).mat
    a = leq @ (W.mat.conj().T @ V.mat - so.pi_domain_W_closed(b).mat) @ leq
    c = leq @ (W.mat @ V.mat.conj().T - so.pi_image_W_closed(b).mat) @ leq
    assert (abs(a).max() if a.nnz else 0) < 1e-12
    assert (abs(c).max() if c.nnz else 0) < 1e-12


@given(st.integers(0, 10 ** 6))
@settings(max_examples=8, deadline=None)
def test_q_is_unitary_and_sector_preserving(seed):
    b = so.truncated_basis(2, 3)
    c, d = haar_unitary(2, derive_rng(seed, 1)), haar_unitary(2, derive_rng(seed, 2))
    q = so.build_Q(b, c, d)
    v = derive_rng(seed, 3).standard_normal(b.dim) + 0j
    w = q @ v
    assert np.linalg.norm(w) == pytest.approx(np.linalg.norm(v))
    for s in range(4):
        mask = b.sector_of == s
        assert np.linalg.norm(w[mask]) == pytest.approx(np.linalg.norm(v[mask]))
    assert np.allclose(so.build_Q(b, c, d, adjoint=True) @ w, v)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=6, deadline=None)
def test_e_operators_exactly_invariant(seed):
    b = so.truncated_basis(2, 3)
    c, d = haar_unitary(2, derive_rng(seed, 1)), haar_unitary(2, derive_rng(seed, 2))
    q = so.build_Q(b, c, d).toarray()
    EL = so.build_E(b, "L", max_in=2).toarray()
    ER = so.build_E(b, "R", max_in=2).toarray()
    dA = so.a_operator(b, d).toarray()
    cA = so.a_operator(b, c).toarray()
    leq = so.pi_leq(b, 2).toarray()
    assert np.allclose(dA @ EL @ cA @ leq, q @ EL @ q.conj().T @ leq, atol=1e-12)
    assert np.allclose(cA.conj().T @ ER @ dA.conj().T @ leq, q @ ER @ q.conj().T @ leq, atol=1e-12)


def test_two_sided_defect_trivial_for_identity_pair():
    e = np.eye(4, dtype=complex)
    assert so.two_sided_defect(4, 2, e, e) < 1e-10
    assert so.two_sided_defect(4, 2, e, e, inverse=True) < 1e-10


def test_two_sided_defect_below_bound():
    c, d = haar_unitary(4, derive_rng(1)), haar_unitary(4, derive_rng(2))
    t = 2
    assert so.two_sided_defect(4, t, c, d) <= 16 * sqrt(2 * t * (t + 1) / 4)


@pytest.mark.parametrize("N,l,r", [(4, 0, 2), (4, 1, 1), (4, 2, 1), (8, 1, 1)])
def test_epr_commutator_closed_form(N, l, r):
    # rank-one EPR projector against a mask keeping p = (N-k+1)/N of it: ||[P, E]|| = sqrt(p(1-p))
    k = l + r
    p = (N - k + 1) / N
    side = "R" if r else "L"
    assert so.epr_commutator_norm(N, l, r, side) == pytest.approx(sqrt(p * (1 - p)), abs=1e-7)


def test_spfo_matrix_unitary():
    m = so.spfo_matrix(2)
    inv = so.spfo_matrix(2, inverse=True)
    assert np.allclose((inv @ m).toarray(), np.eye(m.shape[0]))


def test_compress_matrix_is_partial_isometry():
    b = so.truncated_basis(2, 2)
    cm = so.compress_matrix(b)
    g = (cm @ cm.conj().T).toarray()
    assert np.allclose(g @ g, g, atol=1e-12)


def test_symmetric_power_routes_agree():
    u = haar_unitary(16, derive_rng(5))
    block = derive_rng(6).standard_normal((so.sym_embedding(4, 2).shape[1], 3)) + 0j
    dense = so._sym_power_dense_cached(np.ascontiguousarray(u).tobytes(), u.shape, 2, 4)
    assert np.allclose(dense @ block, so.sym_power_apply(u, 2, 4, block))


def test_truncated_operator_algebra():
    b = so.truncated_basis(2, 2)
    V = so.build_symmetric_V(b)
    diff = (V - V).norm()
    assert diff == 0.0
    lin = so.a_operator(b, np.eye(2))
    v = np.arange(b.dim, dtype=complex)
    assert np.allclose(lin @ v, v)
