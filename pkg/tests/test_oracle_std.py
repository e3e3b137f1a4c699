from itertools import product
from math import factorial, sqrt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import oracle_std as ostd
from artifact.cnum import CapacityError, derive_rng, haar_unitary, permutation_unitary, phase_unitary
from artifact.pstate import PurifiedState, initial_state, inner_product, norm2, reduce_to_adversary
from artifact.relations import Relation, enumerate_relations, image_bits_distinct


def test_pfo_matrix_is_controlled_pf():
    # each (pi, f) block equals P_pi F_f
    N = 3
    reg = ostd.pf_register(N, 2)
    m = ostd.pfo_matrix(N).toarray()
    for p, f in [(0, 0), (3, 5), (reg.n_perms - 1, reg.n_funcs - 1)]:
        i = reg.index(p, f)
        blk = m[i * N:(i + 1) * N, i * N:(i + 1) * N]
        want = permutation_unitary(reg.perms[p]) @ phase_unitary(reg.fvals[f])
        assert np.allclose(blk, want)
    inv = ostd.pfo_matrix(N, inverse=True)
    assert np.allclose((inv @ ostd.pfo_matrix(N)).toarray(), np.eye(m.shape[0]))


def test_pf_states_are_orthonormal():
    rels, rows = ostd.pf_frame(4)
    g = rows.conj() @ rows.T
    assert np.allclose(g, np.eye(len(rels)), atol=1e-12)


def test_pf_dist_projector_is_projector():
    p = ostd.pf_dist_projector(3, 2)
    assert np.allclose(p @ p, p)
    # trace = number of bijective relations of size 2 on [3]: C(3,2) * 3!/1!
    assert np.trace(p).real == pytest.approx(3 * 6)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_v_is_isometry_on_budget(N):
    for size in range(N):
        m, ins, outs = ostd.v_matrix(N, size)
        assert np.allclose((m.conj().T @ m).toarray(), np.eye(len(ins) * N))


def test_v_action_on_empty_record():
    s = initial_state(1, 0, "relation", Relation.empty(2))
    out = ostd.v_query(s)
    # V|0>|{}> = (|0>|{(0,0)}> + |1>|{(0,1)}>)/sqrt 2
    assert set(out.amps) == {Relation(2, ((0, 0),)), Relation(2, ((0, 1),))}
    assert np.allclose(out.amps[Relation(2, ((0, 1),))], [0, 1 / sqrt(2)])


def test_v_refuses_full_records():
    s = initial_state(1, 0, "relation", Relation(2, ((0, 0), (1, 1))))
    with pytest.raises(CapacityError):
        ostd.v_query(s)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=10, deadline=None)
def test_procedural_backend_matches_v(seed):
    rng = derive_rng(seed)
    N = 4
    rels = enumerate_relations(N, 2, "injective")
    s = PurifiedState(2, 0, "relation", {})
    for i in rng.choice(len(rels), 5, replace=False):
        s.amps[rels[i]] = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    a, b = ostd.v_query(s), ostd.v_circuit_backend_query(s)
    assert set(a.amps) == set(b.amps)
    assert all(np.allclose(a.amps[k], b.amps[k], atol=1e-12) for k in a.amps)


def test_free_image_rank_roundtrip():
    r = Relation(8, ((0, 2), (3, 5)))
    for k in range(6):
        assert ostd.free_image_to_rank(r, ostd.rank_to_free_image(r, k)) == k


def test_restricted_oracle_with_all_injective_is_v():
    from artifact.relations import all_injective
    s = initial_state(2, 0, "relation", Relation.empty(4))
    o = ostd.RestrictedOracle(all_injective(4))
    a, b = o.query(s), ostd.v_query(s)
    assert all(np.allclose(a.amps[k], b.amps[k]) for k in a.amps)


def test_restricted_oracle_rejects_inconsistent():
    from artifact.relations import full_size_only
    with pytest.raises(ValueError):
        ostd.RestrictedOracle(full_size_only(3))


def test_restricted_oracle_is_isometry():
    s = initial_state(3, 0, "relation", Relation.empty(8))
    s.amps[Relation.empty(8)] = np.ones(8) / sqrt(8)
    o = ostd.RestrictedOracle(image_bits_distinct(3, [0, 1], t_max=2))
    out = o.query(o.query(s))
    assert norm2(out) == pytest.approx(1.0)


def _uniform_pfo(N: int) -> PurifiedState:
    reg = ostd.pf_register(N, 2)
    n = N.bit_length() - 1
    s = PurifiedState(n, 0, "permfunc", {})
    for i in range(reg.dim):
        v = np.zeros(N, dtype=complex)
        v[0] = 1 / sqrt(reg.dim)
        s.amps[i] = v
    return s


def test_pfo_purification_reproduces_mixture():
    # one query to pfo from |0>: the reduced state is the average of P F |0><0| F P = I/N
    N = 4
    s = ostd.pfo_query(_uniform_pfo(N))
    assert np.allclose(reduce_to_adversary(s), np.eye(N) / N)


def test_compress_relabels_pf_states():
    N = 2
    s = ostd.pfo_query(_uniform_pfo(N))
    c = ostd.compress(ostd.project_pf_dist(s, 1))
    v = ostd.dist_project(ostd.v_query(initial_state(1, 0, "relation", Relation.empty(N))))
    assert set(c.amps) == set(v.amps)
    assert all(np.allclose(c.amps[k], v.amps[k]) for k in c.amps)


def test_apply_on_x_slots_matches_v_after_g():
    N = 4
    g = haar_unitary(N, derive_rng(3))
    s0 = initial_state(2, 0, "relation", Relation.empty(N))
    gs = s0.copy()
    gs.amps = {k: g @ v for k, v in gs.amps.items()}
    lhs = ostd.v_query(gs)
    rhs = ostd.apply_on_x_slots(ostd.v_query(s0), g)
    assert abs(inner_product(lhs, rhs) - 1) < 1e-12


def test_std_oracle_dispatch():
    with pytest.raises(ValueError):
        ostd.StdOracle("nope", 4)
    o = ostd.StdOracle("V-circuit-backend", 4)
    assert o.key_kind == "relation"
