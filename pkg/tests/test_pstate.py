import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.cnum import derive_rng, haar_unitary, partial_trace
from artifact.pstate import (PurifiedState, add_states, apply_key_map, apply_system_unitary, dumps,
                             from_dense, initial_state, inner_product, loads, norm2, reduce_to_adversary,
                             to_dense)
from artifact.relations import Relation


def _random_state(seed: int, n=1, m=1, keys=3) -> PurifiedState:
    rng = derive_rng(seed)
    N = 2 ** n
    s = PurifiedState(n, m, "relation", {})
    for k in range(keys):
        v = rng.standard_normal(N * 2 ** m) + 1j * rng.standard_normal(N * 2 ** m)
        s.amps[Relation(N, ((k % N, k % N),) * (k // N + 1))] = v
    total = np.sqrt(norm2(s))
    s.amps = {k: v / total for k, v in s.amps.items()}
    return s


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_reduced_state_is_density(seed):
    rho = reduce_to_adversary(_random_state(seed))
    assert np.allclose(rho, rho.conj().T)
    assert np.trace(rho).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(rho).min() > -1e-12


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_system_unitary_preserves_norm_and_conjugates(seed):
    s = _random_state(seed)
    u = haar_unitary(s.dim, derive_rng(seed, 1))
    out = apply_system_unitary(s, u)
    assert norm2(out) == pytest.approx(1.0)
    assert np.allclose(reduce_to_adversary(out), u @ reduce_to_adversary(s) @ u.conj().T)


def test_reduced_state_matches_dense_partial_trace():
    s = _random_state(3)
    basis = sorted(s.amps, key=lambda r: r.pairs)
    psi = to_dense(s, basis)
    full = np.outer(psi, psi.conj())
    rho = partial_trace(full, [len(basis), s.dim], [1])
    assert np.allclose(rho, reduce_to_adversary(s))
    back = from_dense(psi, basis, s)
    assert inner_product(back, s) == pytest.approx(1.0)


def test_add_states_and_inner_product():
    s = _random_state(4)
    d = add_states(s, s, 1.0, -1.0)
    assert norm2(d) == pytest.approx(0.0)
    assert inner_product(s, add_states(s, s)) == pytest.approx(2.0)


def test_key_map_moves_amplitude():
    s = initial_state(1, 0, "relation", Relation.empty(2))

    def flip(key, a):
        return [(key.insert((a, 1 - a)), 1 - a, 1.0)]

    out = apply_key_map(s, flip)
    assert list(out.amps) == [Relation(2, ((0, 1),))]
    assert np.allclose(out.amps[Relation(2, ((0, 1),))], [0, 1])


def test_dump_roundtrip_with_override():
    s = initial_state(0, 1, "relation", Relation.empty(3), N=3)
    t = loads(dumps(s))
    assert t.N == 3 and t.m == 1
    assert inner_product(s, t) == pytest.approx(1.0)


def test_errors():
    with pytest.raises(ValueError):
        PurifiedState(1, 0, "bogus")
    s = _random_state(1)
    with pytest.raises(ValueError):
        apply_system_unitary(s, np.eye(3))
