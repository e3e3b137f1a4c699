import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact import adversary as A
from artifact.cnum import CapacityError, clifford_group, derive_rng, haar_unitary, partial_trace, trace_distance


def _first_gate_marginal(adv):
    """Tr_A of g_1|0><0|g_1^dagger, the B marginal a one-query Haar oracle leaves intact."""
    psi = adv.gates[0][:, 0]
    return partial_trace(np.outer(psi, psi.conj()), [adv.N, adv.dB], [1])


def test_program_validation():
    with pytest.raises(ValueError):
        A.AdversaryProgram(1, 0, [])
    with pytest.raises(ValueError):
        A.AdversaryProgram(1, 0, [np.ones((2, 2))])
    with pytest.raises(ValueError):
        A.AdversaryProgram(1, 0, [np.eye(2)], dirs=[2])
    with pytest.raises(ValueError):
        A.AdversaryProgram(1, 0, [np.eye(3)])


def test_program_json_roundtrip():
    adv = A.AdversaryProgram.seeded(2, 1, 3, seed=4, dirs=[0, 1, 0])
    back = A.AdversaryProgram.from_json(adv.to_json())
    assert back.dirs == adv.dirs
    assert all(np.allclose(a, b) for a, b in zip(adv.gates, back.gates))


def test_unitary_oracle_direct():
    u = haar_unitary(2, derive_rng(9))
    adv = A.AdversaryProgram(1, 1, [np.eye(4, dtype=complex)])
    r = A.run(adv, A.OracleSpec("unitary", unitary=u))
    v = u[:, 0]
    assert np.allclose(r.rho, np.kron(np.outer(v, v.conj()), np.diag([1, 0])))


@pytest.mark.parametrize("n", [1, 2])
def test_one_query_closed_form(n):
    # E_U (U ⊗ I) rho (U ⊗ I)^dagger = I/N ⊗ rho_B; V and PF agree for t = 1
    adv = A.AdversaryProgram.seeded(n, 1, 1, seed=2)
    want = np.kron(np.eye(adv.N) / adv.N, _first_gate_marginal(adv))
    for res in (A.haar_exact(adv), A.run_v(adv), A.run_pf_exact(adv, clifford_group(n))):
        assert np.allclose(res.rho, want, atol=1e-12)


def test_haar_exact_agrees_with_monte_carlo():
    adv = A.AdversaryProgram.seeded(1, 1, 2, seed=5)
    ex = A.haar_exact(adv)
    mc = A.run_haar_mc(adv, 4096, seed=3)
    d, se = A.td(ex, mc)
    assert d <= 5 * se + 1e-3
    assert ex.norm == pytest.approx(1.0)


def test_monte_carlo_reproducible():
    adv = A.AdversaryProgram.seeded(1, 0, 2, seed=5)
    a = A.run_haar_mc(adv, 600, seed=8)
    b = A.run_haar_mc(adv, 600, seed=8)
    assert np.array_equal(a.rho, b.rho)
    assert a.td_se() > 0


def test_pf_exact_equals_purified_pfo():
    adv = A.AdversaryProgram.seeded(2, 1, 2, seed=6)
    assert np.allclose(A.run_pf_exact(adv).rho, A.run_pfo(adv).rho, atol=1e-12)


def test_non_power_of_two_register():
    adv = A.AdversaryProgram.seeded(0, 1, 2, seed=4, N=3)
    assert adv.N == 3
    pf, pfo = A.run(adv, A.OracleSpec("pf-exact")), A.run(adv, A.OracleSpec("pfo"))
    assert np.allclose(pf.rho, pfo.rho, atol=1e-12)
    assert A.run(adv, A.OracleSpec("V")).norm == pytest.approx(1.0)


def test_capacity_and_direction_errors():
    with pytest.raises(CapacityError):
        A.run(A.AdversaryProgram.seeded(1, 1, 3, seed=1), A.OracleSpec("V"))
    with pytest.raises(ValueError):
        A.run(A.AdversaryProgram.seeded(1, 1, 2, seed=1, dirs=[0, 1]), A.OracleSpec("V"))


def test_v_td_to_pf_within_bound():
    adv = A.AdversaryProgram.seeded(2, 1, 2, seed=3)
    d = trace_distance(A.run_pf_exact(adv, clifford_group(2)).rho, A.run_v(adv).rho)
    assert d <= 2 * 2 * 1 / 5


@pytest.mark.parametrize("dirs", [[0, 1], [1, 0]])
def test_strong_chain_equalities_n1(dirs):
    adv = A.AdversaryProgram.seeded(1, 1, 2, seed=5, dirs=dirs)
    ch = dict(A.run_hybrid_chain(adv, "strong", clifford_group(1)))
    assert np.allclose(ch["sPRU"].rho, ch["spfo"].rho, atol=1e-12)
    assert np.allclose(ch["spfo~"].rho, ch["W"].rho, atol=1e-12)
    assert ch["spfo"].norm == pytest.approx(1.0)


def test_symmetric_v_forward_matches_standard_v():
    # with forward queries only and t <= N - 1 the symmetric V acts as V^L, which relabels V
    adv = A.AdversaryProgram.seeded(2, 1, 2, seed=12)
    assert np.allclose(A.run_v_symmetric(adv).rho, A.run_v(adv).rho, atol=1e-12)


def test_design_pairs_enumeration_and_sampling():
    cl = clifford_group(1)
    cs, ds, exact = A.design_pairs(cl, None, 0)
    assert exact and len(cs) == 576
    cs, ds, exact = A.design_pairs(cl, 10, 1)
    assert not exact and len(cs) == 10
    with pytest.raises(CapacityError):
        A.design_pairs(clifford_group(2), None, 0)


@pytest.mark.parametrize("placement", [(1, 1, 1), (1, 2, 1), (2, 1, 1)])
def test_glue_sets_match_closed_form(placement):
    from artifact.relations import restricted_set_check
    t = 2
    closed = A.glue_z_closed_form(placement, t)
    for name, s in A.glue_sets(placement, t).items():
        rep = restricted_set_check(s)
        assert rep.consistent and rep.uniform_growth
        assert [rep.z_table[i] for i in range(t)] == closed[name]


def test_gluing_compress_identity_small():
    adv = A.AdversaryProgram.seeded(3, 1, 2, seed=4)
    s3 = A._glue_state(adv, (1, 1, 1), "rho3")
    s4 = A._glue_state(adv, (1, 1, 1), "rho4")
    assert np.allclose(s3.density(), s4.density(), atol=1e-12)
    assert A.glued_vector_residual(adv, (1, 1, 1), (s3, s4)) < 1e-12
    assert np.trace(s4.density()).real == pytest.approx(1.0)


def test_glued_layers_exact_haar_is_global_haar_for_one_query():
    # one query: both the glued and the global Haar oracle give I/N ⊗ rho_B
    adv = A.AdversaryProgram.seeded(3, 0, 1, seed=7)
    r1 = A.run_glued_state(adv, (1, 1, 1), "rho1")
    r5 = A.run_glued_state(adv, (1, 1, 1), "rho5")
    assert np.allclose(r1.rho, r5.rho, atol=1e-12)


@given(st.integers(0, 10 ** 4))
@settings(max_examples=5, deadline=None)
def test_runs_return_density_matrices(seed):
    adv = A.AdversaryProgram.seeded(1, 1, 2, seed=seed)
    for res in (A.run_v(adv), A.haar_exact(adv), A.run_pfo(adv)):
        assert np.allclose(res.rho, res.rho.conj().T)
        assert res.norm == pytest.approx(1.0)
        assert np.linalg.eigvalsh(res.rho).min() > -1e-12
