"""Acceptance criteria 1-8; each test records one PASS/FAIL line shown in the terminal summary.

Run standalone with ``python3 tests/test_acceptance.py`` to print the same lines directly.
"""

import sys

import pytest

from artifact import xcli

CFG = xcli.ExperimentConfig()

CRITERIA = {
    1: ("exact identities (1e-10)",
        [xcli.check_pf_purified, xcli.check_compress_pipeline, xcli.check_right_invariance,
         xcli.check_hybrid_equalities, xcli.check_strong_compress, xcli.check_gluing_identities]),
    2: ("partial isometries and norms (1e-10)",
        [xcli.check_v_partial_isometry, xcli.check_truncated_isometries, xcli.check_forward_norms,
         xcli.check_strong_norms]),
    3: ("twirl identities (1e-10)", [xcli.check_twirls]),
    4: ("standard PRU bound reproduction (N=4, t=2)", [xcli.check_standard_bounds]),
    5: ("strong PRU property acceptance",
        [xcli.check_two_sided, xcli.check_twirling_bound, xcli.check_epr_commutators, xcli.check_w_restriction]),
    6: ("restricted framework (N=8, K=4096)", [xcli.check_restricted_examples, xcli.check_restricted_bound]),
    7: ("procedural backend equivalence (1e-12)", [xcli.check_backends]),
    8: ("gluing trend |A2| = 1 -> 2", [xcli.check_gluing]),
}


def evaluate(k: int) -> tuple[bool, str, list]:
    title, funcs = CRITERIA[k]
    checks = [c for f in funcs for c in f(CFG)]
    failed = [c for c in checks if not c.passed]
    worst = max(checks, key=lambda c: (not c.passed, c.measured / c.bound if c.kind == "bound" and c.bound else 0))
    status = "PASS" if not failed else "FAIL"
    detail = (f"{len(checks)} checks" if not failed else
              f"{len(failed)}/{len(checks)} failed, first: {failed[0].name} = {failed[0].measured:.3e}")
    if not failed and worst.kind == "bound":
        detail += f"; tightest: {worst.name} = {worst.measured:.3e} vs {worst.bound:.3e}"
    return not failed, f"criterion {k} {status}: {title} ({detail})", failed


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, criteria_log):
    ok, line, failed = evaluate(k)
    criteria_log[k] = line
    print(line)
    assert ok, [c.record() for c in failed]


if __name__ == "__main__":
    results = [evaluate(k) for k in sorted(CRITERIA)]
    for ok, line, _ in results:
        print(line, flush=True)
    sys.exit(0 if all(ok for ok, _, _ in results) else 1)
