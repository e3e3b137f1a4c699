"""Command-line harness: verification suites, distinguishing experiments and report merging.

    python3 -m artifact verify --suite identities
    python3 -m artifact distinguish --config exp.cfg
    python3 -m artifact report a.json b.json --format csv

Exit codes: 0 all checks pass, 1 a check failed, 2 usage error, 3 capacity error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from math import factorial, sqrt
from typing import Callable

import numpy as np

from . import __version__
from . import adversary as adv_mod
from . import oracle_std as ostd
from . import oracle_strong as so
from .cnum import (CapacityError, clifford_group, derive_rng, distinct_projector, epr_projector,
                   eq_projector, haar_unitary, kron, sym_projector, trace_distance, twirl_average)
from .pstate import PurifiedState, apply_system_unitary, initial_state, reduce_to_adversary
from .relations import (Relation, all_injective, full_size_only, identity_relations,
                        image_bits_distinct, image_prefix_distinct, restricted_set_check)

SCHEMA = 1
EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_CAPACITY = 0, 1, 2, 3
SUITES = ("identities", "isometries", "twirls", "invariance", "strong", "gluing", "restricted")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    experiment: str = "verify"
    suite: str = "all"
    n: int = 2
    m: int = 1
    t: int = 2
    seed: int = 0
    K: int = 4096
    pairs: int = 256
    oracle_a: str = "V"
    oracle_b: str = "pf-exact"
    design: str = "clifford"
    placement: str = "1,1,1"
    tol_identity: float = 1e-10
    tol_strict: float = 1e-12
    sigmas: float = 3.0
    jobs: int = 1
    out: str = ""
    format: str = "json"

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in ("verify", "distinguish"):
            raise UsageError(f"experiment: unknown value {self.experiment!r}")
        if self.suite != "all" and self.suite not in SUITES:
            raise UsageError(f"suite: unknown value {self.suite!r}")
        if self.n < 0 or self.m < 0 or self.t < 1:
            raise UsageError("n, m must be >= 0 and t >= 1")
        if self.K < 2 or self.pairs < 1 or self.jobs < 1:
            raise UsageError("K must be >= 2; pairs and jobs must be >= 1")
        for name in ("oracle_a", "oracle_b"):
            if getattr(self, name) not in DISTINGUISH_ORACLES:
                raise UsageError(f"{name}: unknown oracle {getattr(self, name)!r}")
        if self.design not in ("clifford", "none"):
            raise UsageError(f"design: unknown value {self.design!r}")
        if self.format not in ("json", "csv"):
            raise UsageError(f"format: unknown value {self.format!r}")
        try:
            p = tuple(int(v) for v in self.placement.split(","))
        except ValueError:
            raise UsageError(f"placement: expected three integers, got {self.placement!r}") from None
        if len(p) != 3 or min(p) < 1:
            raise UsageError(f"placement: expected three positive integers, got {self.placement!r}")
        return self

    @property
    def placement_tuple(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.placement.split(","))

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in data.items():
            if key not in types:
                raise UsageError(f"{key}: unknown configuration field")
            typ = {"int": int, "float": float, "str": str}[types[key]]
            try:
                kw[key] = typ(raw) if typ is not int else int(str(raw), 0)
            except ValueError:
                raise UsageError(f"{key}: cannot parse {raw!r} as {types[key]}") from None
        return cls(**kw).validate()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """key = value lines; '#' comments; an optional [section] header is ignored."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        body = text if text.lstrip().startswith("[") else "[config]\n" + text
        try:
            parser.read_string(body)
        except configparser.Error as e:
            raise UsageError(f"config: {e}") from None
        data = {}
        for sec in parser.sections():
            data.update({k: v.strip().strip('"') for k, v in parser[sec].items()})
        return cls.from_mapping(data)

    def dumps(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in asdict(self).items()) + "\n"


# --------------------------------------------------------------------------
# checks and reports
# --------------------------------------------------------------------------

@dataclass
class Check:
    """One verified quantity.

    kind 'identity': pass iff |measured| <= tolerance.
    kind 'bound':    pass iff measured <= bound + tolerance (tolerance may hold an MC margin).
    kind 'strict':   pass iff measured < bound.
    """

    suite: str
    name: str
    measured: float
    bound: float
    tolerance: float
    kind: str = "bound"
    note: str = ""

    def __post_init__(self):
        self.measured = float(self.measured)
        self.bound = float(self.bound)
        self.tolerance = float(self.tolerance)
        if self.kind == "bound" and self.bound >= 1 and "vacuous" not in self.note:
            self.note = (self.note + "; " if self.note else "") + "vacuous"

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.measured):
            return False
        if self.kind == "identity":
            return abs(self.measured) <= self.tolerance
        if self.kind == "strict":
            return self.measured < self.bound
        return self.measured <= self.bound + self.tolerance

    def record(self) -> dict:
        return {"suite": self.suite, "name": self.name, "measured": self.measured, "bound": self.bound,
                "tolerance": self.tolerance, "kind": self.kind, "pass": self.passed, "note": self.note}


def identity(suite: str, name: str, measured: float, tol: float, note: str = "") -> Check:
    return Check(suite, name, measured, 0.0, tol, "identity", note)


def bound(suite: str, name: str, measured: float, b: float, tol: float = 0.0, note: str = "") -> Check:
    return Check(suite, name, measured, b, tol, "bound", note)


def _maxdiff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


# --------------------------------------------------------------------------
# shared fixtures
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _clifford(n: int):
    return clifford_group(n)


def _program(n: int, m: int, t: int, seed: int, dirs=None, N=None) -> adv_mod.AdversaryProgram:
    return adv_mod.AdversaryProgram.seeded(n, m, t, seed, dirs=dirs, N=N)


def _pstate_run(adv: adv_mod.AdversaryProgram, query: Callable, g: np.ndarray | None = None,
                init: PurifiedState | None = None) -> PurifiedState:
    """Run adv against a map-based oracle; G (on A) is applied before every query."""
    s = init
    ga = None if g is None else kron(g, np.eye(adv.dB))
    for gate in adv.gates:
        s = apply_system_unitary(s, gate)
        if ga is not None:
            s = apply_system_unitary(s, ga)
        s = query(s)
    return s


def _pfo_initial(adv: adv_mod.AdversaryProgram) -> PurifiedState:
    reg = ostd.pf_register(adv.N, 2)
    s = PurifiedState(adv.n, adv.m, "permfunc", {}, adv.N_override)
    v = np.zeros(adv.dim, dtype=complex)
    v[0] = 1 / sqrt(reg.dim)
    s.amps = {i: v.copy() for i in range(reg.dim)}
    return s


def _state_diff(a: PurifiedState, b: PurifiedState) -> float:
    worst = 0.0
    for k in set(a.amps) | set(b.amps):
        va = a.amps.get(k, 0)
        vb = b.amps.get(k, 0)
        worst = max(worst, float(np.max(np.abs(np.asarray(va) - np.asarray(vb)))))
    return worst


@lru_cache(maxsize=None)
def _standard_chain(seed: int):
    adv = _program(2, 1, 2, seed)
    return dict(adv_mod.run_hybrid_chain(adv, "standard", _clifford(2)))


# --------------------------------------------------------------------------
# suite: identities
# --------------------------------------------------------------------------

def check_pf_purified(cfg: ExperimentConfig) -> list[Check]:
    adv = _program(2, cfg.m, 2, cfg.seed)
    a = adv_mod.run_pf_exact(adv)
    b = adv_mod.run_pfo(adv)
    return [identity("identities", "PF direct vs purified pfo (N=4, t=2)", _maxdiff(a.rho, b.rho),
                     cfg.tol_identity)]


def check_compress_pipeline(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for N_n, t in ((1, 2), (2, 2)):
        adv = _program(N_n, cfg.m, t, cfg.seed + 1)
        g = haar_unitary(adv.N, derive_rng(cfg.seed, 99))
        pfo = _pstate_run(adv, ostd.pfo_query, g, _pfo_initial(adv))
        lhs = ostd.compress(ostd.project_pf_dist(pfo, t))
        v0 = initial_state(adv.n, adv.m, "relation", Relation.empty(adv.N))
        rhs = ostd.dist_project(_pstate_run(adv, ostd.v_query, g, v0))
        out.append(identity("identities", f"Compress Pi~dist |pfo G> = Pi^dist |V G> (N={adv.N}, t={t})",
                            _state_diff(lhs, rhs), cfg.tol_identity))
    return out


def check_right_invariance(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for N_n, t in ((1, 2), (2, 2), (2, 3)):
        adv = _program(N_n, cfg.m, t, cfg.seed + 2)
        g = haar_unitary(adv.N, derive_rng(cfg.seed, 98))
        v0 = initial_state(adv.n, adv.m, "relation", Relation.empty(adv.N))
        vg = _pstate_run(adv, ostd.v_query, g, v0)
        rotated = ostd.apply_on_x_slots(_pstate_run(adv, ostd.v_query, None, v0), g)
        out.append(identity("identities", f"|A^(V G)> = G^(x t) on x slots |A^V> (N={adv.N}, t={t})",
                            _state_diff(vg, rotated), cfg.tol_identity))
        out.append(identity("identities", f"reduced state invariant under G (N={adv.N}, t={t})",
                            _maxdiff(reduce_to_adversary(vg), reduce_to_adversary(rotated)), cfg.tol_identity))
    return out


def check_hybrid_equalities(cfg: ExperimentConfig) -> list[Check]:
    ch = _standard_chain(cfg.seed)
    out = [identity("identities", f"hybrid {a} = {b} (N=4, t=2, Clifford)", _maxdiff(ch[a].rho, ch[b].rho),
                    cfg.tol_identity) for a, b in (("rho0", "rho1"), ("rho2", "rho3"), ("rho4", "rho5"))]
    return out


def check_backends(cfg: ExperimentConfig) -> list[Check]:
    """Procedural query circuits against the linear maps on every basis input."""
    out = []
    for N in (2, 4):
        worst = 0.0
        for size in range(N):
            for r in ostd.enumerate_relations(N, size, "injective"):
                for x in range(N):
                    s = PurifiedState(N.bit_length() - 1, 0, "relation", {r: np.eye(N, dtype=complex)[x]})
                    worst = max(worst, _state_diff(ostd.v_query(s), ostd.v_circuit_backend_query(s)))
        out.append(identity("identities", f"procedural V = V on all basis inputs (N={N})", worst,
                            cfg.tol_strict))
    # strong: forward and inverse symmetric V on every basis input inside the domain (|L| + |R| <= N - 1)
    basis = so.truncated_basis(2, 2)
    V = so.build_symmetric_V(basis)
    worst_f = worst_i = abort = resid = 0.0
    for inverse, op in ((False, V), (True, V.H)):
        for base, L, R in basis.pairs(max_sector=1):
            for a in range(2):
                s = PurifiedState(1, 0, "pair", {(L, R): np.eye(2, dtype=complex)[a]})
                res = so.circuit_backend_strong_query(s, inverse=inverse)
                vec = np.zeros(basis.dim, dtype=complex)
                vec[base + a] = 1
                want = op @ vec
                got = so.pair_state_to_vector(res.state, basis).reshape(-1)
                d = _maxdiff(got, want)
                if inverse:
                    worst_i = max(worst_i, d)
                else:
                    worst_f = max(worst_f, d)
                resid = max(resid, res.uncompute_residual)
    out.append(identity("identities", "procedural symmetric V = V (N=2, forward)", worst_f, cfg.tol_strict))
    out.append(identity("identities", "procedural symmetric V^dagger = V^dagger (N=2, inverse)", worst_i,
                        cfg.tol_strict))
    out.append(identity("identities", "procedural uncompute residual (N=2)", resid, cfg.tol_strict))
    return out


def check_strong_compress(cfg: ExperimentConfig) -> list[Check]:
    out = []
    # exact averaging at N=2 over all 24^2 Clifford pairs, forward/inverse mixes
    for dirs in ([0, 1], [1, 0], [0, 0]):
        adv = _program(1, cfg.m, 2, cfg.seed + 3, dirs=dirs)
        w, ws, basis = adv_mod.run_w_twirled(adv, _clifford(1), return_states=True)
        sp_, ss = adv_mod.run_spfo_twirled(adv, _clifford(1), project=True, return_states=True)
        out.append(identity("identities", f"strong Compress: twirled W = Compress spfo~ (N=2, dirs={dirs}, "
                            "all Clifford pairs)", _branch_compress_diff(ws, ss, basis), cfg.tol_identity))
        out.append(identity("identities", f"strong Compress: averaged states agree (N=2, dirs={dirs})",
                            _maxdiff(w.rho, sp_.rho), cfg.tol_identity))
    # N=4: seeded Clifford pairs, branch by branch
    adv = _program(2, cfg.m, 2, cfg.seed + 3, dirs=[0, 1])
    n_pairs = cfg.pairs
    _, ws, basis = adv_mod.run_w_twirled(adv, _clifford(2), pairs=n_pairs, seed=cfg.seed, return_states=True)
    _, ss = adv_mod.run_spfo_twirled(adv, _clifford(2), pairs=n_pairs, seed=cfg.seed, project=True,
                                     return_states=True)
    out.append(identity("identities", f"strong Compress: twirled W = Compress spfo~ (N=4, t=2, "
                        f"{n_pairs} seeded Clifford pairs)", _branch_compress_diff(ws, ss, basis),
                        cfg.tol_identity, note="all 11520^2 pairs infeasible; per-branch identity"))
    return out


def _branch_compress_diff(ws: np.ndarray, ss: np.ndarray, basis) -> float:
    cm = so.compress_matrix(basis)
    P, N, K, dB = ss.shape
    mapped = cm @ ss.reshape(P * N, K * dB)
    return _maxdiff(mapped, ws.reshape(-1, K * dB))


def check_gluing_identities(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for pl in ((1, 1, 1), (1, 2, 1)):
        adv = _program(sum(pl), cfg.m, 2, cfg.seed + 4)
        s3 = adv_mod._glue_state(adv, pl, "rho3")
        s4 = adv_mod._glue_state(adv, pl, "rho4")
        out.append(identity("identities", f"gluing rho3 = rho4 {pl}", _maxdiff(s3.density(), s4.density()),
                            cfg.tol_identity))
        out.append(identity("identities", f"gluing Uncompress|psi4> = |psi3> {pl}",
                            adv_mod.glued_vector_residual(adv, pl, (s3, s4)), cfg.tol_identity))
    return out


# --------------------------------------------------------------------------
# suite: isometries
# --------------------------------------------------------------------------

def check_v_partial_isometry(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for N in (2, 4):
        worst = 0.0
        for size in range(min(3, N)):
            m, _, _ = ostd.v_matrix(N, size)
            g = (m.conj().T @ m).toarray()
            worst = max(worst, _maxdiff(g, np.eye(g.shape[0])))
        out.append(identity("isometries", f"V^dagger V = Pi^domain on |R| <= 2 (N={N})", worst, cfg.tol_identity))
    return out


def check_truncated_isometries(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for N in (2, 4):
        basis = so.truncated_basis(N, 2)
        for name, op in (("W", so.build_W(basis)), ("V^L", so.build_VL(basis)), ("V^R", so.build_VR(basis)),
                         ("symmetric V", so.build_symmetric_V(basis))):
            x = op.mat
            res = abs(x @ x.conj().T @ x - x).max() if x.nnz else 0.0
            out.append(identity("isometries", f"{name} X X^dagger X = X (N={N}, t_max=2)", res, cfg.tol_identity))
    return out


def check_forward_norms(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for n, ts in ((1, (1, 2)), (2, (1, 2, 3, 4))):
        for t in ts:
            r = adv_mod.run_v(_program(n, cfg.m, t, cfg.seed + t))
            out.append(identity("isometries", f"forward-only V run has unit trace (N={2 ** n}, t={t})",
                                r.norm - 1, cfg.tol_identity))
    return out


def check_strong_norms(cfg: ExperimentConfig) -> list[Check]:
    out = []
    n_pairs = cfg.pairs
    for t, dirs in ((1, [1]), (2, [0, 1]), (3, [0, 1, 0])):
        adv = _program(2, 0, t, cfg.seed + 5, dirs=dirs)
        r = adv_mod.run_w_twirled(adv, _clifford(2), pairs=n_pairs, seed=cfg.seed)
        deficit = 1 - float(np.min(r.meta["branch_norms"]))
        out.append(bound("isometries", f"strong run 1 - min branch norm (N=4, t={t}, {n_pairs} pairs)",
                         deficit, 70 * t * t / 4 ** 0.25, 1e-12))
    return out


# --------------------------------------------------------------------------
# suite: twirls
# --------------------------------------------------------------------------

def check_twirls(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for n in (1, 2):
        N = 2 ** n
        cl = _clifford(n)
        std = twirl_average(cl, eq_projector(N), "UU")
        out.append(identity("twirls", f"standard twirl = 2/(N+1) Pi_sym (n={n})",
                            _maxdiff(std, 2 / (N + 1) * sym_projector(N, 2)), cfg.tol_identity))
        mix = twirl_average(cl, eq_projector(N), "U-conj")
        epr = epr_projector(N)
        want = epr + (np.eye(N * N) - epr) / (N + 1)
        out.append(identity("twirls", f"mixed twirl = EPR + (I - EPR)/(N+1) (n={n})", _maxdiff(mix, want),
                            cfg.tol_identity))
    N, t = 4, 2
    avg = twirl_average(_clifford(2), distinct_projector(N, t), "UU")
    lam = float(np.linalg.eigvalsh(avg)[0])
    out.append(bound("twirls", "1 - lambda_min of twirled Pi^dist (n=2, t=2)", 1 - lam, t * (t - 1) / (N + 1),
                     cfg.tol_identity))
    out.append(identity("twirls", "lambda_min of twirled Pi^dist equals 1 - 2/(N+1) (n=2, t=2)",
                        lam - (1 - 2 / (N + 1)), cfg.tol_identity))
    return out


def check_standard_bounds(cfg: ExperimentConfig) -> list[Check]:
    """Standard PRU at N=4, t=2: exact hybrid chain over the Clifford group plus a Haar Monte-Carlo run."""
    N, t = 4, 2
    ch = _standard_chain(cfg.seed)
    step = t * (t - 1) / (N + 1)
    out = [bound("twirls", f"TD(PF(Clifford), V) exact (N={N}, t={t})",
                 trace_distance(ch["rho0"].rho, ch["rho5"].rho), 2 * step, cfg.tol_strict)]
    for a, b in (("rho1", "rho2"), ("rho3", "rho4")):
        one_norm = 2 * trace_distance(ch[a].rho, ch[b].rho)
        out.append(bound("twirls", f"||{a} - {b}||_1 (N={N}, t={t})", one_norm, step, cfg.tol_strict))
    adv = _program(2, 1, 2, cfg.seed)
    mc = adv_mod.run_haar_mc(adv, cfg.K, cfg.seed)
    d, se = adv_mod.td(mc, ch["rho5"])
    out.append(bound("twirls", f"TD(Haar MC K={cfg.K}, V) (N={N}, t={t})", d, 2 * step, cfg.sigmas * se,
                     note=f"se={se:.3g}"))
    return out


# --------------------------------------------------------------------------
# suite: invariance
# --------------------------------------------------------------------------

def _defect_pairs(N: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(C, D) pairs probed per N: every Clifford pair plus Haar pairs at N=2, fewer Haar pairs above."""
    count = {2: 64, 4: 4, 8: 1}[N]
    out = [(haar_unitary(N, derive_rng(seed + 10 + k, N)), haar_unitary(N, derive_rng(seed + 20 + k, N)))
           for k in range(count)]
    if N == 2:
        cs, ds, _ = adv_mod.design_pairs(_clifford(1), None, 0)
        out += list(zip(cs, ds))
    return out


def check_two_sided(cfg: ExperimentConfig) -> list[Check]:
    """Worst case over probed (C, D) of both defects; at N=2 the domain caps t at N - 1 = 1."""
    out = []
    t = 2
    worst = {}
    for N in (2, 4, 8):
        pairs = _defect_pairs(N, cfg.seed)
        vals = [max(so.two_sided_defect(N, t, c, d, tol=1e-7), so.two_sided_defect(N, t, c, d, True, tol=1e-7))
                for c, d in pairs]
        worst[N] = max(vals)
        out.append(bound("invariance", f"two-sided invariance defect, max over {len(pairs)} (C, D) pairs "
                         f"(N={N}, t={min(t, N - 1)})", worst[N], 16 * sqrt(2 * t * (t + 1) / N), 1e-6))
    out.append(Check("invariance", "worst-case defect at N=8 below worst-case defect at N=2", worst[8], worst[2],
                     0.0, "strict"))
    return out


def check_epr_commutators(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for N in (4, 8):
        worst = 0.0
        for l in range(4):
            for r in range(4 - l):
                if l + r == 0:
                    continue
                vals = []
                if r:
                    vals.append(so.epr_commutator_norm(N, l, r, "R"))
                if l:
                    vals.append(so.epr_commutator_norm(N, l, r, "L"))
                v = max(vals)
                out.append(bound("invariance", f"[Pi^xydist, Pi^EPR] norm (N={N}, l={l}, r={r})", v,
                                 sqrt((l + r) / N), 1e-8))
    return out


def check_e_invariance(cfg: ExperimentConfig) -> list[Check]:
    """E^L and E^R are exactly invariant: D E^L (C ⊗ Q) = Q E^L, C^dagger E^R D^dagger ⊗ Q = Q E^R."""
    N = 4
    basis = so.truncated_basis(N, 2)
    c = haar_unitary(N, derive_rng(cfg.seed, 31))
    d = haar_unitary(N, derive_rng(cfg.seed, 32))
    q = so.build_Q(basis, c, d)
    leq = so.pi_leq(basis, 1)
    rng = derive_rng(cfg.seed, 33)
    worst = 0.0
    for side in ("L", "R"):
        E = so.build_E(basis, side, max_in=1)
        for _ in range(3):
            v = leq @ (rng.standard_normal(basis.dim) + 1j * rng.standard_normal(basis.dim))
            if side == "L":
                lhs = so.a_operator(basis, d) @ (E @ (so.a_operator(basis, c, with_q=(c, d)) @ v))
            else:
                lhs = so.a_operator(basis, c.conj().T) @ (E @ (so.a_operator(basis, d.conj().T, with_q=(c, d)) @ v))
            rhs = q @ (E @ v)
            worst = max(worst, _maxdiff(lhs, rhs))
    return [identity("invariance", "E^L and E^R exact two-sided invariance (N=4, random probes)", worst,
                     cfg.tol_identity)]


# --------------------------------------------------------------------------
# suite: strong
# --------------------------------------------------------------------------

def check_w_restriction(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for N in (2, 4):
        tm = 3
        basis = so.truncated_basis(N, tm)
        W, V = so.build_W(basis), so.build_symmetric_V(basis)
        cap = min(tm - 1, N - 1)
        leq = so.pi_leq(basis, cap).mat
        dw = so.pi_domain_W_closed(basis).mat
        iw = so.pi_image_W_closed(basis).mat
        a = leq @ (W.mat.conj().T @ V.mat - dw) @ leq
        b = leq @ (W.mat @ V.mat.conj().T - iw) @ leq
        out.append(identity("strong", f"W^dagger V = Pi^D(W) on sectors <= {cap} (N={N})",
                            abs(a).max() if a.nnz else 0.0, cfg.tol_strict))
        out.append(identity("strong", f"W V^dagger = Pi^I(W) on sectors <= {cap} (N={N})",
                            abs(b).max() if b.nnz else 0.0, cfg.tol_strict))
    return out


def twirling_norm(N: int, t: int, cs: np.ndarray, ds: np.ndarray, image: bool = False) -> float:
    """||E (U ⊗ Q)^dagger (Pi^bij_{<=t} - Pi^{D(W)}_{<=t}) (U ⊗ Q)||_op with U = C (or D^dagger)."""
    basis = so.truncated_basis(N, t)
    proj = so.pi_image_W_closed(basis) if image else so.pi_domain_W_closed(basis)
    diff = (so.pi_bij(basis) - proj).mat
    ops = [so.a_operator(basis, d.conj().T if image else c, with_q=(c, d)).as_linear_operator()
           for c, d in zip(cs, ds)]
    from scipy.sparse.linalg import LinearOperator

    def mv(v):
        v = np.asarray(v).reshape(-1)
        acc = np.zeros(basis.dim, dtype=complex)
        for u in ops:
            acc += u.rmatvec(diff @ u.matvec(v))
        return acc / len(ops)

    lin = LinearOperator((basis.dim, basis.dim), matvec=mv, rmatvec=mv, dtype=complex)
    from .cnum import operator_norm
    return operator_norm(lin, tol=1e-9, method="lanczos")


def check_twirling_bound(cfg: ExperimentConfig) -> list[Check]:
    out = []
    cl = _clifford(1)
    cs, ds, _ = adv_mod.design_pairs(cl, None, 0)
    for image in (False, True):
        v = twirling_norm(2, 1, cs, ds, image)
        out.append(bound("strong", f"twirling bound, {'image' if image else 'domain'} side "
                         "(N=2, t=1, all Clifford pairs)", v, 6 * sqrt(1 / 2), 1e-8))
    cs, ds, _ = adv_mod.design_pairs(_clifford(2), min(cfg.pairs, 64), cfg.seed)
    v = twirling_norm(4, 2, cs, ds)
    out.append(bound("strong", f"twirling bound, domain side (N=4, t=2, {len(cs)} seeded pairs)", v,
                     12 * sqrt(2 / 4), 1e-8, note="Monte-Carlo pairs"))
    return out


def check_strong_chain(cfg: ExperimentConfig) -> list[Check]:
    out = []
    for dirs in ([0, 1], [1, 1]):
        adv = _program(1, cfg.m, 2, cfg.seed + 6, dirs=dirs)
        ch = dict(adv_mod.run_hybrid_chain(adv, "strong", _clifford(1)))
        out.append(identity("strong", f"sPRU(Clifford) = twirled spfo (N=2, dirs={dirs})",
                            _maxdiff(ch["sPRU"].rho, ch["spfo"].rho), cfg.tol_identity))
        out.append(identity("strong", f"twirled spfo~ = twirled W (N=2, dirs={dirs})",
                            _maxdiff(ch["spfo~"].rho, ch["W"].rho), cfg.tol_identity))
        t = 2
        out.append(bound("strong", f"TD(sPRU(Clifford), symmetric V) (N=2, dirs={dirs})",
                         trace_distance(ch["sPRU"].rho, ch["V"].rho), 9 * t * (t + 1) / 2 ** (1 / 8), 1e-12))
    return out


# --------------------------------------------------------------------------
# suite: restricted
# --------------------------------------------------------------------------

def check_restricted_examples(cfg: ExperimentConfig) -> list[Check]:
    out = []
    cases = [("first-k-bits distinct (n=3, k=2)", image_prefix_distinct(3, 2), True, True),
             ("identity relations as multisets (N=4)", identity_relations(4), True, True),
             ("identity relations, injective reading (N=4)", identity_relations(4, injective=True), False, False),
             ("full-size-only (N=4)", full_size_only(4), False, False)]
    for name, s, want_c, want_u in cases:
        rep = restricted_set_check(s)
        ok = rep.consistent == want_c and rep.uniform_growth == want_u
        out.append(identity("restricted", f"verdict matches: {name}", 0.0 if ok else 1.0, 0.0,
                            note=f"consistent={rep.consistent}, uniform={rep.uniform_growth}"))
    return out


def check_restricted_bound(cfg: ExperimentConfig) -> list[Check]:
    out = []
    adv = _program(3, cfg.m, 2, cfg.seed + 7)
    t, N = adv.t, adv.N
    mc = adv_mod.run_haar_mc(adv, cfg.K, cfg.seed)
    for pos in ([0], [1], [0, 1], [1, 2]):
        s = image_bits_distinct(3, pos, t_max=t)
        rep = restricted_set_check(s)
        prod = np.prod([rep.z_table[i] for i in range(t)]) * factorial(N - t) / factorial(N)
        b = 2 * t * (t - 1) / (N + 1) + 2 * (1 - prod)
        r = adv_mod.run_v_restricted(adv, s)
        d, se = adv_mod.td(r, mc)
        out.append(bound("restricted", f"TD(V(S^inj bits {pos}), Haar MC K={cfg.K}) (N=8, t=2)", d, b,
                         cfg.sigmas * se, note=f"se={se:.3g}"))
    return out


# --------------------------------------------------------------------------
# suite: gluing
# --------------------------------------------------------------------------

def check_gluing(cfg: ExperimentConfig, placements=((1, 1, 1), (1, 2, 1))) -> list[Check]:
    out = []
    td15 = {}
    for pl in placements:
        adv = _program(sum(pl), cfg.m, 2, cfg.seed + 4)
        g = adv_mod.run_glued(adv, pl, backend="haar-exact", K=cfg.K, seed=cfg.seed)
        out.append(identity("gluing", f"rho3 = rho4 {pl}", g.tds["rho3-rho4"][0], cfg.tol_identity))
        out.append(identity("gluing", f"Uncompress vector identity {pl}", g.uncompress_residual, cfg.tol_identity))
        for key in ("rho1-rho2", "rho2-rho3", "rho4-rho5", "rho1-rho5"):
            d, se = g.tds[key]
            out.append(bound("gluing", f"TD({key.replace('-', ', ')}) {pl}", d, g.bounds[key], cfg.sigmas * se,
                             note=f"se={se:.3g}"))
        mc = adv_mod.run_glued_state(adv, pl, "rho1", cfg.K, cfg.seed, "haar-mc")
        mc5 = adv_mod.run_glued_state(adv, pl, "rho5", cfg.K, cfg.seed + 1, "haar-mc")
        d, se = adv_mod.td(mc, mc5)
        out.append(bound("gluing", f"TD(rho1, rho5) Monte-Carlo K={cfg.K} {pl}", d, g.bounds["rho1-rho5"],
                         cfg.sigmas * se, note=f"se={se:.3g}"))
        for name, z in g.z_tables.items():
            ok = z["consistent"] and z["uniform_growth"] and z["z"] == z["closed_form"]
            out.append(identity("gluing", f"S_{name} growth counts match closed form {pl}", 0.0 if ok else 1.0,
                                0.0, note=str(z["z"])))
        td15[pl] = g.tds["rho1-rho5"][0]
    if len(td15) == 2:
        a, b = list(td15.values())
        out.append(Check("gluing", "TD(rho1, rho5) decreases as |A2| goes 1 -> 2", b, a, 0.0, "strict"))
    return out


# --------------------------------------------------------------------------
# suite registry
# --------------------------------------------------------------------------

SUITE_CHECKS: dict[str, list[Callable[[ExperimentConfig], list[Check]]]] = {
    "identities": [check_pf_purified, check_compress_pipeline, check_right_invariance, check_hybrid_equalities,
                   check_strong_compress, check_gluing_identities, check_backends],
    "isometries": [check_v_partial_isometry, check_truncated_isometries, check_forward_norms, check_strong_norms],
    "twirls": [check_twirls, check_standard_bounds],
    "invariance": [check_two_sided, check_epr_commutators, check_e_invariance],
    "strong": [check_w_restriction, check_twirling_bound, check_strong_chain],
    "gluing": [check_gluing],
    "restricted": [check_restricted_examples, check_restricted_bound],
}


def run_checks(funcs: list[Callable], cfg: ExperimentConfig) -> list[Check]:
    """Run check groups with up to cfg.jobs threads; results keep the declared order."""
    if cfg.jobs == 1:
        return [c for f in funcs for c in f(cfg)]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
        results = list(ex.map(lambda f: f(cfg), funcs))
    return [c for r in results for c in r]


def _report(cfg: ExperimentConfig, checks: list[Check], started: float) -> dict:
    recs = [c.record() for c in checks]
    return {"schema": SCHEMA, "version": __version__, "config": asdict(cfg), "checks": recs,
            "wall_clock_s": round(time.perf_counter() - started, 3),
            "pass": all(r["pass"] for r in recs)}


def cmd_verify(cfg: ExperimentConfig) -> dict:
    started = time.perf_counter()
    suites = SUITES if cfg.suite == "all" else (cfg.suite,)
    funcs = [f for s in suites for f in SUITE_CHECKS[s]]
    return _report(cfg, run_checks(funcs, cfg), started)


# --------------------------------------------------------------------------
# distinguish
# --------------------------------------------------------------------------

DISTINGUISH_ORACLES = ("V", "pf-exact", "haar-mc", "haar-exact", "pfo", "V-symmetric")


def _distinguish_run(name: str, adv, cfg: ExperimentConfig, salt: int) -> adv_mod.RunResult:
    design = _clifford(adv.n) if cfg.design == "clifford" and adv.N_override is None else None
    if name == "V":
        return adv_mod.run_v(adv)
    if name == "pf-exact":
        return adv_mod.run_pf_exact(adv, design)
    if name == "pfo":
        return adv_mod.run_pfo(adv, design)
    if name == "haar-mc":
        return adv_mod.run_haar_mc(adv, cfg.K, cfg.seed + salt)
    if name == "haar-exact":
        return adv_mod.haar_exact(adv)
    return adv_mod.run_v_symmetric(adv)


def cmd_distinguish(cfg: ExperimentConfig) -> dict:
    started = time.perf_counter()
    if cfg.n > 3 or cfg.t > 2 ** cfg.n:
        raise CapacityError(f"distinguish supports n <= 3 and t <= N (got n={cfg.n}, t={cfg.t})")
    adv = _program(cfg.n, cfg.m, cfg.t, cfg.seed)
    a = _distinguish_run(cfg.oracle_a, adv, cfg, 0)
    b = _distinguish_run(cfg.oracle_b, adv, cfg, 1)
    d, se = adv_mod.td(a, b)
    N, t = adv.N, adv.t
    if cfg.oracle_a == cfg.oracle_b and "mc" not in cfg.oracle_a:
        chk = identity("distinguish", f"TD({cfg.oracle_a}, {cfg.oracle_b})", d, cfg.tol_strict)
    else:
        b_val = 2 * t * (t - 1) / (N + 1)
        chk = bound("distinguish", f"TD({cfg.oracle_a}, {cfg.oracle_b}) (N={N}, t={t})", d, b_val,
                    cfg.sigmas * se, note=f"se={se:.3g}")
    rep = _report(cfg, [chk], started)
    rep["standard_error"] = se
    return rep


# --------------------------------------------------------------------------
# report merging
# --------------------------------------------------------------------------

COLUMNS = ("suite", "name", "measured", "bound", "tolerance", "kind", "pass", "note")


def load_report(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        rep = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}: malformed report ({e.msg})") from None
    if not isinstance(rep, dict) or rep.get("schema") != SCHEMA or not isinstance(rep.get("checks"), list):
        raise UsageError(f"{path}:1: not a schema-{SCHEMA} report")
    for i, c in enumerate(rep["checks"]):
        missing = [k for k in COLUMNS if k not in c]
        if missing:
            raise UsageError(f"{path}: check #{i} is missing {missing}")
    return rep


def cmd_report(paths: list[str]) -> dict:
    reports = [load_report(p) for p in paths]
    rows = sorted((dict((k, c[k]) for k in COLUMNS) for r in reports for c in r["checks"]),
                  key=lambda c: (c["suite"], c["name"]))
    rates = [float(all(c["pass"] for c in r["checks"])) for r in reports]
    return {"schema": SCHEMA, "version": __version__, "inputs": list(paths), "checks": rows,
            "pass_rate": float(np.mean(rates)) if rates else 0.0,
            "pass": all(c["pass"] for c in rows)}


def to_csv(rep: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for c in rep["checks"]:
        w.writerow({k: c[k] for k in COLUMNS})
    return buf.getvalue()


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="cmd")
    helps = {"verify": "run acceptance check suites", "distinguish": "trace distance between two oracles"}
    for name in ("verify", "distinguish"):
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", help="key = value file overriding the defaults")
        s.add_argument("--seed", type=int, help="master seed")
        s.add_argument("--jobs", type=int, help="worker threads")
        s.add_argument("--out", help="write the report here instead of stdout")
        s.add_argument("--format", choices=("json", "csv"))
        if name == "verify":
            s.add_argument("--suite", choices=SUITES + ("all",))
        else:
            s.add_argument("--pair", nargs=2, metavar=("A", "B"),
                           help="oracles, from: " + ", ".join(DISTINGUISH_ORACLES))
            s.add_argument("--K", type=int, help="Monte-Carlo sample count")
            s.add_argument("-n", type=int, help="query register qubits")
            s.add_argument("-t", type=int, help="number of queries")
    r = sub.add_parser("report", help="merge JSON reports into one table")
    r.add_argument("inputs", nargs="+", help="report files written by verify or distinguish")
    r.add_argument("--out")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    return p


def _emit(rep: dict, fmt: str, out: str | None) -> None:
    text = to_csv(rep) if fmt == "csv" else json.dumps(rep, indent=2, default=float) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_PASS if e.code == 0 else EXIT_USAGE
    if args.print_defaults:
        sys.stdout.write(ExperimentConfig().dumps())
        return EXIT_PASS
    if args.cmd is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.cmd == "report":
            rep = cmd_report(args.inputs)
            _emit(rep, args.format, args.out)
            return EXIT_PASS if rep["pass"] else EXIT_FAIL
        data = {}
        if args.config:
            with open(args.config) as fh:
                data = asdict(ExperimentConfig.from_text(fh.read()))
        for key in ("seed", "jobs", "out", "format", "suite", "K"):
            if getattr(args, key, None) is not None:
                data[key] = getattr(args, key)
        if args.cmd == "distinguish":
            data["experiment"] = "distinguish"
            if args.pair:
                data["oracle_a"], data["oracle_b"] = args.pair
            if args.n is not None:
                data["n"] = args.n
            if args.t is not None:
                data["t"] = args.t
        cfg = ExperimentConfig.from_mapping(data)
        rep = cmd_verify(cfg) if args.cmd == "verify" else cmd_distinguish(cfg)
        _emit(rep, cfg.format, cfg.out or None)
        if cfg.out:
            for c in rep["checks"]:
                flag = "PASS" if c["pass"] else "FAIL"
                print(f"{flag} [{c['suite']}] {c['name']}: {c['measured']:.3e} (bound {c['bound']:.3e})")
        return EXIT_PASS if rep["pass"] else EXIT_FAIL
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except FileNotFoundError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
