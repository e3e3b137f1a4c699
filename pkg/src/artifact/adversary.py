"""Adversary programs and runners that return the adversary's reduced state.

A run keeps a batch of purified states in an array of shape (P, N, K, dB):
P indexes the purification basis, N the query register A, K a batch of
classical branches (ensemble members or Monte-Carlo samples) and dB the
workspace B.  The reduced state on A⊗B is sum_{p,k} w_k psi_pk psi_pk^dagger.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import sqrt
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import oracle_strong as so
from .cnum import (CapacityError, KahanSum, UnitaryEnsemble, derive_rng, haar_batch,
                   haar_unitary, is_unitary, trace_distance, weingarten_table)
from .oracle_std import pf_frame, pf_register, v_matrix, RestrictedOracle
from .relations import Relation, RestrictedSet, enumerate_relations, image_bits_distinct

MC_CHUNK = 512
ENUM_CHUNK = 256
MAX_PAIR_BRANCHES = 2_000_000


# --------------------------------------------------------------------------
# programs
# --------------------------------------------------------------------------

@dataclass
class AdversaryProgram:
    n: int
    m: int
    gates: list[np.ndarray]
    dirs: list[int] = field(default_factory=list)
    N_override: int | None = None     # non-power-of-two query register (e.g. N = 3)
    gate_specs: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.gates:
            raise ValueError("an adversary needs at least one query (t >= 1)")
        if not self.dirs:
            self.dirs = [0] * len(self.gates)
        if len(self.dirs) != len(self.gates):
            raise ValueError("one direction bit per query")
        if any(b not in (0, 1) for b in self.dirs):
            raise ValueError("direction bits must be 0 or 1")
        for i, g in enumerate(self.gates):
            if g.shape != (self.dim, self.dim):
                raise ValueError(f"gate {i} has shape {g.shape}, expected {(self.dim, self.dim)}")
            if not is_unitary(g):
                raise ValueError(f"gate {i} is not unitary")

    @property
    def N(self) -> int:
        return self.N_override if self.N_override is not None else 2 ** self.n

    @property
    def dB(self) -> int:
        return 2 ** self.m

    @property
    def dim(self) -> int:
        return self.N * self.dB

    @property
    def t(self) -> int:
        return len(self.gates)

    @property
    def forward_only(self) -> bool:
        return not any(self.dirs)

    @classmethod
    def seeded(cls, n: int, m: int, t: int, seed: int, dirs: Sequence[int] | None = None,
               N: int | None = None) -> "AdversaryProgram":
        dim = (N if N is not None else 2 ** n) * 2 ** m
        specs = [{"seed": int(seed) * 1000 + i} for i in range(t)]
        gates = [_gate_from_spec(s, dim) for s in specs]
        return cls(n, m, gates, list(dirs) if dirs is not None else [], N, specs)

    def to_json(self) -> str:
        specs = self.gate_specs or [None] * self.t
        out = []
        for g, s in zip(self.gates, specs):
            out.append(s if s is not None else {"re": g.real.tolist(), "im": g.imag.tolist()})
        d = {"n": self.n, "m": self.m, "t": self.t, "dirs": self.dirs, "gates": out}
        if self.N_override is not None:
            d["N"] = self.N_override
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "AdversaryProgram":
        d = json.loads(text)
        N = d.get("N")
        dim = (N if N is not None else 2 ** d["n"]) * 2 ** d["m"]
        gates = [_gate_from_spec(s, dim) for s in d["gates"]]
        if len(gates) != d["t"]:
            raise ValueError("gate count does not match t")
        return cls(d["n"], d["m"], gates, list(d["dirs"]), N, list(d["gates"]))


def _gate_from_spec(spec, dim: int) -> np.ndarray:
    if "seed" in spec:
        return haar_unitary(dim, derive_rng(int(spec["seed"]), 0))
    return np.asarray(spec["re"], dtype=float) + 1j * np.asarray(spec["im"], dtype=float)


# --------------------------------------------------------------------------
# oracle selections and results
# --------------------------------------------------------------------------

VARIANTS = ("unitary", "haar-mc", "haar-exact", "pf-exact", "spru-exact", "pfo", "spfo",
            "V", "V-symmetric", "V-restricted", "W-twirled", "spfo-twirled", "glued")


@dataclass
class OracleSpec:
    variant: str
    unitary: np.ndarray | None = None
    K: int = 4096
    seed: int = 0
    design: UnitaryEnsemble | None = None
    rset: RestrictedSet | None = None
    placement: tuple[int, int, int] | None = None
    backend: str = "haar-mc"
    pairs: int | None = None           # sampled (C, D) pairs for strong designs too large to enumerate
    project: bool = False              # spfo-twirled: insert the domain / image projectors

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown oracle variant {self.variant!r}")

    @property
    def supports_inverse(self) -> bool:
        return self.variant in ("unitary", "haar-mc", "spru-exact", "spfo", "V-symmetric",
                                "W-twirled", "spfo-twirled")


@dataclass
class RunResult:
    rho: np.ndarray
    se: np.ndarray | None = None       # per-entry standard error (Monte-Carlo runs)
    samples: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.trace(self.rho).real)

    def td_se(self) -> float:
        """Crude standard error of a trace distance against this state: 0.5 sqrt(d sum se^2)."""
        if self.se is None:
            return 0.0
        return 0.5 * sqrt(self.rho.shape[0] * float(np.sum(self.se ** 2)))


def td(a: RunResult, b: RunResult) -> tuple[float, float]:
    """Trace distance and its combined standard error."""
    return trace_distance(a.rho, b.rho), sqrt(a.td_se() ** 2 + b.td_se() ** 2)


# --------------------------------------------------------------------------
# batched array helpers
# --------------------------------------------------------------------------

def _init(P: int, N: int, K: int, dB: int, amp: complex = 1.0) -> np.ndarray:
    psi = np.zeros((P, N, K, dB), dtype=complex)
    psi[:, 0, :, 0] = amp
    return psi


def _apply_gate(psi: np.ndarray, g: np.ndarray) -> np.ndarray:
    P, N, K, dB = psi.shape
    x = psi.transpose(0, 2, 1, 3).reshape(P * K, N * dB) @ g.T
    return x.reshape(P, K, N, dB).transpose(0, 2, 1, 3)


def _apply_batch_A(psi: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Branch-dependent unitaries (K, N, N) on A."""
    return np.einsum("kmn,pnkb->pmkb", us, psi, optimize=True)


def _apply_sparse(psi: np.ndarray, mat: sp.spmatrix, P_out: int) -> np.ndarray:
    P, N, K, dB = psi.shape
    out = mat @ psi.reshape(P * N, K * dB)
    return np.asarray(out).reshape(P_out, N, K, dB)


def _density(psi: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    P, N, K, dB = psi.shape
    x = psi
    if weights is not None:
        x = psi * np.sqrt(weights)[None, None, :, None]
    X = x.transpose(0, 2, 1, 3).reshape(P * K, N * dB)
    return X.T @ X.conj()


def _per_sample_density(psi: np.ndarray) -> np.ndarray:
    P, N, K, dB = psi.shape
    X = psi.transpose(2, 0, 1, 3).reshape(K, P, N * dB)
    return np.matmul(np.swapaxes(X, 1, 2), X.conj())


class _MCAccumulator:
    """Mean and per-entry standard error with compensated sums."""

    def __init__(self, dim: int):
        self.s1 = KahanSum((dim, dim))
        self.s2 = KahanSum((dim, dim), float)
        self.count = 0

    def add(self, rhos: np.ndarray) -> None:
        self.s1.add(rhos.sum(axis=0))
        self.s2.add((np.abs(rhos) ** 2).sum(axis=0))
        self.count += len(rhos)

    def result(self, meta: dict) -> RunResult:
        K = self.count
        mean = self.s1.total / K
        var = np.maximum(self.s2.total / K - np.abs(mean) ** 2, 0.0) * K / max(K - 1, 1)
        return RunResult(mean, np.sqrt(var / K), K, meta)


def _check_dirs(adv: AdversaryProgram, oracle: OracleSpec) -> None:
    if not adv.forward_only and not oracle.supports_inverse:
        raise ValueError(f"oracle {oracle.variant!r} does not support inverse queries")


# --------------------------------------------------------------------------
# unitary families
# --------------------------------------------------------------------------

def _run_unitary_batch(adv: AdversaryProgram, us: np.ndarray) -> np.ndarray:
    """Final states for a batch of concrete oracles us (K, N, N); returns psi (1, N, K, dB)."""
    psi = _init(1, adv.N, len(us), adv.dB)
    uds = None
    for g, b in zip(adv.gates, adv.dirs):
        psi = _apply_gate(psi, g)
        if b:
            uds = uds if uds is not None else np.conj(np.swapaxes(us, 1, 2))
            psi = _apply_batch_A(psi, uds)
        else:
            psi = _apply_batch_A(psi, us)
    return psi




def _pf_unitaries(N: int, q: int) -> np.ndarray:
    """P_pi F_f for every (pi, f) in register order, shape (N! q^N, N, N)."""
    reg = pf_register(N, q)
    omega = np.exp(2j * np.pi / q)
    out = np.zeros((reg.dim, N, N), dtype=complex)
    P = np.repeat(np.arange(reg.n_perms), reg.n_funcs)
    F = np.tile(np.arange(reg.n_funcs), reg.n_perms)
    for x in range(N):
        out[np.arange(reg.dim), reg.perms[P, x], x] = omega ** reg.fvals[F, x]
    return out


def _ensemble_elements(design: UnitaryEnsemble | None, N: int) -> np.ndarray:
    if design is None:
        return np.eye(N, dtype=complex)[None]
    if not design.enumerable:
        raise ValueError("exact variants need an enumerable design")
    if design.dim != N:
        raise ValueError(f"design acts on dimension {design.dim}, oracle on {N}")
    return design.elements


def run_pf_exact(adv: AdversaryProgram, design: UnitaryEnsemble | None = None, q: int = 2) -> RunResult:
    """E over (pi, f, C) of the pure adversary states for O = P_pi F_f C, by direct enumeration."""
    if not adv.forward_only:
        raise ValueError("PF(D) is a forward-only oracle family")
    pf = _pf_unitaries(adv.N, q)
    cs = _ensemble_elements(design, adv.N)
    acc = KahanSum((adv.dim, adv.dim))
    step = max(1, ENUM_CHUNK * 384 // len(pf))
    for s in range(0, len(cs), step):
        us = np.einsum("pij,kjl->kpil", pf, cs[s:s + step]).reshape(-1, adv.N, adv.N)
        acc.add(_density(_run_unitary_batch(adv, us)))
    return RunResult(acc.total / (len(pf) * len(cs)), meta={"variant": "pf-exact", "q": q})


def run_spru_exact(adv: AdversaryProgram, design: UnitaryEnsemble) -> RunResult:
    """E over (pi, f, C, D) of adversary states for O = D P_pi F_f C (ternary f)."""
    pf = _pf_unitaries(adv.N, 3)
    cs = _ensemble_elements(design, adv.N)
    total = len(pf) * len(cs) ** 2
    if total > MAX_PAIR_BRANCHES * 8:
        raise CapacityError(f"{total} sPRU branches exceed the enumeration cap")
    acc = KahanSum((adv.dim, adv.dim))
    core = np.einsum("pij,kjl->kpil", pf, cs).reshape(-1, adv.N, adv.N)   # (C, pf) major
    for d in cs:
        us = np.einsum("ij,kjl->kil", d, core)
        acc.add(_density(_run_unitary_batch(adv, us)))
    return RunResult(acc.total / total, meta={"variant": "spru-exact"})


def run_haar_mc(adv: AdversaryProgram, K: int, seed: int) -> RunResult:
    """Monte-Carlo average over K Haar oracles; chunk c draws from derive_rng(seed, c)."""
    acc = _MCAccumulator(adv.dim)
    c = 0
    done = 0
    while done < K:
        k = min(MC_CHUNK, K - done)
        us = haar_batch(adv.N, k, derive_rng(seed, c))
        acc.add(_per_sample_density(_run_unitary_batch(adv, us)))
        done += k
        c += 1
    return acc.result({"variant": "haar-mc", "K": K, "seed": seed})


# --------------------------------------------------------------------------
# exact Haar averages by Weingarten contraction
# --------------------------------------------------------------------------

def haar_exact(adv: AdversaryProgram, layers: Sequence[tuple[int, int]] | None = None) -> RunResult:
    """Exact E over independent Haar unitaries, one per layer, of the adversary state.

    ``layers`` lists qubit blocks (start, length); every forward query applies the
    layers in order (first entry first).  The default is one Haar unitary on all of A.
    The average is a contraction of the ket and bra circuits in which the unitary
    occurrences are replaced by Weingarten-weighted index pairings.
    """
    if not adv.forward_only:
        raise ValueError("the Weingarten route is implemented for forward queries only")
    if adv.N_override is not None:
        if layers is not None:
            raise ValueError("layered averages need a qubit register")
        layers = None
    n, t, dB = adv.n, adv.t, adv.dB
    cuts = {0, n}
    if layers is None:
        groups_dims = [adv.N]
        layer_groups = [[0]]
    else:
        for s, ln in layers:
            if s < 0 or ln <= 0 or s + ln > n:
                raise ValueError(f"layer {(s, ln)} does not fit in {n} qubits")
            cuts |= {s, s + ln}
        cuts = sorted(cuts)
        bounds = list(zip(cuts[:-1], cuts[1:]))
        groups_dims = [2 ** (b - a) for a, b in bounds]
        layer_groups = [[i for i, (a, b) in enumerate(bounds) if a >= s and b <= s + ln]
                        for s, ln in layers]
    G = len(groups_dims)
    if 2 * t * (G + 1 + 2 * len(layer_groups)) > 52 * 3:
        raise CapacityError("network too large for the exact Weingarten contraction")

    counter = iter(range(10_000))

    def build(conj: bool):
        ops = []
        occ = [[] for _ in layer_groups]      # occ[l][k] = (out letters, in letters)
        cur = None
        for k, g in enumerate(adv.gates):
            gg = g.conj() if conj else g
            new = [next(counter) for _ in range(G + 1)]
            if k == 0:
                ten = gg[:, 0].reshape(*groups_dims, dB)
                ops.append((ten, new))
            else:
                ten = gg.reshape(*groups_dims, dB, *groups_dims, dB)
                ops.append((ten, new + cur))
            cur = new
            for li, gs in enumerate(layer_groups):
                out = [next(counter) for _ in gs]
                occ[li].append((out, [cur[i] for i in gs]))
                cur = list(cur)
                for j, i in enumerate(gs):
                    cur[i] = out[j]
        return ops, occ, cur

    ket_ops, ket_occ, ket_out = build(False)
    bra_ops, bra_occ, bra_out = build(True)
    letter_dim = {}
    for ops in (ket_ops, bra_ops):
        for ten, lets in ops:
            for d, l in zip(ten.shape, lets):
                letter_dim[l] = d
    for occ in (ket_occ, bra_occ):
        for li, gs in enumerate(layer_groups):
            for out, _ in occ[li]:
                for d, l in zip([groups_dims[i] for i in gs], out):
                    letter_dim[l] = d

    tables = [weingarten_table(int(np.prod([groups_dims[i] for i in gs])), t) for gs in layer_groups]
    D = adv.dim
    rho = np.zeros((D, D), dtype=complex)
    import itertools
    choices = [list(itertools.product(range(len(tb[0])), repeat=2)) for tb in tables]
    for combo in itertools.product(*choices):
        w = 1.0
        deltas = []
        for li, (si, ui) in enumerate(combo):
            perms, wg = tables[li]
            w *= wg[si, ui]
            s, u = perms[si], perms[ui]
            for k in range(t):
                ko, ki = ket_occ[li][k]
                bo, _ = bra_occ[li][s[k]]
                _, bi = bra_occ[li][u[k]]
                deltas += [(a, b) for a, b in zip(ko, bo)] + [(a, b) for a, b in zip(ki, bi)]
        if abs(w) < 1e-300:
            continue
        args = []
        for ten, lets in ket_ops + bra_ops:
            args += [ten, lets]
        for a, b in deltas:
            args += [np.eye(letter_dim[a]), [a, b]]
        # ket output letters, then bra output letters; relabel into a compact range
        out_lets = ket_out + bra_out
        used = sorted({l for i in range(1, len(args), 2) for l in args[i]} | set(out_lets))
        remap = {l: i for i, l in enumerate(used)}
        if len(used) > 52:
            raise CapacityError("network exceeds the einsum label budget")
        args = [a if i % 2 == 0 else [remap[l] for l in a] for i, a in enumerate(args)]
        val = np.einsum(*args, [remap[l] for l in out_lets], optimize="greedy")
        rho += w * val.reshape(D, D)
    return RunResult(rho, meta={"variant": "haar-exact", "layers": layers})


# --------------------------------------------------------------------------
# purified permutation-function oracles
# --------------------------------------------------------------------------

def _pf_tables(N: int, q: int):
    reg = pf_register(N, q)
    omega = np.exp(2j * np.pi / q)
    P = np.repeat(np.arange(reg.n_perms), reg.n_funcs)
    F = np.tile(np.arange(reg.n_funcs), reg.n_perms)
    perm = reg.perms[P]            # (dim, N): pi(x)
    inv = reg.inv_perms[P]         # pi^{-1}(y)
    ph = omega ** reg.fvals[F]     # (dim, N): w^{f(x)}
    return reg, perm, inv, ph


def _pfo_apply(psi: np.ndarray, tables, inverse: bool = False) -> np.ndarray:
    _, perm, inv, ph = tables
    if not inverse:
        # out[p, y] = w^{f(pi^-1 y)} psi[p, pi^-1 y]
        src = inv
        phase = np.take_along_axis(ph, inv, axis=1)
    else:
        # out[p, x] = w^{-f(x)} psi[p, pi(x)]
        src = perm
        phase = ph.conj()
    out = np.take_along_axis(psi, src[:, :, None, None], axis=1)
    return out * phase[:, :, None, None]


def run_pfo(adv: AdversaryProgram, design: UnitaryEnsemble | None = None, q: int = 2,
            dist_projector: bool = False) -> RunResult:
    """Purified pfo·C, exactly averaged over an enumerable design; optionally applies
    the projector onto size-t bijective pf-relation states at the end."""
    if not adv.forward_only:
        raise ValueError("pfo runs are forward-only; use the twirled spfo runner for inverses")
    tables = _pf_tables(adv.N, q)
    reg = tables[0]
    cs = _ensemble_elements(design, adv.N)
    rows = pf_frame(adv.N, adv.t)[1] if dist_projector else None
    acc = KahanSum((adv.dim, adv.dim))
    amp = 1 / sqrt(reg.dim)
    for s in range(0, len(cs), ENUM_CHUNK):
        batch = cs[s:s + ENUM_CHUNK]
        psi = _init(reg.dim, adv.N, len(batch), adv.dB, amp)
        for g in adv.gates:
            psi = _apply_gate(psi, g)
            psi = _apply_batch_A(psi, batch) if design is not None else psi
            psi = _pfo_apply(psi, tables)
        if rows is not None:
            P, N, K, dB = psi.shape
            coeff = rows @ psi.reshape(P, -1)
            psi = coeff.reshape(-1, N, K, dB)
        acc.add(_density(psi))
    return RunResult(acc.total / len(cs), meta={"variant": "pfo", "q": q, "projected": dist_projector})


# --------------------------------------------------------------------------
# path-recording oracles
# --------------------------------------------------------------------------

def run_v(adv: AdversaryProgram, design: UnitaryEnsemble | None = None, dist_projector: bool = False,
          g: np.ndarray | None = None) -> RunResult:
    """Standard V (optionally V·C averaged over a design, or V·G for a fixed G)."""
    if not adv.forward_only:
        raise ValueError("the standard V answers forward queries only")
    N = adv.N
    if adv.t > N:
        raise CapacityError(f"t={adv.t} queries exceed the capacity N={N} of V")
    cs = _ensemble_elements(design, N) if g is None else np.asarray(g)[None]
    mats = [v_matrix(N, i)[0] for i in range(adv.t)]
    acc = KahanSum((adv.dim, adv.dim))
    mask = None
    if dist_projector:
        outs = enumerate_relations(N, adv.t, "injective")
        mask = np.array([len(r.dom) == len(r) for r in outs], dtype=float)
    for s in range(0, len(cs), ENUM_CHUNK):
        batch = cs[s:s + ENUM_CHUNK]
        psi = _init(1, N, len(batch), adv.dB)
        for i, gate in enumerate(adv.gates):
            psi = _apply_gate(psi, gate)
            if design is not None or g is not None:
                psi = _apply_batch_A(psi, batch)
            psi = _apply_sparse(psi, mats[i], mats[i].shape[0] // N)
        if mask is not None:
            psi = psi * mask[:, None, None, None]
        acc.add(_density(psi))
    return RunResult(acc.total / len(cs), meta={"variant": "V", "projected": dist_projector})


def restricted_matrix(oracle: RestrictedOracle, i: int) -> tuple[sp.csr_matrix, list, list]:
    """V(S) from size-i members to size-(i+1) members as a sparse map on (record ⊗ A)."""
    s = oracle.set
    N = s.N
    ins, outs = s.members(i), s.members(i + 1)
    oidx = {r: j for j, r in enumerate(outs)}
    rows, cols, vals = [], [], []
    for j, r in enumerate(ins):
        for x in range(N):
            ys = oracle.extensions(r, x)
            if not ys:
                continue
            c = 1 / sqrt(len(ys))
            for y in ys:
                rows.append(oidx[r.insert((x, y))] * N + y)
                cols.append(j * N + x)
                vals.append(c)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(len(outs) * N, len(ins) * N), dtype=complex)
    return m, ins, outs


def run_v_restricted(adv: AdversaryProgram, rset: RestrictedSet | RestrictedOracle) -> RunResult:
    oracle = rset if isinstance(rset, RestrictedOracle) else RestrictedOracle(rset)
    if not adv.forward_only:
        raise ValueError("V(S) answers forward queries only")
    if adv.t > oracle.set.t_max:
        raise CapacityError(f"t={adv.t} exceeds the set's t_max={oracle.set.t_max}")
    N = adv.N
    psi = _init(1, N, 1, adv.dB)
    for i, gate in enumerate(adv.gates):
        psi = _apply_gate(psi, gate)
        m, _, outs = restricted_matrix(oracle, i)
        psi = _apply_sparse(psi, m, len(outs))
    return RunResult(_density(psi), meta={"variant": "V-restricted", "set": oracle.set.name})


def run_v_symmetric(adv: AdversaryProgram) -> RunResult:
    """Forward and inverse queries to the symmetric V on a truncated basis with t_max = t."""
    N = adv.N
    basis = so.truncated_basis(N, adv.t)
    V = so.build_symmetric_V(basis).mat
    Vd = V.conj().T.tocsr()
    P = basis.dim // N
    psi = _init(P, N, 1, adv.dB)
    psi[1:] = 0
    for gate, b in zip(adv.gates, adv.dirs):
        psi = _apply_gate(psi, gate)
        psi = _apply_sparse(psi, Vd if b else V, P)
    return RunResult(_density(psi), meta={"variant": "V-symmetric"})


# --------------------------------------------------------------------------
# strong twirled runs
# --------------------------------------------------------------------------

def design_pairs(design: UnitaryEnsemble, pairs: int | None, seed: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """(C, D) branches: all pairs when feasible, otherwise ``pairs`` seeded draws."""
    n = len(design)
    if pairs is None:
        if n * n > MAX_PAIR_BRANCHES:
            raise CapacityError(f"{n * n} design pairs exceed the enumeration cap; pass a sample count")
        ci, di = np.divmod(np.arange(n * n), n)
        return design.elements[ci], design.elements[di], True
    rng = derive_rng(seed, 7)
    ci = rng.integers(0, n, size=pairs)
    di = rng.integers(0, n, size=pairs)
    return design.elements[ci], design.elements[di], False


def run_w_twirled(adv: AdversaryProgram, design: UnitaryEnsemble, pairs: int | None = None,
                  seed: int = 0, return_states: bool = False):
    """|A_t^{W,D}>: forward D W C, inverse (D W C)^dagger, one branch per (C, D)."""
    N = adv.N
    basis = so.truncated_basis(N, adv.t)
    W = so.build_W(basis).mat
    Wd = W.conj().T.tocsr()
    cs, ds, exact = design_pairs(design, pairs, seed)
    P = basis.dim // N
    acc = KahanSum((adv.dim, adv.dim))
    norms = []
    states = []
    for s in range(0, len(cs), ENUM_CHUNK):
        c, d = cs[s:s + ENUM_CHUNK], ds[s:s + ENUM_CHUNK]
        cd_, dd_ = np.conj(np.swapaxes(c, 1, 2)), np.conj(np.swapaxes(d, 1, 2))
        psi = _init(P, N, len(c), adv.dB)
        psi[1:] = 0
        for gate, b in zip(adv.gates, adv.dirs):
            psi = _apply_gate(psi, gate)
            if b:
                psi = _apply_batch_A(_apply_sparse(_apply_batch_A(psi, dd_), Wd, P), cd_)
            else:
                psi = _apply_batch_A(_apply_sparse(_apply_batch_A(psi, c), W, P), d)
        acc.add(_density(psi))
        norms.append(np.einsum("pnkb,pnkb->k", psi, psi.conj()).real)
        if return_states:
            states.append(psi)
    res = RunResult(acc.total / len(cs), samples=len(cs),
                    meta={"variant": "W-twirled", "exact": exact, "branch_norms": np.concatenate(norms)})
    if return_states:
        return res, np.concatenate(states, axis=2), basis
    return res


def _strong_projectors(N: int, t_max: int):
    basis = so.truncated_basis(N, t_max)
    cm = so.compress_matrix(basis)
    dw = so.pi_domain_W_closed(basis).mat
    iw = so.pi_image_W_closed(basis).mat
    return cm, dw, iw


def run_spfo_twirled(adv: AdversaryProgram, design: UnitaryEnsemble, pairs: int | None = None,
                     seed: int = 0, project: bool = False, return_states: bool = False):
    """|A_t^{spfo,D}> (or the projected variant with Compress^dagger Pi Compress inserted)."""
    N = adv.N
    tables = _pf_tables(N, 3)
    reg = tables[0]
    cs, ds, exact = design_pairs(design, pairs, seed)
    if project:
        cm, dw, iw = _strong_projectors(N, adv.t)
        cmh = cm.conj().T.tocsr()
    acc = KahanSum((adv.dim, adv.dim))
    norms, states = [], []
    amp = 1 / sqrt(reg.dim)

    def proj(psi, pm):
        P, Nn, K, dB = psi.shape
        flat = psi.reshape(P * Nn, K * dB)
        return np.asarray(cmh @ (pm @ (cm @ flat))).reshape(P, Nn, K, dB)

    for s in range(0, len(cs), ENUM_CHUNK):
        c, d = cs[s:s + ENUM_CHUNK], ds[s:s + ENUM_CHUNK]
        cd_, dd_ = np.conj(np.swapaxes(c, 1, 2)), np.conj(np.swapaxes(d, 1, 2))
        psi = _init(reg.dim, N, len(c), adv.dB, amp)
        for gate, b in zip(adv.gates, adv.dirs):
            psi = _apply_gate(psi, gate)
            if b:
                psi = _apply_batch_A(psi, dd_)
                if project:
                    psi = proj(psi, iw)
                psi = _apply_batch_A(_pfo_apply(psi, tables, inverse=True), cd_)
            else:
                psi = _apply_batch_A(psi, c)
                if project:
                    psi = proj(psi, dw)
                psi = _apply_batch_A(_pfo_apply(psi, tables), d)
        acc.add(_density(psi))
        norms.append(np.einsum("pnkb,pnkb->k", psi, psi.conj()).real)
        if return_states:
            states.append(psi)
    res = RunResult(acc.total / len(cs), samples=len(cs),
                    meta={"variant": "spfo-twirled", "projected": project, "exact": exact,
                          "branch_norms": np.concatenate(norms)})
    if return_states:
        return res, np.concatenate(states, axis=2)
    return res


# --------------------------------------------------------------------------
# glued oracles
# --------------------------------------------------------------------------

def _block_value(a: int, n: int, start: int, length: int) -> int:
    return (a >> (n - start - length)) & ((1 << length) - 1)


def _block_replace(a: int, n: int, start: int, length: int, v: int) -> int:
    shift = n - start - length
    mask = ((1 << length) - 1) << shift
    return (a & ~mask) | (v << shift)


def glue_sets(placement: tuple[int, int, int], t: int) -> dict[str, RestrictedSet]:
    """The three injective restricted sets that make the A2 part of images distinct."""
    a1, a2, a3 = placement
    return {
        "A2A3": image_bits_distinct(a2 + a3, range(a2), t_max=t, name="inj(A2) on A2A3"),
        "A1A2": image_bits_distinct(a1 + a2, range(a1, a1 + a2), t_max=t, name="inj(A2) on A1A2"),
        "A123": image_bits_distinct(a1 + a2 + a3, range(a1, a1 + a2), t_max=t, name="inj(A2) on A"),
    }


def glue_z_closed_form(placement: tuple[int, int, int], t: int) -> dict[str, list[int]]:
    a1, a2, a3 = placement
    return {
        "A2A3": [2 ** (a2 + a3) - i * 2 ** a3 for i in range(t)],
        "A1A2": [2 ** (a1 + a2) - i * 2 ** a1 for i in range(t)],
        "A123": [2 ** (a1 + a2 + a3) - i * 2 ** (a1 + a3) for i in range(t)],
    }


class _Levels:
    """Member lists of a restricted set per size and the V(S) extension tables between them.

    Records are identified by their index in ``codes[i]`` (sorted tuples of x*N + y).
    ``ext_id[i][r, x]`` lists the size-(i+1) successors (padded with -1), ``ext_y`` their
    new outputs and ``ext_c[i][r, x]`` the branch amplitude 1/sqrt(Z_{x,r}).
    """

    def __init__(self, oracle: RestrictedOracle):
        self.oracle = oracle
        self.N = oracle.set.N
        self.codes: list[list[tuple]] = []
        self.index: list[dict] = []
        self._ext: dict = {}

    def level(self, i: int) -> list[tuple]:
        while len(self.codes) <= i:
            k = len(self.codes)
            mem = [tuple(x * self.N + y for x, y in r.pairs) for r in self.oracle.set.members(k)]
            self.codes.append(mem)
            self.index.append({c: j for j, c in enumerate(mem)})
        return self.codes[i]

    def table(self, i: int):
        if i not in self._ext:
            N = self.N
            cur, nxt = self.level(i), self.level(i + 1)
            idx = self.index[i + 1]
            lists = [[self.oracle.extensions(Relation(N, tuple(divmod(v, N) for v in c)), x)
                      for x in range(N)] for c in cur]
            Z = max((len(ys) for row in lists for ys in row), default=0)
            ids = -np.ones((len(cur), N, max(Z, 1)), dtype=np.int64)
            yv = np.zeros_like(ids)
            cs = np.zeros((len(cur), N))
            for r, row in enumerate(lists):
                for x, ys in enumerate(row):
                    if ys:
                        cs[r, x] = 1 / sqrt(len(ys))
                        for j, y in enumerate(ys):
                            ids[r, x, j] = idx[tuple(sorted(cur[r] + (x * N + y,)))]
                            yv[r, x, j] = y
            self._ext[i] = ids, yv, cs
        return self._ext[i]


class _GlueState:
    """Purified states with one record register per restricted oracle.

    ``rids`` (rows, slots) holds record indices, ``data`` (rows, N, K, dB) the amplitudes.
    """

    def __init__(self, n: int, dB: int, K: int, slots: int):
        self.n, self.N = n, 2 ** n
        self.rids = np.zeros((1, slots), dtype=np.int64)
        self.data = np.zeros((1, self.N, K, dB), dtype=complex)
        self.data[0, 0, :, 0] = 1

    def gate(self, g: np.ndarray) -> None:
        R, N, K, dB = self.data.shape
        x = self.data.transpose(0, 2, 1, 3).reshape(R * K, N * dB) @ g.T
        self.data = x.reshape(R, K, N, dB).transpose(0, 2, 1, 3)

    def _view(self, start: int, length: int) -> np.ndarray:
        R, N, K, dB = self.data.shape
        return self.data.reshape(R, 2 ** start, 2 ** length, 2 ** (self.n - start - length), K, dB)

    def block_unitaries(self, us: np.ndarray, start: int, length: int) -> None:
        v = self._view(start, length)
        Z, a, d, b, K, c = v.shape
        w = v.transpose(4, 2, 0, 1, 3, 5).reshape(K, d, -1)
        out = np.matmul(us, w).reshape(K, d, Z, a, b, c).transpose(2, 3, 1, 4, 0, 5)
        self.data = np.ascontiguousarray(out).reshape(self.data.shape)

    def restricted(self, slot: int, levels: _Levels, start: int, length: int) -> None:
        level = self._sizes[slot]       # every row holds records of the same size
        ids, yv, cs = levels.table(level)
        v = self._view(start, length)
        cur = self.rids[:, slot]
        new_ids = ids[cur]                                   # (rows, d, Z)
        k, x, j = np.nonzero(new_ids >= 0)
        y = yv[cur[k], x, j]
        out = np.zeros((len(k),) + v.shape[1:], dtype=complex)
        out[np.arange(len(k)), :, y] = cs[cur[k], x][:, None, None, None, None] * v[k, :, x]
        rids = self.rids[k].copy()
        rids[:, slot] = new_ids[k, x, j]
        self._sizes[slot] += 1
        self._merge(rids, out.reshape((len(k),) + self.data.shape[1:]))

    def _merge(self, rids: np.ndarray, data: np.ndarray) -> None:
        dims = tuple(int(m) + 1 for m in rids.max(axis=0)) if len(rids) else (1,) * rids.shape[1]
        flat = np.ravel_multi_index(tuple(rids.T), dims) if rids.shape[1] else np.zeros(len(rids), np.int64)
        ucode, inv = np.unique(flat, return_inverse=True)
        uniq = np.stack(np.unravel_index(ucode, dims), axis=1).astype(np.int64) if rids.shape[1] \
            else np.zeros((len(ucode), 0), np.int64)
        inv = inv.reshape(-1)
        summ = sp.csr_matrix((np.ones(len(inv)), (inv, np.arange(len(inv)))), shape=(len(uniq), len(inv)))
        self.rids = uniq
        self.data = np.asarray(summ @ data.reshape(len(inv), -1)).reshape((len(uniq),) + data.shape[1:])

    def density(self, per_sample: bool = False) -> np.ndarray:
        R, N, K, dB = self.data.shape
        if per_sample:
            X = self.data.transpose(2, 0, 1, 3).reshape(K, R, N * dB)
            return np.matmul(np.swapaxes(X, 1, 2), X.conj())
        X = self.data.transpose(0, 2, 1, 3).reshape(R * K, N * dB)
        return X.T @ X.conj()


def _glue_layers(placement):
    a1, a2, a3 = placement
    return [(a1, a2 + a3), (0, a1 + a2)]    # U_{A2A3} acts first, then U_{A1A2}


@dataclass
class GluedResult:
    rhos: dict[str, RunResult]
    tds: dict[str, tuple[float, float]]
    bounds: dict[str, float]
    z_tables: dict[str, dict]
    uncompress_residual: float


def _check_glue(adv: AdversaryProgram, placement) -> None:
    n = sum(placement)
    if n != adv.n or adv.N_override is not None:
        raise ValueError(f"placement covers {n} qubits, adversary has {adv.n}")
    if min(placement) < 1:
        raise ValueError("every block of the placement needs at least one qubit")
    if n > 4:
        raise CapacityError("glued runs are capped at n <= 4")
    if not adv.forward_only:
        raise ValueError("glued oracles answer forward queries only")


def run_glued_state(adv: AdversaryProgram, placement: tuple[int, int, int], stage: str,
                    K: int = 4096, seed: int = 0, backend: str = "haar-exact") -> RunResult:
    """One of the five gluing hybrids.

    rho1: Haar U_{A1A2} after Haar U_{A2A3};  rho2: Haar U_{A1A2} after V(S_{A2A3});
    rho3: V(S_{A1A2}) after V(S_{A2A3});  rho4: V(S_A);  rho5: Haar U_A.
    Haar ends use ``backend`` ('haar-exact' or 'haar-mc'); rho2 is Monte-Carlo.
    """
    _check_glue(adv, placement)
    a1, a2, a3 = placement
    n, dB = adv.n, adv.dB
    if stage in ("rho1", "rho5"):
        lay = _glue_layers(placement) if stage == "rho1" else [(0, n)]
        if backend == "haar-exact":
            return haar_exact(adv, lay)
        if backend != "haar-mc":
            raise ValueError(f"unknown Haar backend {backend!r}")
    elif stage == "rho2":
        lev = _Levels(RestrictedOracle(glue_sets(placement, adv.t)["A2A3"]))
    elif stage in ("rho3", "rho4"):
        st = _glue_state(adv, placement, stage)
        return RunResult(st.density(), meta={"variant": "glued", "stage": stage})
    else:
        raise ValueError(f"unknown gluing stage {stage!r}")
    acc = _MCAccumulator(adv.dim)
    done, c = 0, 0
    while done < K:
        k = min(MC_CHUNK, K - done)
        rng = derive_rng(seed + (stage == "rho2"), c)
        if stage == "rho2":
            st = _new_state(n, dB, k, 1)
            us = haar_batch(2 ** (a1 + a2), k, rng)
            for g in adv.gates:
                st.gate(g)
                st.restricted(0, lev, a1, a2 + a3)
                st.block_unitaries(us, 0, a1 + a2)
        else:
            st = _new_state(n, dB, k, 0)
            us = [haar_batch(2 ** ln, k, rng) for _, ln in lay]
            for g in adv.gates:
                st.gate(g)
                for (s0, ln), u in zip(lay, us):
                    st.block_unitaries(u, s0, ln)
        acc.add(st.density(per_sample=True))
        done += k
        c += 1
    return acc.result({"variant": "glued", "stage": stage, "backend": "haar-mc", "K": K})


def _new_state(n: int, dB: int, K: int, slots: int) -> _GlueState:
    st = _GlueState(n, dB, K, slots)
    st._sizes = [0] * slots
    return st


def _glue_state(adv: AdversaryProgram, placement, stage: str) -> _GlueState:
    a1, a2, a3 = placement
    sets = glue_sets(placement, adv.t)
    if stage == "rho3":
        l23, l12 = _Levels(RestrictedOracle(sets["A2A3"])), _Levels(RestrictedOracle(sets["A1A2"]))
        st = _new_state(adv.n, adv.dB, 1, 2)
        for g in adv.gates:
            st.gate(g)
            st.restricted(0, l23, a1, a2 + a3)
            st.restricted(1, l12, 0, a1 + a2)
        st.levels = (l23, l12)
    else:
        lev = _Levels(RestrictedOracle(sets["A123"]))
        st = _new_state(adv.n, adv.dB, 1, 1)
        for g in adv.gates:
            st.gate(g)
            st.restricted(0, lev, 0, adv.n)
        st.levels = (lev,)
    return st


def uncompress(st4: _GlueState, placement: tuple[int, int, int], l23: _Levels, l12: _Levels) -> _GlueState:
    """Map the single-record purification to the two-record one.

    T = {(x_i, y_i)} goes to a uniform sum over distinct z_i in [2^|A2|] of
    |{(x_i[A2 A3], z_i || y_i[A3])}> |{(x_i[A1] || z_i, y_i[A1 A2])}>.
    """
    from itertools import permutations as perms_of
    a1, a2, a3 = placement
    n = a1 + a2 + a3
    N, N23, N12 = 2 ** n, 2 ** (a2 + a3), 2 ** (a1 + a2)
    t = st4._sizes[0]
    codes = st4.levels[0].level(t)
    l23.level(t), l12.level(t)
    zs = list(perms_of(range(2 ** a2), t))
    c = 1 / sqrt(len(zs))
    rows, targets = [], []
    for row, rid in enumerate(st4.rids[:, 0]):
        pairs = [divmod(v, N) for v in codes[rid]]
        for z in zs:
            R, S = [], []
            for (x, y), zi in zip(pairs, z):
                x1, x23 = _block_value(x, n, 0, a1), _block_value(x, n, a1, a2 + a3)
                y12, y3 = _block_value(y, n, 0, a1 + a2), _block_value(y, n, a1 + a2, a3)
                R.append(x23 * N23 + ((zi << a3) | y3))
                S.append(((x1 << a2) | zi) * N12 + y12)
            rows.append(row)
            targets.append((l23.index[t][tuple(sorted(R))], l12.index[t][tuple(sorted(S))]))
    out = _new_state(n, st4.data.shape[-1], st4.data.shape[2], 2)
    out._sizes = [t, t]
    out._merge(np.array(targets, dtype=np.int64), c * st4.data[np.array(rows)])
    return out


def glued_vector_residual(adv: AdversaryProgram, placement: tuple[int, int, int],
                          states: tuple[_GlueState, _GlueState] | None = None) -> float:
    """max |Uncompress|A^{V(S_A)}> - |A^{V(S_A1A2) V(S_A2A3)}>| over all entries."""
    if states is None:
        states = _glue_state(adv, placement, "rho3"), _glue_state(adv, placement, "rho4")
    s3, s4 = states
    u = uncompress(s4, placement, *s3.levels)
    diff = _new_state(adv.n, adv.dB, 1, 2)
    diff._merge(np.concatenate([s3.rids, u.rids]), np.concatenate([s3.data, -u.data]))
    return float(np.max(np.abs(diff.data)))


def run_glued(adv: AdversaryProgram, placement: tuple[int, int, int], backend: str = "haar-exact",
              K: int = 4096, seed: int = 0) -> GluedResult:
    from .relations import restricted_set_check
    _check_glue(adv, placement)
    t = adv.t
    a1, a2, a3 = placement
    st3, st4 = _glue_state(adv, placement, "rho3"), _glue_state(adv, placement, "rho4")
    rhos = {s: run_glued_state(adv, placement, s, K, seed, backend) for s in ("rho1", "rho2", "rho5")}
    rhos["rho3"] = RunResult(st3.density(), meta={"variant": "glued", "stage": "rho3"})
    rhos["rho4"] = RunResult(st4.density(), meta={"variant": "glued", "stage": "rho4"})
    tds = {f"{a}-{b}": td(rhos[a], rhos[b]) for a, b in
           [("rho1", "rho2"), ("rho2", "rho3"), ("rho3", "rho4"), ("rho4", "rho5"), ("rho1", "rho5")]}
    bounds = {"rho1-rho2": 3 * t * (t - 1) / 2 ** a2, "rho2-rho3": 3 * t * (t - 1) / 2 ** a2,
              "rho4-rho5": 3 * t * (t - 1) / 2 ** a2, "rho1-rho5": min(1.0, 9 * t * (t - 1) / 2 ** a2)}
    z = {}
    closed = glue_z_closed_form(placement, t)
    for name, s in glue_sets(placement, t).items():
        rep = restricted_set_check(s)
        z[name] = {"consistent": rep.consistent, "uniform_growth": rep.uniform_growth,
                   "z": [rep.z_table[i] for i in range(t)] if rep.z_table else None,
                   "closed_form": closed[name]}
    return GluedResult(rhos, tds, bounds, z, glued_vector_residual(adv, placement, (st3, st4)))


# --------------------------------------------------------------------------
# dispatcher and hybrid chains
# --------------------------------------------------------------------------

def run(adv: AdversaryProgram, oracle: OracleSpec) -> RunResult:
    _check_dirs(adv, oracle)
    v = oracle.variant
    if v == "unitary":
        u = np.asarray(oracle.unitary, dtype=complex)
        if u.shape != (adv.N, adv.N):
            raise ValueError("unitary does not match the query register")
        return RunResult(_density(_run_unitary_batch(adv, u[None])), meta={"variant": v})
    if v == "haar-mc":
        return run_haar_mc(adv, oracle.K, oracle.seed)
    if v == "haar-exact":
        return haar_exact(adv)
    if v == "pf-exact":
        return run_pf_exact(adv, oracle.design)
    if v == "spru-exact":
        return run_spru_exact(adv, oracle.design)
    if v == "pfo":
        return run_pfo(adv, oracle.design)
    if v == "spfo":
        if oracle.design is None:
            return run_spfo_twirled(adv, _trivial_design(adv.N))
        return run_spfo_twirled(adv, oracle.design, oracle.pairs, oracle.seed)
    if v == "V":
        return run_v(adv, oracle.design)
    if v == "V-symmetric":
        return run_v_symmetric(adv)
    if v == "V-restricted":
        if oracle.rset is None:
            raise ValueError("V-restricted needs a restricted set")
        return run_v_restricted(adv, oracle.rset)
    if v == "W-twirled":
        return run_w_twirled(adv, oracle.design, oracle.pairs, oracle.seed)
    if v == "spfo-twirled":
        return run_spfo_twirled(adv, oracle.design, oracle.pairs, oracle.seed, oracle.project)
    if v == "glued":
        if oracle.placement is None:
            raise ValueError("glued oracle needs a placement")
        return run_glued_state(adv, oracle.placement, "rho1", oracle.K, oracle.seed, oracle.backend)
    raise ValueError(v)


def _trivial_design(N: int) -> UnitaryEnsemble:
    from .cnum import enumerated_ensemble
    return enumerated_ensemble([np.eye(N, dtype=complex)])


def run_hybrid_chain(adv: AdversaryProgram, family: str, design: UnitaryEnsemble,
                     pairs: int | None = None, seed: int = 0) -> list[tuple[str, RunResult]]:
    """Labeled hybrid sequence.

    standard: rho0 PF(D) direct, rho1 purified pfo·C, rho2 with the size-t pf-relation
    projector, rho3 Pi^dist on V·C, rho4 V·C, rho5 V.
    strong:   sPRU(D) direct, twirled spfo, twirled projected spfo, twirled W, symmetric V.
    """
    if adv.N > 4 or adv.t > 3:
        raise CapacityError("hybrid chains are limited to N <= 4 and t <= 3")
    if family == "standard":
        return [("rho0", run_pf_exact(adv, design)),
                ("rho1", run_pfo(adv, design)),
                ("rho2", run_pfo(adv, design, dist_projector=True)),
                ("rho3", run_v(adv, design, dist_projector=True)),
                ("rho4", run_v(adv, design)),
                ("rho5", run_v(adv))]
    if family == "strong":
        out = []
        if pairs is None:
            out.append(("sPRU", run_spru_exact(adv, design)))
        out += [("spfo", run_spfo_twirled(adv, design, pairs, seed)),
                ("spfo~", run_spfo_twirled(adv, design, pairs, seed, project=True)),
                ("W", run_w_twirled(adv, design, pairs, seed)),
                ("V", run_v_symmetric(adv))]
        return out
    raise ValueError("family must be 'standard' or 'strong'")
