"""Forward-query oracles: the purified permutation-function oracle, the path-recording
oracle V, Compress, the restricted oracle V(S) and a procedural backend for V."""

from __future__ import annotations

from bisect import insort
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations
from math import factorial, sqrt

import numpy as np
import scipy.sparse as sp

from .cnum import CapacityError
from .pstate import PurifiedState, apply_key_map
from .relations import Relation, RestrictedSet, enumerate_relations, restricted_set_check

PF_MAX_N = 4


# --------------------------------------------------------------------------
# the dense P⊗F register
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PFRegister:
    """Basis |pi>|f>: index = rank(pi) * q^N + f, f read as a base-q integer with f(0) leading."""

    N: int
    q: int
    perms: np.ndarray = field(repr=False)      # (N!, N): perms[p, x] = pi(x)
    inv_perms: np.ndarray = field(repr=False)
    fvals: np.ndarray = field(repr=False)      # (q^N, N): fvals[f, x] = f(x)

    @property
    def n_perms(self) -> int:
        return self.perms.shape[0]

    @property
    def n_funcs(self) -> int:
        return self.fvals.shape[0]

    @property
    def dim(self) -> int:
        return self.n_perms * self.n_funcs

    def index(self, perm_rank: int, f: int) -> int:
        return perm_rank * self.n_funcs + f

    def split(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.n_funcs)

    def perm_rank(self, pi) -> int:
        return _perm_ranks(self.N)[tuple(int(v) for v in pi)]


@lru_cache(maxsize=None)
def _perm_ranks(N: int) -> dict:
    return {p: i for i, p in enumerate(permutations(range(N)))}


@lru_cache(maxsize=None)
def pf_register(N: int, q: int = 2) -> PFRegister:
    if N > PF_MAX_N:
        raise CapacityError(f"dense P⊗F register capped at N <= {PF_MAX_N}, got N={N}")
    perms = np.array(list(permutations(range(N))), dtype=np.int64).reshape(-1, N)
    inv = np.argsort(perms, axis=1)
    digits = np.array(np.unravel_index(np.arange(q ** N), (q,) * N)).T.reshape(-1, N)
    return PFRegister(N, q, perms, inv, digits.astype(np.int64))


@lru_cache(maxsize=None)
def pfo_matrix(N: int, q: int = 2, inverse: bool = False) -> sp.csr_matrix:
    """Controlled P_pi F_f (or its adjoint) on P⊗F⊗A, P⊗F major."""
    reg = pf_register(N, q)
    omega = np.exp(2j * np.pi / q)
    pidx, fidx, a = np.meshgrid(np.arange(reg.n_perms), np.arange(reg.n_funcs), np.arange(N), indexing="ij")
    pidx, fidx, a = pidx.ravel(), fidx.ravel(), a.ravel()
    base = (pidx * reg.n_funcs + fidx) * N
    if not inverse:
        out = reg.perms[pidx, a]
        phase = omega ** reg.fvals[fidx, a]
    else:
        out = reg.inv_perms[pidx, a]
        phase = omega ** (-reg.fvals[fidx, out])
    d = reg.dim * N
    return sp.csr_matrix((phase, (base + out, base + a)), shape=(d, d))


def pfo_query(s: PurifiedState, q: int = 2, inverse: bool = False) -> PurifiedState:
    """Map-based pfo (q=2) or spfo (q=3) query; keys are P⊗F indices (or tuples led by one)."""
    if s.kind not in ("permfunc", "permfunc_design"):
        raise ValueError(f"pfo acts on perm-func states, got kind {s.kind!r}")
    reg = pf_register(s.N, q)
    omega = np.exp(2j * np.pi / q)

    def rule(key, a):
        p, f = reg.split(key if s.kind == "permfunc" else key[0])
        if not inverse:
            return [(key, int(reg.perms[p, a]), omega ** reg.fvals[f, a])]
        x = int(reg.inv_perms[p, a])
        return [(key, x, omega ** (-reg.fvals[f, x]))]

    return apply_key_map(s, rule)


def uniform_pf_state(N: int, q: int = 2) -> np.ndarray:
    reg = pf_register(N, q)
    return np.full(reg.dim, 1 / sqrt(reg.dim), dtype=complex)


def pf_vector(N: int, q: int, plus: tuple, minus: tuple = ()) -> np.ndarray:
    """(1/sqrt((N-t)!)) sum_pi delta_{pi, plus∪minus} |pi> ⊗ q^{-N/2} sum_f w^{sum_plus f - sum_minus f} |f>."""
    reg = pf_register(N, q)
    pairs = tuple(plus) + tuple(minus)
    t = len(pairs)
    if t > N:
        return np.zeros(reg.dim, dtype=complex)
    ok = np.ones(reg.n_perms, dtype=bool)
    for x, y in pairs:
        ok &= reg.perms[:, x] == y
    expo = np.zeros(reg.n_funcs, dtype=np.int64)
    for x, _ in plus:
        expo += reg.fvals[:, x]
    for x, _ in minus:
        expo -= reg.fvals[:, x]
    fpart = np.exp(2j * np.pi * (expo % q) / q) / sqrt(reg.n_funcs)
    out = np.outer(ok.astype(complex), fpart).reshape(-1)
    return out / sqrt(factorial(N - t))


@lru_cache(maxsize=4096)
def _build_pf_cached(N: int, pairs: tuple) -> np.ndarray:
    v = pf_vector(N, 2, pairs)
    v.setflags(write=False)
    return v


def build_pf(r: Relation) -> np.ndarray:
    """|pf_R> over P⊗F (binary phases)."""
    return _build_pf_cached(r.N, r.pairs)


@lru_cache(maxsize=None)
def bijective_relations(N: int, t_max: int | None = None) -> tuple[Relation, ...]:
    t_max = N if t_max is None else t_max
    return tuple(r for t in range(t_max + 1) for r in enumerate_relations(N, t, "bijective"))


@lru_cache(maxsize=None)
def pf_frame(N: int, t: int | None = None) -> tuple[tuple[Relation, ...], np.ndarray]:
    """Rows are <pf_R| for bijective R (all sizes, or only size t)."""
    rels = bijective_relations(N) if t is None else tuple(enumerate_relations(N, t, "bijective"))
    mat = np.stack([build_pf(r) for r in rels]).conj()
    mat.setflags(write=False)
    return rels, mat


def pf_dist_projector(N: int, t: int) -> np.ndarray:
    """Sum over bijective R with |R| = t of |pf_R><pf_R| on P⊗F."""
    _, rows = pf_frame(N, t)
    return rows.T @ rows.conj()


def _stack(s: PurifiedState, dim: int) -> np.ndarray:
    key = (lambda k: k) if s.kind == "permfunc" else (lambda k: k[0])
    out = np.zeros((dim, s.dim), dtype=complex)
    for k, v in s.amps.items():
        out[key(k)] += v
    return out


def compress(s: PurifiedState) -> PurifiedState:
    """Project onto span{|pf_R> : R bijective} and relabel |pf_R> -> |R>."""
    if s.kind != "permfunc":
        raise ValueError("compress expects a perm-func state")
    reg = pf_register(s.N, 2)
    rels, rows = pf_frame(s.N)
    coeff = rows @ _stack(s, reg.dim)
    out = s.like({}, "relation")
    for r, v in zip(rels, coeff):
        if np.vdot(v, v).real >= 1e-24:
            out.amps[r] = v
    return out


def project_pf_dist(s: PurifiedState, t: int) -> PurifiedState:
    """Apply the projector onto bijective pf-relation states of size t."""
    reg = pf_register(s.N, 2)
    _, rows = pf_frame(s.N, t)
    mat = rows.T @ (rows.conj() @ _stack(s, reg.dim))
    return s.like({i: mat[i] for i in range(reg.dim) if np.vdot(mat[i], mat[i]).real >= 1e-24})


# --------------------------------------------------------------------------
# path-recording oracle V
# --------------------------------------------------------------------------

def _check_budget(s: PurifiedState, cap: int) -> None:
    for r in s.amps:
        if len(r) >= cap:
            raise CapacityError(f"record {r} already has {len(r)} pairs; query budget {cap} exhausted")
        if not r.is_injective():
            raise ValueError(f"record {r} is not injective")


def v_query(s: PurifiedState) -> PurifiedState:
    """V|x>|R> = sum_{y not in Im R} |y>|R + (x,y)> / sqrt(N - |R|)."""
    if s.kind != "relation":
        raise ValueError(f"V acts on relation states, got kind {s.kind!r}")
    N = s.N
    _check_budget(s, N)

    def rule(r: Relation, x: int):
        c = 1 / sqrt(N - len(r))
        return [(r.insert((x, y)), y, c) for y in range(N) if y not in r.im]

    return apply_key_map(s, rule)


def v_matrix(N: int, t_in: int) -> tuple[sp.csr_matrix, list[Relation], list[Relation]]:
    """V restricted to inputs with |R| = t_in as a sparse map (R ⊗ A) -> (R' ⊗ A)."""
    ins = enumerate_relations(N, t_in, "injective")
    outs = enumerate_relations(N, t_in + 1, "injective")
    oidx = {r: i for i, r in enumerate(outs)}
    rows, cols, vals = [], [], []
    for i, r in enumerate(ins):
        c = 1 / sqrt(N - t_in)
        for x in range(N):
            for y in range(N):
                if y not in r.im:
                    rows.append(oidx[r.insert((x, y))] * N + y)
                    cols.append(i * N + x)
                    vals.append(c)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(len(outs) * N, len(ins) * N), dtype=complex)
    return m, ins, outs


def dist_project(s: PurifiedState) -> PurifiedState:
    """Pi^dist on the recorded x slots: keep records with pairwise distinct inputs."""
    return s.like({r: v for r, v in s.amps.items() if len(r.dom) == len(r)})


def apply_on_x_slots(s: PurifiedState, g: np.ndarray) -> PurifiedState:
    """G applied to every recorded x slot of injective relation states."""
    N = s.N
    out: dict = {}
    for r, v in s.amps.items():
        if not r.is_injective():
            raise ValueError("x-slot rotation implemented for injective records only")
        t = len(r)
        xs = [x for x, _ in r.pairs]
        ys = [y for _, y in r.pairs]
        for xp in np.ndindex(*(N,) * t):
            c = np.prod([g[xp[i], xs[i]] for i in range(t)]) if t else 1.0
            if c == 0:
                continue
            key = Relation(N, tuple(zip(xp, ys)))
            out[key] = out[key] + c * v if key in out else c * v
    return s.like(out).pruned()


# --------------------------------------------------------------------------
# restricted oracle V(S)
# --------------------------------------------------------------------------

class RestrictedOracle:
    """V(S): extensions limited to S, normalized by the per-(x, R) count."""

    def __init__(self, s: RestrictedSet):
        rep = restricted_set_check(s)
        if not rep.consistent:
            raise ValueError(f"restricted set {s.name} is not consistent: {'; '.join(rep.reasons)}")
        self.set = s
        self.report = rep
        self._ext: dict = {}

    def extensions(self, r: Relation, x: int) -> list[int]:
        key = (r, x)
        if key not in self._ext:
            self._ext[key] = self.set.extensions(r, x)
        return self._ext[key]

    def query(self, s: PurifiedState) -> PurifiedState:
        if s.kind != "relation":
            raise ValueError("V(S) acts on relation states")
        for r in s.amps:
            if len(r) >= self.set.t_max:
                raise CapacityError(f"record size {len(r)} reaches t_max={self.set.t_max}")
            if not self.set.contains(r):
                raise ValueError(f"record {r} is outside the restricted set")

        def rule(r: Relation, x: int):
            ys = self.extensions(r, x)
            c = 1 / sqrt(len(ys))
            return [(r.insert((x, y)), y, c) for y in ys]

        return apply_key_map(s, rule)

    def restrict(self, s: PurifiedState) -> PurifiedState:
        """Pi^restrict: drop records outside S."""
        return s.like({r: v for r, v in s.amps.items() if self.set.contains(r)})


def v_restricted_query(s: PurifiedState, rset: RestrictedSet | RestrictedOracle) -> PurifiedState:
    oracle = rset if isinstance(rset, RestrictedOracle) else RestrictedOracle(rset)
    return oracle.query(s)


# --------------------------------------------------------------------------
# procedural backend
# --------------------------------------------------------------------------

def rank_to_free_image(r: Relation, k: int) -> int:
    """k-th element (0-based) of [N] minus Im(R)."""
    free = [y for y in range(r.N) if y not in r.im]
    return free[k]


def free_image_to_rank(r: Relation, y: int) -> int:
    if y in r.im:
        raise ValueError(f"{y} is already in the image")
    return sum(1 for z in range(y) if z not in r.im)


def sorted_insert(r: Relation, pair) -> Relation:
    ps = list(r.pairs)
    insort(ps, (int(pair[0]), int(pair[1])))
    return Relation(r.N, tuple(ps))


def _uncompute_input(r_new: Relation, y: int) -> tuple[int, Relation]:
    """Recover (x, R) from (y, R + (x, y)); y occurs once because R + (x, y) is injective."""
    hits = [p for p in r_new.pairs if p[1] == y]
    if len(hits) != 1:
        raise ValueError("record does not determine the query input")
    return hits[0][0], r_new.remove_one(hits[0])


def _procedural_step(x: int, r: Relation) -> dict:
    """Registers (A, R, K) evolved from |x>|R>|0>; returns the final {(a, R', k): amp}."""
    N = r.N
    M = N - len(r)
    # 1. uniform superposition over ranks in K
    state = {(x, r, k): 1 / sqrt(M) for k in range(M)}
    # 2. rank -> free image, in place on K
    state = {(a, rr, rank_to_free_image(rr, k)): c for (a, rr, k), c in state.items()}
    # 3. sorted insert of (a, y) into the record
    state = {(a, sorted_insert(rr, (a, y)), y): c for (a, rr, y), c in state.items()}
    # 4. uncompute a from (record, y), then swap y into A and clear K
    out = {}
    for (a, rr, y), c in state.items():
        xa, _ = _uncompute_input(rr, y)
        assert xa == a
        out[(y, rr, 0)] = out.get((y, rr, 0), 0) + c
    return out


def v_circuit_backend_query(s: PurifiedState) -> PurifiedState:
    if s.kind != "relation":
        raise ValueError("procedural V acts on relation states")
    _check_budget(s, s.N)

    def rule(r: Relation, x: int):
        return [(rr, a, c) for (a, rr, _), c in _procedural_step(x, r).items()]

    return apply_key_map(s, rule)


# --------------------------------------------------------------------------

@dataclass
class StdOracle:
    """A forward-query oracle acting on purified states."""

    variant: str                      # pfo | V | V-restricted | V-circuit-backend
    N: int
    rset: RestrictedSet | None = None
    _restricted: RestrictedOracle | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant == "V-restricted":
            if self.rset is None:
                raise ValueError("V-restricted needs a restricted set")
            self._restricted = RestrictedOracle(self.rset)
        elif self.variant not in ("pfo", "V", "V-circuit-backend"):
            raise ValueError(f"unknown oracle variant {self.variant!r}")

    @property
    def key_kind(self) -> str:
        return "permfunc" if self.variant == "pfo" else "relation"

    def empty_key(self):
        return Relation.empty(self.N)

    def query(self, s: PurifiedState) -> PurifiedState:
        if self.variant == "pfo":
            return pfo_query(s)
        if self.variant == "V":
            return v_query(s)
        if self.variant == "V-restricted":
            return self._restricted.query(s)
        return v_circuit_backend_query(s)
