"""Forward-and-inverse machinery: the ternary spfo, pf_{L,R} states, W, V^L/V^R,
the symmetric V, E^L/E^R, Q[C,D] and the projector algebra around them.

Operators live on a truncated basis of (a, L, R) with |L| + |R| <= t_max.
Index layout: sectors (l, r) in order of (l + r, l); inside a sector the index
is offset + (rank(L) * n_r + rank(R)) * N + a, so A is the fastest index.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import permutations
from math import comb, sqrt
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cnum import CapacityError, operator_norm
from .oracle_std import pf_register, pf_vector, pfo_matrix
from .pstate import PurifiedState, apply_key_map, add_states
from .relations import Relation, enumerate_relations

DENSE_SYM_LIMIT = 4096   # sym-power blocks up to this size are formed densely


# --------------------------------------------------------------------------
# basis
# --------------------------------------------------------------------------

class TruncatedBasis:
    """Enumerated (a, L, R) with |L| + |R| <= t_max, L and R arbitrary relations."""

    def __init__(self, N: int, t_max: int):
        if t_max < 0:
            raise ValueError("t_max must be non-negative")
        self.N = N
        self.t_max = t_max
        self.rels = [enumerate_relations(N, k, "all") for k in range(t_max + 1)]
        self.rank = [{r: i for i, r in enumerate(rs)} for rs in self.rels]
        self.sectors = [(l, s - l) for s in range(t_max + 1) for l in range(s + 1)]
        self.offset: dict[tuple[int, int], int] = {}
        pos = 0
        for l, r in self.sectors:
            self.offset[(l, r)] = pos
            pos += len(self.rels[l]) * len(self.rels[r]) * N
        self.dim = pos

    @staticmethod
    def closed_form_dim(N: int, t_max: int) -> int:
        m = N * N
        return N * sum(comb(m + l - 1, l) * comb(m + s - l - 1, s - l)
                       for s in range(t_max + 1) for l in range(s + 1))

    def n(self, k: int) -> int:
        return len(self.rels[k])

    def sector_slice(self, l: int, r: int) -> slice:
        o = self.offset[(l, r)]
        return slice(o, o + self.n(l) * self.n(r) * self.N)

    def index(self, a: int, L: Relation, R: Relation) -> int:
        l, r = len(L), len(R)
        if l + r > self.t_max:
            raise CapacityError(f"record sizes {l}+{r} exceed t_max={self.t_max}")
        return self.offset[(l, r)] + (self.rank[l][L] * self.n(r) + self.rank[r][R]) * self.N + a

    def entry(self, idx: int) -> tuple[int, Relation, Relation]:
        for l, r in reversed(self.sectors):
            o = self.offset[(l, r)]
            if idx >= o:
                rest, a = divmod(idx - o, self.N)
                iL, iR = divmod(rest, self.n(r))
                return a, self.rels[l][iL], self.rels[r][iR]
        raise IndexError(idx)

    def pairs(self, max_sector: int | None = None) -> Iterable[tuple[int, Relation, Relation]]:
        """(base index, L, R) for every record pair; the A index is added on top."""
        top = self.t_max if max_sector is None else min(max_sector, self.t_max)
        for l, r in self.sectors:
            if l + r > top:
                continue
            o = self.offset[(l, r)]
            nr = self.n(r)
            for iL, L in enumerate(self.rels[l]):
                for iR, R in enumerate(self.rels[r]):
                    yield o + (iL * nr + iR) * self.N, L, R

    @cached_property
    def sector_of(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.int64)
        for l, r in self.sectors:
            out[self.sector_slice(l, r)] = l + r
        return out

    def keys(self) -> list:
        return [(L, R) for _, L, R in self.pairs()]


@lru_cache(maxsize=8)
def truncated_basis(N: int, t_max: int) -> TruncatedBasis:
    return TruncatedBasis(N, t_max)


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------

class TruncatedOperator:
    """An operator on the truncated space, sparse (``mat``) or matrix-free (``linop``)."""

    def __init__(self, basis: TruncatedBasis, mat=None, linop: spla.LinearOperator | None = None,
                 name: str = ""):
        self.basis = basis
        self.mat = None if mat is None else sp.csr_matrix(mat)
        self._linop = linop
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return (self.basis.dim, self.basis.dim)

    @property
    def is_sparse(self) -> bool:
        return self.mat is not None

    def as_linear_operator(self) -> spla.LinearOperator:
        if self.mat is not None:
            return spla.aslinearoperator(self.mat)
        return self._linop

    def __matmul__(self, other):
        if isinstance(other, TruncatedOperator):
            if self.is_sparse and other.is_sparse:
                return TruncatedOperator(self.basis, self.mat @ other.mat)
            return TruncatedOperator(self.basis, linop=self.as_linear_operator() @ other.as_linear_operator())
        if self.mat is not None:
            return self.mat @ other
        return self._linop @ other

    def __add__(self, other: "TruncatedOperator") -> "TruncatedOperator":
        if self.is_sparse and other.is_sparse:
            return TruncatedOperator(self.basis, self.mat + other.mat)
        return TruncatedOperator(self.basis, linop=self.as_linear_operator() + other.as_linear_operator())

    def __sub__(self, other: "TruncatedOperator") -> "TruncatedOperator":
        return self + other * -1.0

    def __mul__(self, c: complex) -> "TruncatedOperator":
        if self.is_sparse:
            return TruncatedOperator(self.basis, self.mat * c)
        return TruncatedOperator(self.basis, linop=self._linop * c)

    __rmul__ = __mul__

    @property
    def H(self) -> "TruncatedOperator":
        if self.is_sparse:
            return TruncatedOperator(self.basis, self.mat.conj().T.tocsr())
        return TruncatedOperator(self.basis, linop=self._linop.H)

    def restrict(self, t: int) -> "TruncatedOperator":
        """B_{<=t} = B · Pi_{<=t}."""
        return self @ pi_leq(self.basis, t)

    def toarray(self) -> np.ndarray:
        if self.is_sparse:
            return self.mat.toarray()
        return self._linop @ np.eye(self.basis.dim, dtype=complex)

    def norm(self, **kw) -> float:
        if self.is_sparse and self.mat.nnz == 0:
            return 0.0
        return operator_norm(self.as_linear_operator(), **kw)

    def max_abs(self) -> float:
        """Largest entry magnitude (sparse operators only)."""
        if not self.is_sparse:
            raise TypeError("entrywise max needs a sparse operator")
        m = self.mat.tocoo()
        return float(np.abs(m.data).max()) if m.nnz else 0.0


def identity(basis: TruncatedBasis) -> TruncatedOperator:
    return TruncatedOperator(basis, sp.identity(basis.dim, dtype=complex, format="csr"), name="I")


def diagonal(basis: TruncatedBasis, mask: np.ndarray, name: str = "") -> TruncatedOperator:
    return TruncatedOperator(basis, sp.diags(mask.astype(complex), format="csr"), name=name)


class _Builder:
    def __init__(self, basis: TruncatedBasis):
        self.basis = basis
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[complex] = []

    def add(self, row: int, col: int, val: complex) -> None:
        self.rows.append(row)
        self.cols.append(col)
        self.vals.append(val)

    def done(self, name: str) -> TruncatedOperator:
        d = self.basis.dim
        m = sp.csr_matrix((np.asarray(self.vals, dtype=complex), (self.rows, self.cols)), shape=(d, d))
        return TruncatedOperator(self.basis, m, name=name)


def _union_masks(L: Relation, R: Relation) -> tuple[frozenset, frozenset]:
    return L.dom | R.dom, L.im | R.im


def is_pair_bijective(L: Relation, R: Relation) -> bool:
    return L.union(R).is_bijective()


def _in_cap(basis: TruncatedBasis, max_in: int | None, cap_n: bool) -> int:
    top = basis.t_max - 1 if max_in is None else min(max_in, basis.t_max - 1)
    if cap_n:
        top = min(top, basis.N - 1)
    return top


def build_VL(basis: TruncatedBasis, max_in: int | None = None) -> TruncatedOperator:
    """V^L|x,L,R> = sum_{y not in Im(L∪R)} |y, L+(x,y), R> / sqrt(N - |Im(L∪R)|), |L|+|R| <= N-1."""
    N = basis.N
    b = _Builder(basis)
    for base, L, R in basis.pairs(_in_cap(basis, max_in, True)):
        _, im = _union_masks(L, R)
        free = [y for y in range(N) if y not in im]
        c = 1 / sqrt(len(free))
        for x in range(N):
            for y in free:
                b.add(basis.index(y, L.insert((x, y)), R), base + x, c)
    return b.done("VL")


def build_VR(basis: TruncatedBasis, max_in: int | None = None) -> TruncatedOperator:
    """V^R|y,L,R> = sum_{x not in Dom(L∪R)} |x, L, R+(x,y)> / sqrt(N - |Dom(L∪R)|)."""
    N = basis.N
    b = _Builder(basis)
    for base, L, R in basis.pairs(_in_cap(basis, max_in, True)):
        dom, _ = _union_masks(L, R)
        free = [x for x in range(N) if x not in dom]
        c = 1 / sqrt(len(free))
        for y in range(N):
            for x in free:
                b.add(basis.index(x, L, R.insert((x, y))), base + y, c)
    return b.done("VR")


def build_WL(basis: TruncatedBasis, max_in: int | None = None) -> TruncatedOperator:
    N = basis.N
    b = _Builder(basis)
    for base, L, R in basis.pairs(_in_cap(basis, max_in, True)):
        if not is_pair_bijective(L, R):
            continue
        dom, im = _union_masks(L, R)
        c = 1 / sqrt(N - len(L) - len(R))
        for x in range(N):
            if x in dom:
                continue
            for y in range(N):
                if y not in im:
                    b.add(basis.index(y, L.insert((x, y)), R), base + x, c)
    return b.done("WL")


def build_WR(basis: TruncatedBasis, max_in: int | None = None) -> TruncatedOperator:
    N = basis.N
    b = _Builder(basis)
    for base, L, R in basis.pairs(_in_cap(basis, max_in, True)):
        if not is_pair_bijective(L, R):
            continue
        dom, im = _union_masks(L, R)
        c = 1 / sqrt(N - len(L) - len(R))
        for y in range(N):
            if y in im:
                continue
            for x in range(N):
                if x not in dom:
                    b.add(basis.index(x, L, R.insert((x, y))), base + y, c)
    return b.done("WR")


def build_W(basis: TruncatedBasis, max_in: int | None = None) -> TruncatedOperator:
    """W = W^L + W^{R,dagger}."""
    w = build_WL(basis, max_in) + build_WR(basis, max_in).H
    w.name = "W"
    return w


def build_symmetric_V(basis: TruncatedBasis, max_in: int | None = None) -> TruncatedOperator:
    """V = V^L (I - V^R V^R†) + (I - V^L V^L†) V^R†.

    Exact on inputs in sectors <= min(max_in, t_max - 1); the top sector only sees
    the V^R† half because its V^L images fall outside the basis.
    """
    vl, vr = build_VL(basis, max_in), build_VR(basis, max_in)
    eye = identity(basis)
    v = vl @ (eye - vr @ vr.H) + (eye - vl @ vl.H) @ vr.H
    v.name = "V"
    return v


def build_E(basis: TruncatedBasis, side: str, max_in: int | None = None) -> TruncatedOperator:
    """E^L or E^R with the sqrt(num + 1) multiplicity weights (no N - 1 cap)."""
    if side not in ("L", "R"):
        raise ValueError("side must be 'L' or 'R'")
    N = basis.N
    b = _Builder(basis)
    c0 = 1 / sqrt(N)
    for base, L, R in basis.pairs(_in_cap(basis, max_in, False)):
        for a in range(N):
            for z in range(N):
                if side == "L":
                    pair = (a, z)
                    b.add(basis.index(z, L.insert(pair), R), base + a, c0 * sqrt(L.num(pair) + 1))
                else:
                    pair = (z, a)
                    b.add(basis.index(z, L, R.insert(pair)), base + a, c0 * sqrt(R.num(pair) + 1))
    return b.done("E" + side)


# --------------------------------------------------------------------------
# symmetric embeddings and Q[C, D]
# --------------------------------------------------------------------------

@lru_cache(maxsize=32)
def sym_embedding(N: int, k: int) -> sp.csr_matrix:
    """J_k: relation states of size k as columns over (C^{N^2})^{⊗k} (slot value x*N + y)."""
    rels = enumerate_relations(N, k, "all")
    d = N * N
    rows, cols, vals = [], [], []
    for j, r in enumerate(rels):
        syms = [x * N + y for x, y in r.pairs]
        orders = set(permutations(syms))
        amp = 1 / sqrt(len(orders))
        for o in orders:
            idx = 0
            for s in o:
                idx = idx * d + s
            rows.append(idx)
            cols.append(j)
            vals.append(amp)
    return sp.csr_matrix((vals, (rows, cols)), shape=(d ** k, len(rels)), dtype=float)


def _apply_slots(u: np.ndarray, tens: np.ndarray, k: int) -> np.ndarray:
    """u on each of the k leading slot axes of tens with shape (d,)*k + (rest,)."""
    d = u.shape[0]
    for i in range(k):
        tens = np.moveaxis(np.tensordot(u, tens, axes=([1], [i])), 0, i)
    return tens


def sym_power_apply(u: np.ndarray, k: int, N: int, block: np.ndarray) -> np.ndarray:
    """(J_k^T u^{⊗k} J_k) @ block, matrix-free; block has shape (n_k, cols)."""
    if k == 0:
        return block.copy()
    J = sym_embedding(N, k)
    d = N * N
    cols = block.shape[1]
    tens = (J @ block).reshape((d,) * k + (cols,))
    tens = _apply_slots(u, tens, k)
    return J.T @ tens.reshape(d ** k, cols)


@lru_cache(maxsize=64)
def _sym_power_dense_cached(key: bytes, shape: tuple, k: int, N: int) -> np.ndarray:
    u = np.frombuffer(key, dtype=complex).reshape(shape)
    n = sym_embedding(N, k).shape[1]
    return sym_power_apply(u, k, N, np.eye(n, dtype=complex))


def sym_power(u: np.ndarray, k: int, N: int) -> np.ndarray | None:
    """Dense J^T u^{⊗k} J when small enough, else None."""
    n = comb(N * N + k - 1, k)
    d = N * N
    # the slot-wise tensor route costs ~k d^(k+1) per column against n^2 for the dense block
    if n > DENSE_SYM_LIMIT or (k > 1 and n * n > 2 * k * d ** (k + 1)):
        return None
    u = np.ascontiguousarray(u, dtype=complex)
    return _sym_power_dense_cached(u.tobytes(), u.shape, k, N)


class _BlockAction:
    """Applies (U_L)^{sym l} ⊗ (U_R)^{sym r} ⊗ G_A sector by sector."""

    def __init__(self, basis: TruncatedBasis, uL: np.ndarray | None, uR: np.ndarray | None,
                 gA: np.ndarray | None):
        self.basis, self.uL, self.uR, self.gA = basis, uL, uR, gA
        self._dense: dict = {}

    def _power(self, u, k):
        key = (id(u), k)
        if key not in self._dense:
            self._dense[key] = sym_power(u, k, self.basis.N)
        return self._dense[key]

    def _apply_side(self, u, k, arr):
        # arr: (n_k, cols)
        if u is None or k == 0:
            return arr
        m = self._power(u, k)
        if m is not None:
            return m @ arr
        return sym_power_apply(u, k, self.basis.N, arr)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        b = self.basis
        v = np.asarray(v).reshape(b.dim, -1)
        extra = v.shape[1]
        out = np.zeros_like(v, dtype=complex)
        N = b.N
        for l, r in b.sectors:
            sl = b.sector_slice(l, r)
            blk = v[sl].reshape(b.n(l), b.n(r), N, extra)
            if not blk.any():
                continue
            if self.gA is not None:
                blk = np.einsum("ab,lrbe->lrae", self.gA, blk)
            nl, nr = b.n(l), b.n(r)
            blk = self._apply_side(self.uL, l, blk.reshape(nl, -1)).reshape(nl, nr, N, extra)
            blk = np.moveaxis(blk, 1, 0).reshape(nr, -1)
            blk = self._apply_side(self.uR, r, blk).reshape(nr, nl, N, extra)
            out[sl] = np.moveaxis(blk, 0, 1).reshape(-1, extra)
        return out


def _block_operator(basis, uL, uR, gA, name) -> TruncatedOperator:
    act = _BlockAction(basis, uL, uR, gA)
    adj = _BlockAction(basis, *(None if u is None else u.conj().T for u in (uL, uR, gA)))
    d = basis.dim
    lin = spla.LinearOperator((d, d), matvec=lambda v: act.matvec(v).ravel(), matmat=act.matvec,
                              rmatvec=lambda v: adj.matvec(v).ravel(), rmatmat=adj.matvec,
                              dtype=complex)
    return TruncatedOperator(basis, linop=lin, name=name)


def q_factors(c: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot unitaries: C ⊗ D^T on L slots, conj(C) ⊗ D^dagger on R slots."""
    return np.kron(c, d.T), np.kron(c.conj(), d.conj().T)


def build_Q(basis: TruncatedBasis, c: np.ndarray, d: np.ndarray, adjoint: bool = False) -> TruncatedOperator:
    uL, uR = q_factors(np.asarray(c, dtype=complex), np.asarray(d, dtype=complex))
    if adjoint:
        uL, uR = uL.conj().T, uR.conj().T
    return _block_operator(basis, uL, uR, None, "Q†" if adjoint else "Q")


def a_operator(basis: TruncatedBasis, g: np.ndarray, with_q: tuple | None = None) -> TruncatedOperator:
    """G on the A register, optionally combined with Q[C, D] on the records."""
    uL = uR = None
    if with_q is not None:
        uL, uR = q_factors(*with_q)
    return _block_operator(basis, uL, uR, np.asarray(g, dtype=complex), "G_A")


def dense_on_sparse(op: TruncatedOperator) -> TruncatedOperator:
    """Materialize a matrix-free operator (small bases only)."""
    if op.is_sparse:
        return op
    if op.basis.dim > 20000:
        raise CapacityError(f"refusing to densify a {op.basis.dim}-dim operator")
    m = op.as_linear_operator().matmat(np.eye(op.basis.dim, dtype=complex))
    m[np.abs(m) < 1e-14] = 0
    return TruncatedOperator(op.basis, sp.csr_matrix(m), name=op.name)


# --------------------------------------------------------------------------
# projectors
# --------------------------------------------------------------------------

def _mask(basis: TruncatedBasis, pred: Callable[[int, Relation, Relation], bool]) -> np.ndarray:
    m = np.zeros(basis.dim)
    for base, L, R in basis.pairs():
        for a in range(basis.N):
            if pred(a, L, R):
                m[base + a] = 1.0
    return m


def pi_leq(basis: TruncatedBasis, t: int) -> TruncatedOperator:
    return diagonal(basis, (basis.sector_of <= t).astype(float), f"Pi<={t}")


def pi_sector(basis: TruncatedBasis, l: int, r: int) -> TruncatedOperator:
    m = np.zeros(basis.dim)
    if (l, r) in basis.offset:
        m[basis.sector_slice(l, r)] = 1.0
    return diagonal(basis, m, f"Pi_{l},{r}")


def pi_bij(basis: TruncatedBasis) -> TruncatedOperator:
    return diagonal(basis, _mask(basis, lambda a, L, R: is_pair_bijective(L, R)), "Pi_bij")


def pi_not_dom(basis: TruncatedBasis) -> TruncatedOperator:
    return diagonal(basis, _mask(basis, lambda a, L, R: a not in (L.dom | R.dom)), "Pi_notDom")


def pi_not_im(basis: TruncatedBasis) -> TruncatedOperator:
    return diagonal(basis, _mask(basis, lambda a, L, R: a not in (L.im | R.im)), "Pi_notIm")


@lru_cache(maxsize=32)
def _epr_slot_sum(N: int, k: int, part: str) -> sp.csr_matrix:
    """J^T (sum_i Pi^EPR_{A, slot i part}) J on (Sym^k) ⊗ A, A minor.

    ``part`` is 'x' or 'y': which half of each (x, y) slot pairs with A.
    Built in the tensor space from the projector definition, then compressed.
    """
    d = N * N
    J = sym_embedding(N, k)
    dimT = d ** k
    rows, cols, vals = [], [], []
    for idx in range(dimT):
        slots = np.unravel_index(idx, (d,) * k)
        for i in range(k):
            x, y = divmod(int(slots[i]), N)
            a = x if part == "x" else y
            # |a>_A|...,(x,y)_i,...> with A matching the slot half -> (1/N) sum_a' |a'>|...,slot(a'),...>
            for a2 in range(N):
                s2 = list(slots)
                s2[i] = a2 * N + y if part == "x" else x * N + a2
                rows.append(int(np.ravel_multi_index(s2, (d,) * k)) * N + a2)
                cols.append(idx * N + a)
                vals.append(1.0 / N)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(dimT * N, dimT * N))
    JA = sp.kron(J, sp.identity(N), format="csr")
    return (JA.T @ S @ JA).tocsr()


def epr_sum(basis: TruncatedBasis, side: str) -> TruncatedOperator:
    """sum_i Pi^EPR_{A, R_X,i} (side='R') or sum_i Pi^EPR_{A, L_Y,i} (side='L'), sector by sector."""
    N = basis.N
    blocks = []
    for l, r in basis.sectors:
        k = r if side == "R" else l
        other = basis.n(l if side == "R" else r)
        if k == 0:
            blocks.append(sp.csr_matrix((other * basis.n(k) * N,) * 2, dtype=complex))
            continue
        M = _epr_slot_sum(N, k, "x" if side == "R" else "y")   # (n_k*N)^2, index (iK, a)
        if side == "R":
            blocks.append(sp.kron(sp.identity(other), M))
        else:
            # index order is (iL, iR, a); M acts on (iL, a): permute via explicit reindex
            nk = basis.n(k)
            perm = np.arange(nk * other * N).reshape(nk, other, N)
            # row = position in (iR, iL, a) order, col = natural (iL, iR, a) index
            P = sp.csr_matrix((np.ones(perm.size), (np.arange(perm.size),
                                                    np.transpose(perm, (1, 0, 2)).ravel())))
            blocks.append(P.T @ sp.kron(sp.identity(other), M) @ P)
    return TruncatedOperator(basis, sp.block_diag(blocks, format="csr").astype(complex), name="EPR" + side)


def _sector_weights(basis: TruncatedBasis, which: str) -> np.ndarray:
    """N / (N - l - r + 1) on sectors with r >= 1 (which='R') or l >= 1 (which='L')."""
    N = basis.N
    w = np.zeros(basis.dim)
    for l, r in basis.sectors:
        k = r if which == "R" else l
        if k >= 1 and l + r - 1 < N:
            w[basis.sector_slice(l, r)] = N / (N - l - r + 1)
    return w


def pi_domain_W_closed(basis: TruncatedBasis) -> TruncatedOperator:
    """Pi^bij (Pi^{notDom} + sum N/(N-l-r) Pi_l ⊗ sum_i Pi^EPR_{A,R_X,i}) Pi^bij."""
    pb = pi_bij(basis)
    inner = pi_not_dom(basis) + diagonal(basis, _sector_weights(basis, "R")) @ epr_sum(basis, "R")
    return pb @ inner @ pb


def pi_image_W_closed(basis: TruncatedBasis) -> TruncatedOperator:
    pb = pi_bij(basis)
    inner = pi_not_im(basis) + diagonal(basis, _sector_weights(basis, "L")) @ epr_sum(basis, "L")
    return pb @ inner @ pb


def hopping_epr_sum(basis: TruncatedBasis, side: str) -> TruncatedOperator:
    """(1/N) sum |a'><a|_A ⊗ sum_z b†_{(a',z)} b_{(a,z)} in occupation-number form.

    Equal to sum_i Pi^EPR on the chosen slots; provided as an independent route.
    """
    N = basis.N
    b = _Builder(basis)
    for base, L, R in basis.pairs():
        rec = R if side == "R" else L
        for p in set(rec.pairs):
            cnt = rec.num(p)
            a = p[0] if side == "R" else p[1]
            lower = rec.remove_one(p)
            for a2 in range(N):
                q = (a2, p[1]) if side == "R" else (p[0], a2)
                up = lower.insert(q)
                val = sqrt(cnt) * sqrt(lower.num(q) + 1) / N
                idx = basis.index(a2, L, up) if side == "R" else basis.index(a2, up, R)
                b.add(idx, base + a, val)
    return b.done("hop" + side)


def xydist_mask(N: int, l: int, r: int) -> np.ndarray:
    """Diagonal of Pi^xydist on the tensor space (C^{N^2})^{⊗(l+r)}: all x distinct, all y distinct."""
    k = l + r
    d = N * N
    idx = np.indices((d,) * k).reshape(k, -1)
    xs, ys = idx // N, idx % N
    ok = np.ones(idx.shape[1], dtype=bool)
    for i in range(k):
        for j in range(i + 1, k):
            ok &= (xs[i] != xs[j]) & (ys[i] != ys[j])
    return ok


def epr_commutator_norm(N: int, l: int, r: int, side: str = "R", slot: int = 0,
                        tol: float = 1e-10) -> float:
    """||[Pi^xydist_{l,r}, Pi^EPR_{A, slot}]||_op on A ⊗ (C^{N^2})^{⊗(l+r)}, matrix-free.

    Slot numbering: L slots first, then R slots.  side='R' pairs A with the x half
    of R slot ``slot``; side='L' pairs A with the y half of L slot ``slot``.
    """
    k = l + r
    if (side == "R" and r == 0) or (side == "L" and l == 0):
        return 0.0
    pos = l + slot if side == "R" else slot
    half = 0 if side == "R" else 1
    mask = xydist_mask(N, l, r).astype(float)
    shape = (N,) + (N, N) * k     # A, then (x, y) for each slot
    axis = 1 + 2 * pos + half
    dim = N * N ** (2 * k)
    maskA = np.broadcast_to(mask, (N, mask.size)).reshape(-1)

    def epr(v):
        t = v.reshape(shape)
        diag = np.diagonal(t, axis1=0, axis2=axis).sum(axis=-1) / N   # sum_a t[a,...,a,...]
        out = np.zeros_like(t)
        idx = [slice(None)] * t.ndim
        for a in range(N):
            idx[0], idx[axis] = a, a
            out[tuple(idx)] = diag
        return out.reshape(-1)

    def kmv(v):
        v = np.asarray(v).reshape(-1)
        return maskA * epr(v) - epr(maskA * v)

    lin = spla.LinearOperator((dim, dim), matvec=kmv, rmatvec=lambda v: -kmv(v), dtype=complex)
    return operator_norm(lin, tol=tol, method="lanczos")


# --------------------------------------------------------------------------
# spfo, pf_{L,R} states and the strong Compress
# --------------------------------------------------------------------------

def build_pf_pair(N: int, L: Relation, R: Relation) -> np.ndarray:
    """|pf_{L,R}> over P⊗F with ternary phases: +f on L inputs, -f on R inputs."""
    return pf_vector(N, 3, L.pairs, R.pairs)


def spfo_matrix(N: int, inverse: bool = False) -> sp.csr_matrix:
    return pfo_matrix(N, 3, inverse)


def spfo_query(s: PurifiedState, inverse: bool = False) -> PurifiedState:
    from .oracle_std import pfo_query
    return pfo_query(s, q=3, inverse=inverse)


@lru_cache(maxsize=None)
def pair_frame(N: int, t_max: int | None = None) -> tuple[tuple, np.ndarray]:
    """All (L, R) with L ∪ R bijective (|L|+|R| <= t_max) and the matrix of <pf_{L,R}| rows."""
    t_max = N if t_max is None else t_max
    keys = []
    for t in range(t_max + 1):
        for rel in enumerate_relations(N, t, "bijective"):
            ps = rel.pairs
            for mask in range(2 ** t):
                L = Relation(N, tuple(p for i, p in enumerate(ps) if mask >> i & 1))
                R = Relation(N, tuple(p for i, p in enumerate(ps) if not mask >> i & 1))
                keys.append((L, R))
    keys.sort(key=lambda k: (len(k[0]) + len(k[1]), k[0].pairs, k[1].pairs))
    rows = np.stack([build_pf_pair(N, L, R) for L, R in keys]).conj()
    rows.setflags(write=False)
    return tuple(keys), rows


def compress_strong(s: PurifiedState) -> PurifiedState:
    """Project onto span{|pf_{L,R}>} and relabel to |L>|R> (pair-kind output)."""
    if s.kind not in ("permfunc", "permfunc_design"):
        raise ValueError("compress_strong expects a perm-func state")
    reg = pf_register(s.N, 3)
    keys, rows = pair_frame(s.N)
    if s.kind == "permfunc":
        mat = np.zeros((reg.dim, s.dim), dtype=complex)
        for k, v in s.amps.items():
            mat[k] = v
        coeff = rows @ mat
        out = s.like({}, "pair")
        for key, v in zip(keys, coeff):
            if np.vdot(v, v).real >= 1e-24:
                out.amps[key] = v
        return out
    raise ValueError("design-indexed states compress branch by branch")


def compress_matrix(basis: TruncatedBasis) -> sp.csr_matrix:
    """Compress ⊗ I_A as a sparse map from P⊗F⊗A into the truncated basis."""
    N = basis.N
    keys, rows = pair_frame(N, basis.t_max)
    reg = pf_register(N, 3)
    r_idx, c_idx, vals = [], [], []
    for (L, R), row in zip(keys, rows):
        nz = np.nonzero(np.abs(row) > 1e-15)[0]
        for a in range(N):
            out = basis.index(a, L, R)
            r_idx.extend([out] * len(nz))
            c_idx.extend((nz * N + a).tolist())
            vals.extend(row[nz].tolist())
    return sp.csr_matrix((vals, (r_idx, c_idx)), shape=(basis.dim, reg.dim * N))


# --------------------------------------------------------------------------
# map-based strong queries and the procedural backend
# --------------------------------------------------------------------------

def _check_pairs(s: PurifiedState) -> None:
    if s.kind != "pair":
        raise ValueError(f"expected a relation-pair state, got {s.kind!r}")


def vl_query(s: PurifiedState) -> PurifiedState:
    _check_pairs(s)
    N = s.N

    def rule(key, x):
        L, R = key
        if len(L) + len(R) > N - 1:
            return []
        im = L.im | R.im
        c = 1 / sqrt(N - len(im))
        return [((L.insert((x, y)), R), y, c) for y in range(N) if y not in im]

    return apply_key_map(s, rule)


def vr_query(s: PurifiedState) -> PurifiedState:
    _check_pairs(s)
    N = s.N

    def rule(key, y):
        L, R = key
        if len(L) + len(R) > N - 1:
            return []
        dom = L.dom | R.dom
        c = 1 / sqrt(N - len(dom))
        return [((L, R.insert((x, y))), x, c) for x in range(N) if x not in dom]

    return apply_key_map(s, rule)


def vl_adjoint_query(s: PurifiedState) -> PurifiedState:
    """Uncompute V^L: |y, L', R> -> |x, L, R>/sqrt(N - |Im(L∪R)|) when L' = L + (x, y) uniquely."""
    _check_pairs(s)
    N = s.N

    def rule(key, y):
        L2, R = key
        hits = [p for p in L2.pairs if p[1] == y]
        if len(hits) != 1 or y in R.im:
            return []
        L = L2.remove_one(hits[0])
        if len(L) + len(R) > N - 1:
            return []
        return [((L, R), hits[0][0], 1 / sqrt(N - len(L.im | R.im)))]

    return apply_key_map(s, rule)


def vr_adjoint_query(s: PurifiedState) -> PurifiedState:
    _check_pairs(s)
    N = s.N

    def rule(key, x):
        L, R2 = key
        hits = [p for p in R2.pairs if p[0] == x]
        if len(hits) != 1 or x in L.dom:
            return []
        R = R2.remove_one(hits[0])
        if len(L) + len(R) > N - 1:
            return []
        return [((L, R), hits[0][1], 1 / sqrt(N - len(L.dom | R.dom)))]

    return apply_key_map(s, rule)


def coherent_measure(s: PurifiedState, side: str) -> tuple[PurifiedState, PurifiedState]:
    """Split s into (flag=1, flag=0) branches of the V^X V^{X†} measurement (X = side).

    Mirrors the circuit: run the inverse of the V^X preparation, flag when the
    workspace returns to zero, and run the preparation again.
    """
    down, up = (vl_adjoint_query, vl_query) if side == "L" else (vr_adjoint_query, vr_query)
    flagged = up(down(s))
    return flagged, add_states(s, flagged, 1.0, -1.0)


@dataclass
class ProceduralResult:
    state: PurifiedState
    abort_probability: float
    uncompute_residual: float


def circuit_backend_strong_query(s: PurifiedState, inverse: bool = False) -> ProceduralResult:
    """Forward (or inverse) query to the symmetric V via coherent measurements.

    Forward: measure V^R V^R† into ancilla 1; where it fired apply V^R† and post-select
    V^L V^L† = 0 (ancilla 2); elsewhere apply V^L; finally fold the V^L V^L†
    measurement into ancilla 1, which then carries no information.
    """
    _check_pairs(s)
    first, second = ("R", "L") if not inverse else ("L", "R")
    raise_op = vl_query if not inverse else vr_query
    lower_op = vr_adjoint_query if not inverse else vl_adjoint_query
    fired, quiet = coherent_measure(s, first)
    branch0 = raise_op(quiet)
    chi = lower_op(fired)
    aborted, kept = coherent_measure(chi, second)
    # uncompute ancilla 1: branch0 sits inside the image of the raising map, kept is orthogonal to it
    chk0, _ = coherent_measure(branch0, second)
    chk1, _ = coherent_measure(kept, second)
    residual = sqrt(max(0.0, _norm2(add_states(branch0, chk0, 1.0, -1.0)))) + sqrt(_norm2(chk1))
    return ProceduralResult(add_states(branch0, kept), _norm2(aborted), residual)


def _norm2(s: PurifiedState) -> float:
    return float(sum(np.vdot(v, v).real for v in s.amps.values()))


def pair_state_to_vector(s: PurifiedState, basis: TruncatedBasis) -> np.ndarray:
    """Pair-kind state as an array (basis.dim, dim_B)."""
    _check_pairs(s)
    out = np.zeros((basis.dim, s.dim_b), dtype=complex)
    for (L, R), v in s.amps.items():
        blk = v.reshape(s.N, s.dim_b)
        base = basis.index(0, L, R)
        out[base:base + s.N] += blk
    return out


def vector_to_pair_state(vec: np.ndarray, basis: TruncatedBasis, like: PurifiedState) -> PurifiedState:
    vec = np.asarray(vec).reshape(basis.dim, -1)
    out = like.like({}, "pair")
    for base, L, R in basis.pairs():
        blk = vec[base:base + basis.N]
        if np.vdot(blk, blk).real >= 1e-24:
            out.amps[(L, R)] = blk.reshape(-1).copy()
    return out


def two_sided_defect(N: int, t: int, c: np.ndarray, d: np.ndarray, inverse: bool = False,
                     tol: float = 1e-8) -> float:
    """||D V_{<=t} (C ⊗ Q) - Q V_{<=t}||_op, or the inverse-query analogue
    ||C^dagger (V^dagger)_{<=t} (D^dagger ⊗ Q) - Q (V^dagger)_{<=t}||_op.

    Inputs above N - 1 recorded pairs are outside the oracle's domain and are dropped.
    The norm is taken over the (contiguous) input block of sectors <= t only.
    """
    basis = truncated_basis(N, t + 1)
    V = build_symmetric_V(basis)
    if inverse:
        V = V.H
        left, right = c.conj().T, d.conj().T
    else:
        left, right = d, c
    cap = min(t, N - 1)
    k_in = sum(basis.n(l) * basis.n(r) * N for l, r in basis.sectors if l + r <= cap)
    Vin = V.mat[:, :k_in].tocsr()
    Vin_h = Vin.conj().T.tocsr()
    A_left = a_operator(basis, left).as_linear_operator()
    A_right = a_operator(basis, right, with_q=(c, d)).as_linear_operator()
    Qop = build_Q(basis, c, d).as_linear_operator()

    def pad(v):
        out = np.zeros(basis.dim, dtype=complex)
        out[:k_in] = v
        return out

    def mv(v):
        v = np.asarray(v, dtype=complex).reshape(-1)
        lhs = A_left.matvec(Vin @ A_right.matvec(pad(v))[:k_in])
        return lhs - Qop.matvec(Vin @ v)

    def rmv(w):
        w = np.asarray(w, dtype=complex).reshape(-1)
        a = A_right.rmatvec(pad(Vin_h @ A_left.rmatvec(w)))[:k_in]
        return a - Vin_h @ Qop.rmatvec(w)

    op = spla.LinearOperator((basis.dim, k_in), matvec=mv, rmatvec=rmv, dtype=complex)
    return operator_norm(op, tol=tol, method="lanczos")
