"""Dense complex linear algebra, distance measures and unitary ensembles.

Index convention: a composite register lists its subsystems left to right and
the basis index is big-endian over that list, so ``kron(a, b)`` puts ``a`` on
the most significant digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations
from math import factorial
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

TOL_EXACT = 1e-12
TOL_ISOMETRY = 1e-10
TOL_ITERATIVE = 1e-6

_MASK64 = (1 << 64) - 1


class ConvergenceError(RuntimeError):
    """Power iteration did not settle; carries the last estimate and iterate."""

    def __init__(self, message: str, estimate: float, vector: np.ndarray):
        super().__init__(message)
        self.estimate = estimate
        self.vector = vector


class CapacityError(RuntimeError):
    """A request exceeds a register or enumeration capacity (query budget, N cap, truncation)."""


# --------------------------------------------------------------------------
# basics
# --------------------------------------------------------------------------

def kron(*mats: np.ndarray) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for m in mats:
        out = np.kron(out, np.asarray(m))
    return out


def ket(index: int, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def is_unitary(u: np.ndarray, tol: float = TOL_ISOMETRY) -> bool:
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        return False
    return bool(np.max(np.abs(dagger(u) @ u - np.eye(u.shape[0]))) < tol)


def is_hermitian(a: np.ndarray, tol: float = TOL_ISOMETRY) -> bool:
    a = np.asarray(a)
    return a.shape[0] == a.shape[1] and bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= tol)


def partial_trace(rho: np.ndarray, dims: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Reduced operator on the subsystems listed in ``keep`` (order preserved)."""
    rho = np.asarray(rho)
    dims = [int(d) for d in dims]
    total = int(np.prod(dims))
    if rho.shape != (total, total):
        raise ValueError(f"dims {dims} do not match operator of shape {rho.shape}")
    keep = sorted(set(int(k) for k in keep))
    if any(k < 0 or k >= len(dims) for k in keep):
        raise ValueError(f"keep indices {keep} out of range for {len(dims)} subsystems")
    k = len(dims)
    t = rho.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    if 2 * k > len(letters):
        raise ValueError("too many subsystems")
    row = list(letters[:k])
    col = list(letters[k:2 * k])
    for i in range(k):
        if i not in keep:
            col[i] = row[i]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    red = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    d = int(np.prod([dims[i] for i in keep])) if keep else 1
    return red.reshape(d, d)


def trace_distance(rho: np.ndarray, sigma: np.ndarray, tol: float = TOL_ISOMETRY) -> float:
    """Half the trace norm of ``rho - sigma`` (inputs may be subnormalized)."""
    rho = np.asarray(rho)
    sigma = np.asarray(sigma)
    if rho.shape != sigma.shape:
        raise ValueError(f"shape mismatch {rho.shape} vs {sigma.shape}")
    if not (is_hermitian(rho, tol) and is_hermitian(sigma, tol)):
        raise ValueError("trace_distance expects Hermitian inputs")
    diff = rho - sigma
    diff = 0.5 * (diff + dagger(diff))
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))


def trace_norm(a: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(a), compute_uv=False)))


# --------------------------------------------------------------------------
# operator norms
# --------------------------------------------------------------------------

@dataclass
class NormResult:
    value: float
    residual: float
    iterations: int
    method: str


def _as_linop(a) -> scipy.sparse.linalg.LinearOperator:
    if isinstance(a, scipy.sparse.linalg.LinearOperator):
        return a
    if hasattr(a, "as_linear_operator"):
        return a.as_linear_operator()
    return scipy.sparse.linalg.aslinearoperator(a)


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    rmatvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    *,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    seed: int = 0,
) -> NormResult:
    """Largest singular value by power iteration on A^dagger A.

    Stops once the Rayleigh quotient changes by less than ``tol`` (relative)
    and the eigen-residual of A^dagger A is below ``sqrt(tol)`` relative; the
    residual is returned as the certificate.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam_prev = -1.0
    lam = 0.0
    resid = np.inf
    for it in range(1, max_iter + 1):
        w = rmatvec(matvec(v))
        lam = float(np.real(np.vdot(v, w)))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return NormResult(0.0, 0.0, it, "power")
        resid = float(np.linalg.norm(w - lam * v))
        scale = max(abs(lam), 1e-300)
        if abs(lam - lam_prev) <= tol * scale and resid <= np.sqrt(tol) * scale:
            return NormResult(float(np.sqrt(max(lam, 0.0))), resid / scale, it, "power")
        lam_prev = lam
        v = w / nw
    raise ConvergenceError(
        f"power iteration did not converge after {max_iter} steps (residual {resid:.3e})",
        float(np.sqrt(max(lam, 0.0))),
        v,
    )


def operator_norm(a, *, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0,
                  method: str = "auto", cross_check: bool = True) -> float:
    """Largest singular value.

    Dense arrays use an SVD. Sparse matrices and truncated operators use power
    iteration on A^dagger A; when the dimension is at most 512 the result is
    compared with a dense SVD. ``method="lanczos"`` swaps the power loop for
    ARPACK, which is only used for the large operator-norm scans.
    """
    return operator_norm_info(a, tol=tol, max_iter=max_iter, seed=seed, method=method,
                              cross_check=cross_check).value


def operator_norm_info(a, *, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0,
                       method: str = "auto", cross_check: bool = True) -> NormResult:
    if isinstance(a, np.ndarray) and method in ("auto", "dense"):
        if a.size == 0:
            return NormResult(0.0, 0.0, 0, "svd")
        return NormResult(float(np.linalg.norm(a, 2)), 0.0, 0, "svd")
    op = _as_linop(a)
    rows, cols = op.shape
    if method == "lanczos":
        res = _lanczos_norm(op, tol=tol, seed=seed)
    else:
        res = power_iteration(op.matvec, op.rmatvec, cols, tol=tol, max_iter=max_iter, seed=seed)
    if cross_check and max(rows, cols) <= 512:
        dense = op.matmat(np.eye(cols, dtype=complex))
        exact = float(np.linalg.norm(dense, 2)) if dense.size else 0.0
        if abs(exact - res.value) > max(TOL_ITERATIVE, 1e-6 * exact):
            raise ConvergenceError(
                f"iterative norm {res.value:.12g} disagrees with SVD {exact:.12g}", res.value,
                np.zeros(cols))
    return res


def _lanczos_norm(op, *, tol: float, seed: int) -> NormResult:
    rows, cols = op.shape
    gram = scipy.sparse.linalg.LinearOperator(
        (cols, cols), matvec=lambda v: op.rmatvec(op.matvec(v)), dtype=complex)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(cols) + 1j * rng.standard_normal(cols)
    if cols <= 2:
        dense = op.matmat(np.eye(cols, dtype=complex))
        return NormResult(float(np.linalg.norm(dense, 2)), 0.0, 0, "svd")
    probe = gram.matvec(v0)
    if np.linalg.norm(probe) <= 1e-14 * np.linalg.norm(v0):
        # a generic vector in the kernel of A^dagger A means A = 0 (ARPACK rejects this case)
        return NormResult(0.0, 0.0, 1, "lanczos")
    vals, vecs = scipy.sparse.linalg.eigsh(gram, k=1, which="LA", v0=v0, tol=tol)
    lam = float(vals[0])
    v = vecs[:, 0]
    resid = float(np.linalg.norm(gram.matvec(v) - lam * v)) / max(abs(lam), 1e-300)
    return NormResult(float(np.sqrt(max(lam, 0.0))), resid, 0, "lanczos")


# --------------------------------------------------------------------------
# seeds and sampling
# --------------------------------------------------------------------------

def splitmix64(seed: int, index: int = 0) -> int:
    """64-bit splitmix mixing of ``seed`` advanced by ``index`` steps."""
    z = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(splitmix64(seed, index))


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))[None, :]


def sample_haar(n: int, seed: int) -> np.ndarray:
    if not 1 <= n <= 4:
        raise ValueError("sample_haar supports 1 <= n <= 4 qubits")
    return haar_unitary(2 ** n, np.random.default_rng(splitmix64(seed)))


def haar_batch(dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((count, dim, dim)) + 1j * rng.standard_normal((count, dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=1, axis2=2)
    return q * (d / np.abs(d))[:, None, :]


# --------------------------------------------------------------------------
# Clifford group
# --------------------------------------------------------------------------

_H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_S = np.diag([1, 1j]).astype(complex)


def clifford_order(n: int) -> int:
    out = 2 ** (n * n + 2 * n)
    for j in range(1, n + 1):
        out *= 4 ** j - 1
    return out


def canonical_phase(u: np.ndarray) -> np.ndarray:
    """Fix the global phase so the first nonzero entry is positive real."""
    flat = u.reshape(-1)
    idx = int(np.argmax(np.abs(flat) > 1e-9))
    ph = flat[idx] / abs(flat[idx])
    return u / ph


def _clifford_key(u: np.ndarray) -> bytes:
    c = np.round(canonical_phase(u), 9) + (0.0 + 0.0j)
    return c.tobytes()


def _clifford_generators(n: int) -> list[np.ndarray]:
    eye = np.eye(2, dtype=complex)
    gens = []
    for q in range(n):
        for g in (_H, _S):
            ops = [eye] * n
            ops[q] = g
            gens.append(kron(*ops))
    if n == 2:
        gens.append(np.diag([1, 1, 1, -1]).astype(complex))
    return gens


@lru_cache(maxsize=None)
def _clifford_elements(n: int) -> np.ndarray:
    if n not in (1, 2):
        raise ValueError("Clifford enumeration is only supported for n in {1, 2}")
    gens = _clifford_generators(n)
    ident = np.eye(2 ** n, dtype=complex)
    seen = {_clifford_key(ident): 0}
    elems = [ident]
    frontier = [ident]
    while frontier:
        nxt = []
        for u in frontier:
            for g in gens:
                w = canonical_phase(g @ u)
                k = _clifford_key(w)
                if k not in seen:
                    seen[k] = len(elems)
                    elems.append(w)
                    nxt.append(w)
        frontier = nxt
    out = np.array(elems)
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitaryEnsemble:
    """A unitary distribution: enumerable (uniform over a list) or seeded Haar."""

    kind: str
    n: int
    seed: int = 0
    elements: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def dim(self) -> int:
        if self.elements is not None:
            return int(self.elements.shape[1])
        return 2 ** self.n

    @property
    def enumerable(self) -> bool:
        return self.kind in ("clifford", "enumerated-list", "single")

    def __len__(self) -> int:
        if not self.enumerable:
            raise TypeError("Haar ensemble is not enumerable")
        return int(self.elements.shape[0])

    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))

    def __iter__(self) -> Iterator[np.ndarray]:
        if not self.enumerable:
            raise TypeError("Haar ensemble is not enumerable")
        return iter(self.elements)

    def draw(self, index: int) -> np.ndarray:
        """Deterministic draw ``index`` (uniform element or Haar sample)."""
        rng = derive_rng(self.seed, index)
        if self.kind == "haar":
            return haar_unitary(self.dim, rng)
        return self.elements[int(rng.integers(len(self)))]

    def draw_index(self, index: int) -> int:
        if not self.enumerable:
            raise TypeError("Haar ensemble has no element indices")
        return int(derive_rng(self.seed, index).integers(len(self)))


def clifford_group(n: int) -> UnitaryEnsemble:
    return UnitaryEnsemble("clifford", n, 0, _clifford_elements(n))


def clifford_sample(n: int, seed: int) -> np.ndarray:
    return clifford_group(n).elements[int(np.random.default_rng(splitmix64(seed)).integers(clifford_order(n)))]


def haar_ensemble(n: int, seed: int) -> UnitaryEnsemble:
    return UnitaryEnsemble("haar", n, seed)


def enumerated_ensemble(mats: Sequence[np.ndarray]) -> UnitaryEnsemble:
    arr = np.array(mats, dtype=complex)
    n = int(round(np.log2(arr.shape[1])))
    kind = "single" if arr.shape[0] == 1 else "enumerated-list"
    return UnitaryEnsemble(kind, n, 0, arr)


# --------------------------------------------------------------------------
# permutation / phase unitaries and standard projectors
# --------------------------------------------------------------------------

def permutation_unitary(pi: Sequence[int]) -> np.ndarray:
    pi = [int(p) for p in pi]
    n = len(pi)
    if sorted(pi) != list(range(n)):
        raise ValueError(f"{pi} is not a bijection on [{n}]")
    p = np.zeros((n, n), dtype=complex)
    p[pi, np.arange(n)] = 1.0
    return p


def phase_unitary(f: Sequence[int], q: int = 2) -> np.ndarray:
    if q not in (2, 3):
        raise ValueError("phase base must be 2 or 3")
    f = np.asarray(f, dtype=int)
    if np.any(f < 0) or np.any(f >= q):
        raise ValueError(f"phase function values must lie in 0..{q - 1}")
    return np.diag(np.exp(2j * np.pi * f / q))


def swap_operator(dim: int) -> np.ndarray:
    s = np.zeros((dim * dim, dim * dim), dtype=complex)
    for i in range(dim):
        for j in range(dim):
            s[j * dim + i, i * dim + j] = 1.0
    return s


def eq_projector(dim: int) -> np.ndarray:
    p = np.zeros((dim * dim, dim * dim), dtype=complex)
    idx = np.arange(dim) * (dim + 1)
    p[idx, idx] = 1.0
    return p


def epr_vector(dim: int) -> np.ndarray:
    v = np.zeros(dim * dim, dtype=complex)
    v[np.arange(dim) * (dim + 1)] = 1.0 / np.sqrt(dim)
    return v


def epr_projector(dim: int) -> np.ndarray:
    v = epr_vector(dim)
    return np.outer(v, v.conj())


def tensor_permutation(dim: int, perm: Sequence[int]) -> np.ndarray:
    """Operator sending slot i of (C^dim)^{t} to slot perm[i]."""
    t = len(perm)
    size = dim ** t
    idx = np.arange(size).reshape((dim,) * t)
    moved = np.transpose(idx, np.argsort(perm)).reshape(-1)
    m = np.zeros((size, size), dtype=complex)
    m[moved, np.arange(size)] = 1.0
    return m


def sym_projector(dim: int, t: int) -> np.ndarray:
    """Projector onto the symmetric subspace of (C^dim)^{t}."""
    acc = np.zeros((dim ** t, dim ** t), dtype=complex)
    for perm in permutations(range(t)):
        acc += tensor_permutation(dim, perm)
    return acc / factorial(t)


def distinct_projector(dim: int, t: int) -> np.ndarray:
    """Diagonal projector onto basis strings of t pairwise distinct symbols."""
    digits = np.indices((dim,) * t).reshape(t, -1)
    ok = np.ones(dim ** t, dtype=bool)
    for i in range(t):
        for j in range(i + 1, t):
            ok &= digits[i] != digits[j]
    return np.diag(ok.astype(complex))


# --------------------------------------------------------------------------
# twirls and compensated sums
# --------------------------------------------------------------------------

class KahanSum:
    """Compensated running sum of equally shaped arrays."""

    def __init__(self, shape, dtype=complex):
        self.total = np.zeros(shape, dtype=dtype)
        self._comp = np.zeros(shape, dtype=dtype)
        self.count = 0

    def add(self, x: np.ndarray) -> None:
        y = x - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t
        self.count += 1


def twirl_average(ensemble: UnitaryEnsemble, observable: np.ndarray, mode: str = "UU",
                  samples: int | None = None) -> np.ndarray:
    """E[(U (x) V)^dagger M (U (x) V)] with V = U (mode "UU") or conj(U) ("U-conj").

    Exact for enumerable ensembles; otherwise the mean of ``samples`` seeded draws.
    """
    if mode not in ("UU", "U-conj"):
        raise ValueError("mode must be 'UU' or 'U-conj'")
    m = np.asarray(observable, dtype=complex)
    d = ensemble.dim
    if m.shape != (d * d, d * d):
        raise ValueError("observable must act on two copies of the ensemble register")
    if ensemble.enumerable:
        us = ensemble.elements
    else:
        if samples is None:
            raise ValueError("sampled ensembles need an explicit sample count")
        us = np.array([ensemble.draw(i) for i in range(samples)])
    vs = us if mode == "UU" else us.conj()
    acc = np.zeros_like(m)
    chunk = 1024
    for s in range(0, len(us), chunk):
        u = us[s:s + chunk]
        v = vs[s:s + chunk]
        w = np.einsum("kij,kab->kiajb", u, v).reshape(len(u), d * d, d * d)
        acc += np.sum(dagger(w) @ m @ w, axis=0)
    return acc / len(us)


# --------------------------------------------------------------------------
# Weingarten calculus
# --------------------------------------------------------------------------

def _cycles(p: Sequence[int]) -> int:
    seen, count = set(), 0
    for i in range(len(p)):
        if i not in seen:
            count += 1
            j = i
            while j not in seen:
                seen.add(j)
                j = p[j]
    return count


@lru_cache(maxsize=None)
def weingarten_table(d: int, t: int) -> tuple[tuple[tuple[int, ...], ...], np.ndarray]:
    """Permutations of S_t and the matrix Wg[s, u] with

        E[prod_k U_{i_k j_k} conj(U_{i'_k j'_k})] = sum_{s,u} Wg[s,u] prod_k d(i_k, i'_{s(k)}) d(j_k, j'_{u(k)}).

    Wg is the inverse of the Gram matrix d^{cycles(s^-1 u)}; for d < t the
    Gram matrix is singular and the pseudo-inverse gives the correct moments.
    """
    perms = tuple(permutations(range(t)))
    gram = np.empty((len(perms), len(perms)))
    for a, s in enumerate(perms):
        inv = np.argsort(s)
        for b, u in enumerate(perms):
            gram[a, b] = float(d) ** _cycles([inv[u[k]] for k in range(t)])
    wg = np.linalg.pinv(gram)
    wg.setflags(write=False)
    return perms, wg
