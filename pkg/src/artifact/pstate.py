"""Purified global states: a sparse map from purification key to a vector on A⊗B.

Keys depend on ``kind``:

* ``relation``        -- a :class:`Relation`
* ``pair``            -- a tuple ``(L, R)`` of relations
* ``permfunc``        -- an integer index into the dense P⊗F register
* ``permfunc_design`` -- a tuple of ints ``(pf_index, c_index[, d_index])``

Vectors are stored flat with A as the major index (A⊗B, big-endian).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .relations import Relation, decode, encode

KINDS = ("relation", "pair", "permfunc", "permfunc_design")
PRUNE = 1e-24


@dataclass
class PurifiedState:
    n: int
    m: int
    kind: str
    amps: dict = field(default_factory=dict)
    N_override: int | None = None  # allows non-power-of-two query registers (N=3 embeddings)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown key-space kind {self.kind!r}")

    @property
    def N(self) -> int:
        return self.N_override if self.N_override is not None else 2 ** self.n

    @property
    def dim_b(self) -> int:
        return 2 ** self.m

    @property
    def dim(self) -> int:
        return self.N * self.dim_b

    def __len__(self) -> int:
        return len(self.amps)

    def keys(self) -> list:
        return list(self.amps)

    def copy(self) -> "PurifiedState":
        return PurifiedState(self.n, self.m, self.kind, {k: v.copy() for k, v in self.amps.items()},
                             self.N_override)

    def like(self, amps: dict, kind: str | None = None) -> "PurifiedState":
        return PurifiedState(self.n, self.m, kind or self.kind, amps, self.N_override)

    def pruned(self) -> "PurifiedState":
        return self.like({k: v for k, v in self.amps.items() if np.vdot(v, v).real >= PRUNE})


def initial_state(n: int, m: int, kind: str, key: Hashable, N: int | None = None) -> PurifiedState:
    """|0^{n+m}>_{AB} tensored with a single purification basis key."""
    s = PurifiedState(n, m, kind, {}, N)
    v = np.zeros(s.dim, dtype=complex)
    v[0] = 1.0
    s.amps[key] = v
    return s


def _check_compatible(s1: PurifiedState, s2: PurifiedState) -> None:
    if s1.kind != s2.kind:
        raise ValueError(f"incompatible key-space kinds {s1.kind!r} and {s2.kind!r}")
    if s1.dim != s2.dim:
        raise ValueError(f"register dimensions differ: {s1.dim} vs {s2.dim}")


def apply_system_unitary(s: PurifiedState, u: np.ndarray) -> PurifiedState:
    u = np.asarray(u)
    if u.shape != (s.dim, s.dim):
        raise ValueError(f"unitary of shape {u.shape} does not act on dimension {s.dim}")
    if not s.amps:
        return s.copy()
    keys = list(s.amps)
    block = u @ np.stack([s.amps[k] for k in keys], axis=1)
    return s.like({k: block[:, i].copy() for i, k in enumerate(keys)})


def reduce_to_adversary(s: PurifiedState) -> np.ndarray:
    """rho_AB = sum_key v v^dagger."""
    if not s.amps:
        return np.zeros((s.dim, s.dim), dtype=complex)
    mat = np.stack(list(s.amps.values()), axis=1)
    return mat @ mat.conj().T


def inner_product(s1: PurifiedState, s2: PurifiedState) -> complex:
    _check_compatible(s1, s2)
    tot = 0j
    for k, v in s1.amps.items():
        w = s2.amps.get(k)
        if w is not None:
            tot += np.vdot(v, w)
    return complex(tot)


def norm2(s: PurifiedState) -> float:
    return float(sum(np.vdot(v, v).real for v in s.amps.values()))


def to_dense(s: PurifiedState, basis: Sequence[Hashable]) -> np.ndarray:
    """Flat vector over (purification basis) ⊗ A ⊗ B, purification major."""
    index = {k: i for i, k in enumerate(basis)}
    out = np.zeros((len(basis), s.dim), dtype=complex)
    for k, v in s.amps.items():
        if k not in index:
            raise KeyError(f"live key {k!r} missing from basis")
        out[index[k]] = v
    return out.reshape(-1)


def from_dense(vec: np.ndarray, basis: Sequence[Hashable], like: PurifiedState) -> PurifiedState:
    mat = np.asarray(vec, dtype=complex).reshape(len(basis), like.dim)
    amps = {k: mat[i].copy() for i, k in enumerate(basis) if np.vdot(mat[i], mat[i]).real >= PRUNE}
    return like.like(amps)


def add_states(s1: PurifiedState, s2: PurifiedState, a: complex = 1.0, b: complex = 1.0) -> PurifiedState:
    _check_compatible(s1, s2)
    out = {k: a * v for k, v in s1.amps.items()}
    for k, w in s2.amps.items():
        out[k] = out[k] + b * w if k in out else b * w
    return s1.like(out).pruned()


def apply_key_map(s: PurifiedState, rule: Callable[[Hashable, int], Iterable[tuple[Hashable, int, complex]]],
                  kind: str | None = None) -> PurifiedState:
    """Apply an operator that acts on (A, purification) and trivially on B.

    ``rule(key, a)`` lists the images ``(key', a', coeff)`` of the basis state
    |a>_A |key>.  Amplitudes over B ride along unchanged.
    """
    Nin, dB = s.N, s.dim_b
    out: dict = {}
    for key, v in s.amps.items():
        blocks = v.reshape(Nin, dB)
        for a in range(Nin):
            row = blocks[a]
            if not row.any():
                continue
            for key2, a2, c in rule(key, a):
                acc = out.get(key2)
                if acc is None:
                    acc = out[key2] = np.zeros((Nin, dB), dtype=complex)
                acc[a2] += c * row
    res = s.like({k: v.reshape(-1) for k, v in out.items()}, kind)
    return res.pruned()


# JSON debug dump ----------------------------------------------------------------

def _key_to_str(kind: str, key) -> str:
    if kind == "relation":
        return encode(key).hex()
    if kind == "pair":
        return encode(key[0]).hex() + "|" + encode(key[1]).hex()
    if kind == "permfunc":
        return str(int(key))
    return ",".join(str(int(k)) for k in key)


def _key_from_str(kind: str, text: str, N: int):
    if kind == "relation":
        return decode(N, bytes.fromhex(text))
    if kind == "pair":
        a, b = text.split("|")
        return decode(N, bytes.fromhex(a)), decode(N, bytes.fromhex(b))
    if kind == "permfunc":
        return int(text)
    return tuple(int(x) for x in text.split(","))


def dumps(s: PurifiedState) -> str:
    entries = [{"key": _key_to_str(s.kind, k), "re": v.real.tolist(), "im": v.imag.tolist()}
               for k, v in s.amps.items()]
    entries.sort(key=lambda e: e["key"])
    return json.dumps({"n": s.n, "m": s.m, "N": s.N, "kind": s.kind, "amps": entries})


def loads(text: str) -> PurifiedState:
    d = json.loads(text)
    N = int(d["N"])
    s = PurifiedState(int(d["n"]), int(d["m"]), d["kind"], {}, None if N == 2 ** int(d["n"]) else N)
    for e in d["amps"]:
        s.amps[_key_from_str(s.kind, e["key"], N)] = np.asarray(e["re"]) + 1j * np.asarray(e["im"])
    return s

