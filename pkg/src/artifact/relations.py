"""Relations (multisets of input/output pairs), relation states and restricted sets."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations, combinations_with_replacement, permutations, product
from math import comb, factorial, prod, sqrt
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

Pair = tuple[int, int]


@dataclass(frozen=True)
class Relation:
    """Canonical sorted multiset of (x, y) pairs over [N]^2."""

    N: int
    pairs: tuple[Pair, ...] = ()

    def __post_init__(self):
        ps = tuple(sorted((int(x), int(y)) for x, y in self.pairs))
        for x, y in ps:
            if not (0 <= x < self.N and 0 <= y < self.N):
                raise ValueError(f"pair {(x, y)} outside [{self.N}]^2")
        object.__setattr__(self, "pairs", ps)

    @classmethod
    def empty(cls, N: int) -> "Relation":
        return cls(N, ())

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    def __lt__(self, other: "Relation") -> bool:
        return (len(self), self.pairs) < (len(other), other.pairs)

    @property
    def size(self) -> int:
        return len(self.pairs)

    @property
    def n(self) -> int:
        """Qubit count; only defined when N is a power of two."""
        if self.N & (self.N - 1):
            raise ValueError(f"N={self.N} is not a power of two")
        return self.N.bit_length() - 1

    @cached_property
    def dom(self) -> frozenset[int]:
        return frozenset(x for x, _ in self.pairs)

    @cached_property
    def im(self) -> frozenset[int]:
        return frozenset(y for _, y in self.pairs)

    def num(self, pair: Pair) -> int:
        return self.pairs.count((int(pair[0]), int(pair[1])))

    def is_injective(self) -> bool:
        return len(self.im) == len(self.pairs)

    def is_bijective(self) -> bool:
        return len(self.im) == len(self.pairs) and len(self.dom) == len(self.pairs)

    def insert(self, pair: Pair) -> "Relation":
        return Relation(self.N, self.pairs + ((int(pair[0]), int(pair[1])),))

    def remove_one(self, pair: Pair) -> "Relation":
        pair = (int(pair[0]), int(pair[1]))
        if pair not in self.pairs:
            raise KeyError(f"{pair} not in relation")
        ps = list(self.pairs)
        ps.remove(pair)
        return Relation(self.N, tuple(ps))

    def union(self, other: "Relation") -> "Relation":
        return Relation(self.N, self.pairs + other.pairs)

    def key(self) -> bytes:
        return encode(self)

    def multiplicity_factor(self) -> int:
        return prod(factorial(c) for c in Counter(self.pairs).values())

    def __repr__(self) -> str:
        return "{" + ",".join(f"({x},{y})" for x, y in self.pairs) + "}"


# free functions ----------------------------------------------------------

def dom(r: Relation) -> frozenset[int]:
    return r.dom


def im(r: Relation) -> frozenset[int]:
    return r.im


def num(r: Relation, pair: Pair) -> int:
    return r.num(pair)


def is_injective(r: Relation) -> bool:
    return r.is_injective()


def is_bijective(r: Relation) -> bool:
    return r.is_bijective()


def insert(r: Relation, pair: Pair) -> Relation:
    return r.insert(pair)


def remove_one(r: Relation, pair: Pair) -> Relation:
    return r.remove_one(pair)


# byte keys: each pair is two big-endian uint16 values --------------------------

def encode(r: Relation) -> bytes:
    return b"".join(struct.pack(">HH", x, y) for x, y in r.pairs)


def decode(N: int, data: bytes) -> Relation:
    if len(data) % 4:
        raise ValueError("relation key length must be a multiple of 4 bytes")
    vals = struct.unpack(">" + "H" * (len(data) // 2), data)
    return Relation(N, tuple(zip(vals[0::2], vals[1::2])))


# relation states ---------------------------------------------------------------

MAX_EXPAND = 4


def expand_relation_state(r: Relation) -> np.ndarray:
    """|R> as a unit vector over (C^{N^2})^{|R|}; slot value is x*N + y."""
    t = len(r)
    if t > MAX_EXPAND:
        raise ValueError(f"relation of size {t} exceeds the expansion cap {MAX_EXPAND}")
    d = r.N * r.N
    out = np.zeros(d ** t, dtype=complex)
    syms = [x * r.N + y for x, y in r.pairs]
    for perm in permutations(range(t)):
        idx = 0
        for i in perm:
            idx = idx * d + syms[i]
        out[idx] += 1.0
    return out / sqrt(factorial(t) * r.multiplicity_factor())


# enumeration ---------------------------------------------------------------------

def enumerate_relations(N: int, size: int, kind: str = "all") -> list[Relation]:
    """All relations of a given size in canonical (lexicographic) order."""
    if kind == "all":
        cells = [(x, y) for x in range(N) for y in range(N)]
        return [Relation(N, c) for c in combinations_with_replacement(cells, size)]
    if kind == "injective":
        out = []
        for ys in combinations(range(N), size):
            for xs in product(range(N), repeat=size):
                out.append(Relation(N, tuple(zip(xs, ys))))
        return sorted(set(out), key=lambda r: r.pairs)
    if kind == "bijective":
        out = []
        for xs in combinations(range(N), size):
            for ys in permutations(range(N), size):
                out.append(Relation(N, tuple(zip(xs, ys))))
        return sorted(out, key=lambda r: r.pairs)
    raise ValueError(f"unknown relation class {kind!r}")


def count_relations(N: int, size: int) -> int:
    return comb(N * N + size - 1, size)


# restricted sets -------------------------------------------------------------------

@dataclass
class RestrictedSet:
    """A subset of relations of size at most ``t_max``.

    Members are injective unless ``injective=False``, which admits multiset records
    with repeated pairs (used by the identity-relation example).
    """

    N: int
    t_max: int
    predicate: Callable[[Relation], bool]
    name: str = "custom"
    injective: bool = True
    _members: dict = field(default_factory=dict, repr=False)

    def contains(self, r: Relation) -> bool:
        if len(r) > self.t_max or (self.injective and not r.is_injective()):
            return False
        return bool(self.predicate(r))

    def members(self, t: int) -> list[Relation]:
        if t not in self._members:
            if t > self.t_max:
                self._members[t] = []
            else:
                kind = "injective" if self.injective else "all"
                self._members[t] = [r for r in enumerate_relations(self.N, t, kind) if self.predicate(r)]
        return self._members[t]

    def extensions(self, r: Relation, x: int) -> list[int]:
        """The y values with r + (x, y) in the set (their count is Z_{x,R})."""
        if len(r) >= self.t_max:
            return []
        return [y for y in range(self.N)
                if (not self.injective or y not in r.im) and self.contains(r.insert((x, y)))]

    def z(self, x: int, r: Relation) -> int:
        return len(self.extensions(r, x))


@dataclass
class RestrictedSetReport:
    consistent: bool
    uniform_growth: bool
    z_table: dict[int, int] | None
    reasons: list[str]


def restricted_set_check(s: RestrictedSet) -> RestrictedSetReport:
    """Exhaustive consistency and uniform-growth verdicts.

    Uniform growth is required to hold with nonempty levels: a level with no
    relations has no well-defined growth count, so it fails the check.
    """
    reasons: list[str] = []
    consistent = True
    for t in range(s.t_max + 1):
        mem = s.members(t)
        covered = {tuple(sorted(x for x, _ in r.pairs)) for r in mem}
        need = comb(s.N + t - 1, t)
        if len(covered) != need:
            consistent = False
            reasons.append(f"size {t}: {need - len(covered)} input multisets have no member")
            break
        if t > 0:
            prev = set(s.members(t - 1))
            for r in mem:
                if any(r.remove_one(p) not in prev for p in set(r.pairs)):
                    consistent = False
                    reasons.append(f"size {t}: member {r} has a sub-relation outside the set")
                    break
            if not consistent:
                break
    uniform = True
    table: dict[int, int] = {}
    for t in range(s.t_max):
        mem = s.members(t)
        if not mem:
            uniform = False
            reasons.append(f"size {t}: empty level, growth count undefined")
            break
        counts = {s.z(x, r) for r in mem for x in range(s.N)}
        if len(counts) != 1 or min(counts) < 1:
            uniform = False
            reasons.append(f"size {t}: growth counts {sorted(counts)}")
            break
        table[t] = counts.pop()
    return RestrictedSetReport(consistent, uniform, table if uniform else None, reasons)


def growth_product(s: RestrictedSet, t: int) -> float:
    """prod_{i<t} Z_i * (N - t)! / N!, the weight of the set inside all injective records."""
    rep = restricted_set_check(s)
    if rep.z_table is None:
        raise ValueError("set does not satisfy uniform growth")
    out = 1.0
    for i in range(t):
        out *= rep.z_table[i] / (s.N - i)
    return out


# named sets --------------------------------------------------------------------------

def all_injective(N: int, t_max: int | None = None) -> RestrictedSet:
    return RestrictedSet(N, N if t_max is None else t_max, lambda r: True, "all-injective")


def identity_relations(N: int, t_max: int | None = None, injective: bool = False) -> RestrictedSet:
    """Records made only of pairs (x, x).

    As multisets (the default) every input tuple, repeats included, has exactly one
    record, so the set is consistent with Z_t = 1.  With ``injective=True`` a repeated
    input has no record, and the literal reading fails both checks.
    """
    return RestrictedSet(N, N if t_max is None else t_max,
                         lambda r: all(x == y for x, y in r.pairs), "identity", injective)


def full_size_only(N: int) -> RestrictedSet:
    return RestrictedSet(N, N, lambda r: len(r) == N, "full-size-only")


def bits_of(y: int, n: int, positions: Sequence[int]) -> int:
    """Value of the listed bit positions of an n-bit y (position 0 is the most significant)."""
    out = 0
    for p in positions:
        out = (out << 1) | ((y >> (n - 1 - p)) & 1)
    return out


def image_bits_distinct(n: int, positions: Sequence[int], t_max: int | None = None,
                        name: str | None = None) -> RestrictedSet:
    """Injective relations whose images are pairwise distinct on the given bit positions."""
    positions = tuple(positions)

    def pred(r: Relation) -> bool:
        vals = [bits_of(y, n, positions) for _, y in r.pairs]
        return len(set(vals)) == len(vals)

    cap = 2 ** len(positions) if t_max is None else t_max
    return RestrictedSet(2 ** n, cap, pred, name or f"image-bits{list(positions)}")


def image_prefix_distinct(n: int, k: int) -> RestrictedSet:
    """First example of the framework: the first k bits of the images are distinct."""
    return image_bits_distinct(n, range(k), name=f"image-prefix-{k}")
