"""Geometry of Z^d: boxes, balls, boundaries, distances, translations, tori.

Vertices are plain integer tuples. Regions keep a lexicographic vertex order
so that every enumeration downstream is deterministic given a seed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

Vertex = tuple

UNIT_STEPS_CACHE: dict = {}


def unit_steps(d: int) -> tuple:
    """The 2d unit steps of Z^d, in a fixed deterministic order."""
    steps = UNIT_STEPS_CACHE.get(d)
    if steps is None:
        steps = []
        for i in range(d):
            for s in (-1, 1):
                e = [0] * d
                e[i] = s
                steps.append(tuple(e))
        steps = tuple(sorted(steps))
        UNIT_STEPS_CACHE[d] = steps
    return steps


def l1(u: Vertex, v: Vertex) -> int:
    return sum(abs(a - b) for a, b in zip(u, v))


@dataclass(frozen=True)
class Region:
    """Finite subset of Z^d with deterministic (lexicographic) iteration order."""

    vertices: tuple
    dimension: int
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        verts = tuple(sorted(set(map(tuple, self.vertices))))
        object.__setattr__(self, "vertices", verts)
        for v in verts:
            if len(v) != self.dimension:
                raise ValueError(f"vertex {v} does not have dimension {self.dimension}")
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(verts)})

    def __iter__(self):
        return iter(self.vertices)

    def __len__(self):
        return len(self.vertices)

    def __contains__(self, v) -> bool:
        return tuple(v) in self._index

    def index(self, v) -> int:
        return self._index[tuple(v)]

    def translate(self, u: Vertex) -> "Region":
        return Region(tuple(tuple(a + b for a, b in zip(v, u)) for v in self.vertices),
                      self.dimension)

    def union(self, other: "Region") -> "Region":
        return Region(self.vertices + other.vertices, self.dimension)

    def difference(self, other: "Region") -> "Region":
        keep = tuple(v for v in self.vertices if v not in other)
        return Region(keep, self.dimension)

    def issubset(self, other: "Region") -> bool:
        return all(v in other for v in self.vertices)

    def diameter(self) -> int:
        """Max pairwise l1 distance, brute force (regions are desk-scale)."""
        if not self.vertices:
            return 0
        return max(l1(u, v) for u in self.vertices for v in self.vertices)


def region(vertices, d: int | None = None) -> Region:
    verts = tuple(map(tuple, vertices))
    if d is None:
        if not verts:
            raise ValueError("dimension required for an empty region")
        d = len(verts[0])
    return Region(verts, d)


def ball(r: float, d: int) -> Region:
    """The box [-r, r]^d intersected with Z^d (radius may be fractional)."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    if d < 1:
        raise ValueError("dimension must be positive")
    k = int(r)
    rng = range(-k, k + 1)
    return Region(tuple(itertools.product(rng, repeat=d)), d)


def boundary(V: Region) -> Region:
    """Vertices at graph distance exactly 1 from V (disjoint from V)."""
    out = set()
    for v in V:
        for e in unit_steps(V.dimension):
            u = tuple(a + b for a, b in zip(v, e))
            if u not in V:
                out.add(u)
    return Region(tuple(out), V.dimension)


def dist(A: Region, B: Region) -> int:
    """Minimum l1 distance over pairs; inputs must be non-empty."""
    if not len(A) or not len(B):
        raise ValueError("dist requires non-empty regions")
    return min(l1(u, v) for u in A for v in B)


def sphere_count(r: int, d: int) -> int:
    """Number of vertices of Z^d at l1 norm exactly r."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    if r == 0:
        return 1
    # choose the k nonzero coordinates, their signs, and a composition of r
    return sum((2 ** k) * math.comb(d, k) * math.comb(r - 1, k - 1)
               for k in range(1, min(d, r) + 1))


def region_to_text(V: Region) -> str:
    """One vertex per line, comma-separated integers."""
    return "\n".join(",".join(str(c) for c in v) for v in V) + "\n"


def region_from_text(text: str, d: int | None = None) -> Region:
    verts = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        verts.append(tuple(int(tok) for tok in line.split(",")))
    return region(verts, d)


class Torus:
    """Finite torus validation substrate. Side lengths must be >= 3 so that
    single-site neighborhoods have distinct members."""

    def __init__(self, sides):
        self.sides = tuple(int(s) for s in sides)
        if any(s < 3 for s in self.sides):
            raise ValueError("torus side lengths must be >= 3")
        self.dimension = len(self.sides)
        self._vertices = Region(
            tuple(itertools.product(*(range(s) for s in self.sides))), self.dimension)

    def wrap(self, v) -> Vertex:
        return tuple(a % s for a, s in zip(v, self.sides))

    def vertices(self) -> Region:
        return self._vertices

    def neighbors(self, v) -> tuple:
        v = self.wrap(v)
        return tuple(sorted({self.wrap(tuple(a + b for a, b in zip(v, e)))
                             for e in unit_steps(self.dimension)}))

    def dist(self, u, v) -> int:
        u, v = self.wrap(u), self.wrap(v)
        return sum(min(abs(a - b), s - abs(a - b))
                   for a, b, s in zip(u, v, self.sides))

    def edges(self) -> tuple:
        """All unordered adjacent pairs, each once, in deterministic order."""
        es = set()
        for v in self._vertices:
            for u in self.neighbors(v):
                es.add(tuple(sorted((v, u))))
        return tuple(sorted(es))


class LatticeGraph:
    """Adjacency view of Z^d itself (the coding substrate)."""

    def __init__(self, d: int):
        self.dimension = d

    def wrap(self, v) -> Vertex:
        return tuple(v)

    def neighbors(self, v) -> tuple:
        return tuple(tuple(a + b for a, b in zip(v, e))
                     for e in unit_steps(self.dimension))

    def dist(self, u, v) -> int:
        return l1(u, v)
