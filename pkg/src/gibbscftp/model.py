"""Nearest-neighbor specifications: alphabet, weights, hard constraints.

Five built-in models (Potts, proper colorings, hard-core, Widom-Rowlinson,
beach) are all expressed through one generic weighted form: vertex weights
x edge weights x symmetric hard constraints. A custom model can be loaded
from a structured text config.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeGraph, Region, boundary


@dataclass(frozen=True)
class Alphabet:
    """Finite ordered list of distinct symbol labels; indices stable."""

    symbols: tuple

    def __post_init__(self):
        syms = tuple(self.symbols)
        if len(syms) < 2:
            raise ValueError("alphabet needs at least 2 symbols")
        if len(set(syms)) != len(syms):
            raise ValueError("alphabet symbols must be distinct")
        object.__setattr__(self, "symbols", syms)

    def __len__(self):
        return len(self.symbols)

    def index(self, label) -> int:
        return self.symbols.index(label)


@dataclass(frozen=True)
class Spec:
    """A nearest-neighbor specification inducing conditional distributions.

    vertex_weight[a] > 0; edge_weight[a, b] symmetric and > 0 where allowed;
    edge_allowed[a, b] symmetric. Every symbol must have an allowed partner.
    """

    alphabet: Alphabet
    vertex_weight: tuple
    edge_weight: tuple
    edge_allowed: tuple
    dimension: int
    name: str = "custom"
    params: tuple = ()
    vw: np.ndarray = field(default=None, repr=False, compare=False)
    ew: np.ndarray = field(default=None, repr=False, compare=False)
    ok: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        q = len(self.alphabet)
        vw = np.asarray(self.vertex_weight, dtype=float)
        ew = np.asarray(self.edge_weight, dtype=float)
        ok = np.asarray(self.edge_allowed, dtype=bool)
        if vw.shape != (q,) or ew.shape != (q, q) or ok.shape != (q, q):
            raise ValueError("weight table shapes do not match alphabet size")
        if not np.all(vw > 0):
            raise ValueError("vertex weights must be strictly positive")
        if not np.array_equal(ew, ew.T) or not np.array_equal(ok, ok.T):
            raise ValueError("edge tables must be symmetric")
        if np.any((ew <= 0) & ok):
            raise ValueError("edge weights must be strictly positive where allowed")
        if not np.all(ok.any(axis=1)):
            raise ValueError("every symbol needs at least one allowed partner")
        object.__setattr__(self, "vertex_weight", tuple(map(float, vw)))
        object.__setattr__(self, "edge_weight", tuple(map(tuple, ew.tolist())))
        object.__setattr__(self, "edge_allowed", tuple(map(tuple, ok.tolist())))
        object.__setattr__(self, "vw", vw)
        object.__setattr__(self, "ew", np.where(ok, ew, 0.0))
        object.__setattr__(self, "ok", ok)

    @property
    def q(self) -> int:
        return len(self.alphabet)

    def key(self) -> tuple:
        return (self.name, self.params, self.dimension, self.alphabet.symbols)


@dataclass(frozen=True)
class BoundaryCondition:
    """Total symbol assignment (as alphabet indices) on a boundary region."""

    region: Region
    values: tuple

    def __post_init__(self):
        vals = tuple(int(x) for x in self.values)
        if len(vals) != len(self.region):
            raise ValueError("boundary condition must be total on its region")
        object.__setattr__(self, "values", vals)

    def value_at(self, v) -> int:
        return self.values[self.region.index(v)]

    @staticmethod
    def from_labels(spec: Spec, reg: Region, labels) -> "BoundaryCondition":
        return BoundaryCondition(reg, tuple(spec.alphabet.index(x) for x in labels))

    @staticmethod
    def constant(spec: Spec, reg: Region, label) -> "BoundaryCondition":
        s = spec.alphabet.index(label)
        return BoundaryCondition(reg, (s,) * len(reg))


def _require(cond: bool, name: str, msg: str):
    if not cond:
        raise ValueError(f"invalid parameter {name}: {msg}")


def make_model(name: str, params: dict, d: int) -> Spec:
    """Build one of {potts, coloring, hardcore, widom_rowlinson, beach, custom}."""
    _require(d >= 1, "d", "dimension must be >= 1")
    if name == "potts":
        q = int(params.get("q", 2))
        beta = float(params.get("beta", 0.0))
        _require(q >= 2, "q", "potts needs q >= 2")
        _require(math.isfinite(beta), "beta", "must be finite (use coloring for beta=-inf)")
        syms = tuple(range(1, q + 1))
        ew = np.ones((q, q))
        np.fill_diagonal(ew, math.exp(beta))
        return Spec(Alphabet(syms), np.ones(q), ew, np.ones((q, q), bool), d,
                    name="potts", params=(("q", q), ("beta", beta)))
    if name == "coloring":
        q = int(params.get("q", 3))
        _require(q >= 3, "q", "coloring needs q >= 3")
        syms = tuple(range(1, q + 1))
        ok = ~np.eye(q, dtype=bool)
        return Spec(Alphabet(syms), np.ones(q), np.ones((q, q)), ok, d,
                    name="coloring", params=(("q", q),))
    if name == "hardcore":
        lam = float(params.get("lambda", params.get("lam", 1.0)))
        _require(lam > 0, "lambda", "hardcore needs lambda > 0")
        ok = np.array([[True, True], [True, False]])
        return Spec(Alphabet((0, 1)), np.array([1.0, lam]), np.ones((2, 2)), ok, d,
                    name="hardcore", params=(("lambda", lam),))
    if name == "widom_rowlinson":
        q = int(params.get("q", 2))
        lam = float(params.get("lambda", params.get("lam", 1.0)))
        _require(q >= 1, "q", "widom_rowlinson needs q >= 1")
        _require(lam > 0, "lambda", "widom_rowlinson needs lambda > 0")
        syms = tuple(range(q + 1))
        vw = np.array([1.0] + [lam] * q)
        ok = np.zeros((q + 1, q + 1), bool)
        for a in range(q + 1):
            for b in range(q + 1):
                ok[a, b] = (a * b == 0) or (a == b)
        return Spec(Alphabet(syms), vw, np.ones((q + 1, q + 1)), ok, d,
                    name="widom_rowlinson", params=(("q", q), ("lambda", lam)))
    if name == "beach":
        lam = float(params.get("lambda", params.get("lam", 1.0)))
        _require(lam > 0, "lambda", "beach needs lambda > 0")
        syms = (-2, -1, 1, 2)
        vw = np.array([lam ** 2, lam, lam, lam ** 2])
        ok = np.zeros((4, 4), bool)
        for i, a in enumerate(syms):
            for j, b in enumerate(syms):
                ok[i, j] = a * b >= -1
        return Spec(Alphabet(syms), vw, np.ones((4, 4)), ok, d,
                    name="beach", params=(("lambda", lam),))
    if name == "custom":
        return spec_from_config(params["config"], d)
    raise ValueError(f"invalid parameter name: unknown model {name!r}")


def feasible_pairs(spec: Spec) -> set:
    """All unordered symbol-label pairs allowed across an edge."""
    out = set()
    syms = spec.alphabet.symbols
    for i, a in enumerate(syms):
        for j, b in enumerate(syms):
            if i <= j and spec.ok[i, j]:
                out.add((a, b))
    return out


def weight(spec: Spec, V: Region, tau: BoundaryCondition, omega,
           graph=None, bnd: Region | None = None) -> float:
    """Product of vertex weights over V and edge weights over all edges meeting V.

    omega is a tuple of symbol indices aligned with V's order; boundary symbols
    come from tau. Returns 0 if any hard constraint among these edges is violated.
    Pass a Torus as graph to use wrapped adjacency (validation substrate).

    Args:
        bnd: the boundary region tau lives on (recomputed when omitted).
    """
    if graph is None:
        graph = LatticeGraph(V.dimension)
    if bnd is None:
        bnd = tau.region
    w = 1.0
    for i, v in enumerate(V.vertices):
        a = omega[i]
        w *= spec.vw[a]
        for u in graph.neighbors(v):
            if u in V:
                if u > v:  # each interior edge once
                    b = omega[V.index(u)]
                    if not spec.ok[a, b]:
                        return 0.0
                    w *= spec.ew[a, b]
            else:
                b = tau.value_at(u)
                if not spec.ok[a, b]:
                    return 0.0
                w *= spec.ew[a, b]
    return w


def spec_to_config(spec: Spec) -> str:
    """Serialize a Spec to the structured text form accepted by spec_from_config."""
    cp = configparser.ConfigParser()
    cp["alphabet"] = {"symbols": ",".join(str(s) for s in spec.alphabet.symbols)}
    cp["vertex_weight"] = {str(s): repr(w) for s, w in
                           zip(spec.alphabet.symbols, spec.vertex_weight)}
    syms = spec.alphabet.symbols
    cp["edge_weight"] = {}
    cp["edge_allowed"] = {}
    for i, a in enumerate(syms):
        for j, b in enumerate(syms):
            if i <= j:
                key = f"{a},{b}"
                cp["edge_weight"][key] = repr(spec.edge_weight[i][j])
                cp["edge_allowed"][key] = str(bool(spec.ok[i, j])).lower()
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse_label(tok: str):
    tok = tok.strip()
    try:
        return int(tok)
    except ValueError:
        return tok


def spec_from_config(source, d: int) -> Spec:
    """Load a custom model from structured text: alphabet list, vertex-weight
    table, edge-weight/constraint tables keyed by symbol pairs."""
    cp = configparser.ConfigParser()
    if isinstance(source, str) and "\n" in source:
        cp.read_string(source)
    elif isinstance(source, dict):
        cp.read_dict(source)
    else:
        with open(source) as fh:
            cp.read_string(fh.read())
    syms = tuple(_parse_label(t) for t in cp["alphabet"]["symbols"].split(","))
    q = len(syms)
    idx = {str(s): i for i, s in enumerate(syms)}
    vw = np.ones(q)
    for key, val in cp["vertex_weight"].items():
        vw[idx[key]] = float(val)
    ew = np.ones((q, q))
    ok = np.ones((q, q), bool)
    if "edge_weight" in cp:
        for key, val in cp["edge_weight"].items():
            a, b = (idx[t.strip()] for t in key.split(","))
            ew[a, b] = ew[b, a] = float(val)
    if "edge_allowed" in cp:
        for key, val in cp["edge_allowed"].items():
            a, b = (idx[t.strip()] for t in key.split(","))
            ok[a, b] = ok[b, a] = val.strip().lower() in ("1", "true", "yes")
    return Spec(Alphabet(syms), vw, ew, ok, d, name="custom")


def is_interaction_free(spec: Spec) -> bool:
    """True when conditionals do not depend on the boundary at all."""
    return bool(np.all(spec.ok) and np.allclose(spec.ew, spec.ew[0, 0]))
