"""Subsystem dictionaries, dynamics, interconnection topologies and network assembly.

A subsystem evolves as ``xdot = A Z(x) + B u + D w + B gamma(x, t)`` where ``Z`` is a
dictionary whose first ``n`` entries are the coordinates themselves. Subsystems are
wired together through directed edges ``j -> i`` carrying a weight block ``D_ij`` so
that the internal input of ``i`` is the stack of its neighbours' states.

Indices are zero-based in code. Text dictionaries use one-based variable names
(``x1``, ``x2``, ...), matching how dynamics are usually written down.
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

TOPOLOGY_KINDS = ("fully_connected", "ring", "binary_tree", "star", "line", "custom")

# Default coupling weights of the benchmark networks.
DEFAULT_WEIGHTS = {
    "fully_connected": 5e-4,
    "ring": 1e-2,
    "binary_tree": 1e-2,
    "star": 1e-2,
    "line": 1e-2,
    "custom": 1e-2,
}


class DomainError(ValueError):
    """A dictionary entry evaluated to a non-finite value."""


class DimensionError(ValueError):
    """Array shapes do not agree with the model they are used with."""


class NormalizationWarning(UserWarning):
    """The dictionary does not vanish at the origin."""


# ---------------------------------------------------------------------------
# Dictionary grammar
# ---------------------------------------------------------------------------

_FACTOR = re.compile(r"^x(\d+)(?:\^(\d+))?$")
_FUNC = re.compile(r"^(sin|cos)\((.+)\)$")
_LOG = re.compile(r"^ln\(1\+x(\d+)\^2\)$")


@dataclass(frozen=True)
class Term:
    """One nonlinear basis function of a dictionary.

    ``op`` is one of ``"mono"``, ``"sin"``, ``"cos"`` or ``"ln1p_sq"``. For the first
    three, ``exponents`` holds the monomial (the argument for sin/cos); for
    ``"ln1p_sq"`` ``index`` is the coordinate inside ``ln(1 + x_k^2)``.
    """

    text: str
    op: str
    exponents: tuple[int, ...] = ()
    index: int = -1

    def _monomial(self, X: np.ndarray) -> np.ndarray:
        out = None
        for k, e in enumerate(self.exponents):
            if e == 0:
                continue
            f = X[..., k] if e == 1 else X[..., k] ** e
            out = f if out is None else out * f
        return out

    def monomial_source(self) -> str:
        parts = []
        for k, e in enumerate(self.exponents):
            if e:
                parts.append(f"x{k}" if e == 1 else f"x{k}**{e}")
        return "*".join(parts)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self.op == "mono":
            return self._monomial(X)
        if self.op == "sin":
            return np.sin(self._monomial(X))
        if self.op == "cos":
            return np.cos(self._monomial(X))
        return np.log1p(X[..., self.index] ** 2)


def _parse_monomial(expr: str, n: int) -> tuple[int, ...]:
    exps = [0] * n
    for factor in expr.split("*"):
        m = _FACTOR.match(factor)
        if not m:
            raise ValueError(f"cannot parse factor {factor!r}")
        k = int(m.group(1)) - 1
        if not 0 <= k < n:
            raise ValueError(f"variable x{k + 1} out of range for n={n}")
        exps[k] += int(m.group(2) or 1)
    return tuple(exps)


def parse_term(text: str, n: int) -> Term:
    """Parse one entry of the closed term grammar.

    Accepted forms (whitespace ignored): monomials such as ``x1^2`` or ``x1*x2^3``
    of total degree >= 2, ``sin(<monomial>)``, ``cos(<monomial>)`` and
    ``ln(1+xk^2)``.
    """
    s = "".join(text.split())
    m = _LOG.match(s)
    if m:
        k = int(m.group(1)) - 1
        if not 0 <= k < n:
            raise ValueError(f"variable x{k + 1} out of range for n={n}")
        return Term(s, "ln1p_sq", index=k)
    m = _FUNC.match(s)
    if m:
        return Term(s, m.group(1), exponents=_parse_monomial(m.group(2), n))
    exps = _parse_monomial(s, n)
    if sum(exps) < 2:
        raise ValueError(f"{text!r} is linear; linear terms form the dictionary head")
    return Term(s, "mono", exponents=exps)


@dataclass(frozen=True)
class Dictionary:
    """Ordered basis ``Z(x) = [x; M(x)]`` with a linear head of length ``n``."""

    n: int
    terms: tuple[Term, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("state dimension must be >= 1")
        object.__setattr__(self, "_compiled", _compile(self.n, self.terms))
        z0 = self.evaluate_batch(np.zeros((1, self.n)), check=False)[0]
        if np.any(z0 != 0.0):
            bad = [self.names[k] for k in np.flatnonzero(z0)]
            warnings.warn(f"dictionary does not vanish at the origin: {bad}",
                          NormalizationWarning, stacklevel=3)

    @classmethod
    def from_terms(cls, n: int, terms: Sequence[str] = ()) -> "Dictionary":
        return cls(n, tuple(parse_term(t, n) for t in terms))

    @property
    def z(self) -> int:
        return self.n + len(self.terms)

    @property
    def names(self) -> list[str]:
        return [f"x{k + 1}" for k in range(self.n)] + [t.text for t in self.terms]

    @property
    def term_strings(self) -> list[str]:
        return [t.text for t in self.terms]

    def evaluate_batch(self, X, check: bool = True) -> np.ndarray:
        """Evaluate on an array of states with trailing dimension ``n``."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n:
            raise DimensionError(f"expected trailing dimension {self.n}, got {X.shape}")
        out = np.empty(X.shape[:-1] + (self.z,))
        out[..., : self.n] = X
        with np.errstate(over="ignore", invalid="ignore"):
            for k, term in enumerate(self.terms):
                out[..., self.n + k] = term(X)
        if check and not np.all(np.isfinite(out)):
            raise DomainError("dictionary evaluated to a non-finite value")
        return out

    def evaluate_rows(self, X: np.ndarray) -> np.ndarray:
        """Fast path for a contiguous ``(k, n)`` array; no checks, shared subexpressions."""
        return self._compiled(X)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"expected shape ({self.n},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("state is not finite")
        return self.evaluate_batch(x[None, :])[0]

    def nonlinear(self, x) -> np.ndarray:
        return self.evaluate(x)[self.n:]


def _compile(n: int, terms: Sequence[Term]):
    """Generate one numpy function evaluating the whole dictionary on ``(k, n)`` rows.

    Only grammar-produced terms reach here, so the generated source is closed over
    a fixed vocabulary (column views, products, sin, cos, log1p).
    """
    lines = ["def _z(X):", f"    out = np.empty((X.shape[0], {n + len(terms)}))",
             f"    out[:, :{n}] = X"]
    lines += [f"    x{k} = X[:, {k}]" for k in range(n)]
    shared: dict[str, str] = {}

    def mono(t: Term) -> str:
        src = t.monomial_source()
        if src not in shared:
            shared[src] = f"m{len(shared)}"
            lines.append(f"    {shared[src]} = {src}")
        return shared[src]

    for k, t in enumerate(terms):
        col = n + k
        if t.op == "mono":
            lines.append(f"    out[:, {col}] = {mono(t)}")
        elif t.op in ("sin", "cos"):
            lines.append(f"    out[:, {col}] = np.{t.op}({mono(t)})")
        else:
            lines.append(f"    out[:, {col}] = np.log1p(x{t.index} * x{t.index})")
    lines.append("    return out")
    ns = {"np": np}
    exec("\n".join(lines), ns)
    return ns["_z"]


def eval_dictionary(dictionary: Dictionary, x) -> np.ndarray:
    return dictionary.evaluate(x)


# ---------------------------------------------------------------------------
# Subsystems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SinusoidalPerturbation:
    """Matched perturbation ``gamma(t) = amplitude * sin(frequency * t + phase)``.

    ``gamma_sup`` is the declared bound on ``|gamma|``; it must dominate the
    generator's true supremum ``|amplitude|``.
    """

    amplitude: np.ndarray
    frequency: np.ndarray
    phase: np.ndarray
    gamma_sup: float

    def __post_init__(self):
        for name in ("amplitude", "frequency", "phase"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if not (self.amplitude.shape == self.frequency.shape == self.phase.shape):
            raise DimensionError("amplitude, frequency and phase must share a shape")
        if self.gamma_sup < 0:
            raise ValueError("gamma_sup must be non-negative")
        if np.linalg.norm(self.amplitude) > self.gamma_sup * (1 + 1e-12):
            raise ValueError("declared gamma_sup is smaller than the perturbation amplitude")

    @classmethod
    def zero(cls, m: int) -> "SinusoidalPerturbation":
        z = np.zeros(m)
        return cls(z, z, z, 0.0)

    @property
    def m(self) -> int:
        return self.amplitude.size

    @property
    def shortest_period(self) -> float:
        active = self.frequency[(self.frequency > 0) & (self.amplitude != 0)]
        return float(2 * math.pi / active.max()) if active.size else math.inf

    def __call__(self, x, t: float) -> np.ndarray:
        return self.amplitude * np.sin(self.frequency * t + self.phase)


@dataclass(frozen=True, eq=False)
class SubsystemModel:
    """Ground-truth subsystem ``(A, B, dictionary, perturbation)``.

    Only simulators and test oracles look inside; synthesis works from sampled data.
    ``kind`` labels structurally identical subsystems so one design can be shared.
    """

    A: np.ndarray
    B: np.ndarray
    dictionary: Dictionary
    perturbation: SinusoidalPerturbation
    kind: str = "default"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        B = np.asarray(self.B, float)
        if B.ndim == 1:
            B = B[:, None]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        n = self.dictionary.n
        if A.shape != (n, self.dictionary.z):
            raise DimensionError(f"A must be {n}x{self.dictionary.z}, got {A.shape}")
        if B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {B.shape}")
        if self.perturbation.m != B.shape[1]:
            raise DimensionError("perturbation width must equal the number of inputs")
        A.setflags(write=False)
        B.setflags(write=False)

    @property
    def n(self) -> int:
        return self.dictionary.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def z(self) -> int:
        return self.dictionary.z

    @property
    def gamma_sup(self) -> float:
        return self.perturbation.gamma_sup


def subsystem_rhs(model: SubsystemModel, x, u, w=None, t: float = 0.0, D=None,
                  perturbed: bool = False) -> np.ndarray:
    """Vector field ``A Z(x) + B u + D w`` plus ``B gamma(x, t)`` when ``perturbed``."""
    x = np.asarray(x, float)
    u = np.atleast_1d(np.asarray(u, float))
    if u.shape != (model.m,):
        raise DimensionError(f"u must have shape ({model.m},), got {u.shape}")
    out = model.A @ model.dictionary.evaluate(x) + model.B @ u
    if w is not None and np.size(w):
        if D is None:
            raise DimensionError("internal input given without a coupling matrix")
        D = np.atleast_2d(np.asarray(D, float))
        w = np.asarray(w, float)
        if D.shape != (model.n, w.size):
            raise DimensionError(f"D must be {model.n}x{w.size}, got {D.shape}")
        out = out + D @ w
    if perturbed:
        out = out + model.B @ model.perturbation(x, t)
    return out


# ---------------------------------------------------------------------------
# Topologies
# ---------------------------------------------------------------------------

class Topology:
    """Directed influence graph with a coupling block on every edge.

    Edges are held as parallel integer arrays ``src``/``dst`` (edge ``src -> dst``
    means ``x_src`` enters subsystem ``dst``), kept sorted by ``(dst, src)``.
    ``block_of[e]`` indexes into ``blocks`` so built-in patterns share one block.
    """

    def __init__(self, kind: str, N: int, src, dst, blocks, block_of=None):
        if kind not in TOPOLOGY_KINDS:
            raise ValueError(f"unknown topology kind {kind!r}")
        src = np.asarray(src, dtype=np.int64).reshape(-1)
        dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise ValueError("src and dst must have the same length")
        if isinstance(blocks, np.ndarray) and blocks.ndim == 2:
            blocks = [blocks]
        blocks = [np.atleast_2d(np.asarray(b, float)) for b in blocks]
        for b in blocks:
            b.setflags(write=False)
        block_of = (np.zeros(src.size, np.int64) if block_of is None
                    else np.asarray(block_of, np.int64).reshape(-1))
        if block_of.shape != src.shape or (src.size and not 0 <= block_of.min() <= block_of.max() < len(blocks)):
            raise ValueError("block_of must index blocks for every edge")
        if src.size:
            if np.any(src == dst):
                raise ValueError(f"self-edge on subsystem {int(src[src == dst][0])}")
            if min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= N:
                raise ValueError("edge references a missing subsystem")
        order = np.lexsort((src, dst))
        src, dst, block_of = src[order], dst[order], block_of[order]
        if src.size > 1:
            dup = (np.diff(src) == 0) & (np.diff(dst) == 0)
            if np.any(dup):
                k = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate edge {src[k]}->{dst[k]}")
        for a in (src, dst, block_of):
            a.setflags(write=False)
        self.kind, self.N = kind, int(N)
        self.src, self.dst, self.block_of, self.blocks = src, dst, block_of, tuple(blocks)
        self._ptr = np.searchsorted(dst, np.arange(N + 1))

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def neighbors(self, i: int) -> list[int]:
        """Subsystems influencing ``i``, ascending."""
        return self.src[self._ptr[i]:self._ptr[i + 1]].tolist()

    def in_degree(self) -> np.ndarray:
        return np.diff(self._ptr)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.N)

    def weight(self, i: int, j: int) -> np.ndarray | None:
        lo, hi = self._ptr[i], self._ptr[i + 1]
        k = lo + int(np.searchsorted(self.src[lo:hi], j))
        if k < hi and self.src[k] == j:
            return self.blocks[self.block_of[k]]
        return None

    def pairs(self) -> list[tuple[int, int]]:
        """All ``(src, dst)`` pairs, sorted by destination then source."""
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def out_neighbors(self, j: int) -> list[int]:
        return self.dst[self.src == j].tolist()

    def __repr__(self) -> str:
        return f"Topology(kind={self.kind!r}, N={self.N}, edges={self.n_edges})"


def antidiagonal(n_dst: int, n_src: int) -> np.ndarray:
    return np.fliplr(np.eye(n_dst, n_src))


def _kind_pairs(kind: str, N: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(N)
    if kind == "fully_connected":
        dst, src = np.divmod(np.arange(N * N), N)
        keep = src != dst
        return src[keep], dst[keep]
    if kind == "ring":
        return (i - 1) % N, i
    if kind == "line":
        return i[1:] - 1, i[1:]
    if kind == "star":
        return np.zeros(N - 1, np.int64), i[1:]
    if kind == "binary_tree":
        return (i[1:] - 1) // 2, i[1:]
    raise ValueError(f"no built-in pattern for {kind!r}")


def build_topology(kind: str, N: int, weight: float | None = None, n: int = 2,
                   block: np.ndarray | None = None) -> Topology:
    """Build one of the standard interconnection patterns.

    Every edge carries ``weight * block`` where ``block`` defaults to the
    ``n x n`` anti-diagonal (coordinate 1 of the source drives coordinate n of the
    destination and so on). Node 0 is the hub of a star and the root of a tree;
    in a tree, node ``k`` has children ``2k+1`` and ``2k+2``.
    """
    if kind == "custom":
        raise ValueError("custom topologies are built with custom_topology(...)")
    if kind not in TOPOLOGY_KINDS:
        raise ValueError(f"unknown topology kind {kind!r}")
    if N < 2:
        raise ValueError("a network needs at least two subsystems")
    if kind == "binary_tree" and (N + 1) & N:
        raise ValueError("binary_tree needs N = 2^l - 1")
    if weight is None:
        weight = DEFAULT_WEIGHTS[kind]
    W = weight * (antidiagonal(n, n) if block is None else np.asarray(block, float))
    src, dst = _kind_pairs(kind, N)
    return Topology(kind, N, src, dst, [W])


def custom_topology(N: int, pairs: Sequence[tuple[int, int]], weight: float = 1e-2,
                    n: int = 2, block=None) -> Topology:
    """Topology from explicit ``(src, dst)`` pairs sharing one coupling block."""
    W = weight * (antidiagonal(n, n) if block is None else np.asarray(block, float))
    pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    return Topology("custom", N, pairs[:, 0], pairs[:, 1], [W])


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Group:
    """Subsystems sharing a dictionary and dimensions, stacked for vectorised evaluation."""

    members: np.ndarray          # subsystem indices
    state_idx: np.ndarray        # (G, n) flat state indices
    input_idx: np.ndarray        # (G, m) flat input indices
    dictionary: Dictionary
    A: np.ndarray                # (G, n, z)
    B: np.ndarray                # (G, n, m)
    amp: np.ndarray              # (G, m)
    freq: np.ndarray
    phase: np.ndarray


class NetworkModel:
    """Interconnection of subsystems under a topology.

    The internal input of subsystem ``i`` is the stack of ``x_j`` over its
    neighbours ``j`` (ascending). ``coupling_matrix(i)`` returns the matching
    ``D_i``; with ``compact=False`` it is padded with zero blocks for every other
    subsystem so that its width is ``sum_{j != i} n_j``.
    """

    def __init__(self, subsystems: Sequence[SubsystemModel], topology: Topology):
        self.subsystems = tuple(subsystems)
        self.topology = topology
        if len(self.subsystems) != topology.N:
            raise DimensionError(f"topology has {topology.N} nodes but {len(self.subsystems)} subsystems were given")
        ns = np.array([s.n for s in self.subsystems])
        ms = np.array([s.m for s in self.subsystems])
        zs = np.array([s.z for s in self.subsystems])
        shapes = np.array([b.shape for b in topology.blocks]).reshape(-1, 2)
        if topology.n_edges:
            bs = shapes[topology.block_of]
            bad = (bs[:, 0] != ns[topology.dst]) | (bs[:, 1] != ns[topology.src])
            if np.any(bad):
                k = int(np.flatnonzero(bad)[0])
                raise DimensionError(f"edge {topology.src[k]}->{topology.dst[k]} weight has shape {tuple(bs[k])}")
        self.state_offsets = np.concatenate([[0], np.cumsum(ns)])
        self.input_offsets = np.concatenate([[0], np.cumsum(ms)])
        self.dict_offsets = np.concatenate([[0], np.cumsum(zs)])
        self._groups = self._build_groups()
        self._coupling = self._build_coupling()

    # sizes -----------------------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.subsystems)

    @property
    def n(self) -> int:
        return int(self.state_offsets[-1])

    @property
    def m(self) -> int:
        return int(self.input_offsets[-1])

    def state_slice(self, i: int) -> slice:
        return slice(int(self.state_offsets[i]), int(self.state_offsets[i + 1]))

    def input_slice(self, i: int) -> slice:
        return slice(int(self.input_offsets[i]), int(self.input_offsets[i + 1]))

    def split(self, x) -> list[np.ndarray]:
        x = np.asarray(x)
        return [x[self.state_slice(i)] for i in range(self.N)]

    # coupling --------------------------------------------------------------
    def neighbors(self, i: int) -> list[int]:
        return self.topology.neighbors(i)

    def coupling_matrix(self, i: int, compact: bool = True) -> np.ndarray:
        """``D_i`` in neighbour order (ascending ``j``, skipping ``i``)."""
        ni = self.subsystems[i].n
        if compact:
            lo, hi = self.topology._ptr[i], self.topology._ptr[i + 1]
            blocks = [self.topology.blocks[b] for b in self.topology.block_of[lo:hi]]
        else:
            blocks = []
            for j in range(self.N):
                if j == i:
                    continue
                w = self.topology.weight(i, j)
                blocks.append(w if w is not None else np.zeros((ni, self.subsystems[j].n)))
        return np.hstack(blocks) if blocks else np.zeros((ni, 0))

    def internal_input(self, i: int, x, compact: bool = True) -> np.ndarray:
        """Neighbour states fed to subsystem ``i``: ``w_ij = x_j``."""
        x = np.asarray(x, float)
        if compact:
            parts = [x[self.state_slice(j)] for j in self.neighbors(i)]
        else:
            nb = set(self.neighbors(i))
            parts = [x[self.state_slice(j)] if j in nb else np.zeros(self.subsystems[j].n)
                     for j in range(self.N) if j != i]
        return np.concatenate(parts) if parts else np.zeros(0)

    def _build_coupling(self) -> sp.csr_matrix:
        top = self.topology
        rows, cols, vals = [np.zeros(0, np.int64)], [np.zeros(0, np.int64)], [np.zeros(0)]
        for b, W in enumerate(top.blocks):
            sel = top.block_of == b
            r, c = np.nonzero(W)
            if not sel.any() or r.size == 0:
                continue
            rows.append((self.state_offsets[top.dst[sel]][:, None] + r).ravel())
            cols.append((self.state_offsets[top.src[sel]][:, None] + c).ravel())
            vals.append(np.broadcast_to(W[r, c], (int(sel.sum()), r.size)).ravel())
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    @property
    def coupling_operator(self) -> sp.csr_matrix:
        """Sparse ``n x n`` map from the stacked state to the stacked ``D_i w_i``."""
        return self._coupling

    # assembled matrices ----------------------------------------------------
    def assembled_A(self) -> sp.csr_matrix:
        """Block matrix with ``A_i`` on the diagonal and ``[D_ij 0]`` off the diagonal."""
        diag = sp.block_diag([s.A for s in self.subsystems], format="coo")
        C = self._coupling.tocoo()
        # Map state column index to dictionary column index of the same coordinate.
        owner = np.searchsorted(self.state_offsets, C.col, side="right") - 1
        cols = self.dict_offsets[owner] + (C.col - self.state_offsets[owner])
        off = sp.coo_matrix((C.data, (C.row, cols)), shape=diag.shape)
        return (diag + off).tocsr()

    def assembled_B(self) -> sp.csr_matrix:
        return sp.block_diag([s.B for s in self.subsystems], format="csr")

    def block(self, i: int, j: int) -> np.ndarray:
        """Block ``(i, j)`` of :meth:`assembled_A`."""
        r = self.state_slice(i)
        c = slice(int(self.dict_offsets[j]), int(self.dict_offsets[j + 1]))
        return self.assembled_A()[r, c].toarray()

    # evaluation ------------------------------------------------------------
    def _build_groups(self) -> list[_Group]:
        keys: dict = {}
        for i, s in enumerate(self.subsystems):
            key = (s.n, s.m, tuple(s.dictionary.term_strings))
            keys.setdefault(key, []).append(i)
        groups = []
        for members in keys.values():
            subs = [self.subsystems[i] for i in members]
            groups.append(_Group(
                members=np.array(members),
                state_idx=np.array([np.arange(self.state_offsets[i], self.state_offsets[i + 1]) for i in members]),
                input_idx=np.array([np.arange(self.input_offsets[i], self.input_offsets[i + 1]) for i in members]),
                dictionary=subs[0].dictionary,
                A=np.stack([s.A for s in subs]),
                B=np.stack([s.B for s in subs]),
                amp=np.stack([s.perturbation.amplitude for s in subs]),
                freq=np.stack([s.perturbation.frequency for s in subs]),
                phase=np.stack([s.perturbation.phase for s in subs]),
            ))
        return groups

    @property
    def groups(self) -> list[_Group]:
        return self._groups

    def Z(self, x) -> np.ndarray:
        """Stacked dictionary ``[Z_1(x_1); ...; Z_N(x_N)]``."""
        x = np.asarray(x, float)
        out = np.empty(int(self.dict_offsets[-1]))
        for g in self._groups:
            Zg = g.dictionary.evaluate_batch(x[g.state_idx])
            z = g.dictionary.z
            idx = self.dict_offsets[g.members][:, None] + np.arange(z)
            out[idx] = Zg
        return out

    def perturbation(self, x, t: float) -> np.ndarray:
        out = np.zeros(self.m)
        for g in self._groups:
            out[g.input_idx] = g.amp * np.sin(g.freq * t + g.phase)
        return out

    def rhs(self, x, u, t: float = 0.0, perturbed: bool = False) -> np.ndarray:
        """Network vector field with the interconnection constraint applied."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if x.shape != (self.n,) or u.shape != (self.m,):
            raise DimensionError("state or input has the wrong size for this network")
        out = self._coupling @ x
        for g in self._groups:
            Zg = g.dictionary.evaluate_batch(x[g.state_idx])
            ug = u[g.input_idx]
            if perturbed:
                ug = ug + g.amp * np.sin(g.freq * t + g.phase)
            out[g.state_idx] += (g.A @ Zg[:, :, None])[:, :, 0] + (g.B @ ug[:, :, None])[:, :, 0]
        return out

    @property
    def shortest_perturbation_period(self) -> float:
        return min(s.perturbation.shortest_period for s in self.subsystems)


def assemble_network(subsystems: Sequence[SubsystemModel], topology: Topology) -> NetworkModel:
    return NetworkModel(subsystems, topology)


# ---------------------------------------------------------------------------
# Benchmark system
# ---------------------------------------------------------------------------

BENCHMARK_TERMS = ("x1^2", "x1*x2", "x2^2", "sin(x1*x2)", "cos(x1*x2)", "ln(1+x1^2)", "ln(1+x2^2)")


def benchmark_dictionary() -> Dictionary:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NormalizationWarning)
        return Dictionary.from_terms(2, BENCHMARK_TERMS)


def benchmark_matrices() -> tuple[np.ndarray, np.ndarray]:
    """``(A, B)`` of ``x1' = x1 + x2``, ``x2' = x1^2 + x1 x2 + cos(x1 x2) + ln(1+x2^2) + u``."""
    A = np.zeros((2, 9))
    A[0, [0, 1]] = 1.0
    A[1, [2, 3, 6, 8]] = 1.0
    return A, np.array([[0.0], [1.0]])


def benchmark_subsystem(amplitude: float = 20.0, frequency: float = 100.0,
                        gamma_sup: float | None = None) -> SubsystemModel:
    A, B = benchmark_matrices()
    pert = SinusoidalPerturbation([amplitude], [frequency], [0.0],
                                  abs(amplitude) if gamma_sup is None else gamma_sup)
    return SubsystemModel(A, B, benchmark_dictionary(), pert, kind="benchmark")


def benchmark_network(kind: str, N: int, weight: float | None = None, **kw) -> NetworkModel:
    """Homogeneous network of benchmark subsystems on a built-in topology."""
    sub = benchmark_subsystem(**kw)
    return NetworkModel([sub] * N, build_topology(kind, N, weight))
