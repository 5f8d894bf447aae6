"""Data collection and the data-based quantities built from two input-state runs.

For a subsystem ``i`` the network is run twice from the same initial state: once
with a piecewise-constant random excitation on subsystem ``i`` and once with all
inputs at zero. Samples of the state, the neighbour states, the derivative and the
dictionary are stacked column-wise into the blocks

======== =========================================
``I``    inputs, ``m x T``
``S``    states, ``n x T``
``W``    internal inputs (neighbour states), ``psi x T``
``Sp``   state derivatives, ``n x T``
``Delta`` dictionary values, ``z x T``
======== =========================================

and their zero-input counterparts. From these, ``Q = pinv(Delta_bar) Delta`` and
the input-matrix estimate ``B_hat`` follow without any knowledge of ``A`` or ``B``.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .integrate import get_scheme
from .model import DimensionError, Dictionary, DomainError, NetworkModel

DERIVATIVE_MODES = ("exact_oracle", "forward_difference")
RANK_RTOL = 1e-8


class RichnessError(RuntimeError):
    """Data matrices are not full row rank; collect different trajectories."""


class DivergenceError(RuntimeError):
    """State blew up during data collection."""


class ConsistencyError(RuntimeError):
    """A data-based identity that must hold exactly is violated."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Sampling and excitation settings for one collection.

    Parameters
    ----------
    T : int
        Number of samples per run.
    tau : float
        Sampling interval in seconds.
    amplitude : float
        Excitation values are i.i.d. uniform on ``[-amplitude, amplitude]``.
    x0_box : float
        Initial states are uniform on ``[-x0_box, x0_box]`` per coordinate.
    derivative_mode : str
        ``"exact_oracle"`` evaluates the vector field at each sample;
        ``"forward_difference"`` uses ``(x(t+tau) - x(t)) / tau``.
    seed : int
        Root seed; subsystem ``i`` draws from ``default_rng((seed, i))``.
    substeps : int
        Integrator steps per sampling interval (at least 10).
    scheme : str
        Integrator used between samples.
    """

    T: int = 10
    tau: float = 0.1
    amplitude: float = 1.0
    x0_box: float = 0.5
    derivative_mode: str = "exact_oracle"
    seed: int = 0
    substeps: int = 10
    scheme: str = "rk4"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.derivative_mode not in DERIVATIVE_MODES:
            raise ValueError(f"derivative_mode must be one of {DERIVATIVE_MODES}")
        if self.substeps < 10:
            raise ValueError("at least 10 integrator substeps per sample are required")
        if self.amplitude < 0 or self.x0_box < 0:
            raise ValueError("amplitude and x0_box must be non-negative")

    def validate_for(self, z: int):
        if self.T <= z:
            raise ValueError(f"T={self.T} must exceed the dictionary size z={z}")


@dataclass(frozen=True, eq=False)
class DataMatrices:
    """Sampled blocks of the excited run and of the zero-input run for one subsystem."""

    I: np.ndarray
    S: np.ndarray
    W: np.ndarray
    Sp: np.ndarray
    Delta: np.ndarray
    S_bar: np.ndarray
    W_bar: np.ndarray
    Sp_bar: np.ndarray
    Delta_bar: np.ndarray
    x0: np.ndarray
    tau: float
    subsystem: int = 0
    neighbors: tuple[int, ...] = ()
    terms: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # one memory layout whether built in place or loaded, so downstream BLAS
        # reductions (and therefore certificates) are bitwise reproducible
        for k in ("I", "S", "W", "Sp", "Delta", "S_bar", "W_bar", "Sp_bar", "Delta_bar", "x0"):
            object.__setattr__(self, k, np.ascontiguousarray(getattr(self, k), dtype=float))

    @property
    def I_bar(self) -> np.ndarray:
        return np.zeros_like(self.I)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.I.shape[0]

    @property
    def z(self) -> int:
        return self.Delta.shape[0]

    @property
    def T(self) -> int:
        return self.S.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        names = ("I", "S", "W", "Sp", "Delta", "S_bar", "W_bar", "Sp_bar", "Delta_bar", "x0")
        return {k: getattr(self, k) for k in names}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=float).tobytes())
        h.update(repr((self.tau, self.subsystem, self.neighbors, self.terms)).encode())
        return h.hexdigest()

    def save(self, path) -> None:
        np.savez(path, tau=self.tau, subsystem=self.subsystem,
                 neighbors=np.array(self.neighbors, dtype=np.int64),
                 terms=np.array(self.terms, dtype=str), **self.arrays())

    @classmethod
    def load(cls, path) -> "DataMatrices":
        with np.load(path) as f:
            arrays = {k: f[k] for k in ("I", "S", "W", "Sp", "Delta", "S_bar", "W_bar", "Sp_bar", "Delta_bar", "x0")}
            return cls(**arrays, tau=float(f["tau"]), subsystem=int(f["subsystem"]),
                       neighbors=tuple(int(j) for j in f["neighbors"]),
                       terms=tuple(str(t) for t in f["terms"]))


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

def _run(net: NetworkModel, x0: np.ndarray, inputs: np.ndarray, cfg: ExperimentConfig):
    """Integrate the nominal network sample by sample; ``inputs`` is ``(T, m_total)``."""
    step = get_scheme(cfg.scheme)
    h = cfg.tau / cfg.substeps
    X = np.empty((cfg.T + 1, net.n))
    X[0] = x = x0
    for k in range(cfg.T):
        u = inputs[k]
        f = lambda t, s, u=u: net.rhs(s, u, t, perturbed=False)
        t = k * cfg.tau
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for _ in range(cfg.substeps):
                    x = step(f, t, x, h)
                    t += h
        except DomainError:
            x = np.full_like(x, np.nan)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e12:
            raise DivergenceError(
                f"state diverged during collection at sample {k + 1}; "
                "use a shorter window (T*tau) or a smaller initial box")
        X[k + 1] = x
    return X


def _blocks(net: NetworkModel, i: int, X: np.ndarray, inputs: np.ndarray, cfg: ExperimentConfig):
    sl = net.state_slice(i)
    nb = net.neighbors(i)
    S_ext = X[:, sl].T                     # n x (T+1)
    S = S_ext[:, :-1]
    W = (np.vstack([X[:-1, net.state_slice(j)].T for j in nb]) if nb
         else np.zeros((0, cfg.T)))
    U = inputs[:, net.input_slice(i)].T
    if cfg.derivative_mode == "exact_oracle":
        Sp = np.column_stack([net.rhs(X[k], inputs[k], k * cfg.tau)[sl] for k in range(cfg.T)])
    else:
        Sp = estimate_derivatives(S_ext, cfg.tau, "forward_difference")
    Delta = net.subsystems[i].dictionary.evaluate_batch(S.T).T
    return U, S, W, Sp, Delta


def collect_trajectories(net: NetworkModel, i: int, cfg: ExperimentConfig) -> DataMatrices:
    """Excited and zero-input runs of the nominal network for subsystem ``i``.

    Both runs start from the same random network state. Only subsystem ``i`` is
    excited; every other subsystem receives zero input, so the recorded internal
    inputs are genuine neighbour trajectories.
    """
    if not 0 <= i < net.N:
        raise IndexError(f"subsystem {i} not in network of size {net.N}")
    sub = net.subsystems[i]
    cfg.validate_for(sub.z)
    rng = np.random.default_rng((cfg.seed, i))
    x0 = rng.uniform(-cfg.x0_box, cfg.x0_box, net.n)
    inputs = np.zeros((cfg.T, net.m))
    inputs[:, net.input_slice(i)] = rng.uniform(-cfg.amplitude, cfg.amplitude, (cfg.T, sub.m))
    X = _run(net, x0, inputs, cfg)
    Xb = _run(net, x0, np.zeros_like(inputs), cfg)
    U, S, W, Sp, Delta = _blocks(net, i, X, inputs, cfg)
    _, Sb, Wb, Spb, Deltab = _blocks(net, i, Xb, np.zeros_like(inputs), cfg)
    return DataMatrices(U, S, W, Sp, Delta, Sb, Wb, Spb, Deltab, x0=x0[net.state_slice(i)].copy(),
                        tau=cfg.tau, subsystem=i, neighbors=tuple(net.neighbors(i)),
                        terms=tuple(sub.dictionary.term_strings),
                        meta={"seed": cfg.seed, "derivative_mode": cfg.derivative_mode})


def estimate_derivatives(states, tau: float, mode: str = "forward_difference",
                         oracle: Callable[[int, np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Derivative block from ``T + 1`` stored samples (columns of ``states``).

    ``oracle(k, x)`` must return the exact derivative at sample ``k`` when
    ``mode="exact_oracle"``.
    """
    states = np.atleast_2d(np.asarray(states, float))
    if states.shape[1] < 2:
        raise DimensionError("need at least two samples")
    if mode == "forward_difference":
        return np.diff(states, axis=1) / tau
    if mode == "exact_oracle":
        if oracle is None:
            raise ValueError("exact_oracle mode needs an oracle")
        return np.column_stack([oracle(k, states[:, k]) for k in range(states.shape[1] - 1)])
    raise ValueError(f"unknown derivative mode {mode!r}")


# ---------------------------------------------------------------------------
# Richness and data-based quantities
# ---------------------------------------------------------------------------

def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _pinv(M: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(M, rcond=RANK_RTOL)


@dataclass(frozen=True)
class RichnessReport:
    rank_delta: int
    rank_delta_bar: int
    rank_input: int
    z: int
    m: int
    sv_ratio_delta: float
    sv_ratio_delta_bar: float

    @property
    def delta_full(self) -> bool:
        return self.rank_delta == self.z

    @property
    def delta_bar_full(self) -> bool:
        return self.rank_delta_bar == self.z

    @property
    def input_full(self) -> bool:
        return self.rank_input == self.m

    @property
    def ok(self) -> bool:
        return self.delta_full and self.delta_bar_full and self.input_full

    @property
    def hint(self) -> str:
        if self.ok:
            return ""
        return ("data not rich enough (rank Delta=%d, rank Delta_bar=%d, rank I=%d; need %d/%d/%d); "
                "collect different trajectories: new seed, larger excitation or longer sampling interval"
                % (self.rank_delta, self.rank_delta_bar, self.rank_input, self.z, self.z, self.m))


def _sv_ratio(M):
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[-1] / s[0]) if s.size and s[0] > 0 else 0.0


def check_richness(d: DataMatrices) -> RichnessReport:
    """Numerical ranks at ``1e-8 * sigma_max`` of ``Delta``, ``Delta_bar`` and ``I``."""
    return RichnessReport(numerical_rank(d.Delta), numerical_rank(d.Delta_bar), numerical_rank(d.I),
                          d.z, d.m, _sv_ratio(d.Delta), _sv_ratio(d.Delta_bar))


def solve_Q(Delta, Delta_bar) -> np.ndarray:
    """Minimum-norm ``Q`` with ``Delta_bar @ Q = Delta``."""
    Delta, Delta_bar = np.asarray(Delta, float), np.asarray(Delta_bar, float)
    if Delta.shape != Delta_bar.shape:
        raise DimensionError("Delta and Delta_bar must have the same shape")
    if numerical_rank(Delta_bar) < Delta_bar.shape[0]:
        raise RichnessError("Delta_bar is not full row rank")
    Q = _pinv(Delta_bar) @ Delta
    res = np.linalg.norm(Delta_bar @ Q - Delta)
    if res > 1e-8 * (1 + np.linalg.norm(Delta)):
        raise ConsistencyError(f"Delta_bar Q = Delta residual {res:.3e}")
    return Q


def _coupling_width(d: DataMatrices, D) -> np.ndarray:
    D = np.zeros((d.n, 0)) if D is None else np.atleast_2d(np.asarray(D, float))
    if D.size == 0:
        D = np.zeros((d.n, d.W.shape[0]))
    if D.shape != (d.n, d.W.shape[0]):
        raise DimensionError(f"D must be {d.n}x{d.W.shape[0]}, got {D.shape}")
    return D


def effective_derivatives(d: DataMatrices, D) -> np.ndarray:
    """``Sp - D W``: the part of the measured derivative not explained by coupling."""
    return d.Sp - _coupling_width(d, D) @ d.W


def estimate_B(d: DataMatrices, Q, D) -> np.ndarray:
    """``B_hat = (Sp - (Sp_bar - D W_bar) Q - D W) pinv(I)``."""
    D = _coupling_width(d, D)
    if numerical_rank(d.I) < d.m:
        raise RichnessError("input block is not full row rank; the excitation is degenerate")
    R = d.Sp - (d.Sp_bar - D @ d.W_bar) @ Q - D @ d.W
    return R @ d.I.T @ np.linalg.inv(d.I @ d.I.T)


@dataclass(frozen=True, eq=False)
class ClosedLoopRep:
    """Data-based closed-loop drift ``x -> F Z(x)`` with ``F = (Sp - D W) G``."""

    F: np.ndarray
    dictionary: Dictionary

    @property
    def linear(self) -> np.ndarray:
        return self.F[:, : self.dictionary.n]

    @property
    def nonlinear(self) -> np.ndarray:
        return self.F[:, self.dictionary.n:]

    def __call__(self, x) -> np.ndarray:
        return self.F @ self.dictionary.evaluate(x)

    def batch(self, X) -> np.ndarray:
        return self.dictionary.evaluate_batch(X) @ self.F.T


def closed_loop_rep(d: DataMatrices, D, G, dictionary: Dictionary, tol: float = 1e-8) -> ClosedLoopRep:
    """Closed-loop representation for the controller ``u = I G Z(x)``.

    Requires ``Delta G = I_z``; the representation is only meaningful then.
    """
    G = np.asarray(G, float)
    if G.shape != (d.T, d.z):
        raise DimensionError(f"G must be {d.T}x{d.z}, got {G.shape}")
    res = np.abs(d.Delta @ G - np.eye(d.z)).max()
    if res > tol * max(1.0, np.linalg.norm(d.Delta, 2) * np.linalg.norm(G, 2)):
        raise ConsistencyError(f"Delta G = I violated (max residual {res:.3e})")
    return ClosedLoopRep(effective_derivatives(d, D) @ G, dictionary)


# ---------------------------------------------------------------------------
# Trajectory dump
# ---------------------------------------------------------------------------

def dump_trajectory(path, d: DataMatrices, zero_input: bool = False) -> None:
    """Write one run as CSV: ``t, x.., u.., w.., xdot..`` with 17 significant digits."""
    S, W, Sp = (d.S_bar, d.W_bar, d.Sp_bar) if zero_input else (d.S, d.W, d.Sp)
    U = d.I_bar if zero_input else d.I
    t = np.arange(d.T) * d.tau
    header = (["t"] + [f"x{k + 1}" for k in range(d.n)] + [f"u{k + 1}" for k in range(d.m)]
              + [f"w{k + 1}" for k in range(W.shape[0])] + [f"xdot{k + 1}" for k in range(d.n)])
    data = np.column_stack([t, S.T, U.T, W.T, Sp.T])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in data:
            wr.writerow(["%.17g" % v for v in row])


def read_trajectory(path) -> dict[str, np.ndarray]:
    """Inverse of :func:`dump_trajectory`; returns blocks keyed ``t, x, u, w, xdot``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    out = {"t": body[:, 0]}
    for prefix in ("x", "u", "w", "xdot"):
        cols = [k for k, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
        out[prefix] = body[:, cols].T
    return out


def dump_data(out_dir, d: DataMatrices) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"subsystem_{d.subsystem}_excited.csv", out_dir / f"subsystem_{d.subsystem}_zero.csv"]
    dump_trajectory(paths[0], d)
    dump_trajectory(paths[1], d, zero_input=True)
    return paths
