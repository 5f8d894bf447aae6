"""Small-gain composition of subsystem ISS certificates into a network CLF.

For each influence edge ``j -> i`` the cross gain is ``rho_i / alpha1_j``. Column
``j`` of ``-H + rho_hat`` sums to

    Xi_j = -kappa_j + sum_{i : j -> i} rho_i / alpha1_j,

and if every ``Xi_j`` is negative then ``V(x) = sum_i x_i^T P_i x_i`` decays at rate
``kappa = -max_j Xi_j`` along the nominal network, with Rayleigh constants
``min alpha1_i`` and ``max alpha2_i``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .model import Topology

STRICT_TOL = 1e-12


class CompositionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SmallGain:
    """Small-gain data in column form.

    ``rho_hat`` is sparse with entries only on influence edges (or on every
    off-diagonal pair when ``dense`` is set; then it is built only on request).
    """

    kappa: np.ndarray
    rho: np.ndarray
    alpha1: np.ndarray
    Xi: np.ndarray
    topology: Topology | None
    dense: bool = False

    @property
    def H(self) -> sp.dia_matrix:
        return sp.diags(self.kappa)

    @property
    def rho_hat(self):
        N = self.kappa.size
        if self.dense:
            R = self.rho[:, None] / self.alpha1[None, :]
            np.fill_diagonal(R, 0.0)
            return R
        t = self.topology
        return sp.csr_matrix((self.rho[t.dst] / self.alpha1[t.src], (t.dst, t.src)), shape=(N, N))


def _constants(certs) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if any(c is None for c in certs):
        raise CompositionError("missing certificate for subsystem %d" % [c is None for c in certs].index(True))
    kappa = np.array([c.kappa for c in certs], float)
    rho = np.array([c.rho for c in certs], float)
    a1 = np.array([c.alpha1 for c in certs], float)
    a2 = np.array([c.alpha2 for c in certs], float)
    return kappa, rho, a1, a2


def column_sums(kappa, rho, alpha1, topology: Topology | None, strict_dense: bool = False) -> np.ndarray:
    """``Xi`` by vectorised accumulation over edges (or all pairs when ``strict_dense``)."""
    kappa, rho, alpha1 = (np.asarray(a, float) for a in (kappa, rho, alpha1))
    if strict_dense:
        return -kappa + (rho.sum() - rho) / alpha1
    outflow = np.bincount(topology.src, weights=rho[topology.dst], minlength=kappa.size)
    return -kappa + outflow / alpha1


def column_sums_reference(kappa, rho, alpha1, topology: Topology | None, strict_dense: bool = False) -> np.ndarray:
    """Independent per-column summation (compensated), used as a cross-check."""
    N = len(kappa)
    if strict_dense:
        return np.array([-kappa[j] + math.fsum(rho[i] / alpha1[j] for i in range(N) if i != j)
                         for j in range(N)])
    terms: list[list[float]] = [[-float(kappa[j])] for j in range(N)]
    for j, i in topology.pairs():
        terms[j].append(rho[i] / alpha1[j])
    return np.array([math.fsum(t) for t in terms])


def smallgain_matrix(certs: Sequence, topology: Topology, strict_dense: bool = False) -> SmallGain:
    """``(H, rho_hat, Xi)`` from one certificate per subsystem."""
    if len(certs) != topology.N:
        raise CompositionError(f"expected {topology.N} certificates, got {len(certs)}")
    kappa, rho, a1, _ = _constants(certs)
    return smallgain_from_constants(kappa, rho, a1, topology, strict_dense)


def smallgain_from_constants(kappa, rho, alpha1, topology: Topology, strict_dense: bool = False) -> SmallGain:
    N = topology.N
    kappa, rho, alpha1 = (np.broadcast_to(np.asarray(a, float), (N,)).copy() for a in (kappa, rho, alpha1))
    if np.any(alpha1 <= 0):
        raise CompositionError("alpha1 must be positive")
    Xi = column_sums(kappa, rho, alpha1, topology, strict_dense)
    return SmallGain(kappa, rho, alpha1, Xi, topology, strict_dense)


@dataclass(frozen=True)
class SmallGainVerdict:
    feasible: bool
    kappa: float
    worst_column: int
    max_Xi: float
    hint: str = ""


def check_smallgain(Xi) -> SmallGainVerdict:
    """Feasible iff ``max Xi < -1e-12``; the network decay rate is ``-max Xi``."""
    Xi = np.asarray(Xi, float)
    j = int(np.argmax(Xi))
    mx = float(Xi[j])
    if mx < -STRICT_TOL:
        return SmallGainVerdict(True, -mx, j, mx)
    hint = (f"column {j} has Xi = {mx:.4e} >= 0; collect different trajectories or "
            "retune (kappa, mu) to raise alpha1 / lower rho")
    return SmallGainVerdict(False, float("nan"), j, mx, hint)


@dataclass(frozen=True, eq=False)
class NetworkClf:
    """``V(x) = sum_i x_i^T P_i x_i`` over the stacked network state."""

    P_blocks: tuple
    offsets: np.ndarray
    kappa: float
    alpha1: float
    alpha2: float

    def __call__(self, x) -> float:
        return float(self.batch(np.asarray(x, float)[None, :])[0])

    def batch(self, X: np.ndarray) -> np.ndarray:
        """``V`` for each row of ``X`` (shape ``(k, n_total)``)."""
        X = np.asarray(X, float)
        sizes = np.diff(self.offsets)
        if np.all(sizes == sizes[0]):
            Xs = X.reshape(X.shape[0], sizes.size, int(sizes[0]))
            return np.einsum("kgi,gij,kgj->k", Xs, np.stack(self.P_blocks), Xs)
        out = np.zeros(X.shape[0])
        for (lo, hi), P in zip(zip(self.offsets[:-1], self.offsets[1:]), self.P_blocks):
            xi = X[:, lo:hi]
            out += np.einsum("ki,ij,kj->k", xi, P, xi)
        return out

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        g = np.empty_like(x)
        for (lo, hi), P in zip(zip(self.offsets[:-1], self.offsets[1:]), self.P_blocks):
            g[lo:hi] = 2 * P @ x[lo:hi]
        return g


@dataclass(frozen=True, eq=False)
class NetworkCertificate:
    certs: tuple
    smallgain: SmallGain
    verdict: SmallGainVerdict
    alpha1: float
    alpha2: float

    @property
    def feasible(self) -> bool:
        return self.verdict.feasible

    @property
    def kappa(self) -> float:
        return self.verdict.kappa

    @property
    def Xi(self) -> np.ndarray:
        return self.smallgain.Xi

    @property
    def H(self):
        return self.smallgain.H

    @property
    def rho_hat(self):
        return self.smallgain.rho_hat

    def summary(self) -> dict:
        return {"feasible": self.feasible, "kappa": self.kappa, "alpha1": self.alpha1,
                "alpha2": self.alpha2, "max_Xi": self.verdict.max_Xi,
                "worst_column": self.verdict.worst_column, "hint": self.verdict.hint}

    def write_xi_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["column", "kappa", "rho", "alpha1", "Xi"])
            sg = self.smallgain
            for j in range(sg.Xi.size):
                wr.writerow([j, "%.17g" % sg.kappa[j], "%.17g" % sg.rho[j], "%.17g" % sg.alpha1[j],
                             "%.17g" % sg.Xi[j]])


def compose(certs: Sequence, topology: Topology, strict_dense: bool = False) -> NetworkCertificate:
    """Small-gain check plus network constants."""
    sg = smallgain_matrix(certs, topology, strict_dense)
    _, _, a1, a2 = _constants(certs)
    return NetworkCertificate(tuple(certs), sg, check_smallgain(sg.Xi), float(a1.min()), float(a2.max()))


def network_clf(certs: Sequence, offsets=None, kappa: float | None = None) -> NetworkClf:
    """Network CLF; ``kappa`` defaults to the single-subsystem rate when ``N = 1``."""
    if isinstance(certs, NetworkCertificate):
        if not certs.feasible:
            raise CompositionError("composition is infeasible; no network CLF")
        kappa = certs.kappa
        alpha1, alpha2 = certs.alpha1, certs.alpha2
        certs = certs.certs
    else:
        _, _, a1, a2 = _constants(certs)
        alpha1, alpha2 = float(a1.min()), float(a2.max())
        if kappa is None:
            if len(certs) != 1:
                raise CompositionError("kappa must come from a feasible composition")
            kappa = certs[0].kappa
    if offsets is None:
        offsets = np.concatenate([[0], np.cumsum([c.n for c in certs])])
    return NetworkClf(tuple(c.P for c in certs), np.asarray(offsets), float(kappa), alpha1, alpha2)
