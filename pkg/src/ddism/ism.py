"""Integral sliding-mode component that rejects matched perturbations.

The sliding variable is ``sigma = C x + zeta`` where the transient ``zeta`` starts
at ``-C x(t0)`` (so ``sigma(t0) = 0``) and evolves as

    zeta' = -C (F Z(x) + D w)

with ``F Z(x)`` the data-based nominal closed-loop drift. Along the perturbed
closed loop ``sigma' = C B (u_ism + gamma)``, which the unit-vector law
``u_ism = -Theta sigma / |sigma|`` drives to zero whenever
``Theta > Gamma_sup * lambda_max(CB) / lambda_min(CB)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

MODES = ("boundary_layer", "ideal_sign")
POSITIVITY_TOL = 1e-10


class IsmDesignError(ValueError):
    """The sliding-output matrix or the gain does not meet the design conditions."""


def _sym_eigs(M: np.ndarray) -> tuple[float, float]:
    """Extreme eigenvalues of the symmetric part of ``M``."""
    M = np.atleast_2d(M)
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))
    return float(ev[0]), float(ev[-1])


def design_C(B_hat, override=None) -> np.ndarray:
    """Sliding-output matrix; defaults to ``B_hat^T``.

    An override is accepted when the symmetric part of ``C B_hat`` is positive
    definite (smallest eigenvalue above ``1e-10``).
    """
    B_hat = np.atleast_2d(np.asarray(B_hat, float))
    if B_hat.shape[0] < B_hat.shape[1]:
        B_hat = B_hat.T
    if not np.any(B_hat):
        raise IsmDesignError("B_hat is zero")
    C = B_hat.T.copy() if override is None else np.atleast_2d(np.asarray(override, float))
    if C.shape != (B_hat.shape[1], B_hat.shape[0]):
        raise IsmDesignError(f"C must be {B_hat.shape[1]}x{B_hat.shape[0]}, got {C.shape}")
    lo, _ = _sym_eigs(C @ B_hat)
    if lo <= POSITIVITY_TOL:
        raise IsmDesignError(f"C B_hat is not positive definite (smallest eigenvalue {lo:.3e})")
    return C


def theta_bound(C, B_hat, gamma_sup: float) -> float:
    """``Gamma_sup * lambda_max(CB) / lambda_min(CB)`` (symmetric-part eigenvalues)."""
    lo, hi = _sym_eigs(np.atleast_2d(C) @ np.atleast_2d(B_hat).reshape(np.shape(C)[1], -1))
    if lo <= 0:
        raise IsmDesignError("C B_hat has a non-positive eigenvalue")
    return float(gamma_sup * hi / lo)


def design_theta(C, B_hat, gamma_sup: float, margin: float = 0.1) -> float:
    """Smallest admissible gain plus ``margin``."""
    if not margin > 0:
        raise IsmDesignError("margin must be positive")
    return theta_bound(C, B_hat, gamma_sup) + margin


@dataclass(frozen=True, eq=False)
class IsmController:
    """Unit-vector sliding-mode law for one subsystem.

    Attributes
    ----------
    C : (m, n) sliding-output matrix.
    Theta : gain.
    B_hat : (n, m) data-based input matrix the design rests on.
    gamma_sup : declared perturbation bound.
    mode : ``"boundary_layer"`` saturates ``sigma / |sigma|`` inside ``|sigma| <= eps_bl``;
        ``"ideal_sign"`` is the discontinuous law, with ``0`` returned at ``sigma = 0``.
    """

    C: np.ndarray
    Theta: float
    B_hat: np.ndarray
    gamma_sup: float
    mode: str = "boundary_layer"
    eps_bl: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise IsmDesignError(f"mode must be one of {MODES}")
        if not self.Theta > 0:
            raise IsmDesignError("Theta must be positive")
        if self.mode == "boundary_layer" and not self.eps_bl > 0:
            raise IsmDesignError("eps_bl must be positive")
        C = np.atleast_2d(np.asarray(self.C, float))
        Bh = np.asarray(self.B_hat, float).reshape(C.shape[1], C.shape[0])
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "B_hat", Bh)

    @property
    def CB(self) -> np.ndarray:
        return self.C @ self.B_hat

    @property
    def cb_eigs(self) -> tuple[float, float]:
        return _sym_eigs(self.CB)

    @property
    def bound(self) -> float:
        return theta_bound(self.C, self.B_hat, self.gamma_sup)

    @property
    def admissible(self) -> bool:
        return self.Theta > self.bound

    @property
    def band(self) -> float:
        """Expected bound on ``|sigma|`` once the boundary layer is reached."""
        return self.eps_bl * (1.0 + self.gamma_sup / self.Theta)

    @property
    def step_sensitive(self) -> bool:
        return self.mode == "ideal_sign"

    def to_dict(self) -> dict:
        return {"C": self.C.tolist(), "Theta": self.Theta, "B_hat": self.B_hat.tolist(),
                "gamma_sup": self.gamma_sup, "mode": self.mode, "eps_bl": self.eps_bl,
                "bound": self.bound}

    @classmethod
    def from_dict(cls, d: dict) -> "IsmController":
        return cls(np.array(d["C"], float), float(d["Theta"]), np.array(d["B_hat"], float),
                   float(d["gamma_sup"]), d.get("mode", "boundary_layer"), float(d.get("eps_bl", 1e-3)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def design_ism(B_hat, gamma_sup: float, C_override=None, margin: float = 0.1,
               mode: str = "boundary_layer", eps_bl: float = 1e-3) -> IsmController:
    C = design_C(B_hat, C_override)
    return IsmController(C, design_theta(C, B_hat, gamma_sup, margin), np.asarray(B_hat, float),
                         float(gamma_sup), mode, eps_bl)


def ism_control(ctrl: IsmController, sigma) -> np.ndarray:
    """Unit-vector law ``-Theta sigma / |sigma|`` (regularised per ``ctrl.mode``)."""
    sigma = np.atleast_1d(np.asarray(sigma, float))
    nrm = np.linalg.norm(sigma)
    if ctrl.mode == "boundary_layer":
        return -ctrl.Theta * sigma / max(nrm, ctrl.eps_bl)
    if nrm == 0.0:
        return np.zeros_like(sigma)
    return -ctrl.Theta * sigma / nrm


def unit_vector_batch(sigma: np.ndarray, Theta, mode: str, eps_bl) -> np.ndarray:
    """Row-wise :func:`ism_control` for stacked ``(G, m)`` sliding variables."""
    nrm = np.linalg.norm(sigma, axis=-1, keepdims=True)
    if mode == "boundary_layer":
        return -np.asarray(Theta)[..., None] * sigma / np.maximum(nrm, np.asarray(eps_bl)[..., None])
    safe = np.where(nrm == 0.0, 1.0, nrm)
    return np.where(nrm == 0.0, 0.0, -np.asarray(Theta)[..., None] * sigma / safe)


def transient_rhs(C, rep, x, w=None, D=None) -> np.ndarray:
    """``zeta' = -C (rep(x) + D w)``."""
    drift = np.asarray(rep(x), float)
    if w is not None and np.size(w):
        drift = drift + np.atleast_2d(D) @ np.asarray(w, float)
    return -np.atleast_2d(C) @ drift


def initial_transient(C, x0) -> np.ndarray:
    """``zeta(t0) = -C x(t0)`` so that ``sigma(t0) = 0``."""
    return -(np.atleast_2d(C) @ np.asarray(x0, float))


def sliding_variable(C, x, zeta) -> np.ndarray:
    return np.atleast_2d(C) @ np.asarray(x, float) + np.asarray(zeta, float)
