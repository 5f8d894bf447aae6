"""Data-driven synthesis of quadratic ISS Lyapunov functions and controller gains.

With ``L = Sp - D W`` and the dictionary block ``Delta``, the design looks for
``G2`` (``T x (z-n)``), ``Y`` (``T x n``) and ``Phi = Phi^T`` (``n x n``) such that

* nonlinearity cancellation: ``L G2 = 0``
* dictionary selection:      ``Delta G2 = [0; I]``
* Lyapunov parametrisation:  ``Delta Y = [Phi; 0]``
* dissipation LMI:           ``Y^T L^T + L Y + mu I + kappa Phi <= 0``,  ``Phi > 0``.

``V(x) = x^T P x`` with ``P = inv(Phi)`` is then an ISS Lyapunov function of the
closed loop under ``u = K Z(x)``, ``K = I_data [Y P, G2]``, with gain
``rho = ||D||^2 / mu``.

The three equality families are solved in closed form: ``G2`` by least squares on
the null space of ``Delta``, and ``Y = E Phi + N V`` where ``E`` is the first ``n``
columns of ``pinv(Delta)`` and ``N`` spans ``null(Delta)``. Only the small LMI in
``(Phi, V)`` goes to the conic solver.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Callable, Iterable

import cvxpy as cp
import numpy as np
import scipy.linalg as sla

from .experiment import DataMatrices, _coupling_width, numerical_rank
from .model import Dictionary, NormalizationWarning

FAMILIES = ("nonlinearity-cancellation", "dictionary-selection",
            "lyapunov-parametrization", "dissipation-lmi")
OBJECTIVES = ("bounded_condition", "min_condition_number", "feasibility_only")

VOLATILE_META = ("solve_time",)

EQ_TOL = 1e-6
LMI_TOL = 1e-8
MC_SLACK = 1e-6


class SynthesisInfeasible(RuntimeError):
    """No certificate exists for the data and parameters; ``family`` names the binding constraint."""

    def __init__(self, family: str, detail: str = ""):
        self.family = family
        msg = f"infeasible: {family} constraints"
        if family == "nonlinearity-cancellation":
            msg += " (the dictionary terms are not matched to the input channels)"
        elif family == "dissipation-lmi":
            msg += " (decay rate or coupling weight too demanding for the data)"
        super().__init__(msg + (f"; {detail}" if detail else ""))


class SolverFailure(RuntimeError):
    """The conic solver did not return a usable solution."""


class CertificateValidationError(RuntimeError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("certificate failed validation: " + "; ".join(report.failures))


@dataclass(frozen=True)
class SynthesisOptions:
    """Parameters of one synthesis problem.

    Parameters
    ----------
    kappa, mu : float
        Decay rate and the weight of the Young's inequality split of the coupling.
    eps_pd : float
        Floor on ``Phi``.
    objective : str
        ``"bounded_condition"`` (default) first finds the smallest attainable
        ``lambda_max(Phi)`` and then maximises ``lambda_min(Phi)`` with
        ``lambda_max(Phi)`` held within ``condition_relax`` of that optimum.
        ``"min_condition_number"`` stops after the first stage.
        ``"feasibility_only"`` uses a zero objective.
    condition_relax : float
        Slack factor on the first-stage optimum (>= 1).
    lmi_margin : float
        The LMI is imposed as ``<= -lmi_margin * I`` so that it holds strictly.
    """

    kappa: float = 1.0
    mu: float = 1.0
    eps_pd: float = 1e-6
    objective: str = "bounded_condition"
    condition_relax: float = 1.5
    lmi_margin: float = 1e-6
    solver: str = "CLARABEL"
    solver_opts: dict = field(default_factory=dict)
    validate: bool = True
    n_mc: int = 1000
    radius: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (self.kappa > 0 and self.mu > 0 and self.eps_pd > 0):
            raise ValueError("kappa, mu and eps_pd must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.condition_relax < 1:
            raise ValueError("condition_relax must be >= 1")
        if self.lmi_margin < 0:
            raise ValueError("lmi_margin must be non-negative")


def _ro(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IssCertificate:
    """Quadratic ISS certificate ``V(x) = x^T P x`` with controller ``u = K Z(x)``.

    ``F = (Sp - D W) [Y P, G2]`` is the data-based closed-loop drift, so that
    ``x' = F Z(x) + D w`` in closed loop.
    """

    P: np.ndarray
    Phi: np.ndarray
    Y: np.ndarray
    G2: np.ndarray
    K: np.ndarray
    F: np.ndarray
    kappa: float
    mu: float
    alpha1: float
    alpha2: float
    rho: float
    terms: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("P", "Phi", "Y", "G2", "K", "F"):
            object.__setattr__(self, k, _ro(getattr(self, k)))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.K.shape[0]

    @property
    def G(self) -> np.ndarray:
        return np.hstack([self.Y @ self.P, self.G2])

    def dictionary(self) -> Dictionary:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NormalizationWarning)
            return Dictionary.from_terms(self.n, self.terms)

    def rep(self):
        from .experiment import ClosedLoopRep
        return ClosedLoopRep(self.F, self.dictionary())

    def V(self, x) -> float:
        x = np.asarray(x, float)
        return float(x @ self.P @ x)

    def with_coupling(self, D) -> "IssCertificate":
        """Same Lyapunov function and gain, ISS gain recomputed for coupling ``D``.

        Valid because the dissipation LMI does not involve ``D``; ``mu`` is kept
        since the LMI was solved for it.
        """
        return replace(self, rho=coupling_gain(D, self.mu))

    # serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in ("P", "Phi", "Y", "G2", "K", "F")}
        out.update(kappa=self.kappa, mu=self.mu, alpha1=self.alpha1, alpha2=self.alpha2,
                   rho=self.rho, terms=list(self.terms),
                   meta={k: v for k, v in self.meta.items() if k not in VOLATILE_META})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "IssCertificate":
        arrays = {k: np.array(d[k], dtype=float) for k in ("P", "Phi", "Y", "G2", "K", "F")}
        arrays["G2"] = arrays["G2"].reshape(arrays["Y"].shape[0], -1)
        return cls(**arrays, kappa=float(d["kappa"]), mu=float(d["mu"]), alpha1=float(d["alpha1"]),
                   alpha2=float(d["alpha2"]), rho=float(d["rho"]), terms=tuple(d["terms"]),
                   meta=dict(d.get("meta", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "IssCertificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def coupling_gain(D, mu: float) -> float:
    """``||D||_2^2 / mu`` (zero for an uncoupled subsystem)."""
    D = np.atleast_2d(np.asarray(D, float))
    if D.size == 0:
        return 0.0
    return float(np.linalg.norm(D, 2) ** 2 / mu)


def iss_bounds(cert: IssCertificate, D, mu: float | None = None) -> tuple[float, float, float]:
    """``(lambda_min(P), lambda_max(P), ||D||^2 / mu)``."""
    ev = np.linalg.eigvalsh(cert.P)
    return float(ev[0]), float(ev[-1]), coupling_gain(D, cert.mu if mu is None else mu)


# ---------------------------------------------------------------------------
# Equality elimination
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Reduced:
    L: np.ndarray
    G2: np.ndarray
    E: np.ndarray
    N: np.ndarray


def _eliminate(d: DataMatrices, D, tol: float = 1e-8) -> _Reduced:
    n, z, T = d.n, d.z, d.T
    L = d.Sp - _coupling_width(d, D) @ d.W
    if numerical_rank(d.Delta) < z:
        raise SynthesisInfeasible("dictionary-selection", "Delta is not full row rank; collect richer data")
    Dp = np.linalg.pinv(d.Delta)
    N = sla.null_space(d.Delta, rcond=1e-12)
    if N.shape[1] != T - z:
        N = sla.null_space(d.Delta)
    G2 = Dp[:, n:]
    if z > n:
        LN = L @ N
        if N.shape[1]:
            V2 = np.linalg.lstsq(LN, -L @ G2, rcond=None)[0]
            G2 = G2 + N @ V2
        res = np.abs(L @ G2).max()
        scale = max(1.0, np.linalg.norm(L, 2) * np.linalg.norm(G2, 2))
        if res > tol * scale:
            raise SynthesisInfeasible("nonlinearity-cancellation", f"residual {res:.3e}")
    return _Reduced(L, G2, Dp[:, :n], N)


# ---------------------------------------------------------------------------
# LMI
# ---------------------------------------------------------------------------

def _solve_lmi(red: _Reduced, opt: SynthesisOptions, n: int):
    LE, LN = red.L @ red.E, red.L @ red.N
    I = np.eye(n)
    Phi = cp.Variable((n, n), symmetric=True)
    V = cp.Variable((red.N.shape[1], n)) if red.N.shape[1] else None
    M = LE @ Phi + (LN @ V if V is not None else 0)
    lmi = M + M.T + opt.mu * I + opt.kappa * Phi
    base = [lmi << -opt.lmi_margin * I, Phi >> opt.eps_pd * I]

    def solve(obj, cons):
        prob = cp.Problem(obj, cons)
        try:
            prob.solve(solver=opt.solver, **opt.solver_opts)
        except cp.SolverError as exc:
            raise SolverFailure(str(exc)) from exc
        if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise SynthesisInfeasible("dissipation-lmi", f"solver status {prob.status}")
        if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or Phi.value is None:
            raise SolverFailure(f"solver status {prob.status}")
        return prob

    if opt.objective == "feasibility_only":
        solve(cp.Minimize(0), base)
    else:
        t = cp.Variable()
        p1 = solve(cp.Minimize(t), base + [Phi << t * I])
        if opt.objective == "bounded_condition":
            t_star = float(p1.value)
            s = cp.Variable()
            solve(cp.Maximize(s), base + [Phi << opt.condition_relax * t_star * I, Phi >> s * I])
    Phi_v = 0.5 * (Phi.value + Phi.value.T)
    V_v = V.value if V is not None else np.zeros((0, n))
    return Phi_v, V_v


def synthesize_iss(d: DataMatrices, D, opt: SynthesisOptions | None = None,
                   dictionary: Dictionary | None = None) -> IssCertificate:
    """Solve the data-based ISS design problem and return a validated certificate.

    Raises
    ------
    SynthesisInfeasible
        With ``family`` naming the constraint family that cannot be met.
    SolverFailure
        The conic solver broke down.
    CertificateValidationError
        The solution does not pass :func:`validate_certificate` (fail-closed).
    """
    opt = opt or SynthesisOptions()
    t0 = time.perf_counter()
    red = _eliminate(d, D)
    Phi, Vn = _solve_lmi(red, opt, d.n)
    Y = red.E @ Phi + red.N @ Vn
    P = np.linalg.inv(Phi)
    P = 0.5 * (P + P.T)
    G = np.hstack([Y @ P, red.G2])
    ev = np.linalg.eigvalsh(P)
    cert = IssCertificate(
        P=P, Phi=Phi, Y=Y, G2=red.G2, K=d.I @ G, F=red.L @ G,
        kappa=float(opt.kappa), mu=float(opt.mu), alpha1=float(ev[0]), alpha2=float(ev[-1]),
        rho=coupling_gain(_coupling_width(d, D), opt.mu), terms=tuple(d.terms),
        meta={"objective": opt.objective, "solver": opt.solver, "eps_pd": opt.eps_pd,
              "lmi_margin": opt.lmi_margin, "condition_relax": opt.condition_relax,
              "data_digest": d.digest(), "subsystem": d.subsystem,
              "solve_time": time.perf_counter() - t0})
    if opt.validate:
        rep = validate_certificate(cert, d, D, n_mc=opt.n_mc, radius=opt.radius, seed=opt.seed,
                                   dictionary=dictionary)
        if not rep.passed:
            raise CertificateValidationError(rep)
    return cert


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    residuals: dict
    gain_identity: float
    lmi_max_eig: float
    phi_min_eig: float
    n_mc: int
    radius: float
    mc_max_violation: float
    n_violations: int
    violations: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        return {"passed": self.passed, "residuals": self.residuals, "gain_identity": self.gain_identity,
                "lmi_max_eig": self.lmi_max_eig, "phi_min_eig": self.phi_min_eig,
                "n_mc": self.n_mc, "radius": self.radius,
                "mc_max_violation": self.mc_max_violation, "n_violations": self.n_violations,
                "failures": list(self.failures)}


def sample_ball(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    """Uniform samples from the closed Euclidean ball of the given radius."""
    if dim == 0:
        return np.zeros((count, 0))
    g = rng.standard_normal((count, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return g * r[:, None]


def dissipation_check(P, F, dictionary: Dictionary, kappa: float, rho: float, D,
                      X: np.ndarray, Wv: np.ndarray) -> np.ndarray:
    """``2 x^T P (F Z(x) + D w) + kappa x^T P x - rho |w|^2`` for each sample row."""
    D = np.atleast_2d(np.asarray(D, float)).reshape(P.shape[0], -1)
    drift = dictionary.evaluate_batch(X) @ F.T
    if Wv.shape[1]:
        drift = drift + Wv @ D.T
    PX = X @ P
    lv = 2 * np.einsum("ij,ij->i", PX, drift)
    return lv + kappa * np.einsum("ij,ij->i", PX, X) - rho * np.einsum("ij,ij->i", Wv, Wv)


def validate_certificate(cert: IssCertificate, d: DataMatrices, D, n_mc: int = 1000,
                         radius: float = 10.0, seed: int = 0, coupling=None,
                         dictionary: Dictionary | None = None) -> ValidationReport:
    """Recheck a certificate against the data it claims to be derived from.

    ``D`` must match the data's internal-input block. ``coupling`` (default ``D``)
    is the coupling used in the sampled ISS inequality; pass a different matrix to
    check a certificate reused on a structurally identical subsystem.
    """
    D = _coupling_width(d, D)
    coupling = D if coupling is None else np.atleast_2d(np.asarray(coupling, float)).reshape(d.n, -1)
    dictionary = dictionary or cert.dictionary()
    L = d.Sp - D @ d.W
    n, z = d.n, d.z
    sel = np.vstack([np.zeros((n, z - n)), np.eye(z - n)])
    residuals = {
        "nonlinearity-cancellation": float(np.abs(L @ cert.G2).max(initial=0.0)),
        "dictionary-selection": float(np.abs(d.Delta @ cert.G2 - sel).max(initial=0.0)),
        "lyapunov-parametrization": float(np.abs(d.Delta @ cert.Y - np.vstack([cert.Phi, np.zeros((z - n, n))])).max()),
    }
    G = np.hstack([cert.Y @ cert.P, cert.G2])
    gain_identity = float(np.abs(cert.K - d.I @ G).max())
    lmi = cert.Y.T @ L.T + L @ cert.Y + cert.mu * np.eye(n) + cert.kappa * cert.Phi
    lmi_max = float(np.linalg.eigvalsh(0.5 * (lmi + lmi.T)).max())
    phi_min = float(np.linalg.eigvalsh(cert.Phi).min())
    failures = [f"{k} residual {v:.3e} > {EQ_TOL:g}" for k, v in residuals.items() if v > EQ_TOL]
    if gain_identity > 1e-8 * (1 + np.abs(cert.K).max()):
        failures.append(f"gain formula mismatch {gain_identity:.3e}")
    if lmi_max > LMI_TOL:
        failures.append(f"dissipation-lmi max eigenvalue {lmi_max:.3e} > {LMI_TOL:g}")
    if phi_min <= 0:
        failures.append("Phi is not positive definite")
    if not np.allclose(cert.P @ cert.Phi, np.eye(n), atol=1e-8):
        failures.append("P is not the inverse of Phi")
    rho = coupling_gain(coupling, cert.mu)
    if abs(rho - cert.rho) > 1e-12 * max(1.0, rho):
        failures.append(f"stored rho {cert.rho:.6e} != ||D||^2/mu {rho:.6e}")

    rng = np.random.default_rng(seed)
    X = sample_ball(rng, n_mc, n, radius)
    Wv = sample_ball(rng, n_mc, coupling.shape[1], radius)
    F = L @ G
    g = dissipation_check(cert.P, F, dictionary, cert.kappa, rho, coupling, X, Wv)
    bad = g > MC_SLACK
    if bad.any():
        failures.append(f"{int(bad.sum())} of {n_mc} sampled points violate the ISS inequality")
    return ValidationReport(residuals, gain_identity, lmi_max, phi_min, n_mc, radius,
                            float(g.max(initial=-np.inf)), int(bad.sum()), X[bad][:10], failures)


# ---------------------------------------------------------------------------
# Parameter search
# ---------------------------------------------------------------------------

def geometric_grid(lo: float, hi: float, count: int) -> np.ndarray:
    return np.geomspace(lo, hi, count)


@dataclass
class GridResult:
    cert: IssCertificate | None
    attempts: list


def synthesize_grid(d: DataMatrices, D, kappas: Iterable[float], mus: Iterable[float],
                    base: SynthesisOptions | None = None,
                    accept: Callable[[IssCertificate], bool] | None = None,
                    dictionary: Dictionary | None = None) -> GridResult:
    """Try each ``(kappa, mu)`` pair in order; return the first accepted certificate.

    Every grid point is an independent synthesis problem. ``accept`` lets the caller
    add a downstream test (typically the network small-gain condition).
    """
    base = base or SynthesisOptions()
    attempts = []
    for kappa, mu in product(kappas, mus):
        opt = replace(base, kappa=float(kappa), mu=float(mu))
        try:
            cert = synthesize_iss(d, D, opt, dictionary)
        except (SynthesisInfeasible, SolverFailure, CertificateValidationError) as exc:
            attempts.append((kappa, mu, str(exc)))
            continue
        if accept is None or accept(cert):
            attempts.append((kappa, mu, "accepted"))
            return GridResult(cert, attempts)
        attempts.append((kappa, mu, "rejected by acceptance test"))
    return GridResult(None, attempts)
