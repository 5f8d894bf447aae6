"""Closed-loop network simulation and verification suites.

The augmented state ``[x; zeta]`` of all subsystems is integrated with one fixed
step. Each subsystem applies ``u_i = K_i Z_i(x_i)`` plus, under ``iss_plus_ism``,
the sliding-mode term computed from ``sigma_i = C_i x_i + zeta_i``. Internal inputs
are the neighbour states at the same stage of the same step.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .composition import NetworkClf, network_clf
from .ism import IsmController
from .model import DimensionError, NetworkModel
from .synthesis import IssCertificate, dissipation_check, sample_ball

CONTROLLERS = ("none", "iss_only", "iss_plus_ism")
OVERFLOW = 1e12


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``x0`` (explicit stacked state) takes precedence over ``x0_box``, which samples
    every coordinate uniformly from ``[-x0_box, x0_box]``. ``tau`` is the sampling
    interval of the design data; when given, ``h <= tau / 10`` is enforced together
    with ``h <= T_pert / 50`` unless ``enforce_step`` is off.
    """

    horizon: float = 10.0
    h: float = 1e-4
    scheme: str = "rk4"
    perturbation: bool = True
    controllers: str = "iss_plus_ism"
    x0_box: float = 100.0
    x0: tuple | None = None
    seed: int = 0
    log_every: int = 1
    tau: float | None = None
    enforce_step: bool = True
    backend: str = "auto"

    def __post_init__(self):
        if not self.h > 0 or not self.horizon > 0:
            raise ValueError("h and horizon must be positive")
        if self.scheme not in ("rk4", "euler"):
            raise ValueError("scheme must be rk4 or euler")
        if self.controllers not in CONTROLLERS:
            raise ValueError(f"controllers must be one of {CONTROLLERS}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.backend not in ("auto", "numpy", "compiled"):
            raise ValueError("backend must be auto, numpy or compiled")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.h))


@dataclass(eq=False)
class TrajectoryLog:
    t: np.ndarray
    x: np.ndarray
    zeta: np.ndarray
    sigma: np.ndarray
    u_star: np.ndarray
    u_ism: np.ndarray
    gamma: np.ndarray
    V: np.ndarray | None
    state_offsets: np.ndarray
    input_offsets: np.ndarray
    config: SimConfig
    h_log: float
    eps_bl: float | None = None
    diverged: bool = False
    message: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.state_offsets.size - 1

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def state(self, i: int) -> np.ndarray:
        return self.x[:, self.state_offsets[i]:self.state_offsets[i + 1]]

    def sigma_of(self, i: int) -> np.ndarray:
        return self.sigma[:, self.input_offsets[i]:self.input_offsets[i + 1]]

    def sigma_norms(self) -> np.ndarray:
        """``|sigma_i(t)|`` as a ``(samples, N)`` array."""
        sizes = np.diff(self.input_offsets)
        if np.all(sizes == sizes[0]):
            return np.linalg.norm(self.sigma.reshape(len(self.t), self.N, int(sizes[0])), axis=2)
        return np.column_stack([np.linalg.norm(self.sigma_of(i), axis=1) for i in range(self.N)])

    # output ----------------------------------------------------------
    _ARRAYS = ("t", "x", "zeta", "sigma", "u_star", "u_ism", "gamma", "state_offsets", "input_offsets")

    def save(self, path) -> None:
        """Full-resolution ``.npz`` (the CSV writers are for plotting and may downsample)."""
        arrays = {k: getattr(self, k) for k in self._ARRAYS}
        if self.V is not None:
            arrays["V"] = self.V
        header = {"config": asdict(self.config), "h_log": self.h_log, "eps_bl": self.eps_bl,
                  "diverged": self.diverged, "message": self.message, "meta": self.meta}
        np.savez(path, header=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "TrajectoryLog":
        with np.load(path) as f:
            header = json.loads(str(f["header"]))
            arrays = {k: f[k] for k in cls._ARRAYS}
            V = f["V"] if "V" in f.files else None
        cfg = header["config"]
        if cfg.get("x0") is not None:
            cfg["x0"] = tuple(cfg["x0"])
        return cls(**arrays, V=V, config=SimConfig(**cfg), h_log=header["h_log"], eps_bl=header["eps_bl"],
                   diverged=header["diverged"], message=header["message"], meta=header["meta"])

    def write_csv(self, path, downsample: int = 1) -> None:
        sl = slice(None, None, downsample)
        header = ["t"]
        cols = [self.t[sl]]
        for i in range(self.N):
            xi = self.state(i)[sl]
            header += [f"x{i}_{k + 1}" for k in range(xi.shape[1])]
            cols.append(xi)
            si = self.sigma_of(i)[sl]
            header += [f"sigma{i}_{k + 1}" for k in range(si.shape[1])]
            cols.append(si)
        data = np.column_stack(cols)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for row in data:
                wr.writerow(["%.17g" % v for v in row])

    def write_series(self, out_dir, downsample: int = 1) -> list[Path]:
        """Two-column plot series: ``|x(t)|`` and each sliding component."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sl = slice(None, None, downsample)
        paths = [out_dir / "norm_x.csv"]
        np.savetxt(paths[0], np.column_stack([self.t[sl], self.norms[sl]]), delimiter=",",
                   header="t,norm_x", comments="", fmt="%.17g")
        for k in range(self.sigma.shape[1]):
            p = out_dir / f"sigma_{k}.csv"
            np.savetxt(p, np.column_stack([self.t[sl], self.sigma[sl, k]]), delimiter=",",
                       header="t,sigma", comments="", fmt="%.17g")
            paths.append(p)
        return paths


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _LoopGroup:
    si: np.ndarray          # (G, n) state indices
    ui: np.ndarray          # (G, m) input/zeta indices
    dictionary: object
    n: int
    m: int
    M: np.ndarray           # (G, r, z) rows [A; K; -C F]
    B: np.ndarray           # (G, n, m)
    C: np.ndarray | None    # (G, m, n)
    amp: np.ndarray
    freq: np.ndarray
    phase: np.ndarray
    Theta: np.ndarray | None
    eps: np.ndarray | None
    mode: str = "boundary_layer"
    shared: bool = False    # every member has identical matrices
    contiguous: bool = False
    x_slice: slice = slice(0)
    u_slice: slice = slice(0)

    def finalize(self, n_total: int):
        same = lambda a: a is None or bool(np.all(a == a[:1]))
        self.shared = same(self.M) and same(self.B) and same(self.C)
        if self.shared:
            self.MT, self.BT = self.M[0].T.copy(), self.B[0].T.copy()
            self.CT = None if self.C is None else self.C[0].T.copy()
        G = self.si.shape[0]
        lo, ulo = int(self.si[0, 0]), int(self.ui[0, 0])
        self.contiguous = (np.array_equal(self.si.ravel(), np.arange(lo, lo + G * self.n))
                           and np.array_equal(self.ui.ravel(), np.arange(ulo, ulo + G * self.m)))
        self.x_slice = slice(lo, lo + G * self.n)
        self.u_slice = slice(n_total + ulo, n_total + ulo + G * self.m)


class ClosedLoop:
    """Vectorised right-hand side of the augmented closed loop.

    Per subsystem group the dictionary is evaluated once and pushed through the
    stacked matrix ``[A; K; -C F]`` so one product gives the open-loop drift, the
    nominal control and the transient rate.
    """

    def __init__(self, net: NetworkModel, certs: Sequence[IssCertificate] | None,
                 isms: Sequence[IsmController] | None, controllers: str, perturbed: bool):
        self.net, self.controllers, self.perturbed = net, controllers, perturbed
        if controllers != "none" and (certs is None or len(certs) != net.N):
            raise DimensionError("one certificate per subsystem is required")
        if controllers == "iss_plus_ism" and (isms is None or len(isms) != net.N):
            raise DimensionError("one ISM controller per subsystem is required")
        self.n, self.m = net.n, net.m
        op = net.coupling_operator
        self.coupling = op.toarray() if net.n <= 512 else op
        self.groups = []
        modes = set()
        for g in net.groups:
            mem = g.members
            G, n, z = g.A.shape
            m = g.B.shape[2]
            if controllers == "none":
                K = np.zeros((G, m, z))
                F = np.zeros((G, n, z))
            else:
                K = np.stack([certs[i].K for i in mem])
                F = np.stack([certs[i].F for i in mem])
                if K.shape != (G, m, z) or F.shape != (G, n, z):
                    raise DimensionError("certificate gain does not match the subsystem dimensions")
            C = Theta = eps = None
            mode = "boundary_layer"
            blocks = [g.A, K]
            if controllers == "iss_plus_ism":
                C = np.stack([isms[i].C for i in mem])
                if C.shape != (G, m, n):
                    raise DimensionError("sliding-output matrix does not match the subsystem dimensions")
                Theta = np.array([isms[i].Theta for i in mem])
                eps = np.array([isms[i].eps_bl for i in mem])
                gm = {isms[i].mode for i in mem}
                if len(gm) != 1:
                    raise ValueError("mixed ISM modes inside one subsystem group")
                mode = gm.pop()
                modes.add(mode)
                blocks.append(-(C @ F))
            lg = _LoopGroup(g.state_idx, g.input_idx, g.dictionary, n, m, np.concatenate(blocks, axis=1),
                            g.B, C, g.amp, g.freq, g.phase, Theta, eps, mode)
            lg.finalize(self.n)
            self.groups.append(lg)
        self.compilable = (len(self.groups) == 1 and self.groups[0].shared and self.groups[0].contiguous
                           and self.groups[0].x_slice.start == 0)
        self.eps_bl = (float(min(isms[i].eps_bl for i in range(net.N)))
                       if controllers == "iss_plus_ism" else None)
        self.modes = modes

    def initial(self, x0: np.ndarray) -> np.ndarray:
        y = np.zeros(self.n + self.m)
        y[: self.n] = x0
        if self.controllers == "iss_plus_ism":
            for g in self.groups:
                y[self.n + g.ui] = -(g.C @ x0[g.si][:, :, None])[:, :, 0]
        return y

    def rhs(self, t: float, y: np.ndarray, aux: dict | None = None) -> np.ndarray:
        n = self.n
        x = y[:n]
        dy = np.empty_like(y)
        cx = self.coupling @ x
        for g in self.groups:
            G, gn, gm = g.si.shape[0], g.n, g.m
            if g.contiguous:
                Xg = x[g.x_slice].reshape(G, gn)
                zeta = y[g.u_slice].reshape(G, gm)
                cxg = cx[g.x_slice].reshape(G, gn)
            else:
                Xg, zeta, cxg = x[g.si], y[n + g.ui], cx[g.si]
            Zg = g.dictionary.evaluate_rows(Xg)
            R = Zg @ g.MT if g.shared else (g.M @ Zg[:, :, None])[:, :, 0]
            u_s = R[:, gn:gn + gm]
            u = u_s
            if g.C is not None:
                sigma = (Xg @ g.CT if g.shared else (g.C @ Xg[:, :, None])[:, :, 0]) + zeta
                nrm = np.sqrt(np.einsum("ij,ij->i", sigma, sigma))[:, None]
                if g.mode == "boundary_layer":
                    u_i = sigma * (-g.Theta[:, None] / np.maximum(nrm, g.eps[:, None]))
                else:
                    u_i = np.where(nrm > 0, sigma * (-g.Theta[:, None] / np.where(nrm > 0, nrm, 1.0)), 0.0)
                u = u + u_i
                cC = cxg @ g.CT if g.shared else (g.C @ cxg[:, :, None])[:, :, 0]
                dz = R[:, gn + gm:] - cC
            else:
                dz = 0.0
            if self.perturbed:
                gam = g.amp * np.sin(g.freq * t + g.phase)
                u = u + gam
            dx = R[:, :gn] + cxg + (u @ g.BT if g.shared else (g.B @ u[:, :, None])[:, :, 0])
            if g.contiguous:
                dy[g.x_slice] = dx.ravel()
                dy[g.u_slice] = np.ravel(dz) if g.C is not None else 0.0
            else:
                dy[g.si] = dx
                dy[n + g.ui] = dz
            if aux is not None:
                aux["u_star"][g.ui] = u_s
                if g.C is not None:
                    aux["sigma"][g.ui] = sigma
                    aux["u_ism"][g.ui] = u_i
                if self.perturbed:
                    aux["gamma"][g.ui] = gam
        return dy


def initial_state(net: NetworkModel, cfg: SimConfig) -> np.ndarray:
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, float)
        if x0.shape != (net.n,):
            raise DimensionError(f"x0 must have {net.n} entries")
        return x0
    return np.random.default_rng(cfg.seed).uniform(-cfg.x0_box, cfg.x0_box, net.n)


def check_step(net: NetworkModel, cfg: SimConfig) -> None:
    if not cfg.enforce_step:
        return
    limit = net.shortest_perturbation_period / 50 if cfg.perturbation else math.inf
    if cfg.tau is not None:
        limit = min(limit, cfg.tau / 10)
    if cfg.h > limit * (1 + 1e-12):
        raise ValueError(f"step h={cfg.h:g} exceeds the admissible {limit:g}")


def simulate(net: NetworkModel, certs: Sequence[IssCertificate] | None,
             isms: Sequence[IsmController] | None, cfg: SimConfig) -> TrajectoryLog:
    """Fixed-step simulation of the closed-loop network.

    A state whose norm exceeds ``1e12`` (or becomes non-finite) stops the run; the
    returned log is truncated there and flagged ``diverged``.
    """
    check_step(net, cfg)
    loop = ClosedLoop(net, certs, isms, cfg.controllers, cfg.perturbation)
    x0 = initial_state(net, cfg)
    y = loop.initial(x0)
    n, m, h = net.n, net.m, cfg.h
    steps = cfg.steps
    n_log = steps // cfg.log_every + 1
    X = np.empty((n_log, n))
    Zt = np.empty((n_log, m))
    Sg = np.zeros((n_log, m))
    Us = np.zeros((n_log, m))
    Ui = np.zeros((n_log, m))
    Gm = np.zeros((n_log, m))
    T = np.arange(n_log) * (h * cfg.log_every)
    backend = cfg.backend
    if backend == "auto":
        backend = "compiled" if loop.compilable else "numpy"
    elif backend == "compiled" and not loop.compilable:
        raise ValueError("compiled backend needs identical subsystems in one contiguous group")
    if backend == "compiled":
        li, bad = _run_compiled(loop, y, cfg, X, Zt, Sg, Us, Ui, Gm)
        diverged = bad >= 0
        msg = (f"state norm exceeded {OVERFLOW:g} at t={bad * h:.6g}; closed loop is not stabilising"
               if diverged else "")
    else:
        li, diverged, msg = _run_numpy(loop, y, cfg, X, Zt, Sg, Us, Ui, Gm)
    X, Zt, Sg, Us, Ui, Gm, T = (a[:li] for a in (X, Zt, Sg, Us, Ui, Gm, T))
    V = None
    if certs is not None and cfg.controllers != "none":
        clf = _clf(certs, net)
        V = clf.batch(X)
    return TrajectoryLog(T, X, Zt, Sg, Us, Ui, Gm, V, net.state_offsets, net.input_offsets, cfg,
                         h * cfg.log_every, loop.eps_bl, diverged, msg,
                         meta={"modes": sorted(loop.modes), "backend": backend,
                               "step_sensitive": "ideal_sign" in loop.modes})


def _run_numpy(loop: ClosedLoop, y, cfg: SimConfig, X, Zt, Sg, Us, Ui, Gm):
    n, m, h, steps = loop.n, loop.m, cfg.h, cfg.steps
    aux = {k: np.zeros(m) for k in ("u_star", "sigma", "u_ism", "gamma")}
    f = loop.rhs
    euler = cfg.scheme == "euler"
    diverged, msg, li = False, "", 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps + 1):
            t = k * h
            logging = k % cfg.log_every == 0
            k1 = f(t, y, aux if logging else None)
            if logging:
                X[li] = y[:n]
                Zt[li] = y[n:]
                Sg[li], Us[li], Ui[li], Gm[li] = aux["sigma"], aux["u_star"], aux["u_ism"], aux["gamma"]
                li += 1
            if k == steps:
                break
            if euler:
                y = y + h * k1
            else:
                k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
                k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
                k4 = f(t + h, y + h * k3)
                y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            nx = np.linalg.norm(y[:n])
            if not np.isfinite(nx) or nx > OVERFLOW:
                diverged = True
                msg = f"state norm exceeded {OVERFLOW:g} at t={t + h:.6g}; closed loop is not stabilising"
                break
    return li, diverged, msg


def _run_compiled(loop: ClosedLoop, y0, cfg: SimConfig, X, Zt, Sg, Us, Ui, Gm):
    from . import _kernels

    g = loop.groups[0]
    G = g.si.shape[0]
    C = g.C[0] if g.C is not None else np.zeros((g.m, g.n))
    Theta = g.Theta if g.Theta is not None else np.zeros(G)
    eps = g.eps if g.eps is not None else np.ones(G)
    op = loop.net.coupling_operator
    with np.errstate(over="ignore", invalid="ignore"):
        li, bad = _kernels.integrate(
            _kernels.dictionary_kernel(g.dictionary), np.ascontiguousarray(y0, float), cfg.steps, cfg.h,
            cfg.log_every, cfg.scheme == "euler", G, g.n, g.m, np.ascontiguousarray(g.M[0]),
            np.ascontiguousarray(g.B[0]), np.ascontiguousarray(C), g.C is not None, g.mode == "ideal_sign",
            Theta.astype(float), eps.astype(float), loop.perturbed, g.amp, g.freq, g.phase,
            op.indptr.astype(np.int64), op.indices.astype(np.int64), op.data.astype(float), OVERFLOW,
            X, Zt, Sg, Us, Ui, Gm)
    return int(li), int(bad)


def _clf(certs, net) -> NetworkClf:
    return network_clf(certs, offsets=net.state_offsets, kappa=certs[0].kappa) if len(certs) == 1 else \
        NetworkClf(tuple(c.P for c in certs), np.asarray(net.state_offsets), float("nan"),
                   float(min(c.alpha1 for c in certs)), float(max(c.alpha2 for c in certs)))


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class GasReport:
    passed: bool
    initial_norm: float
    final_norm: float
    shrink: float
    shrink_factor: float
    tail_ratio: float
    tail_sup: float
    residual_floor: float
    decay_exponent: float
    kappa_reference: float | None
    reason: str = ""


def upper_envelope(v: np.ndarray) -> np.ndarray:
    """``env(t) = max_{s >= t} v(s)``: the tightest non-increasing majorant."""
    return np.maximum.accumulate(v[::-1])[::-1]


def verify_gas(log: TrajectoryLog, shrink_factor: float = 1e-2, deadline: float | None = None,
               residual_floor: float | None = None, kappa: float | None = None) -> GasReport:
    """Convergence verdict for a logged run.

    Passes iff ``|x(deadline)| <= shrink_factor |x(0)|`` and the supremum of
    ``|x|`` over the last quarter of ``[0, deadline]`` is at most half of that over
    the second half, or the latter stays below ``residual_floor``. The floor
    defaults to ``10 eps_bl sqrt(N)`` for boundary-layer runs and ``0`` otherwise,
    so persistent oscillation fails even when it is small relative to ``|x(0)|``.
    The decay exponent is the least-squares slope of ``-log env(t)`` over the first
    half of the window; a quadratic Lyapunov bound predicts at least ``kappa / 2``.
    """
    if log.diverged or len(log.t) < 3:
        return GasReport(False, float(log.norms[0]) if len(log.t) else math.nan, math.inf, math.inf,
                         shrink_factor, math.inf, math.inf, 0.0, -math.inf, kappa,
                         log.message or "run too short")
    deadline = log.t[-1] if deadline is None else deadline
    kd = int(np.searchsorted(log.t, deadline - 1e-12 * max(1.0, deadline)))
    kd = min(kd, len(log.t) - 1)
    norms = log.norms[: kd + 1]
    env = upper_envelope(norms)
    if residual_floor is None:
        residual_floor = 10 * log.eps_bl * math.sqrt(log.N) if log.eps_bl else 0.0
    x0n, xf = float(norms[0]), float(norms[-1])
    shrink = xf / x0n if x0n > 0 else 0.0
    half = kd // 2
    tail_sup = float(env[half])
    quarter = half + (kd - half) // 2
    tail_ratio = float(env[quarter] / env[half]) if env[half] > 0 else 0.0
    tt = log.t[: half + 1]
    le = np.log(np.maximum(env[: half + 1], 1e-300))
    slope = -np.polyfit(tt, le, 1)[0] if half >= 2 else math.nan
    ok_shrink = shrink <= shrink_factor
    ok_tail = tail_ratio <= 0.5 or tail_sup <= residual_floor
    reason = ""
    if not ok_shrink:
        reason = f"|x(T)|/|x(0)| = {shrink:.3e} > {shrink_factor:g}"
    elif not ok_tail:
        reason = f"persistent residual: envelope {tail_sup:.3e} over the second half does not decay"
    return GasReport(ok_shrink and ok_tail, x0n, xf, shrink, shrink_factor, tail_ratio, tail_sup,
                     residual_floor, float(slope), kappa, reason)


@dataclass
class SlidingReport:
    passed: bool
    band: float
    max_sigma: float
    worst_subsystem: int
    worst_time: float
    sigma_at_start: float


def verify_sliding(log: TrajectoryLog, band: float) -> SlidingReport:
    """Passes iff ``max_t |sigma_i(t)| <= band`` for every subsystem."""
    s = log.sigma_norms()
    k, i = np.unravel_index(int(np.argmax(s)), s.shape)
    mx = float(s[k, i])
    return SlidingReport(mx <= band, band, mx, int(i), float(log.t[k]), float(s[0].max()))


@dataclass
class MonteCarloReport:
    n_mc: int
    radius: float
    max_violation: float
    n_violations: int
    n_conditioning: int
    worst: np.ndarray

    @property
    def passed(self) -> bool:
        return self.n_violations == 0


def monte_carlo_iss(cert: IssCertificate, rep, D, n_mc: int = 10000, radius: float = 10.0,
                    seed: int = 0, slack: float = 1e-6, batch: int = 20000) -> MonteCarloReport:
    """Sample ``(x, w)`` in balls of ``radius`` and check the ISS dissipation inequality.

    A violation smaller than ``1e-10`` times the magnitude of the terms involved is
    counted under ``n_conditioning`` (floating-point cancellation) rather than as a
    failure of the certificate.
    """
    D = np.atleast_2d(np.asarray(D, float)).reshape(cert.n, -1)
    rng = np.random.default_rng(seed)
    worst, n_bad, n_cond, worst_x = -np.inf, 0, 0, np.zeros((0, cert.n))
    done = 0
    while done < n_mc:
        k = min(batch, n_mc - done)
        X = sample_ball(rng, k, cert.n, radius)
        Wv = sample_ball(rng, k, D.shape[1], radius)
        g = dissipation_check(cert.P, rep.F, rep.dictionary, cert.kappa, cert.rho, D, X, Wv)
        Z = rep.dictionary.evaluate_batch(X)
        PX = X @ cert.P
        scale = (2 * np.abs(PX).sum(1) * (np.abs(Z) @ np.abs(rep.F).T + np.abs(Wv) @ np.abs(D).T).sum(1)
                 + cert.kappa * np.abs(np.einsum("ij,ij->i", PX, X)) + cert.rho * (Wv ** 2).sum(1))
        viol = g > slack
        cond = viol & (g <= 1e-10 * scale)
        n_cond += int(cond.sum())
        real = viol & ~cond
        n_bad += int(real.sum())
        if real.any() and worst_x.shape[0] < 10:
            worst_x = np.vstack([worst_x, X[real][: 10 - worst_x.shape[0]]])
        worst = max(worst, float(g.max()))
        done += k
    return MonteCarloReport(n_mc, radius, worst, n_bad, n_cond, worst_x)


@dataclass
class DecayReport:
    fraction: float
    required: float
    kappa: float
    worst_excess: float

    @property
    def passed(self) -> bool:
        return self.fraction >= self.required


def decay_check(log: TrajectoryLog, kappa: float, slack: float = 1e-6,
                required: float = 0.999) -> DecayReport:
    """Fraction of interior samples with ``dV/dt <= -kappa V + slack (1 + V)``.

    ``dV/dt`` is the central difference of the logged ``V``.
    """
    if log.V is None or len(log.V) < 3:
        raise ValueError("log has no Lyapunov values")
    V = log.V
    dV = (V[2:] - V[:-2]) / (2 * log.h_log)
    excess = dV - (-kappa * V[1:-1] + slack * (1 + V[1:-1]))
    return DecayReport(float(np.mean(excess <= 0)), required, kappa, float(excess.max()))


def equivalent_control_error(log: TrajectoryLog, gamma_sup: float, window: int = 100) -> float:
    """Largest windowed-mean gap between ``u_ism`` and ``-gamma``, relative to ``gamma_sup``.

    Windows of ``window`` logged steps; the transient before the first full window
    is skipped.
    """
    if len(log.t) < 2 * window:
        raise ValueError("log shorter than two averaging windows")
    kernel = np.ones(window) / window
    worst = 0.0
    for c in range(log.u_ism.shape[1]):
        a = np.convolve(log.u_ism[:, c], kernel, mode="valid")
        b = np.convolve(-log.gamma[:, c], kernel, mode="valid")
        worst = max(worst, float(np.abs(a - b)[1:].max()))
    return worst / gamma_sup if gamma_sup > 0 else worst


def write_summary(path, **reports) -> None:
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        return str(o)

    data = {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in reports.items()}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, default=conv)
