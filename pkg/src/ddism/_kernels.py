"""Compiled closed-loop integrator for networks of identical subsystems.

Used by :func:`ddism.sim.simulate` when every subsystem shares one dictionary and
one set of controller matrices; the numpy path in :mod:`ddism.sim` remains the
reference implementation and handles everything else.
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .model import Dictionary

_ZFUN_CACHE: dict = {}


def dictionary_kernel(dictionary: Dictionary):
    """Compiled ``zfun(x, out)`` writing ``Z(x)`` into ``out``."""
    key = (dictionary.n, tuple(dictionary.term_strings))
    if key in _ZFUN_CACHE:
        return _ZFUN_CACHE[key]
    n = dictionary.n
    lines = ["def zfun(x, out):"]
    lines += [f"    x{k} = x[{k}]" for k in range(n)]
    lines += [f"    out[{k}] = x{k}" for k in range(n)]
    shared: dict[str, str] = {}

    def mono(t):
        src = t.monomial_source()
        if src not in shared:
            shared[src] = f"m{len(shared)}"
            lines.append(f"    {shared[src]} = {src}")
        return shared[src]

    for k, t in enumerate(dictionary.terms):
        col = n + k
        if t.op == "mono":
            lines.append(f"    out[{col}] = {mono(t)}")
        elif t.op in ("sin", "cos"):
            lines.append(f"    out[{col}] = math.{t.op}({mono(t)})")
        else:
            lines.append(f"    out[{col}] = math.log1p(x{t.index} * x{t.index})")
    ns = {"math": math}
    exec("\n".join(lines), ns)
    fn = numba.njit(ns["zfun"])
    _ZFUN_CACHE[key] = fn
    return fn


@numba.njit
def _rhs(zfun, t, y, dy, G, n, m, M, B, C, use_ism, ideal, Theta, eps, perturbed,
         amp, freq, phase, indptr, indices, data, zbuf, rbuf, cx, sig, aux_on,
         a_sig, a_us, a_ui, a_gm):
    nx = G * n
    z = M.shape[1]
    for r in range(nx):
        acc = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            acc += data[k] * y[indices[k]]
        cx[r] = acc
    for g in range(G):
        xo = g * n
        uo = g * m
        zfun(y[xo:xo + n], zbuf)
        for r in range(M.shape[0]):
            acc = 0.0
            for k in range(z):
                acc += M[r, k] * zbuf[k]
            rbuf[r] = acc
        scale = 0.0
        if use_ism:
            nrm2 = 0.0
            for j in range(m):
                s = y[nx + uo + j]
                for k in range(n):
                    s += C[j, k] * y[xo + k]
                sig[j] = s
                nrm2 += s * s
            nrm = math.sqrt(nrm2)
            if ideal:
                scale = -Theta[g] / nrm if nrm > 0.0 else 0.0
            else:
                scale = -Theta[g] / max(nrm, eps[g])
            for j in range(m):
                acc = rbuf[n + m + j]
                for k in range(n):
                    acc -= C[j, k] * cx[xo + k]
                dy[nx + uo + j] = acc
        else:
            for j in range(m):
                dy[nx + uo + j] = 0.0
        for j in range(m):
            ui = scale * sig[j] if use_ism else 0.0
            gm = amp[g, j] * math.sin(freq[g, j] * t + phase[g, j]) if perturbed else 0.0
            rbuf[n + j] += ui + gm       # total input now
            if aux_on:
                a_us[uo + j] = rbuf[n + j] - ui - gm
                a_ui[uo + j] = ui
                a_gm[uo + j] = gm
                a_sig[uo + j] = sig[j] if use_ism else 0.0
        for i in range(n):
            acc = rbuf[i] + cx[xo + i]
            for j in range(m):
                acc += B[i, j] * rbuf[n + j]
            dy[xo + i] = acc


@numba.njit
def integrate(zfun, y0, steps, h, log_every, euler, G, n, m, M, B, C, use_ism, ideal,
              Theta, eps, perturbed, amp, freq, phase, indptr, indices, data, overflow,
              X, Zt, Sg, Us, Ui, Gm):
    """Fixed-step run; returns ``(rows_logged, diverged_step)`` (``-1`` if none)."""
    ny = y0.size
    nx = G * n
    y = y0.copy()
    k1 = np.empty(ny)
    k2 = np.empty(ny)
    k3 = np.empty(ny)
    k4 = np.empty(ny)
    tmp = np.empty(ny)
    zbuf = np.empty(M.shape[1])
    rbuf = np.empty(M.shape[0])
    cx = np.empty(nx)
    sig = np.zeros(m)
    a_sig = np.zeros(G * m)
    a_us = np.zeros(G * m)
    a_ui = np.zeros(G * m)
    a_gm = np.zeros(G * m)
    li = 0
    for k in range(steps + 1):
        t = k * h
        logging = k % log_every == 0
        _rhs(zfun, t, y, k1, G, n, m, M, B, C, use_ism, ideal, Theta, eps, perturbed, amp, freq,
             phase, indptr, indices, data, zbuf, rbuf, cx, sig, logging, a_sig, a_us, a_ui, a_gm)
        if logging:
            X[li, :] = y[:nx]
            Zt[li, :] = y[nx:]
            Sg[li, :] = a_sig
            Us[li, :] = a_us
            Ui[li, :] = a_ui
            Gm[li, :] = a_gm
            li += 1
        if k == steps:
            break
        if euler:
            for i in range(ny):
                y[i] += h * k1[i]
        else:
            for i in range(ny):
                tmp[i] = y[i] + 0.5 * h * k1[i]
            _rhs(zfun, t + 0.5 * h, tmp, k2, G, n, m, M, B, C, use_ism, ideal, Theta, eps, perturbed,
                 amp, freq, phase, indptr, indices, data, zbuf, rbuf, cx, sig, False, a_sig, a_us, a_ui, a_gm)
            for i in range(ny):
                tmp[i] = y[i] + 0.5 * h * k2[i]
            _rhs(zfun, t + 0.5 * h, tmp, k3, G, n, m, M, B, C, use_ism, ideal, Theta, eps, perturbed,
                 amp, freq, phase, indptr, indices, data, zbuf, rbuf, cx, sig, False, a_sig, a_us, a_ui, a_gm)
            for i in range(ny):
                tmp[i] = y[i] + h * k3[i]
            _rhs(zfun, t + h, tmp, k4, G, n, m, M, B, C, use_ism, ideal, Theta, eps, perturbed,
                 amp, freq, phase, indptr, indices, data, zbuf, rbuf, cx, sig, False, a_sig, a_us, a_ui, a_gm)
            for i in range(ny):
                y[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        nrm2 = 0.0
        for i in range(nx):
            nrm2 += y[i] * y[i]
        if not (nrm2 <= overflow * overflow):
            return li, k + 1
    return li, -1
