"""Fixed-step explicit integrators."""
from __future__ import annotations

from typing import Callable

import numpy as np

Rhs = Callable[[float, np.ndarray], np.ndarray]


def euler_step(f: Rhs, t: float, x: np.ndarray, h: float) -> np.ndarray:
    return x + h * f(t, x)


def rk4_step(f: Rhs, t: float, x: np.ndarray, h: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step."""
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


SCHEMES = {"rk4": rk4_step, "euler": euler_step}


def get_scheme(name: str):
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown integration scheme {name!r}; choose from {sorted(SCHEMES)}") from None
