"""Independent reference prices and brute-force LCP solutions used to check the solvers."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.stats import norm


def bs_european_put(S: float, K: float, sigma: float, r: float, T: float, q: float = 0.0) -> float:
    """Closed-form Black-Scholes European put."""
    if T <= 0:
        return max(K - S, 0.0)
    if S <= 0:
        return K * math.exp(-r * T)
    sq = sigma * math.sqrt(T)
    d1 = (math.log(S / K) + (r - q + 0.5 * sigma ** 2) * T) / sq
    d2 = d1 - sq
    return K * math.exp(-r * T) * norm.cdf(-d2) - S * math.exp(-q * T) * norm.cdf(-d1)


def binomial_american_put(S: float, K: float, sigma: float, r: float, T: float, steps: int = 10_000,
                          q: float = 0.0) -> float:
    """Cox-Ross-Rubinstein tree with early exercise at every node."""
    dt = T / steps
    u = math.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    disc = math.exp(-r * dt)
    pu = (math.exp((r - q) * dt) - d) / (u - d)
    if not 0.0 < pu < 1.0:
        raise ValueError("tree probabilities outside (0, 1); increase steps")
    pd = 1.0 - pu
    j = np.arange(steps + 1)
    ST = S * u ** (steps - 2.0 * j)
    V = np.maximum(K - ST, 0.0)
    for n in range(steps - 1, -1, -1):
        ST = ST[: n + 1] * d
        V = np.maximum(disc * (pu * V[:-1] + pd * V[1:]), K - ST)
    return float(V[0])


def lcp_enumerate(A: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve min(A x - b, x - c) = 0 by trying every active set.

    For each subset F of free nodes, x = c off F and A_FF x_F = b_F - A_FC c_C;
    the candidate is accepted when x_F >= c_F and (A x - b)_C >= 0. For an
    M-matrix exactly one subset qualifies; an error is raised otherwise.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    n = b.size
    found = []
    for mask in itertools.product((False, True), repeat=n):
        free = np.array(mask)
        x = c.copy()
        if free.any():
            C = ~free
            rhs = b[free] - A[np.ix_(free, C)] @ c[C]
            x[free] = np.linalg.solve(A[np.ix_(free, free)], rhs)
        w = A @ x - b
        tol = 1e-12 * max(1.0, np.abs(b).max(), np.abs(c).max())
        if np.all(x[free] >= c[free] - tol) and np.all(w[~free] >= -tol):
            found.append(x)
    if not found:
        raise ValueError("no active set satisfies the complementarity conditions")
    sol = found[0]
    for other in found[1:]:
        if not np.allclose(other, sol, rtol=0, atol=1e-10):
            raise ValueError("complementarity solution is not unique")
    return sol
