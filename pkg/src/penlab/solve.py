"""
Backward induction for the penalised problem and the discrete LCP.

Each time level solves

    (I - theta*dt*L_h) v - (dt/eps) * max(c - v, 0) = (I + (1-theta)*dt*L_h) v_next + dt*g

by a semismooth (active-set) Newton iteration, or the complementarity form
min(A v - b, v - c) = 0 by projected SOR. The penalty term is always fully
implicit. Rannacher start-up replaces the first Crank-Nicolson interval by
fully implicit half-steps.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.linalg import solve_banded

from .discretize import DiscreteOperator, Grid, assemble
from .model import MarketModel, Payoff

log = logging.getLogger(__name__)

MODES = ("penalty", "lcp", "european")
COUPLINGS = ("implicit", "lagged")


class SolverError(RuntimeError):
    """Raised when Newton or PSOR fails to converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "penalty"
    epsilon: Optional[float] = None
    newton_max_iter: int = 50
    newton_tol: float = 1e-9
    psor_omega: float = 1.5
    psor_tol: float = 1e-10
    psor_max_sweeps: int = 100_000
    jump_coupling: str = "lagged"
    jump_tol: float = 1e-10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "penalty" and (self.epsilon is None or not self.epsilon > 0):
            raise ValueError("penalty mode needs epsilon > 0")
        if not 1.0 < self.psor_omega < 2.0:
            raise ValueError("psor_omega must lie in (1, 2)")
        for name in ("newton_tol", "psor_tol", "jump_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.newton_max_iter < 1 or self.psor_max_sweeps < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.jump_coupling not in COUPLINGS:
            raise ValueError(f"jump_coupling must be one of {COUPLINGS}")

    @classmethod
    def penalty(cls, epsilon: float, **kw) -> "SolverConfig":
        return cls(mode="penalty", epsilon=epsilon, **kw)

    @classmethod
    def lcp(cls, **kw) -> "SolverConfig":
        return cls(mode="lcp", **kw)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class Surface:
    """Values on every node (rows) and time level (columns, t_0 = 0 ... t_M = T)."""

    values: np.ndarray
    payoff_values: np.ndarray
    grid: Grid
    meta: dict = field(default_factory=dict)
    quantity: str = "value"

    @property
    def S(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def t(self) -> np.ndarray:
        return self.grid.times

    def level(self, tau: float) -> int:
        """Column index of the level closest to time-to-expiry tau."""
        j = int(round((self.grid.T - tau) / self.grid.k))
        return min(max(j, 0), self.grid.M)

    def at(self, S: float, tau: float = None) -> float:
        """Linear interpolation in S at the level nearest to time-to-expiry tau (default T)."""
        col = 0 if tau is None else self.level(tau)
        return float(np.interp(S, self.S, self.values[:, col]))

    def violation(self) -> np.ndarray:
        """max(Psi - V, 0) per level."""
        return np.maximum(self.payoff_values[:, None] - self.values, 0.0).max(axis=0)

    # serialisation ------------------------------------------------------ #

    def to_csv(self, path, delta_surface: Optional["Surface"] = None) -> None:
        """Long format with columns t, S, value, delta at 17 significant digits."""
        if delta_surface is None:
            delta_surface = delta(self)
        t = np.repeat(self.t, self.S.size)
        S = np.tile(self.S, self.t.size)
        table = np.column_stack([t, S, self.values.T.ravel(), delta_surface.values.T.ravel()])
        np.savetxt(path, table, delimiter=",", fmt="%.17g", header="t,S,value,delta", comments="")

    def to_json(self, path=None) -> dict:
        doc = {
            "quantity": self.quantity,
            "grid": self.grid.to_dict(),
            "meta": self.meta,
            "payoff_values": self.payoff_values.tolist(),
            "values": self.values.tolist(),
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh)
        return doc

    @classmethod
    def from_json(cls, doc) -> "Surface":
        if not isinstance(doc, dict):
            with open(doc) as fh:
                doc = json.load(fh)
        gd = {k: doc["grid"][k] for k in ("S_max", "N", "T", "M", "theta", "rannacher_steps", "requested_N")}
        return cls(values=np.array(doc["values"]), payoff_values=np.array(doc["payoff_values"]),
                   grid=Grid(**gd), meta=doc.get("meta", {}), quantity=doc.get("quantity", "value"))


# --------------------------------------------------------------------------- #
#  PSOR kernels
# --------------------------------------------------------------------------- #


@njit(cache=True)
def _psor_tridiagonal(lo, di, up, b, c, x, omega, tol, max_sweeps):
    n = x.size
    # scaled coefficients keep the division out of the sequential sweep
    w = omega / di
    wb = w * b
    wl = w * lo
    wu = w * up
    keep = 1.0 - omega
    err = np.inf
    for sweep in range(max_sweeps):
        err = 0.0
        left = 0.0
        for i in range(n):
            xi = x[i]
            right = x[i + 1] if i < n - 1 else 0.0
            y = keep * xi + wb[i] - wl[i] * left - wu[i] * right
            if y < c[i]:
                y = c[i]
            d = abs(y - xi)
            if d > err:
                err = d
            x[i] = y
            left = y
        if err < tol:
            return sweep + 1, err
    return -1, err


@njit(cache=True)
def _psor_dense(A, b, c, x, omega, tol, max_sweeps):
    n = x.size
    err = np.inf
    for sweep in range(max_sweeps):
        err = 0.0
        for i in range(n):
            s = b[i]
            for j in range(n):
                if j != i:
                    s -= A[i, j] * x[j]
            y = x[i] + omega * (s / A[i, i] - x[i])
            if y < c[i]:
                y = c[i]
            d = abs(y - x[i])
            if d > err:
                err = d
            x[i] = y
        if err < tol:
            return sweep + 1, err
    return -1, err


def psor(A, b, c, x0=None, omega: float = 1.5, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Projected SOR for min(A x - b, x - c) = 0 with a dense matrix A.

    Returns (x, sweeps). ``c`` may contain -inf (no obstacle). Convergence
    for omega in (0, 2) needs A symmetric positive definite; for a general
    diagonally dominant M-matrix use omega <= 1.
    """
    A = np.ascontiguousarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    x = np.maximum(np.zeros_like(b) if x0 is None else np.array(x0, dtype=float), c)
    x[~np.isfinite(x)] = 0.0
    sweeps, err = _psor_dense(A, b, c, x, omega, tol, max_sweeps)
    if sweeps < 0:
        raise SolverError("PSOR sweep cap exceeded", err)
    return x, sweeps


def psor_tridiagonal(ab, b, c, x0=None, omega: float = 1.5, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Projected SOR for a tridiagonal matrix given in (1,1) banded storage."""
    n = b.size
    lo = np.zeros(n)
    lo[1:] = ab[2, :-1]
    up = np.zeros(n)
    up[:-1] = ab[0, 1:]
    x = np.maximum(np.zeros(n) if x0 is None else np.array(x0, dtype=float), c)
    x[~np.isfinite(x)] = 0.0
    sweeps, err = _psor_tridiagonal(lo, np.ascontiguousarray(ab[1]), up, np.asarray(b, float),
                                    np.asarray(c, float), x, omega, tol, max_sweeps)
    if sweeps < 0:
        raise SolverError("PSOR sweep cap exceeded", err)
    return x, sweeps


# --------------------------------------------------------------------------- #
#  Single steps
# --------------------------------------------------------------------------- #


def _rhs(op: DiscreteOperator, v_next: np.ndarray, dt: float, theta: float) -> np.ndarray:
    Lv = op.apply(v_next) - op.g
    return v_next + (1.0 - theta) * dt * Lv + dt * op.g


def _newton_penalty(solve, A_apply, rhs, c, large, x0, cfg: SolverConfig):
    """Active-set Newton for A x - large*max(c - x, 0) = rhs.

    ``solve(d, b)`` solves (A + diag(d)) x = b. Nodes with x == c count as
    inactive, which keeps the Jacobian an M-matrix.
    """
    x = x0
    active = x < c
    res = np.inf
    for it in range(1, cfg.newton_max_iter + 1):
        d = np.where(active, large, 0.0)
        x = solve(d, rhs + d * c)
        new_active = x < c
        # relative to the largest term in the equation, penalty included
        scale = max(1.0, float(np.max(np.abs(rhs))), float(np.max(d * np.abs(c), initial=0.0)))
        res = float(np.max(np.abs(A_apply(x) - large * np.maximum(c - x, 0.0) - rhs))) / scale
        if np.array_equal(new_active, active) and res < cfg.newton_tol:
            return x, it, res
        active = new_active
    raise SolverError(f"Newton did not converge in {cfg.newton_max_iter} iterations", res)


def step_penalty(op: DiscreteOperator, v_next, payoff_vec, epsilon: Optional[float],
                 config: SolverConfig, dt: float, theta: float):
    """One theta-step of the penalised equation; returns (v, newton_iterations, residual).

    ``epsilon=None`` drops the penalty (European step). Jumps are coupled
    implicitly through a dense factorisation or lagged by fixed-point
    iteration, per ``config.jump_coupling``.
    """
    if epsilon is not None and not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    large = 0.0 if epsilon is None else dt / epsilon
    c = np.asarray(payoff_vec, dtype=float)
    rhs = _rhs(op, np.asarray(v_next, float), dt, theta)
    ab = op.banded(dt, theta)

    def tri_apply(x):
        out = ab[1] * x
        out[:-1] += ab[0, 1:] * x[1:]
        out[1:] += ab[2, :-1] * x[:-1]
        return out

    def tri_solve(d, b):
        ab2 = ab.copy()
        ab2[1] += d
        return solve_banded((1, 1), ab2, b, check_finite=False)

    if op.jump is None:
        return _newton_penalty(tri_solve, tri_apply, rhs, c, large, np.array(v_next, float), config)

    tJ = theta * dt * op.jump
    if config.jump_coupling == "implicit":
        A = op.dense(dt, theta)

        def dense_solve(d, b):
            return np.linalg.solve(A + np.diag(d), b)

        return _newton_penalty(dense_solve, lambda x: A @ x, rhs, c, large, np.array(v_next, float), config)

    x = np.array(v_next, float)
    iters = 0
    for _ in range(200):
        x_new, it, _ = _newton_penalty(tri_solve, tri_apply, rhs + tJ @ x, c, large, x, config)
        iters += it
        delta = float(np.max(np.abs(x_new - x)))
        x = x_new
        if delta < config.jump_tol:
            res = float(np.max(np.abs(tri_apply(x) - tJ @ x - large * np.maximum(c - x, 0.0) - rhs)))
            return x, iters, res / max(1.0, float(np.max(np.abs(rhs))))
    raise SolverError("lagged jump iteration did not converge", delta)


def step_psor(op: DiscreteOperator, v_next, payoff_vec, config: SolverConfig, dt: float, theta: float,
              x0=None):
    """One theta-step of the discrete LCP by projected SOR; returns (x, sweeps, residual).

    The residual is max_i |min(A x - b, x - c)_i|.
    """
    c = np.asarray(payoff_vec, dtype=float)
    rhs = _rhs(op, np.asarray(v_next, float), dt, theta)
    guess = np.maximum(np.asarray(v_next if x0 is None else x0, float), c)
    kw = dict(omega=config.psor_omega, tol=config.psor_tol, max_sweeps=config.psor_max_sweeps)
    ab = op.banded(dt, theta)
    if op.jump is None:
        x, sweeps = psor_tridiagonal(ab, rhs, c, guess, **kw)
        Ax = _banded_apply(ab, x)
    elif config.jump_coupling == "implicit":
        A = op.dense(dt, theta)
        x, sweeps = psor(A, rhs, c, guess, **kw)
        Ax = A @ x
    else:
        tJ = theta * dt * op.jump
        x = guess
        sweeps = 0
        for _ in range(200):
            x_new, s = psor_tridiagonal(ab, rhs + tJ @ x, c, x, **kw)
            sweeps += s
            delta = float(np.max(np.abs(x_new - x)))
            x = x_new
            if delta < config.jump_tol:
                break
        else:
            raise SolverError("lagged jump iteration did not converge", delta)
        Ax = _banded_apply(ab, x) - tJ @ x
    res = float(np.max(np.abs(np.minimum(Ax - rhs, x - c))))
    return x, sweeps, res


def _banded_apply(ab, x):
    out = ab[1] * x
    out[:-1] += ab[0, 1:] * x[1:]
    out[1:] += ab[2, :-1] * x[:-1]
    return out


# --------------------------------------------------------------------------- #
#  Backward induction
# --------------------------------------------------------------------------- #


def _check_ratio(grid: Grid):
    ratio = grid.k / grid.h
    if not 1e-4 <= ratio <= 1e4:
        warnings.warn(f"k/h = {ratio:.3g} is degenerate; penalty-scaling constants assume fixed k/h",
                      stacklevel=3)


def price(model: MarketModel, payoff: Payoff, grid: Grid, config: SolverConfig,
          op: Optional[DiscreteOperator] = None) -> Surface:
    """Backward induction from T to 0 with Rannacher start-up."""
    _check_ratio(grid)
    if op is None:
        op = assemble(model, grid, payoff)
    S = grid.nodes
    psi = payoff(S)
    n = grid.N + 1
    c = psi[:n]
    values = np.empty((grid.N + 2, grid.M + 1))
    values[:, grid.M] = psi
    values[-1, :] = psi[-1]

    steps = []
    if grid.theta < 1.0 and grid.rannacher_steps:
        steps += [(grid.k / 2, 1.0)] * grid.rannacher_steps
        remaining = grid.M - grid.rannacher_steps // 2
    else:
        remaining = grid.M
    steps += [(grid.k, grid.theta)] * remaining

    iters = []
    residuals = []
    v = psi[:n].copy()
    v_prev = None
    level = grid.M
    sub = 0.0
    for dt, theta in steps:
        if config.mode == "lcp":
            # linear extrapolation in time as PSOR warm start
            guess = v if v_prev is None else 2 * v - v_prev
            v_prev = v
            v, it, res = step_psor(op, v, c, config, dt, theta, x0=guess)
        else:
            eps = config.epsilon if config.mode == "penalty" else None
            v, it, res = step_penalty(op, v, c, eps, config, dt, theta)
        iters.append(it)
        residuals.append(res)
        sub += dt
        if sub >= grid.k * (1 - 1e-12):
            level -= 1
            values[:n, level] = v
            sub = 0.0
    assert level == 0

    meta = {
        "mode": config.mode,
        "epsilon": config.epsilon if config.mode == "penalty" else None,
        "iterations": iters,
        "max_residual": float(max(residuals)),
        "model": model.to_dict(),
        "payoff": payoff.to_dict(),
        "grid": grid.to_dict(),
        "solver": config.to_dict(),
        "boundary_conditions": {
            "S=0": "degenerate equation dV/dt - rV + penalty = 0 (equals Psi(0) for the LCP)",
            "S=S_max": f"Dirichlet V = Psi(S_max) = {psi[-1]!r}",
        },
        "operator": op.meta,
    }
    if model.jump_density.kind != "none":
        meta["omega"] = model.omega()
        meta["jump_truncation"] = list(model.jump_density.truncation())
    surf = Surface(values=values, payoff_values=psi, grid=grid, meta=meta)
    if config.mode == "penalty":
        surf.meta["violation"] = surf.violation().tolist()
    return surf


def delta(surface: Surface) -> Surface:
    """dV/dS by central differences inside and one-sided differences at the ends."""
    if surface.grid.N + 2 < 3:
        raise ValueError("need at least 3 nodes")
    V = surface.values
    h = surface.grid.h
    D = np.empty_like(V)
    D[1:-1] = (V[2:] - V[:-2]) / (2 * h)
    D[0] = (V[1] - V[0]) / h
    D[-1] = (V[-1] - V[-2]) / h
    P = surface.payoff_values
    dP = np.empty_like(P)
    dP[1:-1] = (P[2:] - P[:-2]) / (2 * h)
    dP[0] = (P[1] - P[0]) / h
    dP[-1] = (P[-1] - P[-2]) / h
    return Surface(values=D, payoff_values=dP, grid=surface.grid, meta=dict(surface.meta), quantity="delta")
