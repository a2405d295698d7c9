"""
Spatial grid and discrete operators.

The grid is uniform in S on [0, S_max] with every payoff breakpoint on a node.
Unknowns are the nodes 0..N: node 0 (S = 0) carries the degenerate equation
dV/dt - rV = penalty (diffusion, drift and jumps all vanish there), and node
N+1 (S = S_max) is Dirichlet with the payoff value.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .model import MarketModel, Payoff

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    S_max: float
    N: int
    T: float
    M: int
    theta: float = 0.5
    rannacher_steps: int = 2
    requested_N: Optional[int] = None

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [1/2, 1]")
        if self.rannacher_steps < 0 or self.rannacher_steps % 2:
            raise ValueError("rannacher_steps counts implicit half-steps and must be even")
        if self.rannacher_steps // 2 > self.M:
            raise ValueError("more Rannacher steps than time steps")

    @property
    def h(self) -> float:
        return self.S_max / (self.N + 1)

    @property
    def k(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        """All N+2 nodes including S = 0 and S = S_max."""
        return np.arange(self.N + 2) * self.h

    @property
    def times(self) -> np.ndarray:
        """Calendar times of the M+1 levels, t_0 = 0 ... t_M = T."""
        return np.arange(self.M + 1) * self.k

    @property
    def adjusted(self) -> bool:
        return self.requested_N is not None and self.requested_N != self.N

    def index_of(self, S: float) -> int:
        """Index of the node at S (must be on the grid)."""
        j = int(round(S / self.h))
        if not (0 <= j <= self.N + 1) or abs(j * self.h - S) > 1e-9 * max(1.0, S):
            raise ValueError(f"S={S} is not a grid node")
        return j

    def to_dict(self) -> dict:
        return {
            "S_max": self.S_max,
            "N": self.N,
            "T": self.T,
            "M": self.M,
            "theta": self.theta,
            "rannacher_steps": self.rannacher_steps,
            "h": self.h,
            "k": self.k,
            "requested_N": self.requested_N,
        }


def _alignment_modulus(breakpoints, S_max: float, max_den: int = 10**6) -> int:
    """Smallest m such that (N+1) divisible by m puts all breakpoints on nodes."""
    m = 1
    for b in breakpoints:
        frac = Fraction(float(b) / S_max).limit_denominator(max_den)
        if abs(float(frac) - b / S_max) > 1e-12:
            raise ValueError(f"breakpoint {b} cannot be aligned with S_max={S_max}")
        m = m * frac.denominator // math.gcd(m, frac.denominator)
    return m


def build_grid(
    payoff: Payoff,
    N: int,
    M: int,
    S_max: Optional[float] = None,
    theta: float = 0.5,
    rannacher_steps: int = 2,
    T: float = 1.0,
) -> Grid:
    """Breakpoint-aligned uniform grid; N is raised to the next aligned value if needed."""
    if S_max is None:
        S_max = 4.0 * float(payoff.breakpoints[-1])
    if N < 16:
        raise ValueError("N must be >= 16")
    if M < 4:
        raise ValueError("M must be >= 4")
    if T <= 0:
        raise ValueError("T must be > 0")
    bp = payoff.breakpoints
    if np.any(bp <= 0) or np.any(bp >= S_max):
        raise ValueError(f"payoff breakpoints {bp.tolist()} must lie in (0, S_max={S_max})")
    m = _alignment_modulus(bp, S_max)
    N_new = int(math.ceil((N + 1) / m) * m) - 1
    if N_new != N:
        log.info("grid N raised from %d to %d to align payoff breakpoints", N, N_new)
        warnings.warn(f"N adjusted from {N} to {N_new} so that breakpoints fall on nodes", stacklevel=2)
    return Grid(S_max=float(S_max), N=N_new, T=float(T), M=int(M), theta=float(theta),
                rannacher_steps=int(rannacher_steps), requested_N=int(N))


# --------------------------------------------------------------------------- #
#  Operators
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DiscreteOperator:
    """Discrete generator on the unknown nodes 0..N.

    ``lower/diag/upper`` are the tridiagonal coefficients of L_h (diffusion,
    drift, discount; jump diagonal excluded), ``jump`` the dense jump matrix
    (diagonal -lambda included) or None, and ``g`` the constant inhomogeneity
    from the Dirichlet node and from jumps leaving the domain.
    """

    lower: np.ndarray  # lower[i] multiplies v[i-1]; lower[0] unused
    diag: np.ndarray
    upper: np.ndarray  # upper[i] multiplies v[i+1]; upper[N] enters g
    g: np.ndarray
    upwind: np.ndarray
    h: float
    jump: Optional[np.ndarray] = None
    tail_mass: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.diag.size

    def apply(self, v: np.ndarray) -> np.ndarray:
        """(L_h v) + g for a vector v over the unknowns."""
        out = self.diag * v + self.g
        out[1:] += self.lower[1:] * v[:-1]
        out[:-1] += self.upper[:-1] * v[1:]
        if self.jump is not None:
            out += self.jump @ v
        return out

    def banded(self, dt: float, theta: float) -> np.ndarray:
        """I - theta*dt*L_tri in LAPACK (1,1) banded storage."""
        ab = np.zeros((3, self.size))
        ab[0, 1:] = -theta * dt * self.upper[:-1]
        ab[1] = 1.0 - theta * dt * self.diag
        ab[2, :-1] = -theta * dt * self.lower[1:]
        return ab

    def dense(self, dt: float, theta: float, with_jumps: bool = True) -> np.ndarray:
        """I - theta*dt*L as a dense matrix."""
        n = self.size
        A = np.zeros((n, n))
        idx = np.arange(n)
        A[idx, idx] = 1.0 - theta * dt * self.diag
        A[idx[1:], idx[:-1]] = -theta * dt * self.lower[1:]
        A[idx[:-1], idx[1:]] = -theta * dt * self.upper[:-1]
        if with_jumps and self.jump is not None:
            A -= theta * dt * self.jump
        return A


def assemble_bs_rows(model: MarketModel, grid: Grid, payoff: Optional[Payoff] = None) -> DiscreteOperator:
    """Central-difference rows of L_BS with an upwind switch on drift-dominated rows.

    Row i (S_i = i*h) reads
        a_i v_{i-1} + b_i v_i + c_i v_{i+1},
        a_i = s2_i/2 - mu S_i/(2h),  c_i = s2_i/2 + mu S_i/(2h),  b_i = -s2_i - r,
    with s2_i = sigma^2 S_i^2 / h^2 and mu = r - q - omega*lambda. A negative
    a_i or c_i replaces the central first difference by the one-sided one in
    the direction of the drift.
    """
    h = grid.h
    S = grid.nodes[: grid.N + 1]
    mu = model.drift
    s2 = (model.sigma * S / h) ** 2
    drift = mu * S / (2 * h)
    lower = 0.5 * s2 - drift
    upper = 0.5 * s2 + drift
    diag = -s2 - model.r
    upwind = (lower < 0) | (upper < 0)
    if upwind.any():
        fwd = upwind & (mu > 0)
        bwd = upwind & (mu < 0)
        lower[fwd] = 0.5 * s2[fwd]
        upper[fwd] = 0.5 * s2[fwd] + 2 * drift[fwd]
        diag[fwd] = -s2[fwd] - 2 * drift[fwd] - model.r
        lower[bwd] = 0.5 * s2[bwd] - 2 * drift[bwd]
        upper[bwd] = 0.5 * s2[bwd]
        diag[bwd] = -s2[bwd] + 2 * drift[bwd] - model.r
    lower[0] = 0.0
    upper[0] = 0.0
    diag[0] = -model.r
    g = np.zeros(grid.N + 1)
    if payoff is not None:
        g[-1] = upper[-1] * payoff(grid.S_max)
    return DiscreteOperator(lower=lower, diag=diag, upper=upper, g=g, upwind=upwind, h=h,
                            meta={"scheme": "central", "upwind_rows": int(upwind.sum())})


def jump_weights(model: MarketModel, grid: Grid, payoff: Payoff):
    """Dense jump matrix, outside-domain payoff contribution f and tail mass.

    Row i approximates lam*(E[v(J S_i)] - v(S_i)) with v linear between
    nodes; mass landing at or beyond S_max (the Dirichlet node and outside)
    is valued by the payoff and routed into f.
    """
    if model.lam <= 0:
        raise ValueError("jump rows requested with lambda = 0")
    n = grid.N + 1
    h = grid.h
    z, w = model.jump_density.quadrature()
    J = np.exp(z)
    S = grid.nodes[:n]
    mat = np.zeros((n, n + 1))
    f = np.zeros(n)
    tail = np.zeros(n)
    chunk = max(1, 2_000_000 // J.size)
    for r0 in range(0, n, chunk):
        r1 = min(n, r0 + chunk)
        P = S[r0:r1, None] * J[None, :]
        W = np.broadcast_to(w, P.shape)
        inside = P < grid.S_max
        pos = np.where(inside, P / h, 0.0)
        j = np.minimum(np.floor(pos).astype(np.int64), grid.N)
        frac = pos - j
        rows = np.broadcast_to(np.arange(r1 - r0)[:, None], P.shape)
        base = (rows * (n + 1) + j)[inside]
        wi = W[inside]
        fi = frac[inside]
        size = (r1 - r0) * (n + 1)
        block = np.bincount(base, weights=wi * (1 - fi), minlength=size)
        block += np.bincount(base + 1, weights=wi * fi, minlength=size)
        mat[r0:r1] = block.reshape(r1 - r0, n + 1)
        out_w = np.where(inside, 0.0, W)
        f[r0:r1] = (out_w * payoff(np.where(inside, 0.0, P))).sum(axis=1)
        tail[r0:r1] = out_w.sum(axis=1)
    f += mat[:, n] * payoff(grid.S_max)
    tail += mat[:, n]
    jump = mat[:, :n]
    lam = model.lam
    jump = lam * jump
    jump[np.arange(n), np.arange(n)] -= lam
    f = lam * f
    tail = lam * tail
    # S = 0 stays at 0 under any jump
    jump[0, :] = 0.0
    f[0] = 0.0
    tail[0] = 0.0
    return jump, f, tail


def assemble_jump_rows(model: MarketModel, grid: Grid, payoff: Payoff):
    """Jump matrix and boundary vector f for the current grid."""
    jump, f, tail = jump_weights(model, grid, payoff)
    return jump, f, tail


def assemble(model: MarketModel, grid: Grid, payoff: Payoff) -> DiscreteOperator:
    """Full discrete generator: BS rows plus (if lambda > 0) jump rows."""
    op = assemble_bs_rows(model, grid, payoff)
    if not model.has_jumps:
        return op
    jump, f, tail = assemble_jump_rows(model, grid, payoff)
    meta = dict(op.meta, jump_nodes=int(model.jump_density.quadrature()[0].size))
    return DiscreteOperator(lower=op.lower, diag=op.diag, upper=op.upper, g=op.g + f,
                            upwind=op.upwind, h=op.h, jump=jump, tail_mass=tail, meta=meta)


def is_m_matrix(op: DiscreteOperator, dt: float, theta: float = 1.0, tol: float = 1e-14) -> bool:
    """Sign pattern and weak row dominance of I - theta*dt*L_tri."""
    A = op.banded(dt, theta)
    diag = A[1]
    up = A[0, 1:]
    lo = A[2, :-1]
    if np.any(diag <= 0) or np.any(up > tol) or np.any(lo > tol):
        return False
    off = np.zeros_like(diag)
    off[:-1] += np.abs(up)
    off[1:] += np.abs(lo)
    return bool(np.all(diag - off >= -tol * np.maximum(1.0, diag)))
