"""
First-order corrections for the penalised American put, the concave kink of
a butterfly and the jump-diffusion put, plus the numerical measurements they
are compared against.

Notation: delta = sigma * sqrt(eps) is the width of the inner layer around
the free boundary; the inner variable is x = (S - S*) / (S* delta).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .analysis import exercise_boundary
from .model import MarketModel, Payoff, put
from .solve import Surface

X_STAR = 1.0 / math.sqrt(2.0)


# --------------------------------------------------------------------------- #
#  Put
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PutCorrection:
    """Leading-order penalty error of the American put (no jumps)."""

    epsilon: float
    sigma: float
    r: float
    K: float
    delta_param: float
    crossing_offset_factor: float
    boundary_value_correction: float
    exercise_plateau: float
    x_star: float = X_STAR

    def crossing_point(self, S_star: float) -> float:
        """S where V^eps crosses the payoff, given the exact boundary S*."""
        return S_star * (1.0 + self.crossing_offset_factor)

    def crossing_offset(self, S_star: float) -> float:
        return S_star * self.crossing_offset_factor

    def plateau_exact(self) -> float:
        """V^eps - Psi at S = 0, where the penalised equation reduces to r V = (Psi - V) / eps."""
        return -self.epsilon * self.r * self.K / (1.0 + self.epsilon * self.r)

    def to_dict(self) -> dict:
        return asdict(self)


def put_correction(model: MarketModel, K: float, epsilon: float) -> PutCorrection:
    if model.has_jumps:
        raise ValueError("put_correction covers the pure diffusion; use jump_boundary_gamma with jumps")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if not K > 0:
        raise ValueError("K must be > 0")
    d = model.sigma * math.sqrt(epsilon)
    rK = model.r * K
    return PutCorrection(
        epsilon=float(epsilon),
        sigma=model.sigma,
        r=model.r,
        K=float(K),
        delta_param=d,
        crossing_offset_factor=d * X_STAR,
        boundary_value_correction=-0.5 * rK * epsilon,
        exercise_plateau=-rK * epsilon,
    )


@dataclass
class PutMeasurement:
    """Errors V_ref - V^eps of a penalty put at one level, in absolute units."""

    tau: float
    S_star: float  # boundary of the reference solution (sqrt refinement)
    crossing: float  # where V^eps crosses the payoff
    plateau: float  # largest error over the reference exercise region
    boundary_error: float  # error interpolated at the crossing point
    error_at_S_star: float

    @property
    def ratio(self) -> float:
        return self.boundary_error / self.plateau

    def to_dict(self) -> dict:
        return asdict(self)


def measure_put(penalty: Surface, reference: Surface, K: float, tau: float) -> PutMeasurement:
    """Plateau, crossing point and boundary error of a penalty put against an LCP reference."""
    S = penalty.S
    j = penalty.level(tau)
    err = reference.values[:, j] - penalty.values[:, j]
    S_star = exercise_boundary(reference, side="left", window=(0.0, K), refine="sqrt").S_star[j]
    S_cross = exercise_boundary(penalty, tol=0.0, side="left", window=(0.0, K)).S_star[j]
    if not (np.isfinite(S_star) and np.isfinite(S_cross)):
        raise ValueError(f"no exercise region at time-to-expiry {tau}")
    exercised = (S <= S_star) & (S < S[-1])
    return PutMeasurement(
        tau=float(penalty.grid.T - penalty.t[j]),
        S_star=float(S_star),
        crossing=float(S_cross),
        plateau=float(err[exercised].max()),
        boundary_error=float(np.interp(S_cross, S, err)),
        error_at_S_star=float(np.interp(S_star, S, err)),
    )


# --------------------------------------------------------------------------- #
#  Butterfly (concave kink)
# --------------------------------------------------------------------------- #


def butterfly_crossing(alpha1: float, alpha2: float, B_S_star: float) -> float:
    """Inner crossing point x* at a concave kink with slopes alpha1 (left) and -alpha2 (right)."""
    if not alpha1 > 0 or alpha2 < 0:
        raise ValueError("need alpha1 > 0 and alpha2 >= 0")
    if B_S_star < 0:
        raise ValueError("B_S_star must be >= 0")
    if B_S_star >= alpha1:
        raise ValueError("B_S_star must be < alpha1 (the crossing diverges)")
    return -X_STAR * math.log((alpha1 + alpha2) / (alpha1 - B_S_star))


@dataclass(frozen=True)
class ButterflyCorrection:
    alpha1: float
    alpha2: float
    B_S_star: float
    K: float
    x_star: float
    kink_value_correction: float  # first-order value correction at the kink, in units of delta

    def to_dict(self) -> dict:
        return asdict(self)


def butterfly_correction(alpha1: float, alpha2: float, B_S_star: float, K: float) -> ButterflyCorrection:
    x = butterfly_crossing(alpha1, alpha2, B_S_star)
    return ButterflyCorrection(float(alpha1), float(alpha2), float(B_S_star), float(K), x, alpha1 * K * x)


def kink_slope(surface: Surface, K: float, tau: float) -> float:
    """Left one-sided difference (V(K) - V(K - h)) / h of a solution at the kink node."""
    i = surface.grid.index_of(K)
    if i < 1:
        raise ValueError("kink must be an interior node")
    j = surface.level(tau)
    v = surface.values[:, j]
    return float((v[i] - v[i - 1]) / surface.grid.h)


# --------------------------------------------------------------------------- #
#  Jump-diffusion put
# --------------------------------------------------------------------------- #


def _jump_expectation(model: MarketModel, surface: Surface, payoff: Payoff, S: np.ndarray, j: int) -> np.ndarray:
    """E[P(J S) - P(S)] per S, interpolating the surface and using the payoff beyond S_max."""
    S = np.atleast_1d(np.asarray(S, float))
    if not model.has_jumps:
        return np.zeros_like(S)
    z, w = model.jump_density.quadrature()
    v = surface.values[:, j]
    grid_S = surface.S
    dest = S[:, None] * np.exp(z)[None, :]
    inside = dest <= grid_S[-1]
    P_dest = np.where(inside, np.interp(dest, grid_S, v), payoff(dest))
    return P_dest @ w - np.interp(S, grid_S, v)


@dataclass(frozen=True)
class JumpBoundaryGamma:
    tau: float
    S_star: float
    expectation: float  # E[P(J S*) - P(S*)]
    Gamma_star: float
    boundary_value_correction: float  # Gamma* (x*^2 - sqrt(2) x*), in units of delta^2
    x_star: float = X_STAR

    @property
    def gamma(self) -> float:
        """Second S-derivative of the value at S*+ implied by Gamma*."""
        return 2.0 * self.Gamma_star / self.S_star ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma"] = self.gamma
        return d


def jump_boundary_gamma(model: MarketModel, K: float, S_star: float, put_surface: Surface,
                        tau: Optional[float] = None) -> JumpBoundaryGamma:
    """Boundary Gamma of the American put under jump-diffusion.

    ``tau`` selects the level of ``put_surface`` (time-to-expiry, default T).
    """
    if not 0.0 < S_star < put_surface.S[-1]:
        raise ValueError(f"S_star={S_star} is outside the grid (0, {put_surface.S[-1]})")
    j = put_surface.level(put_surface.grid.T if tau is None else tau)
    E = float(_jump_expectation(model, put_surface, put(K), S_star, j)[0])
    G = (model.r * K - (model.q + model.omega() * model.lam) * S_star - model.lam * E) / model.sigma ** 2
    return JumpBoundaryGamma(
        tau=float(put_surface.grid.T - put_surface.t[j]),
        S_star=float(S_star),
        expectation=E,
        Gamma_star=float(G),
        boundary_value_correction=float(G * (X_STAR ** 2 - math.sqrt(2.0) * X_STAR)),
    )


def one_sided_gamma(surface: Surface, S_star: float, tau: float, n_fit: int = 5) -> float:
    """Second derivative of V - Psi just above S*, from a quadratic fit on the next ``n_fit`` nodes."""
    j = surface.level(tau)
    S = surface.S
    i0 = int(np.searchsorted(S, S_star, side="right"))
    k = np.arange(i0, i0 + n_fit)
    if k[-1] >= S.size:
        raise ValueError("not enough nodes above S_star")
    d = surface.values[k, j] - surface.payoff_values[k]
    return float(2.0 * np.polyfit(S[k] - S_star, d, 2)[0])


@dataclass
class ExerciseErrorProfile:
    """W2 on the exercise region; the penalty error there is sigma^2 * eps * W2."""

    tau: float
    S_star: float
    S: np.ndarray
    W2: np.ndarray
    sigma: float

    @property
    def at_origin(self) -> float:
        return float(self.W2[0])

    def penalty_error(self, epsilon: float) -> np.ndarray:
        return self.sigma ** 2 * epsilon * self.W2

    def to_dict(self) -> dict:
        return {"tau": self.tau, "S_star": self.S_star, "S": self.S.tolist(), "W2": self.W2.tolist(),
                "W2_origin": self.at_origin}


def exercise_region_error_profile(model: MarketModel, K: float, put_surface: Surface,
                                  tau: Optional[float] = None,
                                  S_star: Optional[float] = None) -> ExerciseErrorProfile:
    """W2(S) = -((rK - qS) - lam E[P(SJ) - P(S) + (J - 1) S]) / sigma^2 for S < S*.

    S* is extracted from ``put_surface`` when not given.
    """
    T = put_surface.grid.T
    j = put_surface.level(T if tau is None else tau)
    if S_star is None:
        S_star = exercise_boundary(put_surface, side="left", window=(0.0, K), refine="sqrt").S_star[j]
        if not np.isfinite(S_star):
            raise ValueError("no exercise region at this level")
    if not 0.0 <= S_star < put_surface.S[-1]:
        raise ValueError(f"S_star={S_star} is outside the grid")
    S = put_surface.S[put_surface.S < S_star]
    jump = np.zeros_like(S)
    if model.has_jumps:
        E = _jump_expectation(model, put_surface, put(K), S, j)
        jump = model.lam * (E + model.omega() * S)
        jump[S == 0.0] = 0.0
    W2 = -((model.r * K - model.q * S) - jump) / model.sigma ** 2
    return ExerciseErrorProfile(tau=float(T - put_surface.t[j]), S_star=float(S_star), S=S, W2=W2,
                                sigma=model.sigma)


# --------------------------------------------------------------------------- #
#  Reports
# --------------------------------------------------------------------------- #


def _row(quantity: str, computed: float, predicted: float) -> dict:
    rel = (computed - predicted) / predicted if predicted != 0 else float("nan")
    return {"quantity": quantity, "computed": computed, "predicted": predicted, "relative_difference": rel}


def put_comparison(model: MarketModel, K: float, epsilon: float, penalty: Surface, reference: Surface,
                   tau: float) -> list[dict]:
    """Computed against predicted errors of a penalty put at one level.

    Error magnitudes are reported as positive numbers. The boundary row
    compares the measured crossing offset S_cross - S* with S* sigma sqrt(eps/2);
    the relative offset (divided by S*) is recorded alongside.
    """
    m = measure_put(penalty, reference, K, tau)
    rows = []
    if model.has_jumps:
        prof = exercise_region_error_profile(model, K, reference, tau=tau, S_star=m.S_star)
        j = penalty.level(tau)
        err0 = float(reference.values[0, j] - penalty.values[0, j])
        rows.append(_row("exercise_region_origin", err0, -float(prof.penalty_error(epsilon)[0])))
        rows.append(_row("boundary_gamma", one_sided_gamma(reference, m.S_star, tau),
                         jump_boundary_gamma(model, K, m.S_star, reference, tau).gamma))
    else:
        rows += _diffusion_rows(model, K, epsilon, m)
    for r in rows:
        r["tau"] = m.tau
    return rows


def _diffusion_rows(model: MarketModel, K: float, epsilon: float, m: PutMeasurement) -> list[dict]:
    rows = []
    c = put_correction(model, K, epsilon)
    rows.append(_row("exercise_region", m.plateau, -c.exercise_plateau))
    rows.append(_row("hold_region_boundary", m.boundary_error, -c.boundary_value_correction))
    off = _row("exercise_boundary", m.crossing - m.S_star, c.crossing_offset(m.S_star))
    off["relative_computed"] = (m.crossing - m.S_star) / m.S_star
    off["relative_predicted"] = c.crossing_offset_factor
    rows.append(off)
    return rows
