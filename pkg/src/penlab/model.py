"""
Market dynamics and payoffs.

MarketModel holds Black-Scholes / finite-activity jump-diffusion parameters,
JumpSpec the distribution of the log-jump Z = log J, and Payoff a continuous
piecewise-linear payoff in asset coordinates with its kinks classified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

JUMP_KINDS = ("none", "point_mass", "lognormal", "double_exponential")
PAYOFF_NAMES = ("put", "call", "butterfly", "modified_put", "straddle", "custom")

_SLOPE_TOL = 1e-12


# --------------------------------------------------------------------------- #
#  Jumps
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class JumpSpec:
    """Law of the relative jump size J, parametrised through Z = log J.

    ``tail_tol`` is the total probability mass allowed outside the truncated
    range ``[z_min, z_max]``; the truncated density is renormalised.
    """

    kind: str = "none"
    J0: float = 1.0
    mu_J: float = 0.0
    sigma_J: float = 0.0
    p: float = 0.5
    eta_up: float = 3.0
    eta_down: float = 3.0
    tail_tol: float = 1e-10
    n_nodes: int = 2001

    def __post_init__(self):
        if self.kind not in JUMP_KINDS:
            raise ValueError(f"unknown jump kind {self.kind!r}; expected one of {JUMP_KINDS}")
        if self.kind == "point_mass" and self.J0 < 0:
            raise ValueError("point_mass requires J0 >= 0")
        if self.kind == "lognormal" and self.sigma_J < 0:
            raise ValueError("lognormal requires sigma_J >= 0")
        if self.kind == "double_exponential":
            if not 0.0 <= self.p <= 1.0:
                raise ValueError("double_exponential requires 0 <= p <= 1")
            if self.eta_up <= 1.0:
                raise ValueError("double_exponential requires eta_up > 1 (finite E[J])")
            if self.eta_down <= 0.0:
                raise ValueError("double_exponential requires eta_down > 0")
        if not 0.0 < self.tail_tol < 1e-2:
            raise ValueError("tail_tol must lie in (0, 1e-2)")
        if self.n_nodes < 2001:
            raise ValueError("n_nodes must be >= 2001")

    @property
    def is_atom(self) -> bool:
        """True when J is deterministic (point mass, or lognormal with sigma_J = 0)."""
        return self.kind in ("none", "point_mass") or (
            self.kind == "lognormal" and self.sigma_J == 0.0
        )

    @property
    def atom(self) -> float:
        """Jump size of a deterministic jump law."""
        if self.kind == "none":
            return 1.0
        if self.kind == "point_mass":
            return self.J0
        if self.kind == "lognormal" and self.sigma_J == 0.0:
            return math.exp(self.mu_J)
        raise ValueError(f"{self.kind} jumps are not deterministic")

    def truncation(self) -> tuple[float, float]:
        """Log-jump range carrying all but ``tail_tol`` of the probability mass."""
        if self.is_atom:
            z = math.log(self.atom) if self.atom > 0 else -math.inf
            return z, z
        if self.kind == "lognormal":
            w = stats.norm.isf(0.5 * self.tail_tol) * self.sigma_J
            return self.mu_J - w, self.mu_J + w
        # double exponential: each tail gets half the budget
        half = 0.5 * self.tail_tol
        z_max = math.log(max(self.p, half) / half) / self.eta_up if self.p > 0 else 0.0
        z_min = -math.log(max(1 - self.p, half) / half) / self.eta_down if self.p < 1 else 0.0
        return z_min, z_max

    def density(self, z):
        """Density of Z = log J (not truncated)."""
        z = np.asarray(z, dtype=float)
        if self.is_atom:
            raise ValueError("deterministic jumps have no density")
        if self.kind == "lognormal":
            return stats.norm.pdf(z, loc=self.mu_J, scale=self.sigma_J)
        up = self.p * self.eta_up * np.exp(-self.eta_up * np.clip(z, 0, None))
        down = (1 - self.p) * self.eta_down * np.exp(self.eta_down * np.clip(z, None, 0))
        return np.where(z >= 0, up, down)

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes z_j and weights w_j with sum(w) == 1 for E[f(Z)] ~ sum w_j f(z_j).

        Composite trapezoid on a uniform grid over the truncated range, with
        the weights renormalised to unit mass. The double-exponential grid
        places a node on the density kink at z = 0.
        """
        if self.is_atom:
            z0, _ = self.truncation()
            return np.array([z0]), np.array([1.0])
        z_min, z_max = self.truncation()
        if self.kind == "double_exponential" and z_min < 0 < z_max:
            n_lo = max(int(round((self.n_nodes - 1) * -z_min / (z_max - z_min))), 2)
            n_hi = max(self.n_nodes - 1 - n_lo, 2)
            z = np.concatenate([np.linspace(z_min, 0.0, n_lo + 1)[:-1], np.linspace(0.0, z_max, n_hi + 1)])
            dz = np.diff(z)
            i0 = n_lo
            left = np.zeros_like(z)
            right = np.zeros_like(z)
            right[:-1] = 0.5 * dz
            left[1:] = 0.5 * dz
            w = (left + right) * self.density(z)
            # the density jumps at z = 0: each half-panel takes its own one-sided limit
            w[i0] = left[i0] * (1 - self.p) * self.eta_down + right[i0] * self.p * self.eta_up
            return z, w / w.sum()
        else:
            z = np.linspace(z_min, z_max, self.n_nodes)
            dz = z[1] - z[0]
            tw = np.full(z.size, dz)
            tw[[0, -1]] *= 0.5
        w = tw * self.density(z)
        return z, w / w.sum()

    def expect(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """E[f(J)] by the truncated trapezoid rule (exact for deterministic J)."""
        z, w = self.quadrature()
        return float(np.dot(w, f(np.exp(z))))

    def omega(self) -> float:
        """E[J - 1] in closed form."""
        if self.is_atom:
            return self.atom - 1.0
        if self.kind == "lognormal":
            return math.exp(self.mu_J + 0.5 * self.sigma_J ** 2) - 1.0
        p, eu, ed = self.p, self.eta_up, self.eta_down
        return p * eu / (eu - 1.0) + (1 - p) * ed / (ed + 1.0) - 1.0

    def omega_quadrature(self) -> float:
        return self.expect(lambda J: J - 1.0)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "point_mass":
            d["J0"] = self.J0
        elif self.kind == "lognormal":
            d.update(mu_J=self.mu_J, sigma_J=self.sigma_J)
        elif self.kind == "double_exponential":
            d.update(p=self.p, eta_up=self.eta_up, eta_down=self.eta_down)
        d.update(tail_tol=self.tail_tol, n_nodes=self.n_nodes)
        return d


# --------------------------------------------------------------------------- #
#  Market model
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class MarketModel:
    """Risk-neutral dynamics dS/S = (r - q - lam*omega) dt + sigma dW + (J-1) dN."""

    sigma: float
    r: float = 0.0
    q: float = 0.0
    lam: float = 0.0
    jump_density: JumpSpec = field(default_factory=JumpSpec)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.r < 0 or self.q < 0:
            raise ValueError("r and q must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lam > 0 and self.jump_density.kind == "none":
            raise ValueError("lambda > 0 needs a jump density")

    @property
    def has_jumps(self) -> bool:
        return self.lam > 0 and not (self.jump_density.is_atom and self.jump_density.atom == 1.0)

    def omega(self) -> float:
        return omega(self)

    @property
    def drift(self) -> float:
        """Risk-neutral drift coefficient r - q - omega*lambda."""
        return self.r - self.q - self.omega() * self.lam

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "r": self.r,
            "q": self.q,
            "lambda": self.lam,
            "jump_density": self.jump_density.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketModel":
        d = dict(d)
        unknown = set(d) - {"sigma", "r", "q", "lambda", "jump_density"}
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        jd = d.pop("jump_density", None) or {"kind": "none"}
        jd_unknown = set(jd) - {f for f in JumpSpec.__dataclass_fields__}
        if jd_unknown:
            raise ValueError(f"unknown jump_density fields: {sorted(jd_unknown)}")
        return cls(
            sigma=float(d["sigma"]),
            r=float(d.get("r", 0.0)),
            q=float(d.get("q", 0.0)),
            lam=float(d.get("lambda", 0.0)),
            jump_density=JumpSpec(**jd),
        )


def omega(model: MarketModel) -> float:
    """Expected relative jump size E[J - 1]; zero without jumps."""
    if model.jump_density.kind == "none":
        return 0.0
    return model.jump_density.omega()


# --------------------------------------------------------------------------- #
#  Payoffs
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Kink:
    S: float
    left_slope: float
    right_slope: float

    @property
    def convexity(self) -> str:
        return "convex" if self.left_slope < self.right_slope else "concave"

    @property
    def is_convex(self) -> bool:
        return self.left_slope < self.right_slope


class Payoff:
    """Continuous piecewise-linear payoff on S >= 0.

    Defined by strictly increasing breakpoints in (0, inf), the values there,
    and the slopes of the two unbounded end segments. Interior slopes follow
    from continuity.
    """

    def __init__(
        self,
        breakpoints: Sequence[float],
        values: Sequence[float],
        left_slope: float,
        right_slope: float,
        name: str = "custom",
    ):
        bp = np.asarray(breakpoints, dtype=float)
        vals = np.asarray(values, dtype=float)
        if bp.ndim != 1 or bp.shape != vals.shape or bp.size == 0:
            raise ValueError("breakpoints and values must be equal-length 1-d sequences")
        if name not in PAYOFF_NAMES:
            raise ValueError(f"unknown payoff name {name!r}")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        # restrict to S >= 0: a breakpoint at or below zero only fixes the slope on (0, first)
        keep = bp > 0
        if not keep.all():
            last_neg = np.flatnonzero(~keep)[-1]
            if keep.any():
                first = np.flatnonzero(keep)[0]
                left_slope = (vals[first] - vals[last_neg]) / (bp[first] - bp[last_neg])
            else:
                vals = np.array([vals[last_neg] + right_slope * (1.0 - bp[last_neg])])
                bp = np.array([1.0])
                left_slope = right_slope
                keep = np.array([True])
            bp, vals = bp[keep], vals[keep]
        self.breakpoints = bp
        self.values = vals
        self.left_slope = float(left_slope)
        self.right_slope = float(right_slope)
        self.name = name
        self.breakpoints.setflags(write=False)
        self.values.setflags(write=False)
        if self(0.0) < -1e-12 or np.any(self.values < -1e-12) or self.right_slope < 0:
            raise ValueError("payoff must be nonnegative on S >= 0")

    # evaluation ---------------------------------------------------------- #

    @property
    def slopes(self) -> np.ndarray:
        """Slopes of the m+2 segments, left tail first."""
        inner = np.diff(self.values) / np.diff(self.breakpoints)
        return np.concatenate([[self.left_slope], inner, [self.right_slope]])

    def __call__(self, S):
        S_arr = np.asarray(S, dtype=float)
        if np.any(S_arr < 0):
            raise ValueError("payoff is defined for S >= 0 only")
        bp, v = self.breakpoints, self.values
        out = np.interp(S_arr, bp, v)
        out = np.where(S_arr < bp[0], v[0] + self.left_slope * (S_arr - bp[0]), out)
        out = np.where(S_arr > bp[-1], v[-1] + self.right_slope * (S_arr - bp[-1]), out)
        return out if np.ndim(S) else float(out)

    def derivative(self, S):
        """Slope of the segment containing S (S must not sit on a kink)."""
        S_arr = np.asarray(S, dtype=float)
        idx = np.searchsorted(self.breakpoints, S_arr, side="right")
        out = self.slopes[idx]
        return out if np.ndim(S) else float(out)

    @property
    def unbounded(self) -> bool:
        """Call-type growth at infinity; the solver clamps and uses the payoff as far-field data."""
        return self.right_slope > 0

    def kinks(self) -> list[Kink]:
        return classify_kinks(self)

    def log_view(self, S0: float) -> Callable:
        """psi(x) = Psi(S0 * exp(x))."""
        return lambda x: self(S0 * np.exp(x))

    def __add__(self, other: "Payoff") -> "Payoff":
        if not isinstance(other, Payoff):
            return NotImplemented
        bp = np.union1d(self.breakpoints, other.breakpoints)
        return Payoff(
            bp,
            self(bp) + other(bp),
            self.left_slope + other.left_slope,
            self.right_slope + other.right_slope,
        )

    def shifted(self, c: float) -> "Payoff":
        """Payoff + c (same kinks)."""
        return Payoff(self.breakpoints, self.values + c, self.left_slope, self.right_slope, self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "breakpoints": self.breakpoints.tolist(),
            "values": self.values.tolist(),
            "left_slope": self.left_slope,
            "right_slope": self.right_slope,
        }

    def __repr__(self):
        return (
            f"Payoff(name={self.name!r}, breakpoints={self.breakpoints.tolist()}, "
            f"values={self.values.tolist()}, left_slope={self.left_slope}, right_slope={self.right_slope})"
        )

    def __eq__(self, other):
        if not isinstance(other, Payoff):
            return NotImplemented
        return (
            np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.values, other.values)
            and self.left_slope == other.left_slope
            and self.right_slope == other.right_slope
        )

    __hash__ = None


def payoff_eval(payoff: Payoff, S):
    return payoff(S)


def classify_kinks(payoff: Payoff) -> list[Kink]:
    """Breakpoints with a slope change, labelled convex or concave."""
    s = payoff.slopes
    out = []
    for i, S in enumerate(payoff.breakpoints):
        left, right = s[i], s[i + 1]
        if abs(right - left) <= _SLOPE_TOL * max(1.0, abs(left), abs(right)):
            continue
        out.append(Kink(float(S), float(left), float(right)))
    return out


# constructors -------------------------------------------------------------- #


def put(K: float) -> Payoff:
    return Payoff([K], [0.0], -1.0, 0.0, name="put")


def call(K: float) -> Payoff:
    return Payoff([K], [0.0], 0.0, 1.0, name="call")


def straddle(K: float) -> Payoff:
    return Payoff([K], [0.0], -1.0, 1.0, name="straddle")


def butterfly(V0: float, alpha: float, K: float, alpha2: Optional[float] = None) -> Payoff:
    """max(V0 + alpha*(S-K), 0) left of K, max(V0 - alpha2*(S-K), 0) right of K."""
    a1 = float(alpha)
    a2 = a1 if alpha2 is None else float(alpha2)
    if V0 <= 0 or a1 <= 0 or a2 <= 0:
        raise ValueError("butterfly needs V0, alpha > 0")
    lo, hi = K - V0 / a1, K + V0 / a2
    return Payoff([lo, K, hi], [0.0, V0, 0.0], 0.0, 0.0, name="butterfly")


def modified_put(
    K: float = 105.0, V0: float = 32.0, alpha1: float = 0.4, alpha2: float = 1.0, K_fly: float = 105.0
) -> Payoff:
    """Put plus a butterfly: a put-like payoff with an extra concave kink at ``K_fly``.

    The defaults give slopes -1, -0.6, -1, 0 separated by a convex kink at 25,
    a concave kink at 105 and a convex kink at 137. The free boundary sits on
    the concave kink until time-to-expiry of roughly 0.7 and detaches below it
    afterwards.
    """
    p = put(K) + butterfly(V0, alpha1, K_fly, alpha2)
    return Payoff(p.breakpoints, p.values, p.left_slope, p.right_slope, name="modified_put")


def payoff_from_dict(d: dict) -> Payoff:
    d = dict(d)
    name = d.pop("name", "custom")
    params = d.pop("params", None)
    if d and params is not None:
        raise ValueError(f"unknown payoff fields: {sorted(d)}")
    if params is not None:
        builders = {
            "put": put,
            "call": call,
            "straddle": straddle,
            "butterfly": butterfly,
            "modified_put": modified_put,
        }
        if name not in builders:
            raise ValueError(f"payoff {name!r} has no parametric constructor")
        return builders[name](**params)
    unknown = set(d) - {"breakpoints", "values", "left_slope", "right_slope"}
    if unknown:
        raise ValueError(f"unknown payoff fields: {sorted(unknown)}")
    return Payoff(d["breakpoints"], d["values"], d["left_slope"], d["right_slope"], name=name)


# generator ------------------------------------------------------------------ #


def apply_generator(
    model: MarketModel,
    payoff: Payoff,
    S,
    value_extension: Optional[Callable] = None,
):
    """L_BSJ Psi(S) for a time-independent piecewise-linear Psi away from kinks.

    Psi'' vanishes on each linear piece, so only the discount, drift and jump
    terms contribute. ``value_extension`` supplies the function inside the
    jump expectation (the payoff itself by default).
    """
    S_arr = np.atleast_1d(np.asarray(S, dtype=float))
    if np.any(S_arr < 0):
        raise ValueError("S must be >= 0")
    kinks = np.array([k.S for k in classify_kinks(payoff)])
    if kinks.size and np.any(np.isclose(S_arr[:, None], kinks[None, :], rtol=0, atol=1e-12)):
        raise ValueError("apply_generator is undefined at a payoff kink")
    ext = payoff if value_extension is None else value_extension
    psi = payoff(S_arr)
    dpsi = payoff.derivative(S_arr)
    out = -model.r * psi + model.drift * S_arr * dpsi
    if model.has_jumps:
        z, w = model.jump_density.quadrature()
        J = np.exp(z)
        ev = np.array([np.dot(w, ext(s * J)) for s in S_arr])
        out = out + model.lam * (ev - psi)
    return out if np.ndim(S) else float(out[0])
