"""
Error norms, free-boundary extraction, order regression, value bounds and
Richardson extrapolation for penalty surfaces.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .discretize import Grid, assemble, build_grid
from .model import MarketModel, Payoff, apply_generator
from .solve import SolverConfig, Surface, delta, price

log = logging.getLogger(__name__)

DEFAULT_SLICES = (0.4, 0.9)


# --------------------------------------------------------------------------- #
#  Error norms
# --------------------------------------------------------------------------- #


def _check_same_grid(a: Surface, b: Surface):
    ga, gb = a.grid, b.grid
    if (ga.N, ga.M) != (gb.N, gb.M) or not math.isclose(ga.S_max, gb.S_max) or not math.isclose(ga.T, gb.T):
        raise ValueError("surfaces live on different grids")


def _trapezoid_weights(n: int, step: float) -> np.ndarray:
    w = np.full(n, step)
    w[[0, -1]] *= 0.5
    return w


@dataclass
class ErrorReport:
    """Errors of one test surface against a reference on the same grid.

    ``sup_value`` and ``sup_delta`` map time-to-expiry to the maximum nodal
    error at that level; ``l2`` and ``h1`` are space-time norms.
    """

    sup_value: dict
    sup_delta: dict
    l2: float
    h1: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sup_value": {str(k): v for k, v in self.sup_value.items()},
            "sup_delta": {str(k): v for k, v in self.sup_delta.items()},
            "l2": self.l2,
            "h1": self.h1,
            "meta": self.meta,
        }


def error_norms(test: Surface, reference: Surface, slices: Sequence[float] = DEFAULT_SLICES) -> ErrorReport:
    """Sup errors over interior nodes at the requested slices plus space-time L2 and H1 errors.

    L2 and H1 use trapezoid weights in S and t. The derivative part of H1
    comes from :func:`delta` and skips the terminal level, where the payoff
    kink makes the difference quotient meaningless.
    """
    _check_same_grid(test, reference)
    g = test.grid
    err = test.values - reference.values
    derr = delta(test).values - delta(reference).values
    sup_v, sup_d = {}, {}
    for tau in slices:
        j = test.level(tau)
        sup_v[tau] = float(np.max(np.abs(err[1:-1, j])))
        sup_d[tau] = float(np.max(np.abs(derr[1:-1, j])))
    ws = _trapezoid_weights(g.N + 2, g.h)
    wt = _trapezoid_weights(g.M + 1, g.k)
    l2sq = float(ws @ err ** 2 @ wt)
    wt_d = wt.copy()
    wt_d[-1] = 0.0
    h1sq = l2sq + float(ws @ derr ** 2 @ wt_d)
    return ErrorReport(sup_value=sup_v, sup_delta=sup_d, l2=math.sqrt(l2sq), h1=math.sqrt(h1sq))


# --------------------------------------------------------------------------- #
#  Order regression
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class OrderFit:
    order: float
    residual: float
    n_points: int


def regress_order(eps_ladder: Sequence[float], errors: Sequence[float], use_last: Optional[int] = 4) -> OrderFit:
    """Least-squares slope of log(error) against log(eps).

    ``use_last`` keeps only the smallest ``use_last`` eps values (None keeps
    all). Errors at machine zero are dropped with a warning; negative errors
    are rejected. The residual is the RMS deviation of the fit in log space.
    """
    eps = np.asarray(eps_ladder, float)
    err = np.asarray(errors, float)
    if eps.shape != err.shape or eps.size < 3:
        raise ValueError("need at least 3 (eps, error) pairs")
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps ladder must be positive and strictly decreasing")
    if np.any(err < 0) or not np.all(np.isfinite(err)):
        raise ValueError("errors must be finite and nonnegative")
    if use_last is not None:
        eps, err = eps[-use_last:], err[-use_last:]
    tiny = err <= 1e-14 * max(err.max(), 1e-300)
    if tiny.any():
        warnings.warn(f"dropping {int(tiny.sum())} machine-zero errors from the regression", stacklevel=2)
        eps, err = eps[~tiny], err[~tiny]
    if eps.size < 2:
        raise ValueError("fewer than 2 usable errors after dropping machine zeros")
    x, y = np.log(eps), np.log(err)
    slope, icpt = np.polyfit(x, y, 1)
    res = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
    return OrderFit(order=float(slope), residual=res, n_points=int(eps.size))


@dataclass
class OrderTable:
    """Regressed orders with one row per norm and one column per time-to-expiry."""

    eps: list
    slices: list
    errors: dict  # norm -> list (per eps) of dict slice -> error, or floats for global norms
    orders: dict  # norm -> dict slice -> OrderFit (global norms use slice "all")

    def order(self, norm: str, tau="all") -> float:
        return self.orders[norm][tau].order

    def to_rows(self) -> list[list]:
        rows = [["norm"] + [str(s) for s in self.slices] + ["all"]]
        for norm, fits in self.orders.items():
            row = [norm]
            for s in self.slices + ["all"]:
                row.append(repr(fits[s].order) if s in fits else "")
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "slices": self.slices,
            "errors": self.errors,
            "orders": {n: {str(s): vars(f) for s, f in d.items()} for n, d in self.orders.items()},
        }


def order_table(eps: Sequence[float], reports: Sequence[ErrorReport], slices: Sequence[float]) -> OrderTable:
    slices = list(slices)
    errors = {
        "value": [[r.sup_value[s] for s in slices] for r in reports],
        "delta": [[r.sup_delta[s] for s in slices] for r in reports],
        "l2": [r.l2 for r in reports],
        "h1": [r.h1 for r in reports],
    }
    orders = {"value": {}, "delta": {}, "l2": {}, "h1": {}}
    for norm in ("value", "delta"):
        for i, s in enumerate(slices):
            orders[norm][s] = regress_order(eps, [row[i] for row in errors[norm]])
    for norm in ("l2", "h1"):
        orders[norm]["all"] = regress_order(eps, errors[norm])
    return OrderTable(eps=list(eps), slices=slices, errors=errors, orders=orders)


@dataclass
class LadderResult:
    reference: Surface
    surfaces: list
    reports: list
    table: OrderTable


def penalty_ladder(model: MarketModel, payoff: Payoff, grid: Grid, eps: Sequence[float],
                   slices: Sequence[float] = DEFAULT_SLICES, reference_config: Optional[SolverConfig] = None,
                   penalty_kw: Optional[dict] = None, parallel: bool = False) -> LadderResult:
    """Penalty solves over an eps ladder against one PSOR reference on the same grid."""
    eps = sorted(eps, reverse=True)
    op = assemble(model, grid, payoff)
    ref_cfg = reference_config or SolverConfig.lcp()
    kw = penalty_kw or {}
    configs = [ref_cfg] + [SolverConfig.penalty(e, **kw) for e in eps]
    if parallel:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor() as pool:
            sols = list(pool.map(lambda c: price(model, payoff, grid, c, op=op), configs))
    else:
        sols = [price(model, payoff, grid, c, op=op) for c in configs]
    ref, surfaces = sols[0], sols[1:]
    reports = [error_norms(s, ref, slices) for s in surfaces]
    return LadderResult(reference=ref, surfaces=surfaces, reports=reports, table=order_table(eps, reports, slices))


# --------------------------------------------------------------------------- #
#  Free boundary
# --------------------------------------------------------------------------- #


@dataclass
class BoundaryTrace:
    """Exercise boundary per level; NaN where no boundary exists."""

    tau: np.ndarray
    S_star: np.ndarray
    node: np.ndarray  # last (side='left') or first (side='right') exercised node, -1 if absent
    waiting: list  # (tau_start, tau_end, S) intervals where the boundary node does not move

    def at(self, tau: float) -> float:
        return float(self.S_star[int(np.argmin(np.abs(self.tau - tau)))])


def exercise_boundary(surface: Surface, payoff: Payoff = None, tol: float = 1e-9, side: str = "left",
                      window: Optional[tuple] = None, refine: str = "linear",
                      min_waiting_time: float = 0.05) -> BoundaryTrace:
    """Extract S*(t) from a value surface.

    side='left' declares a put-like topology (exercise region to the left of
    the boundary inside ``window``): the boundary is the last node of the
    run of nodes with V <= Psi + tol that starts at the leftmost such node.
    side='right' declares a butterfly-like put side (exercise region to the
    right): the first node of the run ending at the rightmost such node.
    The node is refined between it and its neighbour on the hold side, linearly in
    V - Psi - tol, or with refine='sqrt' by the quadratic contact of an
    obstacle solution (sqrt(V - Psi) is linear near a smooth-pasting
    boundary). Stagnation intervals of the boundary node lasting at least
    ``min_waiting_time`` are reported as waiting times.
    """
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    S = surface.S
    psi = surface.payoff_values if payoff is None else payoff(S)
    lo, hi = (S[0], S[-1]) if window is None else window
    inside = np.flatnonzero((S >= lo - 1e-12) & (S <= hi + 1e-12))
    levels = surface.grid.M + 1
    tau = surface.grid.T - surface.grid.times
    S_star = np.full(levels, np.nan)
    node = np.full(levels, -1)
    for j in range(levels):
        d = surface.values[:, j] - psi - tol
        ex = inside[d[inside] <= 0]
        if ex.size == 0:
            continue
        # walk through the contiguous exercised run from its outer end
        if side == "left":
            i = ex.min()
            while i + 1 <= inside[-1] and d[i + 1] <= 0:
                i += 1
        else:
            i = ex.max()
            while i - 1 >= inside[0] and d[i - 1] <= 0:
                i -= 1
        node[j] = i
        nb = i + 1 if side == "left" else i - 1
        if nb < 0 or nb >= S.size or d[nb] <= 0:
            S_star[j] = S[i]
            continue
        if refine == "sqrt":
            dd = surface.values[:, j] - psi
            nb2 = nb + (nb - i)
            if 0 <= nb2 < S.size and dd[nb2] > dd[nb] > 0:
                r1, r2 = math.sqrt(dd[nb]), math.sqrt(dd[nb2])
                S_star[j] = S[nb] - r1 * (S[nb2] - S[nb]) / (r2 - r1)
                continue
        frac = -d[i] / (d[nb] - d[i])
        S_star[j] = S[i] + frac * (S[nb] - S[i])
    # runs of levels (walking away from expiry) on which the boundary node does not move
    waiting = []
    run = [levels - 1]
    for j in list(range(levels - 2, -1, -1)) + [None]:
        if j is not None and node[j] >= 0 and node[j] == node[run[-1]]:
            run.append(j)
            continue
        if node[run[0]] >= 0 and tau[run[-1]] - tau[run[0]] >= min_waiting_time - 1e-12:
            waiting.append((float(tau[run[0]]), float(tau[run[-1]]), float(S[node[run[0]]])))
        run = [j]
    return BoundaryTrace(tau=tau, S_star=S_star, node=node, waiting=waiting)


def crossing_point(surface: Surface, tau: float, window: tuple, side: str = "left") -> float:
    """Point where a penalty solution crosses its payoff, by linear interpolation."""
    tr = exercise_boundary(surface, tol=0.0, side=side, window=window)
    return tr.at(tau)


# --------------------------------------------------------------------------- #
#  Bounds
# --------------------------------------------------------------------------- #


@dataclass
class BoundsPair:
    """Lower bound V^eps, shift lambda_eps = max (Psi - V^eps)^+, upper bound V^eps + lambda_eps."""

    lower: Surface
    lambda_eps: float
    analytic: np.ndarray  # Psi + eps * L Psi at smooth nodes (NaN at kinks and boundary nodes)
    analytic_violation: float
    kink_violation: float
    binding: str
    meta: dict = field(default_factory=dict)

    @property
    def upper(self) -> np.ndarray:
        return self.lower.values + self.lambda_eps

    def sandwich_gap(self, reference: Surface) -> tuple[float, float]:
        """(max(lower - ref), max(ref - upper)); both <= tol means the sandwich holds."""
        _check_same_grid(self.lower, reference)
        return (float(np.max(self.lower.values - reference.values)),
                float(np.max(reference.values - self.upper)))

    def contains(self, reference: Surface, tol: float = 1e-8) -> bool:
        lo, up = self.sandwich_gap(reference)
        return lo <= tol and up <= tol

    def to_dict(self) -> dict:
        return {
            "lambda_eps": self.lambda_eps,
            "analytic_violation": self.analytic_violation,
            "kink_violation": self.kink_violation,
            "binding": self.binding,
            "meta": self.meta,
        }


def bounds(penalty: Surface, payoff: Payoff, model: Optional[MarketModel] = None) -> BoundsPair:
    """Upper and lower value bounds from a penalty surface.

    Also evaluates the smooth-node violation estimate eps * L Psi (when
    ``model`` is given) and the violation recorded at concave kinks, and
    reports where the largest violation sits: 'smooth', 'concave_kink' or
    'boundary'.
    """
    S = penalty.S
    psi = penalty.payoff_values
    viol = np.maximum(psi[:, None] - penalty.values, 0.0)
    lam = float(viol.max())
    eps = penalty.meta.get("epsilon")
    kinks = payoff.kinks()
    kink_nodes = [int(round(k.S / penalty.grid.h)) for k in kinks]
    concave_nodes = [n for n, k in zip(kink_nodes, kinks) if not k.is_convex]
    kink_viol = float(viol[concave_nodes].max()) if concave_nodes else 0.0

    analytic = np.full(S.size, np.nan)
    analytic_viol = float("nan")
    if model is not None and eps is not None:
        smooth = np.ones(S.size, bool)
        smooth[[0, -1]] = False
        smooth[kink_nodes] = False
        LPsi = apply_generator(model, payoff, S[smooth])
        analytic[smooth] = psi[smooth] + eps * LPsi
        analytic_viol = float(np.max(np.maximum(-eps * LPsi, 0.0)))

    if lam == 0.0:
        binding = "none"
    else:
        i, _ = np.unravel_index(np.argmax(viol), viol.shape)
        if i in (0, S.size - 1):
            binding = "boundary"
        elif i in concave_nodes:
            binding = "concave_kink"
        else:
            binding = "smooth"
    return BoundsPair(lower=penalty, lambda_eps=lam, analytic=analytic, analytic_violation=analytic_viol,
                      kink_violation=kink_viol, binding=binding, meta={"epsilon": eps})


# --------------------------------------------------------------------------- #
#  Richardson extrapolation
# --------------------------------------------------------------------------- #


def _nesting_ratio(fine: Grid, coarse: Grid, what: str, n_f: int, n_c: int) -> int:
    if n_f % n_c:
        raise ValueError(f"grids are not nested in {what}: {n_f} vs {n_c} intervals")
    return n_f // n_c


def restrict(surface: Surface, coarse: Grid) -> np.ndarray:
    """Values of ``surface`` at the nodes and levels of a nested coarser grid."""
    g = surface.grid
    if not math.isclose(g.S_max, coarse.S_max) or not math.isclose(g.T, coarse.T):
        raise ValueError("grids cover different domains")
    rs = _nesting_ratio(g, coarse, "S", g.N + 1, coarse.N + 1)
    rt = _nesting_ratio(g, coarse, "t", g.M, coarse.M)
    return surface.values[::rs, ::rt]


def richardson(v_eps: Surface, v_2eps: Surface) -> Surface:
    """2 V^eps - V^{2 eps} on the nodes of the coarser of the two (nested) grids."""
    fine, coarse = (v_eps, v_2eps) if v_eps.grid.N >= v_2eps.grid.N else (v_2eps, v_eps)
    fine_vals = restrict(fine, coarse.grid)
    if fine is v_eps:
        values = 2.0 * fine_vals - coarse.values
    else:
        values = 2.0 * coarse.values - fine_vals
    meta = {
        "kind": "richardson",
        "epsilon": v_eps.meta.get("epsilon"),
        "epsilon_coarse": v_2eps.meta.get("epsilon"),
        "grid_fine": fine.grid.to_dict(),
    }
    return Surface(values=values, payoff_values=coarse.payoff_values, grid=coarse.grid, meta=meta)


@dataclass
class ExtrapolationStudy:
    eps: list
    h: list
    penalty_errors: dict  # 'value'/'delta' -> list
    extrapolated_errors: dict
    orders: dict  # 'penalty'/'extrapolated' -> {'value': OrderFit, 'delta': OrderFit}

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "h": self.h,
            "penalty_errors": self.penalty_errors,
            "extrapolated_errors": self.extrapolated_errors,
            "orders": {k: {n: vars(f) for n, f in d.items()} for k, d in self.orders.items()},
        }


def extrapolation_study(model: MarketModel, payoff: Payoff, S_max: float, N_finest: int, M: int,
                        eps_finest: float, levels: int = 3, T: float = 1.0, tau: float = 1.0,
                        theta: float = 0.5, reference_config: Optional[SolverConfig] = None) -> ExtrapolationStudy:
    """Richardson extrapolation with the mesh width coupled to sqrt(eps).

    Level i (i = 0 finest) uses eps_i = eps_finest * 4**i on the grid with
    (N_finest + 1) / 2**i intervals, so h_i is proportional to sqrt(eps_i).
    V^{2 eps_i} is computed on the next coarser grid (h doubled), which is
    nested, and the extrapolated value lives on that grid's nodes. Errors
    are measured against one PSOR solution on the finest grid, at
    time-to-expiry ``tau``.
    """
    n_int = N_finest + 1
    if n_int % 2 ** levels:
        raise ValueError(f"N_finest + 1 must be divisible by 2**levels = {2 ** levels}")
    grids = [build_grid(payoff, N=n_int // 2 ** i - 1, M=M, S_max=S_max, theta=theta, T=T)
             for i in range(levels + 1)]
    for i, g in enumerate(grids):
        if g.N + 1 != n_int // 2 ** i:
            raise ValueError("breakpoints are not nodes of every grid in the hierarchy")
    ref = price(model, payoff, grids[0], reference_config or SolverConfig.lcp())
    eps = [eps_finest * 4 ** i for i in range(levels)]
    pe = {"value": [], "delta": []}
    xe = {"value": [], "delta": []}
    for i, e in enumerate(eps):
        a = price(model, payoff, grids[i], SolverConfig.penalty(e))
        b = price(model, payoff, grids[i + 1], SolverConfig.penalty(2 * e))
        ext = richardson(a, b)
        coarse = grids[i + 1]
        ref_c = restrict(ref, coarse)
        a_c = restrict(a, coarse)
        j = ext.level(tau)
        pe["value"].append(float(np.max(np.abs(a_c[:, j] - ref_c[:, j]))))
        xe["value"].append(float(np.max(np.abs(ext.values[:, j] - ref_c[:, j]))))
        d = lambda v: (v[2:] - v[:-2]) / (2 * coarse.h)
        pe["delta"].append(float(np.max(np.abs(d(a_c[:, j] - ref_c[:, j])))))
        xe["delta"].append(float(np.max(np.abs(d(ext.values[:, j] - ref_c[:, j])))))
    # regress from the largest eps down
    eps_desc = eps[::-1]
    orders = {
        "penalty": {k: regress_order(eps_desc, v[::-1], use_last=None) for k, v in pe.items()},
        "extrapolated": {k: regress_order(eps_desc, v[::-1], use_last=None) for k, v in xe.items()},
    }
    return ExtrapolationStudy(eps=eps, h=[g.h for g in grids[:levels]], penalty_errors=pe,
                              extrapolated_errors=xe, orders=orders)
