"""Penalty and LCP solvers for American-style options under Black-Scholes and jump-diffusion."""

from .model import JumpSpec, MarketModel, Payoff, butterfly, call, modified_put, put, straddle
from .discretize import Grid, assemble, build_grid
from .solve import SolverConfig, SolverError, Surface, delta, price

__all__ = [
    "JumpSpec", "MarketModel", "Payoff", "butterfly", "call", "modified_put", "put", "straddle",
    "Grid", "assemble", "build_grid", "SolverConfig", "SolverError", "Surface", "delta", "price",
]
