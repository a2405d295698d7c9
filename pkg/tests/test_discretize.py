import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from penlab.discretize import Grid, assemble, assemble_bs_rows, build_grid, is_m_matrix, jump_weights
from penlab.model import JumpSpec, MarketModel, butterfly, modified_put, put


class TestGrid:
    def test_geometry(self):
        g = Grid(S_max=100.0, N=99, T=1.0, M=50)
        assert g.h == 1.0
        assert g.k == 0.02
        assert g.nodes.size == 101 and g.nodes[-1] == 100.0
        assert g.times[-1] == pytest.approx(1.0)

    def test_index_of(self):
        g = Grid(S_max=100.0, N=99, T=1.0, M=50)
        assert g.index_of(37.0) == 37
        with pytest.raises(ValueError):
            g.index_of(37.5)

    @pytest.mark.parametrize("kw", [dict(theta=0.4), dict(rannacher_steps=3), dict(M=1, rannacher_steps=4)])
    def test_invalid(self, kw):
        base = dict(S_max=100.0, N=99, T=1.0, M=50)
        base.update(kw)
        with pytest.raises(ValueError):
            Grid(**base)

    def test_breakpoints_on_nodes(self):
        p = modified_put()
        g = build_grid(p, N=1999, M=10, S_max=200.0)
        for b in p.breakpoints:
            g.index_of(b)

    def test_N_raised_with_warning(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            g = build_grid(put(100.0), N=100, M=10, S_max=300.0)
        assert g.N + 1 == 102 and g.requested_N == 100 and g.adjusted
        assert any("adjusted" in str(w.message) for w in rec)

    @pytest.mark.parametrize("S_max", [50.0, 100.0])
    def test_breakpoint_outside_domain(self, S_max):
        with pytest.raises(ValueError):
            build_grid(put(100.0), N=99, M=10, S_max=S_max)

    def test_default_S_max(self):
        assert build_grid(butterfly(50.0, 1.0, 100.0), N=199, M=10).S_max == 600.0


class TestBlackScholesRows:
    @pytest.fixture
    def op(self):
        g = Grid(S_max=100.0, N=99, T=1.0, M=10)
        return assemble_bs_rows(MarketModel(sigma=0.3, r=0.04, q=0.01), g), g

    def test_exact_on_quadratics(self, op):
        # central differences reproduce L applied to 1, S and S^2 exactly
        op, g = op
        S = g.nodes[:-1]
        inner = slice(0, g.N)
        sig, r, q = 0.3, 0.04, 0.01
        assert np.allclose(op.apply(np.ones_like(S))[inner], -r)
        assert np.allclose(op.apply(S)[inner], -q * S[inner], atol=1e-10)
        assert np.allclose(op.apply(S ** 2)[inner], (sig ** 2 + 2 * (r - q) - r) * S[inner] ** 2, rtol=1e-10)

    def test_origin_row_is_discount_only(self, op):
        op, _ = op
        assert op.diag[0] == -0.04 and op.upper[0] == 0.0

    def test_dirichlet_contribution(self):
        g = Grid(S_max=200.0, N=199, T=1.0, M=10)
        p = butterfly(50.0, 1.0, 100.0).shifted(1.0)
        op = assemble_bs_rows(MarketModel(sigma=0.3, r=0.04), g, p)
        assert op.g[-1] == pytest.approx(op.upper[-1] * 1.0)
        assert np.all(op.g[:-1] == 0)

    @given(st.floats(0.05, 1.0), st.floats(0.0, 0.3), st.integers(20, 400), st.floats(1e-4, 0.1))
    def test_m_matrix(self, sigma, r, N, dt):
        g = Grid(S_max=200.0, N=N, T=1.0, M=10)
        op = assemble_bs_rows(MarketModel(sigma=sigma, r=r), g)
        assert is_m_matrix(op, dt, theta=1.0)

    def test_upwind_when_drift_dominates(self):
        g = Grid(S_max=100.0, N=99, T=1.0, M=10)
        op = assemble_bs_rows(MarketModel(sigma=0.01, r=0.5), g)
        assert op.upwind.any()
        assert np.all(op.lower[1:] >= 0) and np.all(op.upper >= 0)
        assert is_m_matrix(op, 0.01)


@pytest.fixture(scope="module")
def setup():
    js = JumpSpec(kind="lognormal", mu_J=-0.02, sigma_J=0.2)
    m = MarketModel(sigma=0.4, r=0.05, lam=0.5, jump_density=js)
    g = Grid(S_max=400.0, N=399, T=1.0, M=10)
    return m, g, put(100.0)


class TestJumpRows:
    def test_mass_conservation(self, setup):
        m, g, p = setup
        jump, f, tail = jump_weights(m, g, p)
        assert np.allclose(jump.sum(axis=1)[1:] + tail[1:], 0.0, atol=1e-12)
        assert np.all(jump[0] == 0) and f[0] == 0

    def test_linear_function(self, setup):
        # interpolation is exact for linear v, so lam (E[v(JS)] - v(S)) = lam omega S
        m, g, p = setup
        jump, f, tail = jump_weights(m, g, p)
        S = g.nodes[:-1]
        rows = slice(1, 50)  # jump destinations stay far inside the domain
        assert np.allclose((jump @ S)[rows], (m.lam * m.jump_density.omega_quadrature() * S)[rows],
                           atol=1e-12)
        assert np.all(tail[rows] < 1e-12)

    def test_assemble_keeps_tridiagonal_part(self, setup):
        m, g, p = setup
        op = assemble(m, g, p)
        tri = assemble_bs_rows(m, g, p)
        assert np.array_equal(op.diag, tri.diag)
        assert op.jump is not None and op.tail_mass is not None

    def test_no_jumps_without_lambda(self):
        g = Grid(S_max=400.0, N=99, T=1.0, M=10)
        with pytest.raises(ValueError):
            jump_weights(MarketModel(sigma=0.2), g, put(100.0))

    def test_dense_matches_banded(self, setup):
        m, g, p = setup
        op = assemble_bs_rows(m, g, p)
        A = op.dense(0.01, 0.5)
        ab = op.banded(0.01, 0.5)
        assert np.allclose(np.diag(A), ab[1])
        assert np.allclose(np.diag(A, 1), ab[0, 1:])
        assert np.allclose(np.diag(A, -1), ab[2, :-1])
