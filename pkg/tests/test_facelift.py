import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shortfall_hedge.complete import value_U, value_V
from shortfall_hedge.core import DomainError, LossSpec, ModelParams, OptionSpec, RngStream, ShapingLaw
from shortfall_hedge.facelift import FaceliftContext
from shortfall_hedge.pricing import bs_call_price, bs_delta

# Independent Monte Carlo over 1e7 draws of 3*beta(114, 227) (scipy.stats, numpy generator)
# at x = K = 50.89, capital y = 1, T* - T = 56/250, mu = 0.1, sigma = 0.28, k = 2.
MC_XI, MC_XI_SE = -4.528281117177084, 0.00245500739366422
MC_F1, MC_F1_SE = 2.231476617192721, 0.0006587538015400009
MC_F0, MC_F0_SE = 0.8686938, 0.00010680116724458084
MC_TF1, MC_TF1_SE = 1.6867087797189027, 0.0006622285712475047
MC_TF0, MC_TF0_SE = 0.5182493475576564, 8.803422181138411e-05

PARAMS = ModelParams(0.1, 0.28)
SPEC = LossSpec(2.0, -0.1)
OPT = OptionSpec(50.89, 128 / 250, 184 / 250)


@pytest.fixture(scope="module")
def beta_ctx():
    return FaceliftContext(ShapingLaw.scaled_beta(3, 114, 227), OPT, PARAMS, SPEC)


@pytest.fixture(scope="module")
def dirac_ctx():
    return FaceliftContext(ShapingLaw.degenerate(1.0), OPT, PARAMS, SPEC)


def grid_xp():
    x = np.linspace(0.7, 1.3, 10) * 50.89
    p = -np.geomspace(0.01, 1.0, 10)
    return np.meshgrid(x, p, indexing="ij")


class TestXi:
    def test_degenerate_reduces_to_U(self, dirac_ctx):
        x, y = np.array([40.0, 50.89, 60.0]), np.array([-1.0, 0.5, 3.0])
        assert np.allclose(dirac_ctx.xi(x, y), value_U(OPT.T, x, y, 1.0, OPT, PARAMS, SPEC),
                           rtol=1e-14, atol=0)

    def test_vanishes_above_top_price(self, beta_ctx):
        top = bs_call_price(OPT.T, 50.89, beta_ctx.law.support[1], OPT, PARAMS)
        assert beta_ctx.xi(50.89, top) == 0.0
        assert beta_ctx.xi(50.89, top + 5) == 0.0

    def test_quadrature_vs_frozen_monte_carlo(self, beta_ctx):
        assert abs(beta_ctx.xi(50.89, 1.0) - MC_XI) <= 3 * MC_XI_SE

    def test_internal_monte_carlo_mode(self, beta_ctx):
        mean, se = beta_ctx.xi_monte_carlo(50.89, 1.0, 10**6, RngStream(8))
        assert abs(mean - beta_ctx.xi(50.89, 1.0)) <= 3 * se

    def test_nonpositive_concave_nondecreasing(self, beta_ctx):
        y = np.linspace(-5, 25, 301)
        for x in (35.0, 50.89, 70.0):
            v = beta_ctx.xi(np.full_like(y, x), y)
            assert np.all(v <= 0)
            assert np.all(np.diff(v) >= -1e-12)
            assert np.all(np.diff(v, 2) <= 1e-9)

    def test_upward_shift_of_law_lowers_xi(self):
        x, y = np.full(5, 50.0), np.linspace(-1, 3, 5)
        lo = FaceliftContext(ShapingLaw.degenerate(1.0), OPT, PARAMS, SPEC).xi(x, y)
        hi = FaceliftContext(ShapingLaw.degenerate(1.1), OPT, PARAMS, SPEC).xi(x, y)
        assert np.all(hi <= lo)

    def test_below_credit_line_rejected(self):
        ctx = FaceliftContext(ShapingLaw.degenerate(1.0), OPT, PARAMS, LossSpec(2, -0.1, kappa=1.0))
        with pytest.raises(DomainError):
            ctx.xi(50.0, -2.0)


class TestRobust:
    def test_degenerate_equals_xi(self, dirac_ctx):
        assert dirac_ctx.xi_robust(50.0, 1.0) == pytest.approx(dirac_ctx.xi(50.0, 1.0), rel=1e-14)

    def test_maximiser_is_lambda_min(self, beta_ctx):
        lo = beta_ctx.law.support[0]
        for x, y in [(50.89, 1.0), (40.0, -0.5), (65.0, 10.0)]:
            ref = value_U(OPT.T, x, y, lo, OPT, PARAMS, SPEC)
            assert abs(beta_ctx.xi_robust(x, y) - ref) <= 1e-10

    def test_dominates_average(self, beta_ctx):
        rng = np.random.default_rng(3)
        x, y = rng.uniform(30, 80, 50), rng.uniform(-3, 10, 50)
        assert np.all(beta_ctx.xi_robust(x, y) >= beta_ctx.xi(x, y))


class TestInverse:
    def test_degenerate_matches_closed_form(self, dirac_ctx):
        X, P = grid_xp()
        ref = value_V(OPT.T, X, P, 1.0, OPT, PARAMS, SPEC)
        assert np.max(np.abs(dirac_ctx.xi_inverse(X, P) - ref)) <= 1e-10

    def test_round_trip(self, beta_ctx):
        X, P = grid_xp()
        assert np.max(np.abs(beta_ctx.xi(X, beta_ctx.xi_inverse(X, P)) - P)) <= 1e-8

    def test_superhedge_limit(self):
        law = ShapingLaw.empirical([0.9, 1.05, 1.2])
        ctx = FaceliftContext(law, OPT, PARAMS, SPEC)
        top = bs_call_price(OPT.T, 50.0, 1.2, OPT, PARAMS)
        y = ctx.xi_inverse(50.0, -1e-8)
        assert y <= top and top - y <= 1e-3

    def test_monotone_in_p_and_x(self, beta_ctx):
        p = -np.geomspace(5, 1e-3, 80)
        y = beta_ctx.xi_inverse(np.full_like(p, 50.0), p)
        assert np.all(np.diff(y) >= 0)
        x = np.linspace(30, 80, 80)
        y = beta_ctx.xi_inverse(x, np.full_like(x, -0.1))
        assert np.all(np.diff(y) >= 0)

    def test_credit_line_floor(self):
        ctx = FaceliftContext(ShapingLaw.degenerate(1.0), OPT, PARAMS, LossSpec(2, -0.1, kappa=0.5))
        assert ctx.xi_inverse(30.0, -50.0) == -0.5
        f = ctx.terminal_fields(np.array([30.0]), np.array([-50.0]))
        assert f.d_p[0] == 0.0 and f.d_x[0] == 0.0

    def test_positive_p_rejected(self, beta_ctx):
        with pytest.raises(DomainError):
            beta_ctx.xi_inverse(50.0, 0.0)


class TestMoments:
    def test_degenerate_k2(self, dirac_ctx):
        x, p = 50.0, -0.3
        y = dirac_ctx.xi_inverse(x, p)
        c = bs_call_price(OPT.T, x, 1.0, OPT, PARAMS)
        f1, tf1, f0, tf0 = dirac_ctx.f_moments(x, p)
        assert f1 == pytest.approx(c - y, rel=1e-12)
        assert f0 == 1.0
        assert tf1 == pytest.approx((c - y) * bs_delta(OPT.T, x, 1.0, OPT, PARAMS), rel=1e-12)

    def test_against_frozen_monte_carlo(self, beta_ctx):
        p = beta_ctx.xi(50.89, 1.0)
        f1, tf1, f0, tf0 = beta_ctx.f_moments(50.89, p)
        assert abs(f1 - MC_F1) <= 3 * MC_F1_SE
        assert abs(f0 - MC_F0) <= 3 * MC_F0_SE
        assert abs(tf1 - MC_TF1) <= 3 * MC_TF1_SE
        assert abs(tf0 - MC_TF0) <= 3 * MC_TF0_SE

    def test_tilde_moments_nonnegative(self, beta_ctx):
        X, P = grid_xp()
        _, tf1, _, tf0 = beta_ctx.f_moments(X, P)
        assert np.all(tf1 >= 0) and np.all(tf0 >= 0)

    def test_needs_k_at_least_two(self):
        ctx = FaceliftContext(ShapingLaw.degenerate(1.0), OPT, PARAMS, LossSpec(1.5, -0.1))
        with pytest.raises(DomainError):
            ctx.f_moments(50.0, -0.1)


class TestDerivatives:
    @staticmethod
    def finite_differences(ctx, X, P):
        inv = ctx.xi_inverse
        hx, hp = 1e-4 * X, 1e-4 * np.abs(P)
        hx2, hp2 = 3e-4 * X, 3e-4 * np.abs(P)
        fx = (inv(X + hx, P) - inv(X - hx, P)) / (2 * hx)
        fp = (inv(X, P + hp) - inv(X, P - hp)) / (2 * hp)
        fpp = (inv(X, P + hp2) - 2 * inv(X, P) + inv(X, P - hp2)) / hp2**2
        fxp = (inv(X + hx2, P + hp2) - inv(X + hx2, P - hp2) - inv(X - hx2, P + hp2)
               + inv(X - hx2, P - hp2)) / (4 * hx2 * hp2)
        return fx, fp, fpp, fxp

    def test_match_finite_differences(self, beta_ctx):
        X, P = grid_xp()
        an = beta_ctx.xi_inverse_derivatives(X, P)
        for a, f in zip(an, self.finite_differences(beta_ctx, X, P)):
            assert np.max(np.abs(a - f) / np.abs(a)) <= 1e-3

    def test_convexity_signs(self, beta_ctx):
        X, P = grid_xp()
        _, d_p, d_pp, _ = beta_ctx.xi_inverse_derivatives(X, P)
        assert np.all(d_p > 0) and np.all(d_pp > 0)

    def test_degenerate_reduction(self, dirac_ctx):
        X, P = grid_xp()
        d_x, _, _, d_xp = dirac_ctx.xi_inverse_derivatives(X, P)
        assert np.all(d_xp == 0)
        assert np.allclose(d_x, bs_delta(OPT.T, X, 1.0, OPT, PARAMS), rtol=1e-12)

    def test_p_derivative_formula(self, beta_ctx):
        x, p = 50.89, -0.2
        f1 = beta_ctx.f_moments(x, p)[0]
        _, d_p, _, _ = beta_ctx.xi_inverse_derivatives(x, p)
        growth = math.exp(PARAMS.theta**2 * 2 * (OPT.T_star - OPT.T) / 2)
        assert d_p == pytest.approx(growth / f1, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(25, 100), q=st.floats(1e-3, 5))
def test_round_trip_property(x, q):
    ctx = FaceliftContext(ShapingLaw.scaled_beta(3, 114, 227), OPT, PARAMS, SPEC)
    y = ctx.xi_inverse(x, -q)
    assert abs(ctx.xi(x, y) + q) <= 1e-8 * max(1.0, q)
