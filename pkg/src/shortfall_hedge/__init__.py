"""Partial hedging of options on not-yet-quoted futures under an expected-loss constraint."""

from .core import (DAYS_PER_YEAR, DomainError, LossSpec, ModelParams, NumericalError, OptionSpec,
                   RngStream, ShapingLaw, TimeGrid, lambda_quadrature, loss, loss_inverse,
                   sample_lambda, simulate_gbm)
from .pricing import bs_call_price, bs_delta, bs_gamma, bs_theta
from .complete import (CompleteMarketState, derivatives_V, optimal_a, optimal_nu, p_explicit,
                       u_reference, value_U, value_V)
from .facelift import FaceliftContext
from .solver import (SolverConfig, ValueSurface, evaluate_surface, fixed_point_control,
                     init_terminal, one_step, solve_backward, step_expectations)
from .backtest import (BacktestConfig, HedgeReport, cvar, run_bs_naive, run_sr, run_sr_complete,
                       shortfall_risk)
from .calibration import calibrate_from_quotes, synthetic_quotes

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
