"""Spatiotemporal demand forecasting with a sparse variational log-Gaussian Cox process."""

from ._accel import USE_NUMBA
from .data import (
    CAPE_TOWN,
    BinnedCounts,
    BoundingBox,
    EventSet,
    LandMask,
    Projection,
    SpatioTemporalGrid,
    bin_events,
    filter_events,
    ingest_csv,
    load_events,
    project,
)
from .errors import DataError, NumericalError, StgpError
from .harness import BacktestConfig, BacktestReport, run_backtest
from .kernels import spatiotemporal_kernel
from .medic import MedicConfig, medic_forecast, medic_predict
from .metrics import EvalConfig, mae, poisson_loglik
from .optimize import OptimizerConfig, minimize
from .svgp import ModelConfig, VariationalState, elbo, predict_rate, train

__version__ = "0.1.0"
