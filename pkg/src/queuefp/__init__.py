"""Queue-volume dynamics at the best quotes of large-tick order books.

Event ingestion and classification, intraday rescaling, calibration of
one- and two-dimensional Fokker-Planck coefficients, stationary and
first-passage solvers, Monte Carlo simulation and a synthetic stream
generator.
"""

__version__ = "0.1.0"

from .calib1d import Accumulator1D, Calib1D, calibrate_1d  # noqa: E402
from .calib2d import Accumulator2D, Calib2D, estimate_2d  # noqa: E402
from .errors import (  # noqa: E402
    CalibrationError, ConfigError, ConvergenceError, DataError, EventFormatError, NumericalError,
    ProfileError, QueueFPError,
)
from .events import Kind, Records, Side, classify, parse_events, read_events, rescale_events  # noqa: E402
from .fpsolve import (  # noqa: E402
    gibbs_boltzmann, hitting_probabilities_1d, hitting_probabilities_2d, stationary_1d, stationary_2d,
)
from .generate import NoiseLaw, Truth1D, Truth2D, generate_events  # noqa: E402
from .models import ModelSpec1D, ModelSpec2D, load_spec  # noqa: E402
from .potentials import decompose_drift, ridge_diagnostic  # noqa: E402
from .seasonality import IntradayProfile, compute_profile, fit_profile  # noqa: E402
from .simulate import SimConfig, simulate_2d, simulate_paths  # noqa: E402
