"""Analytic and simulated BER of partitioned-RIS uplink NOMA with power allocation."""

__version__ = "0.1.0"

from .ber_analytic import ber_all, ber_user, expected_Q
from .channel_model import AlignmentError, ConfigError, InvalidModulationError, SystemConfig, align_channels
from .constellation import BerExpression, BerTerm, build_superimposed, conditional_ber, extract_ber_terms
from .mc_engine import McResult, run_noma_point, run_oma_point
from .pa_optimizer import PaProblem, optimize

__all__ = [
    "__version__",
    "SystemConfig",
    "ConfigError",
    "InvalidModulationError",
    "AlignmentError",
    "align_channels",
    "BerTerm",
    "BerExpression",
    "build_superimposed",
    "extract_ber_terms",
    "conditional_ber",
    "expected_Q",
    "ber_user",
    "ber_all",
    "McResult",
    "run_noma_point",
    "run_oma_point",
    "PaProblem",
    "optimize",
]
