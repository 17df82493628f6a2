"""Online particle smoothing and recursive maximum likelihood for jump diffusions."""

from .errors import (
    ConfigError,
    DegenerateInitializationError,
    DiffusionDegeneracyError,
    JumpOverflowError,
    NumericalDivergenceError,
    ParticleCollapseError,
    PathsmoothError,
    StreamMismatchError,
)

__all__ = [
    "ConfigError",
    "DegenerateInitializationError",
    "DiffusionDegeneracyError",
    "JumpOverflowError",
    "NumericalDivergenceError",
    "ParticleCollapseError",
    "PathsmoothError",
    "StreamMismatchError",
    "GradSpec",
    "ModelEntry",
    "SdeModel",
    "builtin_models",
    "compare_models",
    "make_model",
    "online_gradient_ascent",
    "score_functional",
    "simulate_path",
]

__version__ = "0.1.0"

from .model_select import ModelEntry, compare_models  # noqa: E402
from .rml import GradSpec, online_gradient_ascent, score_functional  # noqa: E402
from .sde_core import SdeModel, builtin_models, make_model, simulate_path  # noqa: E402
