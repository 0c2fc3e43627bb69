"""Open-population capture-recapture with individual time-varying covariates.

The population is augmented to a fixed list of ``M`` pseudo-individuals and
the complete-data likelihood is sampled by Metropolis-within-Gibbs.
"""
__version__ = "0.1.0"

from .data import CaptureData, read_captures, write_captures  # noqa: E402
from .diagnostics import psrf, summarize  # noqa: E402
from .model import Model, ModelParams, ModelSpec, Priors  # noqa: E402
from .popstate import AugmentedState, StudyDesign  # noqa: E402
from .sampler import PosteriorDraws, SamplerConfig, run  # noqa: E402
from .simulate import generate, mask_disease  # noqa: E402

__all__ = [
    "__version__",
    "AugmentedState",
    "CaptureData",
    "Model",
    "ModelParams",
    "ModelSpec",
    "PosteriorDraws",
    "Priors",
    "SamplerConfig",
    "StudyDesign",
    "generate",
    "mask_disease",
    "psrf",
    "read_captures",
    "run",
    "summarize",
    "write_captures",
]
