"""Cross-population hierarchical GMRF model for key-population HIV prevalence."""

__version__ = "0.1.0"

from .errors import KPError, NonConvergence
from .gmrf import PARAM_NAMES, StructuralParams
from .panel import POPULATIONS, REGIONS, PanelData, load_panel
from .posterior import ModelSpec, PriorSpec, SamplerConfig, sample_posterior

__all__ = [
    "KPError", "NonConvergence", "PARAM_NAMES", "StructuralParams", "POPULATIONS",
    "REGIONS", "PanelData", "load_panel", "ModelSpec", "PriorSpec", "SamplerConfig",
    "sample_posterior", "__version__",
]
