"""Reference-domain finite elements, reduced-basis surrogates, and
risk-averse shape optimization on a 2D Poisson model problem."""

__version__ = "0.1.0"

from . import arrays, config, fem, forward, nets, ouu, pipeline, prior, reduction
from . import risk, shape, surrogate

__all__ = [
    "arrays", "config", "fem", "forward", "nets", "ouu", "pipeline",
    "prior", "reduction", "risk", "shape", "surrogate", "__version__",
]
