"""Scribble-supervised image manipulation localisation with prior-aware
feature modulation and gated adaptive fusion."""

from .config import RunConfig
from .dataio import Sample, TriStateMask
from .discriminator import ManipulatedDiscriminator
from .metrics import EvalResult, f1_at_threshold
from .model import SCAF

__version__ = "0.1.0"

__all__ = ["RunConfig", "Sample", "TriStateMask", "ManipulatedDiscriminator", "EvalResult",
           "f1_at_threshold", "SCAF"]
