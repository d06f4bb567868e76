"""Tri-encoder vision-language pre-training on a numpy autodiff substrate."""

from .encoders import XFM, EncoderConfig
from .gradflow import GradFlowConfig, Variant

__all__ = ["XFM", "EncoderConfig", "GradFlowConfig", "Variant"]
__version__ = "0.1.0"
