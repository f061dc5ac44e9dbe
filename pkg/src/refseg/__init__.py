"""Referring-expression segmentation with a frozen dual encoder, an attention
prompter and a promptable mask generator."""

from refseg.config import TrainConfig
from refseg.metrics import EvalReport
from refseg.model import RefSegModel, build_model

__all__ = ["EvalReport", "RefSegModel", "TrainConfig", "build_model"]
__version__ = "0.1.0"
