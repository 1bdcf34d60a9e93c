"""Alignment-fusion deep unfolding network for multi-exposure HDR, with an exact HQS reference solver."""
from .model import AFUNet, ModelConfig
from .oracle import OracleProblem, SolveConfig, solve

__all__ = ["AFUNet", "ModelConfig", "OracleProblem", "SolveConfig", "solve"]
__version__ = "0.1.0"
