"""Regional-prior window attention for super-resolution, built on a numpy autograd core."""
from .model import PRESETS, ModelConfig, RptSrModel, build, count_flops, forward, preset

__all__ = ["PRESETS", "ModelConfig", "RptSrModel", "build", "count_flops", "forward", "preset"]
__version__ = "0.1.0"
