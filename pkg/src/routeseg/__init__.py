"""Region-routed attention segmentation: a from-scratch numpy stack.

A tape-based autodiff core (:mod:`routeseg.tensor`), bi-level routed
attention with local context enhancement (:mod:`routeseg.attention`),
transformer blocks and patch plumbing (:mod:`routeseg.blocks`), a
seven-stage u-shaped model with channel+spatial skip fusion
(:mod:`routeseg.model`, :mod:`routeseg.fusion`), dice/cross-entropy
losses, confusion-matrix metrics with exact Hausdorff distance, a
deterministic data pipeline, and a training harness behind the
``routeseg`` command line.
"""

from .attention import PartitionSpec, attention_flops, routed_attention
from .config import RunConfig, load_config, parse_config_text
from .model import Model, ModelConfig, build_model, count_flops, count_params
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelConfig",
    "PartitionSpec",
    "RunConfig",
    "Tape",
    "Tensor",
    "attention_flops",
    "backward",
    "build_model",
    "count_flops",
    "count_params",
    "load_config",
    "parse_config_text",
    "routed_attention",
    "__version__",
]
