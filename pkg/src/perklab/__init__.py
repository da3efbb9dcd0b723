"""Test-time encoding of long contexts into a low-rank adapter, meta-learned
through truncated gradient unrolling, on a small numpy causal language model."""

from .autodiff import Tensor, backward
from .inner import InnerHyper, adapt
from .meta import MetaParams, TGUConfig, init_meta, meta_evaluate, meta_train
from .model import BaseParams, LoraAdapter, ModelConfig, init_base, init_lora
from .optim import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "InnerHyper", "adapt", "MetaParams", "TGUConfig", "init_meta",
    "meta_evaluate", "meta_train", "BaseParams", "LoraAdapter", "ModelConfig", "init_base",
    "init_lora", "TrainConfig",
]
