from .config import VARIANT_LABELS, VARIANTS, ConfigError, RunConfig, load_config, replace
from .train import Trainer, evaluate, load_net, train_stage1, train_stage2

__all__ = [
    "ConfigError",
    "RunConfig",
    "Trainer",
    "VARIANTS",
    "VARIANT_LABELS",
    "evaluate",
    "load_config",
    "load_net",
    "replace",
    "train_stage1",
    "train_stage2",
]
