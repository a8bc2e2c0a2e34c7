"""Self-supervised skeleton action representations from decoupled spatial and temporal clues."""
from .config import RunConfig, config_from_dict, load_config, tiny_config
from .contrastive import NegativeQueue, cross_domain_loss, info_nce, momentum_update
from .encoder import DecouplingEncoder, EncoderConfig
from .errors import CheckpointError, ConfigError, FormatError, SkelconError, TrainingDivergence
from .graph import SkeletonGraph, get_graph, power_adjacency
from .skeleton import SkeletonSequence

__all__ = [
    "CheckpointError", "ConfigError", "DecouplingEncoder", "EncoderConfig", "FormatError",
    "NegativeQueue", "RunConfig", "SkeletonGraph", "SkeletonSequence", "SkelconError",
    "TrainingDivergence", "config_from_dict", "cross_domain_loss", "get_graph", "info_nce",
    "load_config", "momentum_update", "power_adjacency", "tiny_config",
]
