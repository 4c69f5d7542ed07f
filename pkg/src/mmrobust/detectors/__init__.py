from .checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .model import DetectorConfig, DetectorParams, FeatureBundle, forward, init_params, per_sample_ce
from .train import TrainReport, evaluate, fit, train

__all__ = [
    "DetectorConfig", "DetectorParams", "FeatureBundle", "TrainReport", "dumps_checkpoint", "evaluate",
    "fit", "forward", "init_params", "load_checkpoint", "loads_checkpoint", "per_sample_ce",
    "save_checkpoint", "train",
]
