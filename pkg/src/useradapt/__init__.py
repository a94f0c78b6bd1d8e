"""Online adaptation of a population model to individual user streams."""
from .stream import (ActionLabel, Batch, Sample, StreamCollection, StreamFormatError, UserStream, Vocab,
                     load_streams, save_streams)
from .synth import SynthConfig, gen_collection, gen_user_stream
from .model import ModelParams, load_checkpoint, save_checkpoint
from .replay import ReplayMemory
from .learner import AdaptationError, LwpState, OptimConfig, adapt_stream, pretrain
from .metrics import aggregate, bin_rf, hag, macro_acc, oag
from .analysis import ProbeConfig, classifier_norm_delta, grad_cosine, linear_probe, transfer_matrix
from .harness import ConfigError, ExperimentConfig, emit_reports, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ActionLabel", "Batch", "Sample", "StreamCollection", "StreamFormatError", "UserStream", "Vocab",
    "load_streams", "save_streams", "SynthConfig", "gen_collection", "gen_user_stream", "ModelParams",
    "load_checkpoint", "save_checkpoint", "ReplayMemory", "AdaptationError", "LwpState", "OptimConfig",
    "adapt_stream", "pretrain", "aggregate", "bin_rf", "hag", "macro_acc", "oag", "ProbeConfig",
    "classifier_norm_delta", "grad_cosine", "linear_probe", "transfer_matrix", "ConfigError",
    "ExperimentConfig", "emit_reports", "run_experiment",
]
