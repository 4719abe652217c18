"""Caption-aware hateful-meme classification head on a small reverse-mode numpy engine."""
from .data import Example, gen_synthetic, load_dataset, reference_corpus, save_dataset
from .diffnum import ParamStore, RngStream, Tensor, check_gradient
from .encoder import EncoderConfig
from .metrics import Metrics, mcnemar
from .model import ModelConfig, TraceModel
from .training import TrainConfig, TrainRun, evaluate, layer_sweep, selection_accuracy, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "Example", "Metrics", "ModelConfig", "ParamStore", "RngStream", "Tensor",
    "TraceModel", "TrainConfig", "TrainRun", "check_gradient", "evaluate", "gen_synthetic",
    "layer_sweep", "load_dataset", "mcnemar", "reference_corpus", "save_dataset",
    "selection_accuracy", "train",
]
