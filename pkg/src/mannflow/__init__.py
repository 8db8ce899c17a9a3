"""Streaming inference for memory-augmented networks with early-exit output search."""

from .counters import OpCounters
from .data import Dataset, QASample, Vocabulary, parse_babi, synthesize_planted
from .engine import Pipeline, PipelineConfig, engine_infer
from .model import Dimensions, MemoryState, ModelWeights, oracle_infer
from .thresholding import ThresholdTable, calibrate, thresholded_argmax

__all__ = [
    "OpCounters",
    "Dataset",
    "QASample",
    "Vocabulary",
    "parse_babi",
    "synthesize_planted",
    "Pipeline",
    "PipelineConfig",
    "engine_infer",
    "Dimensions",
    "MemoryState",
    "ModelWeights",
    "oracle_infer",
    "ThresholdTable",
    "calibrate",
    "thresholded_argmax",
]
