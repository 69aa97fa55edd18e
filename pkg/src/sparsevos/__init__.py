"""Streaming video object segmentation with sparse window routing (SWR) in
the image encoder and sparse memory retrieval (SMR) in memory attention,
built on a desk-scale numpy engine with exact MAC accounting."""

from .bench import BenchReport, run_benchmark
from .config import PipelineConfig, load_config, parse_config
from .corpus import Scene, SceneSpec, generate, iou, make_corpus
from .distill import TrainConfig, TrainRecord, train_shortcut
from .ledger import CostLedger, metering
from .pipeline import StreamState, init_stream, run_stream, step
from .smr import SaliencyPatternQueue, SmrConfig
from .swr import RouterConfig, RoutingDecision, ShortcutWeights
from .weights import ModelConfig, init_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "CostLedger",
    "ModelConfig",
    "PipelineConfig",
    "RouterConfig",
    "RoutingDecision",
    "SaliencyPatternQueue",
    "Scene",
    "SceneSpec",
    "ShortcutWeights",
    "SmrConfig",
    "StreamState",
    "TrainConfig",
    "TrainRecord",
    "generate",
    "init_stream",
    "init_weights",
    "iou",
    "load_config",
    "load_weights",
    "make_corpus",
    "metering",
    "parse_config",
    "run_benchmark",
    "run_stream",
    "save_weights",
    "step",
    "train_shortcut",
]
