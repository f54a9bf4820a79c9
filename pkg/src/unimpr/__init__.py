"""Unified multimodal place recognition with missing-modality handling, on synthetic desk-scale benchmarks."""

from .fusion import PresenceMask, all_masks
from .model import ModelConfig, UniMPR, extract_descriptors, prepare_frames
from .retrieval import EvalReport, build_index, evaluate, query_topk
from .synth import BenchmarkSpec, SensorSuite
from .training import LabelRule, TrainConfig

__all__ = ["BenchmarkSpec", "EvalReport", "LabelRule", "ModelConfig", "PresenceMask", "SensorSuite", "TrainConfig",
           "UniMPR", "all_masks", "build_index", "evaluate", "extract_descriptors", "prepare_frames", "query_topk"]
__version__ = "0.1.0"
