"""Toy multimodal model with perception tokens that trigger region crops and feature re-encoding."""

from .data import DialogueSample, build_attention_mask, build_samples, row_plan
from .engine import GenerationTrace, Limits, Policy, ScriptedPolicy, generate
from .errors import VPTError
from .estimator import VPTClassifier
from .evaluation import EvalReport, emit_report, iogt, iou, run_eval, score_exact, sweep
from .grid_codec import CellBox, GridSpec, PixelBox, bbox_to_cells, cells_to_pixel_box
from .model import ModelConfig, ToyMLLM, load_checkpoint, save_checkpoint
from .pipeline import ExperimentConfig
from .synthetic import SourceRecord, gen_records
from .vocab import Vocabulary, extend_vocabulary

__version__ = "0.1.0"

__all__ = [
    "CellBox",
    "DialogueSample",
    "EvalReport",
    "ExperimentConfig",
    "GenerationTrace",
    "GridSpec",
    "Limits",
    "ModelConfig",
    "PixelBox",
    "Policy",
    "ScriptedPolicy",
    "SourceRecord",
    "ToyMLLM",
    "VPTClassifier",
    "VPTError",
    "Vocabulary",
    "bbox_to_cells",
    "build_attention_mask",
    "build_samples",
    "cells_to_pixel_box",
    "emit_report",
    "extend_vocabulary",
    "gen_records",
    "generate",
    "iogt",
    "iou",
    "load_checkpoint",
    "row_plan",
    "run_eval",
    "save_checkpoint",
    "score_exact",
    "sweep",
]
