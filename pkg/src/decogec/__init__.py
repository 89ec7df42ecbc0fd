"""Integrated error detection and localized correction for GEC."""

from .alignment import EditScript, Label, LabelSet, align, apply_script, derive_labels
from .corpus import CorruptionRules, ParallelExample, Vocab, detokenize, load_parallel, synthesize_corruptions, tokenize
from .inference import DecodeConfig, DetectionControl, apply_detection_control, correct, detect, grid_search_control, infill
from .model import GLMModel, ModelConfig, load_checkpoint, pack_input, save_checkpoint
from .template import (
    MaskedText,
    TextPiece,
    build_masked_text,
    extract_pieces,
    gold_pieces_for_merged,
    merge_detections,
    reassemble,
)
from .training import TrainConfig, build_sft1_dataset, build_sft2_dataset, eval_keys, train

__version__ = "0.1.0"
