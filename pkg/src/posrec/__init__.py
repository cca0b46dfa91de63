"""Desk-scale laboratory for positional encodings in session-based recommendation."""

from .numcore import AdamState, ShapeError, Tape, TapeError, Tensor, adam_step, backward, grad_check
from .posenc import (
    AwarenessReport,
    EncodingError,
    EncodingScheme,
    check_awareness,
    encode,
    linear_combination_residual,
    make_scheme,
    pairwise_heatmap,
    relative_bias,
)
from .sessgraph import Session, SessionGraph, assemble_node_pe, attach_anchors, build_session_graph
from .model import PosRecModel, Prediction, cross_entropy, load_checkpoint, save_checkpoint
from .datapipe import Dataset, SplitSpec, augment, filter_dataset, parse_raw, split, synth_generate
from .evalkit import MetricsReport, TrainConfig, evaluate, train

__version__ = "0.1.0"
