"""flowtrack: unsupervised moving-object pseudo-labels, refinement, and tracking.

Pipeline stages: background-subtraction pseudo-labels gated by dense optical
flow, iterative moving-average refinement with CRF sharpening, instance
extraction with Matrix NMS and rotated boxes, SORT tracking, and a COCO-style
evaluator, plus a deterministic synthetic-scene harness.
"""

__version__ = "0.1.0"

from .background import (BackgroundModel, ThresholdParams, adaptive_gaussian_threshold,
                         estimate_background, foreground_mask, subtract)
from .flow import (FlowField, GatedFramePair, dense_flow, flow_gate_mask, gate_frames,
                   label_sequence, pseudo_label)
from .instances import (Instance, RotatedBox, binarize_and_extract, connected_components,
                        matrix_nms, min_area_rect, rle_decode, rle_encode)
from .refine import (CrfParams, FBetaScore, MvaState, dense_crf, f_beta, mva_update,
                     refine_labels)
from .tracker import (KalmanState, SortTracker, Track, TrackerConfig, hungarian, iou,
                      kalman_predict, kalman_update)
from .evaluation import EvalReport, average_precision, evaluate, mask_iou, match_detections
from .synth import SceneSpec, SynthTruth, generate, standard_suites
from .pipeline import PipelineConfig, RunManifest, ablate, load_config, run

__all__ = [
    "BackgroundModel", "ThresholdParams", "adaptive_gaussian_threshold",
    "estimate_background", "foreground_mask", "subtract",
    "FlowField", "GatedFramePair", "dense_flow", "flow_gate_mask", "gate_frames",
    "label_sequence", "pseudo_label",
    "Instance", "RotatedBox", "binarize_and_extract", "connected_components",
    "matrix_nms", "min_area_rect", "rle_decode", "rle_encode",
    "CrfParams", "FBetaScore", "MvaState", "dense_crf", "f_beta", "mva_update",
    "refine_labels",
    "KalmanState", "SortTracker", "Track", "TrackerConfig", "hungarian", "iou",
    "kalman_predict", "kalman_update",
    "EvalReport", "average_precision", "evaluate", "mask_iou", "match_detections",
    "SceneSpec", "SynthTruth", "generate", "standard_suites",
    "PipelineConfig", "RunManifest", "ablate", "load_config", "run",
]
