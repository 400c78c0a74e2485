"""Annotation quality assurance via few-shot regional proposals.

Trains small models (global thresholding, a parallel echo state network) on
at most five images per stack, predicts three proposal masks per test image,
and uses the relative agreement between proposals and two competing manual
annotations to select the better annotation per image or route the image to
a human review queue.
"""

from .baseline import BaselineModel, RegionalProposals, fit_baseline, predict_baseline
from .dataset import (
    AnnotatorBias,
    ImageRecord,
    StackSplit,
    SynthConfig,
    generate_synthetic_stack,
    load_stack,
    make_split,
    save_stack,
)
from .harness import ExperimentConfig, SelectionSummary, run_rcap_eval, run_segmentation_eval, run_selection
from .metrics import Confusion, OverlapReport, confusion, dc_loss, iou, overlap_report
from .paresn import (
    EsnHyperParams,
    ParEsnModel,
    check_stopping,
    extract_subwindows,
    finalize,
    init_paresn,
    load_paresn,
    predict_paresn,
    save_paresn,
    train_on_window,
    train_paresn,
)
from .preprocess import PreprocessedPlanes, bottom_hat, denoise_and_resize, gradients, preprocess, roi_mask
from .rcap import RcapConfig, rcap
from .tlsa import TlsaConfig, TlsaDecision, tlsa

__version__ = "0.1.0"

__all__ = [
    "AnnotatorBias",
    "BaselineModel",
    "Confusion",
    "EsnHyperParams",
    "ExperimentConfig",
    "ImageRecord",
    "OverlapReport",
    "ParEsnModel",
    "PreprocessedPlanes",
    "RcapConfig",
    "RegionalProposals",
    "SelectionSummary",
    "StackSplit",
    "SynthConfig",
    "TlsaConfig",
    "TlsaDecision",
    "bottom_hat",
    "check_stopping",
    "confusion",
    "dc_loss",
    "denoise_and_resize",
    "extract_subwindows",
    "finalize",
    "fit_baseline",
    "generate_synthetic_stack",
    "gradients",
    "init_paresn",
    "iou",
    "load_paresn",
    "load_stack",
    "make_split",
    "overlap_report",
    "predict_baseline",
    "predict_paresn",
    "preprocess",
    "rcap",
    "roi_mask",
    "run_rcap_eval",
    "run_segmentation_eval",
    "run_selection",
    "save_paresn",
    "save_stack",
    "tlsa",
    "train_on_window",
    "train_paresn",
]
