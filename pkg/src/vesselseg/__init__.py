"""Desk-scale CTA vessel segmentation.

Building blocks: a raw int16 volume format with HU windowing (volume_io),
deterministic bifurcating-vessel phantoms (phantom), a numpy autodiff
substrate (autodiff), the transformer-bridged residual U-Net (model),
BCE+Jaccard losses and Dice/IoU metrics (losses), Adam training with
patient-level cross-validation and gradient checking (training), the
intensity-tracking baseline (tracker), and a CLI (cli).
"""

from .volume_io import HuWindow, MaskVolume, Volume, VolumeMeta
from .phantom import BoneDecoy, PhantomSpec, generate
from .model import ModelConfig, ParamStore, init_params, model_forward, segment_volume
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .losses import MetricsReport, bce_loss, bcej_loss, dice_metric, iou_metric, soft_jaccard_loss
from .training import FoldPlan, RunLog, TrainConfig, cross_validate, evaluate, grad_check, make_folds, train
from .tracker import TrackerConfig, TrackEvent, connected_region, track_volume

__version__ = "0.1.0"

__all__ = [
    "HuWindow",
    "MaskVolume",
    "Volume",
    "VolumeMeta",
    "BoneDecoy",
    "PhantomSpec",
    "generate",
    "ModelConfig",
    "ParamStore",
    "init_params",
    "model_forward",
    "segment_volume",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "MetricsReport",
    "bce_loss",
    "bcej_loss",
    "dice_metric",
    "iou_metric",
    "soft_jaccard_loss",
    "FoldPlan",
    "RunLog",
    "TrainConfig",
    "cross_validate",
    "evaluate",
    "grad_check",
    "make_folds",
    "train",
    "TrackerConfig",
    "TrackEvent",
    "connected_region",
    "track_volume",
]
