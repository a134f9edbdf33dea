"""Training losses and overlap metrics.

The training objective is binary cross-entropy plus a smoothed soft
Jaccard term, both averaged/summed over the whole batch at once. The
evaluation metrics are plain set-cardinality Dice and IoU on binarized
masks, with per-patient aggregation done over the full 3-D volume.

Loss functions accept either autodiff Tensors (differentiable, for
training) or plain arrays (returning a float).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, ShapeMismatch
from .volume_io import MaskVolume

PROB_CLAMP = 1e-7


def _prepare(p, y):
    pt = p if isinstance(p, ad.Tensor) else ad.Tensor(np.asarray(p, dtype=np.float64))
    ya = y.data if isinstance(y, ad.Tensor) else np.asarray(y)
    if pt.data.shape != ya.shape:
        raise ShapeMismatch(f"prediction shape {pt.data.shape} != target shape {ya.shape}")
    ya = ya.astype(pt.data.dtype, copy=False)
    return pt, ya, isinstance(p, ad.Tensor)


def bce_loss(p, y):
    """Mean binary cross-entropy, with p clamped to [1e-7, 1 - 1e-7]."""
    pt, ya, keep = _prepare(p, y)
    pc = ad.clip(pt, PROB_CLAMP, 1.0 - PROB_CLAMP)
    term = ad.mul(ya, ad.log(pc)) + ad.mul(1.0 - ya, ad.log(1.0 - pc))
    loss = -ad.tmean(term)
    return loss if keep else loss.item()


def soft_jaccard_loss(p, y, eps: float = 1.0):
    """1 - (sum(p*y) + eps) / (sum(p) + sum(y) - sum(p*y) + eps), whole batch."""
    pt, ya, keep = _prepare(p, y)
    inter = ad.tsum(ad.mul(pt, ya))
    total = ad.tsum(pt) + float(ya.sum())
    loss = 1.0 - ad.div(inter + eps, total - inter + eps)
    return loss if keep else loss.item()


def bcej_loss(p, y, eps: float = 1.0):
    """Binary cross-entropy plus soft Jaccard, unit weights."""
    pt, ya, keep = _prepare(p, y)
    loss = bce_loss(pt, ya) + soft_jaccard_loss(pt, ya, eps=eps)
    return loss if keep else loss.item()


def binarize(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where p >= threshold, else 0."""
    return (np.asarray(p) >= threshold).astype(np.uint8)


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    return inter, int(pred.sum()), int(gt.sum())


def iou_metric(pred, gt, empty_value: float = 1.0) -> float:
    """|P & G| / |P | G|; both masks empty scores empty_value."""
    inter, np_, ng = _counts(pred, gt)
    union = np_ + ng - inter
    if union == 0:
        return empty_value
    return inter / union


def dice_metric(pred, gt, empty_value: float = 1.0) -> float:
    """2 |P & G| / (|P| + |G|); both masks empty scores empty_value."""
    inter, np_, ng = _counts(pred, gt)
    if np_ + ng == 0:
        return empty_value
    return 2.0 * inter / (np_ + ng)


def patient_dice(pred_volume: MaskVolume, gt_volume: MaskVolume) -> float:
    """Dice over every voxel of the 3-D stack at once (no per-slice averaging)."""
    if pred_volume.meta.shape != gt_volume.meta.shape:
        raise DimensionMismatch(
            f"volume dims differ: {pred_volume.meta.shape} vs {gt_volume.meta.shape}"
        )
    return dice_metric(pred_volume.voxels, gt_volume.voxels)


def patient_iou(pred_volume: MaskVolume, gt_volume: MaskVolume) -> float:
    if pred_volume.meta.shape != gt_volume.meta.shape:
        raise DimensionMismatch(
            f"volume dims differ: {pred_volume.meta.shape} vs {gt_volume.meta.shape}"
        )
    return iou_metric(pred_volume.voxels, gt_volume.voxels)


@dataclass
class PatientResult:
    patient_id: str
    dice: float
    iou: float
    n_slices: int


@dataclass
class MetricsReport:
    """Per-patient and aggregate Dice/IoU, serializable as JSON."""

    per_patient: list[PatientResult]
    mean_dice: float
    mean_iou: float
    seed: int
    config_sha256: str

    @classmethod
    def from_patients(
        cls, per_patient: list[PatientResult], seed: int, config_sha256: str
    ) -> "MetricsReport":
        n = len(per_patient)
        return cls(
            per_patient=per_patient,
            mean_dice=sum(p.dice for p in per_patient) / n if n else 0.0,
            mean_iou=sum(p.iou for p in per_patient) / n if n else 0.0,
            seed=seed,
            config_sha256=config_sha256,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        raw["per_patient"] = [PatientResult(**p) for p in raw["per_patient"]]
        return cls(**raw)


def config_digest(config_dict: dict) -> str:
    """Stable sha256 of a JSON-serializable configuration."""
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
