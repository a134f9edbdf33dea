"""Intensity-window object tracking across slices, failure modes included.

The tracker thresholds each slice into an intensity window, keeps the
connected components that overlap the previous slice's region, and walks
down the stack. Two deliberate limitations define its behaviour:

  * once a slice produces an empty region the track is lost for good
    (no re-acquisition), so an occluded vessel segment kills everything
    below it, and
  * when a bright structure such as bone touches the vessel and shares
    its intensity window, the merged component is kept; a sudden area
    explosion is only reported, never corrected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .errors import SeedOutOfWindow, SpecInvalid
from .volume_io import MaskVolume, Volume

EVENT_LOST = "lost"
EVENT_BONE_MERGE = "bone_merge_suspect"

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


@dataclass(frozen=True)
class TrackerConfig:
    t_lo: float
    t_hi: float
    seed_point: tuple[int, int]  # (x, y) on slice 0
    min_overlap_px: int = 1
    max_area_growth: float = 4.0
    connectivity: int = 8

    def __post_init__(self):
        if not self.t_lo < self.t_hi:
            raise SpecInvalid(f"threshold window needs t_lo < t_hi, got [{self.t_lo}, {self.t_hi}]")
        if self.connectivity not in _STRUCTURES:
            raise SpecInvalid(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_overlap_px < 1:
            raise SpecInvalid("min_overlap_px must be >= 1")


@dataclass
class TrackEvent:
    z: int
    kind: str
    detail: str


def connected_region(
    hu_slice: np.ndarray,
    window: tuple[float, float],
    seed_mask: np.ndarray,
    connectivity: int = 8,
    min_overlap_px: int = 1,
) -> np.ndarray:
    """In-window connected components overlapping the seed, as a bool map.

    A component survives iff at least min_overlap_px of its pixels are set
    in seed_mask; the union of survivors is returned (possibly empty).
    """
    t_lo, t_hi = window
    in_window = (hu_slice >= t_lo) & (hu_slice <= t_hi)
    labels, n_labels = ndimage.label(in_window, structure=_STRUCTURES[connectivity])
    if n_labels == 0:
        return np.zeros_like(in_window)
    seed = np.asarray(seed_mask).astype(bool)
    overlap_counts = np.bincount(labels[seed], minlength=n_labels + 1)
    keep = np.flatnonzero(overlap_counts >= min_overlap_px)
    keep = keep[keep != 0]  # label 0 is background
    return np.isin(labels, keep)


def track_volume(volume: Volume, cfg: TrackerConfig) -> tuple[MaskVolume, list[TrackEvent]]:
    """Walk the stack slice by slice from a single seed pixel on slice 0."""
    sx, sy = cfg.seed_point
    if not (0 <= sx < volume.meta.width and 0 <= sy < volume.meta.height):
        raise SeedOutOfWindow(f"seed point {cfg.seed_point} outside the slice")
    seed_value = volume.voxels[0, sy, sx]
    if not cfg.t_lo <= seed_value <= cfg.t_hi:
        raise SeedOutOfWindow(
            f"seed pixel value {seed_value} HU outside window [{cfg.t_lo}, {cfg.t_hi}]"
        )

    out = np.zeros(volume.meta.shape, dtype=np.uint8)
    events: list[TrackEvent] = []
    window = (cfg.t_lo, cfg.t_hi)

    seed_mask = np.zeros((volume.meta.height, volume.meta.width), dtype=bool)
    seed_mask[sy, sx] = True
    prev_area = None
    lost = False
    for z in range(volume.meta.num_slices):
        if lost:
            break  # remaining slices stay empty
        region = connected_region(
            volume.voxels[z], window, seed_mask, cfg.connectivity, cfg.min_overlap_px
        )
        area = int(region.sum())
        if area == 0:
            events.append(TrackEvent(z=z, kind=EVENT_LOST, detail="no in-window component overlaps the track"))
            lost = True
            continue
        if prev_area is not None and area > cfg.max_area_growth * prev_area:
            events.append(
                TrackEvent(
                    z=z,
                    kind=EVENT_BONE_MERGE,
                    detail=f"region area jumped {prev_area} -> {area} px",
                )
            )
        out[z] = region
        seed_mask = region
        prev_area = area
    return MaskVolume(meta=volume.meta, voxels=out), events


def events_to_json(events: list[TrackEvent]) -> str:
    return json.dumps([asdict(e) for e in events], indent=2)
