"""Synthetic CTA phantoms with analytically known vessel masks.

Each phantom is a bifurcating tube: a wide trunk descending from slice 0
that splits into two thin branches diverging along x. Optional extras
reproduce the two behaviours that break intensity tracking:

  * an occluded segment, where lumen intensity collapses to near
    background while the ground truth still labels the vessel, and
  * bone decoys, bright cylinders that are never part of the mask.

Geometry is hard-edged (a voxel is inside a tube iff its center is
strictly within the section radius), so a brute-force point-in-circle
test reproduces the mask exactly. Noise is additive Gaussian drawn in one
C-ordered (z, y, x) pass from numpy's PCG64 generator, so identical specs
produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import OutOfRange, SpecInvalid
from .volume_io import MaskVolume, Volume, VolumeMeta

MASK_TO_BIFURCATION = "to_bifurcation"
MASK_TO_END = "to_end"

DEFAULT_INTENSITIES = {
    "background": 40.0,
    "lumen": 350.0,
    "occluded_lumen": 45.0,
    "bone": 900.0,
}


@dataclass(frozen=True)
class BoneDecoy:
    """A bright cylinder present over [z0, z1); never masked."""

    center_xy: tuple[float, float]
    radius_px: float
    contact_z_range: tuple[int, int]


@dataclass
class PhantomSpec:
    """Deterministic recipe for one synthetic patient volume."""

    dims: tuple[int, int, int] = (64, 64, 64)  # (num_slices, height, width)
    seed: int = 0
    entry_xy: tuple[float, float] | None = None  # defaults to slice center
    trunk_radius_px: float = 10.0
    branch_radius_px: float = 3.0
    bifurcation_z: int | None = None  # defaults to num_slices // 2
    branch_half_angle_deg: float = 15.0
    occlusion_z_range: tuple[int, int] | None = None  # [z0, z1)
    bone_decoys: list[BoneDecoy] = field(default_factory=list)
    intensities: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_sigma: float = 15.0
    mask_extent: str = MASK_TO_END
    patient_id: str = "phantom"

    def __post_init__(self):
        if self.entry_xy is None:
            self.entry_xy = (self.dims[2] / 2.0, self.dims[1] / 2.0)
        if self.bifurcation_z is None:
            self.bifurcation_z = self.dims[0] // 2
        self.validate()

    def validate(self) -> None:
        nz, ny, nx = self.dims
        if nz < 1 or ny < 1 or nx < 1:
            raise SpecInvalid(f"dims must be positive, got {self.dims}")
        if not 0 <= self.bifurcation_z < nz:
            raise SpecInvalid(f"bifurcation_z {self.bifurcation_z} outside [0, {nz})")
        if self.trunk_radius_px < 0 or self.branch_radius_px < 0:
            raise SpecInvalid("radii must be >= 0")
        if self.occlusion_z_range is not None:
            z0, z1 = self.occlusion_z_range
            if not (0 <= z0 <= z1 <= nz):
                raise SpecInvalid(f"occlusion range {self.occlusion_z_range} outside [0, {nz})")
        for decoy in self.bone_decoys:
            z0, z1 = decoy.contact_z_range
            if not (0 <= z0 <= z1 <= nz):
                raise SpecInvalid(f"bone decoy z range {decoy.contact_z_range} outside [0, {nz})")
            if decoy.radius_px <= 0:
                raise SpecInvalid("bone decoy radius must be > 0")
        if self.mask_extent not in (MASK_TO_BIFURCATION, MASK_TO_END):
            raise SpecInvalid(f"unknown mask_extent {self.mask_extent!r}")
        missing = set(DEFAULT_INTENSITIES) - set(self.intensities)
        if missing:
            raise SpecInvalid(f"intensities missing keys {sorted(missing)}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        raw = json.loads(text)
        decoys = [
            BoneDecoy(
                center_xy=tuple(d["center_xy"]),
                radius_px=float(d["radius_px"]),
                contact_z_range=tuple(d["contact_z_range"]),
            )
            for d in raw.pop("bone_decoys", [])
        ]
        raw["dims"] = tuple(raw["dims"])
        raw["entry_xy"] = tuple(raw["entry_xy"]) if raw.get("entry_xy") else None
        if raw.get("occlusion_z_range"):
            raw["occlusion_z_range"] = tuple(raw["occlusion_z_range"])
        return cls(bone_decoys=decoys, **raw)


def centerline_at(spec: PhantomSpec, z: int) -> list[tuple[float, float, float]]:
    """Tube cross-sections (x, y, radius) on slice z.

    One trunk section below the bifurcation; two branch sections at
    entry_xy +- (tan(half_angle) * (z - bifurcation_z), 0) from the
    bifurcation slice on.
    """
    nz = spec.dims[0]
    if not 0 <= z < nz:
        raise OutOfRange(f"slice {z} outside [0, {nz})")
    ex, ey = spec.entry_xy
    if z < spec.bifurcation_z:
        return [(ex, ey, spec.trunk_radius_px)]
    offset = np.tan(np.deg2rad(spec.branch_half_angle_deg)) * (z - spec.bifurcation_z)
    return [
        (ex - offset, ey, spec.branch_radius_px),
        (ex + offset, ey, spec.branch_radius_px),
    ]


def _vessel_slice_mask(spec: PhantomSpec, z: int, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    """Boolean H x W map of voxel centers strictly inside any section."""
    inside = np.zeros(xx.shape, dtype=bool)
    for cx, cy, r in centerline_at(spec, z):
        inside |= (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
    return inside


def generate(spec: PhantomSpec) -> tuple[Volume, MaskVolume]:
    """Render the phantom volume and its ground-truth vessel mask.

    HU priority per voxel: bone decoy > vessel lumen (occluded lumen
    inside the occlusion range) > background, plus Gaussian noise. The
    mask marks vessel voxels only, occluded segments included, limited
    by mask_extent; bone is never masked.
    """
    spec.validate()
    nz, ny, nx = spec.dims
    xx, yy = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64))

    base = np.full((nz, ny, nx), spec.intensities["background"], dtype=np.float64)
    mask = np.zeros((nz, ny, nx), dtype=np.uint8)
    occ = spec.occlusion_z_range

    for z in range(nz):
        vessel = _vessel_slice_mask(spec, z, xx, yy)
        occluded = occ is not None and occ[0] <= z < occ[1]
        base[z][vessel] = (
            spec.intensities["occluded_lumen"] if occluded else spec.intensities["lumen"]
        )
        for decoy in spec.bone_decoys:
            z0, z1 = decoy.contact_z_range
            if z0 <= z < z1:
                bx, by = decoy.center_xy
                bone = (xx - bx) ** 2 + (yy - by) ** 2 < decoy.radius_px**2
                base[z][bone] = spec.intensities["bone"]
        if spec.mask_extent == MASK_TO_END or z < spec.bifurcation_z:
            mask[z] = vessel

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    noisy = base + rng.normal(0.0, spec.noise_sigma, size=base.shape)
    info = np.iinfo(np.int16)
    voxels = np.clip(np.rint(noisy), info.min, info.max).astype(np.int16)

    meta = VolumeMeta(
        height=ny, width=nx, num_slices=nz, spacing_mm=(1.0, 1.0, 1.0), patient_id=spec.patient_id
    )
    return Volume(meta=meta, voxels=voxels), MaskVolume(meta=meta, voxels=mask)


def save_spec(spec: PhantomSpec, directory: str | Path) -> None:
    """Drop the generating recipe next to the rendered volume."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "phantom.json").write_text(spec.to_json() + "\n", encoding="utf-8")


def load_spec(directory: str | Path) -> PhantomSpec:
    return PhantomSpec.from_json((Path(directory) / "phantom.json").read_text(encoding="utf-8"))
