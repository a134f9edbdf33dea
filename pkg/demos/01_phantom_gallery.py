"""Generate a gallery of synthetic CTA phantoms and render overlays.

Walks through the phantom generator's knobs: a clean bifurcating vessel,
an occluded segment (lumen intensity collapses while the ground truth
still labels the vessel), and a bone decoy (bright, never labelled).
Writes each volume in the raw directory format plus a few PPM overlays.

Run:  python demos/01_phantom_gallery.py [out_dir]
"""

import sys
from pathlib import Path

from vesselseg.cli import write_overlay
from vesselseg.phantom import BoneDecoy, PhantomSpec, generate, save_spec
from vesselseg.volume_io import HuWindow, save_mask, save_volume

out_root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/phantoms")

specs = {
    "clean": PhantomSpec(dims=(48, 64, 64), seed=1, patient_id="clean"),
    "occluded": PhantomSpec(
        dims=(48, 64, 64),
        seed=2,
        occlusion_z_range=(12, 20),
        patient_id="occluded",
    ),
    "bone_decoy": PhantomSpec(
        dims=(48, 64, 64),
        seed=3,
        bone_decoys=[BoneDecoy(center_xy=(14.0, 14.0), radius_px=6.0, contact_z_range=(8, 40))],
        patient_id="bone_decoy",
    ),
    "trunk_only_labels": PhantomSpec(
        dims=(48, 64, 64),
        seed=4,
        mask_extent="to_bifurcation",
        patient_id="trunk_only_labels",
    ),
}

window = HuWindow()
for name, spec in specs.items():
    volume, mask = generate(spec)
    directory = out_root / name
    save_volume(volume, directory)
    save_mask(mask, directory)
    save_spec(spec, directory)
    for z in (0, spec.bifurcation_z, spec.dims[0] - 1):
        write_overlay(volume.voxels[z], mask.voxels[z], directory / f"overlay_z{z:03d}.ppm", window)
    voxels = int(mask.voxels.sum())
    print(f"{name:20s} -> {directory}  ({voxels} labelled voxels)")

print("\nEach directory holds meta.json, volume.raw, mask.raw, phantom.json and overlays.")
print("Overlays are plain P6 PPM; vessel labels tint the red channel.")
