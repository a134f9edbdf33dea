"""Train the small network on phantom patients and race it against the tracker.

Eight synthetic patients train a width-reduced network; three held-out
patients test it. The same test volumes then go through the intensity
tracker. Because every test patient carries an occluded segment, the
tracker loses the vessel midway and scores far below the network, which
is exactly the contrast the learned model is supposed to deliver.

Takes a few minutes on a laptop CPU.

Run:  python demos/05_train_and_compare.py
"""

from vesselseg.losses import patient_dice
from vesselseg.model import scaled_config
from vesselseg.phantom import PhantomSpec, generate
from vesselseg.tracker import TrackerConfig, track_volume
from vesselseg.training import TrainConfig, evaluate, train


def patient(i):
    return PhantomSpec(
        dims=(64, 64, 64),
        seed=1000 + i,
        entry_xy=(32.0 + (i * 7) % 5 - 2, 32.0 + (i * 3) % 5 - 2),
        trunk_radius_px=9.0 + (i % 3),
        branch_radius_px=3.0,
        bifurcation_z=28 + (i % 5) * 2,
        branch_half_angle_deg=12.0 + (i % 4) * 2.0,
        occlusion_z_range=(14 + (i % 4) * 2, 22 + (i % 4) * 2),
        patient_id=f"p{i:02d}",
    )


specs = [patient(i) for i in range(11)]
patients = [generate(s) for s in specs]

config = scaled_config(64, width_divisor=4, bridge_layers=4, d_model=128, num_heads=8)
train_cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=6, seed=0)
print("training on 8 patients (512 slices) ...")
checkpoint, log = train(config, train_cfg, patients[:8], val_patients=patients[8:9])
print(f"  done in {log.wall_clock_sec:.0f}s, best val IoU {checkpoint.meta['best_val_iou']:.4f}")

report = evaluate(checkpoint, patients[8:])
print("\nnetwork on held-out patients:")
for p in report.per_patient:
    print(f"  {p.patient_id}: dice {p.dice:.4f}")

print("\ntracker on the same volumes:")
for spec, (volume, mask) in zip(specs[8:], patients[8:]):
    cfg = TrackerConfig(t_lo=200.0, t_hi=500.0, seed_point=(int(spec.entry_xy[0]), int(spec.entry_xy[1])))
    tracked, events = track_volume(volume, cfg)
    kinds = [(e.kind, e.z) for e in events]
    print(f"  {spec.patient_id}: dice {patient_dice(tracked, mask):.4f}, events {kinds}")

print(f"\nnetwork mean dice {report.mean_dice:.4f}; the tracker cannot cross the occlusion.")
