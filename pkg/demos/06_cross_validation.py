"""Patient-level cross-validation on a miniature phantom cohort.

Builds six tiny patients, splits them into three folds (two excluded per
fold: the first validates, the second tests), trains one model per fold
and prints the per-fold and summary Dice. With eleven patients and fold
sizes 3,3,3,2 the same call reproduces the full protocol.

Run:  python demos/06_cross_validation.py
"""

from vesselseg.model import scaled_config
from vesselseg.phantom import PhantomSpec, generate
from vesselseg.training import TrainConfig, cross_validate

patients = [
    generate(
        PhantomSpec(
            dims=(16, 32, 32),
            seed=30 + i,
            trunk_radius_px=6.0 + (i % 3),
            bifurcation_z=10,
            patient_id=f"c{i:02d}",
        )
    )
    for i in range(6)
]

config = scaled_config(32, width_divisor=8, bridge_layers=1, d_model=32, num_heads=2)
train_cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=12, seed=0)
result = cross_validate(config, train_cfg, patients, fold_sizes=(2, 2, 2))

for k, (fold, report) in enumerate(zip(result.plan.folds, result.fold_reports)):
    print(f"fold {k}: train {fold.train_ids} val {fold.val_ids} test {fold.test_ids}")
    for p in report.per_patient:
        print(f"    {p.patient_id}: dice {p.dice:.4f} iou {p.iou:.4f}")

print(f"\nsummary mean dice {result.mean_dice:.4f}, mean IoU {result.mean_iou:.4f}")
