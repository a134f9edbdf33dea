"""Verify the analytic gradients of the full network numerically.

Builds the smallest configuration in double precision, backpropagates the
BCE-plus-Jaccard loss once, then compares sampled parameter gradients
against central finite differences. Also demonstrates the negative
control: doubling one analytic gradient must make the check fail.

Run:  python demos/02_gradient_check.py
"""

import json

from vesselseg.model import tiny_config
from vesselseg.training import grad_check

report = grad_check(tiny_config(), seed=0, n_samples=100, tol=1e-4)
print(json.dumps({k: v for k, v in report.items() if k != "samples"}, indent=2, default=str))
assert report["pass"]

worst_group = max(report["group_counts"], key=report["group_counts"].get)
print(f"\nSamples span all parameter groups (largest: {worst_group}).")

corrupted = grad_check(
    tiny_config(), seed=0, n_samples=16, tol=1e-4, corrupt="encoder.stem.conv.weight"
)
print(
    f"negative control (stem conv gradient doubled): pass={corrupted['pass']} "
    f"max_rel_err={corrupted['max_rel_err']:.3f}"
)
assert not corrupted["pass"]
