"""Run the built-in numerical checks and print one line per check.

Covers finite-difference gradients for every op and the whole model, the
shape laws at full scale, the MoE loop oracle, the metric loop oracle, the
generator against the geometric reader and checkpoint round trips.
"""
from meterlab import checks

results = checks.run_checks()
for r in results:
    print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} {r.seconds:6.1f}s  {r.detail}")
print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
