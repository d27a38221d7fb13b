"""How the two accuracy measures behave on hand-made predictions.

Acc_eps scores error relative to the full scale, Acc_theta relative to the
true value, so a small absolute miss near zero hurts Acc_theta much more.
"""
from meterlab import metrics

P = metrics.PredictionPair
pairs = [
    P(5.0, 5.1, 10.0, 1),     # 1% of span: inside eps, 2% relative: inside theta
    P(0.4, 0.5, 10.0, 1),     # 1% of span but 25% relative
    P(2.0, 2.2, 3.0, 2),      # misses both
    P(0.0, 0.0, 3.0, 2),      # relative error undefined at zero
    P(1.5, None, 3.0, 2),     # no parseable output counts as a miss
    P(4.2, 4.2, 6.0, 5, ("blur",)),
    P(3.0, 3.1, 6.0, 5, ("tilted", "low_light")),
]

for p in pairs:
    rel = metrics.rel_error(p)
    print(f"y={p.y:<4} y*={str(p.y_star):<5} ref={metrics.ref_error(p):.4f} "
          f"rel={'-' if rel is None else f'{rel:.4f}'}")

for mode in metrics.GROUP_MODES:
    print(f"\ngrouped by {mode}")
    print(metrics.build_report(pairs, mode).to_markdown(), end="")

# The Average row weights every group equally; Weighted pools all samples.
r = metrics.build_report(pairs, "archetype")
print(f"\naverage {r.average.acc_eps:.1f} vs weighted {r.weighted.acc_eps:.1f}")
