"""Read dials without learning: find the needle angle, map it back to a value.

The geometric reader knows the dial layout, so on clean renders it should land
on the true half-index reading. Corruptions are where it starts to slip, which
is the gap the learned model is meant to close.
"""
from meterlab import dialgen, georead, metrics

cfg = dialgen.paper_profile(240, master_seed=3, image_size=64)
specs = cfg.spec_by_id()
records = dialgen.generate_dataset(cfg).records

pairs = []
for rec in records:
    spec = specs[rec.archetype_id]
    guess = georead.read(dialgen.render_sample(cfg, rec.id), spec)
    pairs.append(metrics.PredictionPair(rec.reading, guess, spec.span, rec.archetype_id))

print("clean dials")
print(metrics.build_report(pairs, "archetype").to_markdown())

# Same dial, one at a time through each corruption at a fixed severity.
spec = specs[1]
print("meter_1 at 7.3 under each corruption (severity 0.7)")
img = dialgen.render_dial(spec, 7.3, render_seed=0, size=64)
for kind in dialgen.CORRUPTION_KINDS:
    bad = dialgen.apply_corruption(img, dialgen.CorruptionSpec(kind, 0.7, seed=1))
    got = georead.read(bad, spec)
    print(f"  {kind:18s} -> {'no reading' if got is None else f'{got:g}'}")
