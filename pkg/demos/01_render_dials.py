"""Render the six dial archetypes, then push one dial through every corruption.

Writes two contact sheets into ``demo_out/``:
    faces.png        one clean dial per archetype at three readings
    corruptions.png  the same dial under each corruption at rising severity
"""
from pathlib import Path

import numpy as np
from PIL import Image

from meterlab import dialgen

OUT = Path("demo_out")
OUT.mkdir(exist_ok=True)
SIZE = 128

specs = dialgen.default_specs()

# Each archetype at its low end, midpoint and a near-full reading. The label
# follows the half-index grid, so the printed strings are what a model learns.
rows = []
for spec in specs:
    grid = spec.reading_grid()
    picks = [grid[2], grid[len(grid) // 2], grid[-3]]
    tiles = [dialgen.render_dial(spec, r, render_seed=spec.archetype_id, size=SIZE) for r in picks]
    print(f"meter_{spec.archetype_id}  range {spec.range_min:g}-{spec.range_max:g}  "
          f"index {spec.index_value:g}  labels {[dialgen.format_label(r, spec) for r in picks]}")
    rows.append(np.concatenate(tiles, axis=1))
Image.fromarray(np.concatenate(rows, axis=0)).save(OUT / "faces.png")

# Corruptions are pure functions of (image, kind, severity, seed), so the same
# call always gives the same pixels.
base = dialgen.render_dial(specs[0], 6.4, render_seed=0, size=SIZE)
rows = []
for kind in dialgen.CORRUPTION_KINDS:
    tiles = [dialgen.apply_corruption(base, dialgen.CorruptionSpec(kind, s, seed=7)) for s in (0.2, 0.5, 0.8)]
    rows.append(np.concatenate([base, *tiles], axis=1))
Image.fromarray(np.concatenate(rows, axis=0)).save(OUT / "corruptions.png")
print(f"wrote {OUT / 'faces.png'} and {OUT / 'corruptions.png'}")
