"""Conventional versus additional criteria for empirical hyper-integration.

Runs the offline phase on a small problem, then compares the two criterion
sets over a range of integration-point budgets. The additional criteria
(stress and power on top of force and energy) are far more accurate at
small budgets; on the default desk configuration they also reach 1%
error with fewer points.

Run with ``python3 demos/02_hyper_criteria.py [ecm|eheim]``.
"""
import sys
from pathlib import Path

import numpy as np

from hyperfe2 import hyper, pipeline, rom
from hyperfe2.config import parse_config

mode = sys.argv[1] if len(sys.argv) > 1 else "ecm"
cfg = parse_config(Path(__file__).parent / "configs" / "small.json").with_overrides(mode=mode)
art = pipeline.run_offline(cfg)
print(f"offline: {len(art.paths)} training paths, {art.basis.n_modes} modes, "
      f"{art.micro.disc.n_points} integration points per RVE")

for crit in ("conventional", "additional"):
    tm = hyper.build_unified_training_matrix(art.snapshots, crit, mode)
    frac = rom.cumulative_energy(hyper.singular_values(tm))
    print(f"{crit:>12}: {tm.x.shape[0]} rows, 90% of the spectrum in {int(np.searchsorted(frac, 0.9)) + 1} values")

rep = pipeline.run_study(cfg, art=art)
ec, ea = rep.errors("conventional"), rep.errors("additional")
print("\n  m   conventional   additional")
for m in sorted(ec):
    print(f"{m:>3}   {ec[m]:12.3e}   {ea[m]:10.3e}")
print("smallest m below 1% error:", {c: rep.minimal_m(c) for c in ("conventional", "additional")})
