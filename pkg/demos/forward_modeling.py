"""Synthesize one map per family, model its gather and write heatmaps.

    python demos/forward_modeling.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from ubdiff.data import DatasetManifest, NormalizationSpec, PairedSample, save_dataset
from ubdiff.forward import AcquisitionGeometry, SolverConfig, ricker, simulate
from ubdiff.plot import plot_samples
from ubdiff.velocity import FAMILIES, generate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_forward")
geom, wav, cfg = AcquisitionGeometry.surface(32), ricker(15.0, 1e-3, 256), SolverConfig()

samples = []
for i, fam in enumerate(FAMILIES):
    vel = generate(fam, None, seed=7)
    gather = simulate(vel, geom, wav, cfg)
    print(f"{fam:11s} v in [{vel.grid.min():.0f}, {vel.grid.max():.0f}] m/s, "
          f"peak |p| {np.abs(gather.traces).max():.3e}")
    samples.append(PairedSample(i, vel.grid.astype(np.float32), gather.traces))

ids = list(range(len(samples)))
man = DatasetManifest("velocity", ids, ids, seed=7,
                      normalization={"velocity": NormalizationSpec.fit([np.stack([s.ma for s in samples])])})
save_dataset(samples, man, out / "data")
for p in plot_samples(out / "data", ids, out / "png"):
    print("wrote", p)
