"""Heatmap PNGs of dataset samples.

Rendering goes through a matplotlib colormap into a PIL image, with no
figure machinery, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .data import load_dataset


def _to_png(arr: np.ndarray, lo: float, hi: float, cmap: str, path: Path, zoom=(1, 1)) -> None:
    x = np.clip((np.asarray(arr, dtype=np.float64) - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgb = (colormaps[cmap](x)[..., :3] * 255).round().astype(np.uint8)
    rgb = np.repeat(np.repeat(rgb, zoom[0], axis=0), zoom[1], axis=1)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def plot_samples(dataset, indices, out) -> list[Path]:
    """One velocity image per sample plus one per seismic source when the sample has a gather.

    Colour limits are shared per modality across the selected samples:
    min/max for velocity, a symmetric range at the 99th percentile of
    ``|amplitude|`` for seismic (the direct wave would otherwise wash out
    everything else).
    """
    samples, man = load_dataset(dataset)
    n = len(samples)
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"sample index {i} out of range for a dataset of {n} samples")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    vel_mod = "velocity"
    chosen = [samples[i] for i in indices]

    def get(s, mod):
        if mod == man.majority_modality:
            return s.ma
        return s.mi

    vels = [get(s, vel_mod) for s in chosen]
    gathers = [get(s, "seismic") for s in chosen]
    vv = [v for v in vels if v is not None]
    gg = [g for g in gathers if g is not None]
    written = []
    if vv:
        lo, hi = float(min(v.min() for v in vv)), float(max(v.max() for v in vv))
    if gg:
        amp = float(np.percentile(np.abs(np.concatenate([g.ravel() for g in gg])), 99)) or 1.0
    for i, v, g in zip(indices, vels, gathers):
        sid = samples[i].id
        if v is not None:
            p = out / f"sample_{sid}_velocity.png"
            _to_png(v, lo, hi, "viridis", p, zoom=(8, 8))
            written.append(p)
        if g is not None:
            for k in range(g.shape[0]):
                p = out / f"sample_{sid}_seismic_src{k}.png"
                _to_png(g[k], -amp, amp, "seismic", p, zoom=(1, 4))
                written.append(p)
    return written
