"""Procedural layered velocity models: flat, curved and faulted families.

Every generator is a pure function of ``(params, seed)``. Random draws
happen in a fixed order (layer structure first, then curvature, then the
fault) so that a zero curvature amplitude or zero throw reproduces the
simpler family exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import VelocityMap

FAMILIES = ("flatvel", "curvevel", "flatfault", "curvefault")


@dataclass(frozen=True)
class LayerModelParams:
    n_layers_range: tuple = (2, 5)
    v_top_range: tuple = (1500.0, 2500.0)
    v_increment_range: tuple = (200.0, 800.0)
    curvature_amplitude: int = 0
    fault_throw_range: tuple = (0, 0)
    fault_dip_range: tuple = (60.0, 90.0)
    size: int = 32
    spacing: float = 10.0
    min_thickness: int = 2
    v_min: float = 1000.0
    v_max: float = 6000.0

    def validate(self) -> None:
        lo, hi = self.n_layers_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad n_layers_range {self.n_layers_range}")
        if self.v_top_range[0] <= 0 or self.v_top_range[0] > self.v_top_range[1]:
            raise ValueError(f"bad v_top_range {self.v_top_range}")
        if self.v_increment_range[0] < 0 or self.v_increment_range[0] > self.v_increment_range[1]:
            raise ValueError("velocity increments must be non-negative (non-decreasing with depth)")
        h = self.size
        if not 0 <= self.curvature_amplitude < h:
            raise ValueError("curvature_amplitude must be in [0, size)")
        t_lo, t_hi = self.fault_throw_range
        if not 0 <= t_lo <= t_hi < h:
            raise ValueError("fault throws must satisfy 0 <= min <= max < size")
        d_lo, d_hi = self.fault_dip_range
        if not 0 < d_lo <= d_hi <= 90:
            raise ValueError("fault dips must lie in (0, 90] degrees")
        room = h - 2 - self.curvature_amplitude
        if (hi - 1) * self.min_thickness > room:
            raise ValueError(f"{hi} layers of thickness {self.min_thickness} do not fit in {h} rows")
        v_hi = self.v_top_range[1] + (hi - 1) * self.v_increment_range[1]
        if self.v_top_range[0] < self.v_min or v_hi > self.v_max:
            raise ValueError(f"velocities can reach [{self.v_top_range[0]}, {v_hi}], "
                             f"outside [{self.v_min}, {self.v_max}]")


DEFAULT_PARAMS = {
    "flatvel": LayerModelParams(),
    "curvevel": LayerModelParams(curvature_amplitude=6),
    "flatfault": LayerModelParams(fault_throw_range=(3, 8)),
    "curvefault": LayerModelParams(curvature_amplitude=6, fault_throw_range=(3, 8)),
}


def _sample_layers(params: LayerModelParams, rng: np.random.Generator):
    n = int(rng.integers(params.n_layers_range[0], params.n_layers_range[1] + 1))
    v_top = rng.uniform(*params.v_top_range)
    incs = rng.uniform(*params.v_increment_range, size=n - 1)
    velocities = v_top + np.concatenate([[0.0], np.cumsum(incs)])
    # n-1 interface rows in [1, size-1-amp] with spacing >= min_thickness
    k = n - 1
    g = params.min_thickness
    top, bottom = 1 + g - 1, params.size - 1 - params.curvature_amplitude - (g - 1)
    span = bottom - top + 1 - (k - 1) * (g - 1)
    picks = np.sort(rng.choice(span, size=k, replace=False)) if k else np.zeros(0, int)
    depths = top + picks + np.arange(k) * (g - 1)
    return velocities, depths.astype(int)


def _curve(params: LayerModelParams, rng: np.random.Generator) -> np.ndarray:
    """Integer downward offset per column, within [0, curvature_amplitude]."""
    w = params.size
    n_waves = int(rng.integers(1, 4))
    freqs = rng.uniform(0.3, 1.5, size=n_waves)
    phases = rng.uniform(0, 2 * math.pi, size=n_waves)
    weights = rng.uniform(0.3, 1.0, size=n_waves)
    strength = rng.uniform(0.5, 1.0)
    amp = params.curvature_amplitude
    if amp == 0:
        return np.zeros(w, dtype=int)
    x = np.arange(w) / w
    s = sum(a * np.sin(2 * math.pi * f * x + p) for a, f, p in zip(weights, freqs, phases))
    s01 = (s - s.min()) / max(s.max() - s.min(), 1e-12)
    offset = strength * amp * s01
    # keep interfaces continuous: at most one row of change between columns
    steep = np.abs(np.diff(offset)).max()
    if steep > 1.0:
        offset = offset / steep
    return np.floor(offset).astype(int)


def _layered(params: LayerModelParams, rng: np.random.Generator, curved: bool) -> np.ndarray:
    p = params if curved else replace(params, curvature_amplitude=0)
    velocities, depths = _sample_layers(p, rng)
    offset = _curve(p, rng)
    grid = np.empty((params.size, params.size), dtype=np.float32)
    rows = np.arange(params.size)
    for c in range(params.size):
        layer = np.searchsorted(depths + offset[c], rows, side="right")
        grid[:, c] = velocities[layer]
    return grid


def gen_flat(params: LayerModelParams, seed: int) -> VelocityMap:
    """Horizontal layers, velocity non-decreasing with depth."""
    params.validate()
    rng = np.random.default_rng(seed)
    return VelocityMap(_layered(params, rng, curved=False), params.spacing)


def gen_curved(params: LayerModelParams, seed: int) -> VelocityMap:
    """Layers whose interfaces share one smooth curve (sum of 1-3 sinusoids)."""
    params.validate()
    rng = np.random.default_rng(seed)
    return VelocityMap(_layered(params, rng, curved=True), params.spacing)


def apply_fault(grid: np.ndarray, throw: int, dip_deg: float, col: float,
                pivot_row: float | None = None) -> np.ndarray:
    """Shift cells right of a dipping line down by ``throw`` rows.

    The line passes through ``(pivot_row, col)`` and leans right with depth
    for dips below 90 degrees. Cells exposed at the top take the top-row value
    of their own column.
    """
    h, w = grid.shape
    if throw == 0:
        return grid.copy()
    pivot_row = h / 2 if pivot_row is None else pivot_row
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    cot = 0.0 if dip_deg >= 90 else 1.0 / math.tan(math.radians(dip_deg))
    line = col + (rows - pivot_row) * cot
    moved = cols > line
    src = np.clip(rows - throw, 0, h - 1)
    shifted = np.take_along_axis(grid, np.broadcast_to(src, (h, w)), axis=0)
    return np.where(moved, shifted, grid).astype(grid.dtype)


def gen_faulted(params: LayerModelParams, seed: int, *, throw: int | None = None,
                dip: float | None = None, col: float | None = None) -> VelocityMap:
    """Layered map (flat or curved per ``curvature_amplitude``) cut by one fault.

    ``throw``/``dip``/``col`` override the sampled values, which is how the
    zero-throw and vertical-fault cases are exercised.
    """
    params.validate()
    if throw is None and params.fault_throw_range[1] < 1:
        raise ValueError("fault_throw_range max must be >= 1 for faulted maps")
    rng = np.random.default_rng(seed)
    grid = _layered(params, rng, curved=True)
    h = params.size
    for _ in range(_FAULT_TRIES):
        t = int(rng.integers(params.fault_throw_range[0], params.fault_throw_range[1] + 1))
        d = float(rng.uniform(*params.fault_dip_range))
        cot = 0.0 if d >= 90 else 1.0 / math.tan(math.radians(d))
        # keep the whole line within columns [2, W-3]
        drift = cot * h / 2
        lo, hi = 2 + drift, h - 3 - drift
        c = float(rng.uniform(lo, hi)) if hi > lo else h / 2
        t = t if throw is None else throw
        d = d if dip is None else dip
        c = c if col is None else col
        cut = apply_fault(grid, t, d, c)
        overridden = throw is not None or dip is not None or col is not None
        if overridden or t == 0 or _has_offset(cut):
            break
    return VelocityMap(cut, params.spacing)


_FAULT_TRIES = 20


def _has_offset(grid: np.ndarray) -> bool:
    """True when some interface jumps by more than one row between neighbouring columns.

    A dipping cut through a curved interface can spread its throw into
    one-row steps that look like curvature; such draws are redrawn.
    """
    steps = np.diff(grid, axis=0) != 0
    prev = None
    for c in range(grid.shape[1]):
        rows = np.flatnonzero(steps[:, c])
        if prev is not None and (len(rows) != len(prev) or np.any(np.abs(rows - prev) > 1)):
            return True
        prev = rows
    return False


_GENERATORS = {
    "flatvel": gen_flat,
    "curvevel": gen_curved,
    "flatfault": gen_faulted,
    "curvefault": gen_faulted,
}


def generate(family: str, params: LayerModelParams | None, seed: int) -> VelocityMap:
    if family not in _GENERATORS:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    params = DEFAULT_PARAMS[family] if params is None else params
    return _GENERATORS[family](params, seed)


def gen_corpus(family: str, count: int, params: LayerModelParams | None = None,
               seed: int = 0) -> list[VelocityMap]:
    """``count`` maps; sample ``i`` uses seed ``seed + i`` and nothing else."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate(family, params, seed + i) for i in range(count)]
