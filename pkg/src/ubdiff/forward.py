"""2-D constant-density acoustic finite-difference modeling.

Second order in space and time. The model is padded by ``sponge_width``
cells on the left, right and bottom (edge velocities replicated) where a
damping term ``2*eta*dp/dt`` absorbs outgoing energy; the top edge is a
pressure-release free surface. Sources are fired independently and
vectorized along a leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import SeismicGather, VelocityMap
from .errors import CFLError, NumericalError

SQRT2 = math.sqrt(2.0)


@dataclass
class Wavelet:
    samples: np.ndarray
    dt: float
    f0: float | None = None
    t0: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("wavelet samples must be finite")

    def __len__(self):
        return len(self.samples)

    def scaled(self, factor: float) -> "Wavelet":
        return Wavelet(self.samples * factor, self.dt, self.f0, self.t0)


def ricker(f0: float, dt: float, nt: int) -> Wavelet:
    """Ricker wavelet delayed by ``t0 = 1.5 / f0`` so the peak (1.0) sits at t0."""
    if f0 <= 0 or dt <= 0:
        raise ValueError("f0 and dt must be positive")
    t0 = 1.5 / f0
    if nt * dt < 2 * t0:
        raise ValueError(f"nt*dt={nt * dt:.4g} s cannot hold the main lobe (needs >= {2 * t0:.4g} s)")
    arg = (math.pi * f0 * (np.arange(nt) * dt - t0)) ** 2
    return Wavelet((1.0 - 2.0 * arg) * np.exp(-arg), dt=dt, f0=f0, t0=t0)


@dataclass
class AcquisitionGeometry:
    """Grid-index positions of sources and receivers.

    Defaults (filled by :meth:`surface`) put receivers on every column of the
    surface row.
    """

    source_positions: list
    receiver_positions: list
    surface_row: int = 0

    @classmethod
    def surface(cls, width: int, source_cols: Sequence[int] = (4, 16, 27),
                receiver_cols: Sequence[int] | None = None, row: int = 0) -> "AcquisitionGeometry":
        receiver_cols = range(width) if receiver_cols is None else receiver_cols
        return cls([(row, int(c)) for c in source_cols], [(row, int(c)) for c in receiver_cols], row)

    def validate(self, shape: tuple) -> None:
        h, w = shape
        for kind, pts in (("source", self.source_positions), ("receiver", self.receiver_positions)):
            if not pts:
                raise ValueError(f"no {kind} positions")
            for r, c in pts:
                if not (0 <= r < h and 0 <= c < w):
                    raise ValueError(f"{kind} position {(r, c)} outside grid {shape}")
                if r != self.surface_row:
                    raise ValueError(f"{kind} position {(r, c)} not on surface row {self.surface_row}")

    def offset(self, src: int, rec: int, spacing: float) -> float:
        (r0, c0), (r1, c1) = self.source_positions[src], self.receiver_positions[rec]
        return spacing * math.hypot(r1 - r0, c1 - c0)


@dataclass
class SolverConfig:
    dt: float = 1e-3
    nt: int = 256
    sponge_width: int = 16
    sponge_strength: float = 0.08
    cfl_safety: float = 0.9
    order: int = field(default=2, repr=False)

    def __post_init__(self):
        if self.order != 2:
            raise ValueError("only the 2nd-order stencil is implemented")
        if self.dt <= 0 or self.nt < 1:
            raise ValueError("dt must be positive and nt >= 1")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must be in (0, 1]")


def max_stable_dt(v_max: float, spacing: float, cfl_safety: float) -> float:
    return cfl_safety * spacing / (v_max * SQRT2)


def check_cfl(vel: VelocityMap, cfg: SolverConfig) -> None:
    """Raise :class:`CFLError` (carrying the admissible dt) if ``cfg.dt`` is unstable."""
    dt_max = max_stable_dt(float(vel.grid.max()), vel.spacing, cfg.cfl_safety)
    if cfg.dt > dt_max:
        raise CFLError(cfg.dt, dt_max)


def _damping_profile(shape: tuple, width: int, strength: float) -> np.ndarray:
    """Per-cell eta (dimensionless, per step) on the padded grid; zero inside the model."""
    hp, wp = shape
    eta = np.zeros(shape)
    if width == 0:
        return eta
    ramp = strength * ((np.arange(width, 0, -1)) / width) ** 2
    dist_x = np.zeros(wp)
    dist_x[:width] = ramp
    dist_x[wp - width:] = ramp[::-1]
    dist_z = np.zeros(hp)
    dist_z[hp - width:] = ramp[::-1]
    return np.maximum(dist_x[None, :], dist_z[:, None])


class _Grid:
    """Padded model and precomputed stencil coefficients."""

    def __init__(self, vel: VelocityMap, cfg: SolverConfig):
        h, w = vel.shape
        pad = cfg.sponge_width
        if pad >= max(h, w):
            raise ValueError("sponge_width must be smaller than the grid")
        self.pad = pad
        vp = np.pad(vel.grid.astype(np.float64), ((0, pad), (pad, pad)), mode="edge")
        self.vel = vp
        self.courant2 = (vp * cfg.dt / vel.spacing) ** 2
        self.eta = _damping_profile(vp.shape, pad, cfg.sponge_strength)
        self.shape = vp.shape

    def index(self, pos) -> tuple:
        r, c = pos
        return r, c + self.pad


def _laplacian(p: np.ndarray) -> np.ndarray:
    """Unscaled 5-point Laplacian; zero pressure outside the padded grid."""
    lap = -4.0 * p
    lap[..., 1:, :] += p[..., :-1, :]
    lap[..., :-1, :] += p[..., 1:, :]
    lap[..., :, 1:] += p[..., :, :-1]
    lap[..., :, :-1] += p[..., :, 1:]
    return lap


def propagate(vel: VelocityMap, geom: AcquisitionGeometry, wav: Wavelet,
              cfg: SolverConfig) -> Iterator[tuple[int, np.ndarray, np.ndarray, "_Grid"]]:
    """Yield ``(k, p_prev, p)`` after each update; ``p`` is the field at time k*dt.

    Fields have shape (n_sources, padded_h, padded_w). Mainly for diagnostics
    (energy, snapshots); :func:`simulate` is the normal entry point.
    """
    check_cfl(vel, cfg)
    geom.validate(vel.shape)
    grid = _Grid(vel, cfg)
    n_src = len(geom.source_positions)
    p_prev = np.zeros((n_src,) + grid.shape)
    p = np.zeros_like(p_prev)
    src_idx = [grid.index(s) for s in geom.source_positions]
    rows = np.array([r for r, _ in src_idx])
    cols = np.array([c for _, c in src_idx])
    inj = grid.courant2[rows, cols]
    which = np.arange(n_src)
    w = np.zeros(cfg.nt)
    m = min(cfg.nt, len(wav))
    w[:m] = wav.samples[:m]
    eta = grid.eta
    denom = 1.0 + eta
    yield 0, p_prev, p, grid
    for k in range(cfg.nt - 1):
        p_next = 2.0 * p - (1.0 - eta) * p_prev + grid.courant2 * _laplacian(p)
        p_next[which, rows, cols] += inj * w[k]
        p_next /= denom
        if not np.isfinite(p_next).all():
            raise NumericalError(f"non-finite pressure at step {k + 1}")
        p_prev, p = p, p_next
        yield k + 1, p_prev, p, grid


def simulate(vel: VelocityMap, geom: AcquisitionGeometry, wav: Wavelet,
             cfg: SolverConfig) -> SeismicGather:
    """Model one shot gather per source; returns traces shaped (S, nt, R)."""
    rec_idx = None
    traces = None
    for k, _, p, grid in propagate(vel, geom, wav, cfg):
        if traces is None:
            rec_idx = tuple(np.array(a) for a in zip(*(grid.index(r) for r in geom.receiver_positions)))
            traces = np.zeros((p.shape[0], cfg.nt, len(rec_idx[0])))
        traces[:, k, :] = p[:, rec_idx[0], rec_idx[1]]
    return SeismicGather(traces.astype(np.float32), dt=cfg.dt)


def wavefield_energy(p_prev: np.ndarray, p: np.ndarray, grid: "_Grid", spacing: float,
                     dt: float) -> np.ndarray:
    """Discrete energy at the half step between ``p_prev`` and ``p``, per source.

    Kinetic part uses the time difference, potential part the product of
    neighbouring gradients; for the damped leapfrog scheme this quantity is
    non-increasing once the source is silent.
    """
    kinetic = ((p - p_prev) ** 2 / (grid.vel * dt) ** 2).sum(axis=(-2, -1))

    def grads(f):
        # zero-pressure ghosts on every edge
        fz = np.diff(f, axis=-2, prepend=0.0, append=0.0)
        fx = np.diff(f, axis=-1, prepend=0.0, append=0.0)
        return fz, fx

    az, ax = grads(p)
    bz, bx = grads(p_prev)
    potential = ((az * bz).sum(axis=(-2, -1)) + (ax * bx).sum(axis=(-2, -1))) / spacing ** 2
    return kinetic + potential


def forward_corpus(vels: Sequence[VelocityMap], geom: AcquisitionGeometry, wav: Wavelet,
                   cfg: SolverConfig, workers: int = 1) -> list[SeismicGather]:
    """Apply :func:`simulate` to every map, preserving order."""
    shapes = {v.shape for v in vels}
    if len(shapes) > 1:
        raise ValueError(f"velocity maps differ in shape: {sorted(shapes)}")

    if workers > 1 and len(vels) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_simulate_star, [(i, v, geom, wav, cfg) for i, v in enumerate(vels)],
                                 chunksize=max(1, len(vels) // (4 * workers))))
    return [_simulate_star((i, v, geom, wav, cfg)) for i, v in enumerate(vels)]


def _simulate_star(args):
    i, vel, geom, wav, cfg = args
    try:
        return simulate(vel, geom, wav, cfg)
    except CFLError as exc:
        exc.args = (f"sample {i}: {exc}",)
        raise
    except NumericalError as exc:
        raise NumericalError(f"sample {i}: {exc}") from exc
