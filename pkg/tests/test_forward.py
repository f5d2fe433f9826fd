import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.optimize import brentq
from scipy.signal import hilbert

from ubdiff.data import VelocityMap
from ubdiff.errors import CFLError
from ubdiff.forward import (AcquisitionGeometry, SolverConfig, _Grid, check_cfl, forward_corpus,
                            max_stable_dt, propagate, ricker, simulate, wavefield_energy)
from ubdiff.velocity import FAMILIES, gen_corpus

GEOM = AcquisitionGeometry.surface(32)
CFG = SolverConfig()
WAV = ricker(15.0, 1e-3, 256)


def envelope_peak(trace):
    return int(np.abs(hilbert(np.asarray(trace, dtype=np.float64))).argmax())


def test_ricker_peak_and_zero_mean():
    w = ricker(15.0, 1e-3, 256)
    k0 = int(round(w.t0 / w.dt))
    assert w.samples[k0] == pytest.approx(1.0, abs=1e-12)
    assert w.samples.max() == w.samples[k0]
    assert abs(w.samples.mean()) < 1e-3
    assert abs(trapezoid(w.samples, dx=w.dt)) < 1e-3 * w.dt * len(w)


def test_ricker_zero_crossings():
    f0, dt = 15.0, 1e-3
    w = ricker(f0, dt, 256)
    t0 = 1.5 / f0
    closed = lambda t: (1 - 2 * (math.pi * f0 * (t - t0)) ** 2) * math.exp(-(math.pi * f0 * (t - t0)) ** 2)
    half = 1.0 / (math.pi * f0 * math.sqrt(2.0))
    roots = [brentq(closed, t0 - 0.03, t0), brentq(closed, t0, t0 + 0.03)]
    np.testing.assert_allclose(roots, [t0 - half, t0 + half], atol=1e-10)
    # sign changes of the sampled wavelet near the main lobe, located by linear interpolation
    s = w.samples
    t = np.arange(len(s)) * dt
    found = []
    for k in range(len(s) - 1):
        if abs(t[k] - t0) < 0.03 and s[k] * s[k + 1] < 0:
            found.append(t[k] - s[k] * dt / (s[k + 1] - s[k]))
    np.testing.assert_allclose(found, roots, atol=0.05 * dt)


def test_ricker_too_short():
    with pytest.raises(ValueError):
        ricker(15.0, 1e-3, 100)


def test_cfl_bound_value():
    assert max_stable_dt(4500.0, 10.0, 0.9) == pytest.approx(1.414e-3, rel=1e-3)
    vel = VelocityMap(np.full((32, 32), 4500.0), 10.0)
    check_cfl(vel, SolverConfig(dt=1.41e-3))
    with pytest.raises(CFLError) as exc:
        check_cfl(vel, SolverConfig(dt=1.5e-3))
    assert exc.value.dt_max == pytest.approx(max_stable_dt(4500.0, 10.0, 0.9))
    assert "0.00141421" in str(exc.value)


def test_cfl_homogeneous_slow_passes():
    check_cfl(VelocityMap(np.full((32, 32), 1500.0)), SolverConfig(dt=1e-5))


def test_zero_wavelet_gives_zero_gather():
    vel = gen_corpus("flatvel", 1, seed=3)[0]
    g = simulate(vel, GEOM, WAV.scaled(0.0), CFG)
    assert not np.any(g.traces)


def test_linearity():
    vel = gen_corpus("curvefault", 1, seed=4)[0]
    other = ricker(22.0, 1e-3, 256)
    a = simulate(vel, GEOM, WAV, CFG).traces.astype(np.float64)
    b = simulate(vel, GEOM, other, CFG).traces.astype(np.float64)
    combo = type(WAV)(1.7 * WAV.samples - 0.6 * other.samples, WAV.dt)
    c = simulate(vel, GEOM, combo, CFG).traces.astype(np.float64)
    expect = 1.7 * a - 0.6 * b
    assert np.linalg.norm(c - expect) <= 1e-6 * np.linalg.norm(expect)
    d = simulate(vel, GEOM, WAV.scaled(2.0), CFG).traces.astype(np.float64)
    assert np.linalg.norm(d - 2 * a) <= 1e-6 * np.linalg.norm(2 * a)


def test_gather_shape_and_determinism():
    vel = gen_corpus("flatvel", 1, seed=5)[0]
    a, b = simulate(vel, GEOM, WAV, CFG), simulate(vel, GEOM, WAV, CFG)
    assert a.traces.shape == (3, 256, 32)
    assert a.traces.tobytes() == b.traces.tobytes()


@pytest.mark.parametrize("offset_cells", [20, 40, 60])
def test_direct_wave_arrival(offset_cells):
    # fine grid (5 m) keeps grid dispersion below one sample over 300 m
    v, dx, dt = 3000.0, 5.0, 1e-3
    n, src = 96, 16
    cfg = SolverConfig(dt=dt, nt=300, sponge_width=20)
    wav = ricker(15.0, dt, cfg.nt)
    geom = AcquisitionGeometry.surface(n, [src], receiver_cols=[src + offset_cells])
    tr = simulate(VelocityMap(np.full((n, n), v), dx), geom, wav, cfg).traces[0, :, 0]
    expect = (offset_cells * dx / v + wav.t0) / dt
    assert abs(envelope_peak(tr) - expect) <= 2


def test_reflection_two_way_time():
    """Co-located source/receiver, interface 160 m below the free surface.

    The free surface is the zero-pressure ghost row one cell above row 0, so
    an interface between rows ``ki`` and ``ki+1`` lies ``(ki + 1.5) * dx`` below it.
    """
    v_top, v_bot, h, dt = 3000.0, 2000.0, 160.0, 1e-3
    n, ki = 64, 30
    dx = h / (ki + 1.5)
    cfg = SolverConfig(dt=dt, nt=300, sponge_width=20)
    wav = ricker(15.0, dt, cfg.nt)
    geom = AcquisitionGeometry.surface(n, [n // 2], receiver_cols=[n // 2])
    grid = np.full((n, n), v_top)
    grid[ki + 1:] = v_bot
    layered = simulate(VelocityMap(grid, dx), geom, wav, cfg).traces[0, :, 0].astype(np.float64)
    direct = simulate(VelocityMap(np.full((n, n), v_top), dx), geom, wav, cfg).traces[0, :, 0]
    expect = (2 * h / v_top + wav.t0) / dt
    assert expect == pytest.approx(206.67, abs=0.01)
    assert abs(envelope_peak(layered - direct) - expect) <= 2


def test_energy_non_increasing_after_source():
    vel = gen_corpus("curvevel", 1, seed=9)[0]
    cfg = SolverConfig(nt=400)
    wav = ricker(15.0, 1e-3, 400)
    quiet = int(2 * wav.t0 / cfg.dt) + 5
    prev = None
    for k, p_prev, p, grid in propagate(vel, GEOM, wav, cfg):
        if k == 0:
            continue
        e = wavefield_energy(p_prev, p, grid, vel.spacing, cfg.dt)
        if k > quiet and prev is not None:
            assert np.all(e <= prev * (1 + 1e-3))
        prev = e
    assert np.all(prev < 0.5 * wavefield_energy(*_at_step(vel, wav, cfg, quiet), vel.spacing, cfg.dt))


def _at_step(vel, wav, cfg, step):
    for k, p_prev, p, grid in propagate(vel, GEOM, wav, cfg):
        if k == step:
            return p_prev, p, grid


def test_stability_over_50_maps():
    maps = [m for fam in FAMILIES for m in gen_corpus(fam, 13, seed=100)][:50]
    for g in forward_corpus(maps, GEOM, WAV, CFG):
        assert np.all(np.isfinite(g.traces)) and np.abs(g.traces).max() < 1e3


def test_forward_corpus_contracts():
    maps = gen_corpus("flatfault", 3, seed=20)
    one = forward_corpus(maps[:1], GEOM, WAV, CFG)[0]
    assert one.traces.tobytes() == simulate(maps[0], GEOM, WAV, CFG).traces.tobytes()
    fwd = forward_corpus(maps, GEOM, WAV, CFG)
    rev = forward_corpus(maps[::-1], GEOM, WAV, CFG)
    for a, b in zip(fwd, rev[::-1]):
        assert a.traces.tobytes() == b.traces.tobytes()
    par = forward_corpus(maps, GEOM, WAV, CFG, workers=2)
    for a, b in zip(fwd, par):
        assert a.traces.tobytes() == b.traces.tobytes()


def test_forward_corpus_errors_name_sample():
    maps = gen_corpus("flatvel", 2, seed=1)
    fast = VelocityMap(np.full((32, 32), 9000.0))
    with pytest.raises(CFLError, match="sample 1"):
        forward_corpus([maps[0], fast], GEOM, WAV, CFG)
    with pytest.raises(ValueError):
        forward_corpus([maps[0], VelocityMap(np.full((16, 16), 2000.0))], GEOM, WAV, CFG)


def test_geometry_validation():
    vel = gen_corpus("flatvel", 1, seed=1)[0]
    with pytest.raises(ValueError):
        simulate(vel, AcquisitionGeometry.surface(40), WAV, CFG)
    with pytest.raises(ValueError):
        _Grid(vel, SolverConfig(sponge_width=40))
