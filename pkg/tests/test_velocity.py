import hashlib
from dataclasses import replace

import numpy as np
import pytest

from ubdiff.velocity import (DEFAULT_PARAMS, LayerModelParams, apply_fault, gen_corpus, gen_curved,
                             gen_faulted, gen_flat, generate)


# independent scan oracles ---------------------------------------------------

def runs_per_column(grid):
    """Number of contiguous constant-value runs in each column."""
    out = []
    for c in range(grid.shape[1]):
        col = grid[:, c]
        runs = 1
        for r in range(1, len(col)):
            if col[r] != col[r - 1]:
                runs += 1
        out.append(runs)
    return out


def interface_rows(grid):
    """Per column, the list of rows where the value changes from the row above."""
    return [[r for r in range(1, grid.shape[0]) if grid[r, c] != grid[r - 1, c]] for c in range(grid.shape[1])]


def classify(grid):
    """flat / curved / faulted from the scan alone."""
    if all(np.array_equal(grid[:, 0], grid[:, c]) for c in range(grid.shape[1])):
        return "flat"
    rows = interface_rows(grid)
    for a, b in zip(rows, rows[1:]):
        if len(a) != len(b) or any(abs(x - y) > 1 for x, y in zip(a, b)):
            return "faulted"
    return "curved"


def shift_down(grid, throw, cols):
    out = grid.copy()
    for c in cols:
        for r in range(grid.shape[0]):
            out[r, c] = grid[max(r - throw, 0), c]
    return out


# -----------------------------------------------------------------------------

def test_single_layer_is_constant():
    p = replace(DEFAULT_PARAMS["flatvel"], n_layers_range=(1, 1), v_top_range=(2000.0, 2000.0))
    g = gen_flat(p, seed=3).grid
    assert np.all(g == 2000.0)


def test_three_layers_three_runs_each_column():
    p = replace(DEFAULT_PARAMS["flatvel"], n_layers_range=(3, 3))
    for seed in range(10):
        assert runs_per_column(gen_flat(p, seed).grid) == [3] * 32


def test_flat_rows_constant_and_monotone_100_seeds():
    p = DEFAULT_PARAMS["flatvel"]
    for seed in range(100):
        g = gen_flat(p, seed).grid
        assert np.all(g == g[:, :1])
        assert np.all(np.diff(g, axis=0) >= 0)
        assert g.min() >= p.v_min and g.max() <= p.v_max


def test_curved_zero_amplitude_equals_flat():
    p = DEFAULT_PARAMS["flatvel"]
    for seed in range(5):
        assert np.array_equal(gen_curved(p, seed).grid, gen_flat(p, seed).grid)


def test_curved_run_count_and_excursion():
    p = replace(DEFAULT_PARAMS["curvevel"], n_layers_range=(4, 4))
    for seed in range(50):
        g = gen_curved(p, seed).grid
        assert runs_per_column(g) == [4] * 32
        assert np.all(np.diff(g, axis=0) >= 0)
        rows = np.array(interface_rows(g))  # (cols, interfaces)
        excursion = rows.max(axis=0) - rows.min(axis=0)
        assert np.all(excursion <= p.curvature_amplitude)


def test_fault_zero_throw_is_identity():
    p = DEFAULT_PARAMS["flatfault"]
    for seed in range(5):
        base = gen_faulted(p, seed, throw=0).grid
        assert np.array_equal(base, gen_faulted(p, seed, throw=0, dip=70.0).grid)
        assert np.array_equal(apply_fault(base, 0, 80.0, 10.0), base)


def test_vertical_fault_shift_matches_oracle():
    p = DEFAULT_PARAMS["flatfault"]
    for seed in range(10):
        base = gen_faulted(p, seed, throw=0).grid
        cut = gen_faulted(p, seed, throw=4, dip=90.0, col=15.5).grid
        assert np.array_equal(cut, shift_down(base, 4, range(16, 32)))
        assert np.array_equal(cut[:, :16], base[:, :16])


def test_fault_preserves_value_set():
    for fam in ("flatfault", "curvefault"):
        p = DEFAULT_PARAMS[fam]
        for seed in range(50):
            base = gen_faulted(p, seed, throw=0).grid
            cut = gen_faulted(p, seed).grid
            assert set(np.unique(cut)) == set(np.unique(base))


def test_faulted_requires_throw():
    with pytest.raises(ValueError):
        gen_faulted(DEFAULT_PARAMS["flatvel"], 0)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        gen_flat(LayerModelParams(v_increment_range=(-10.0, 5.0)), 0)
    with pytest.raises(ValueError):
        gen_flat(LayerModelParams(curvature_amplitude=40), 0)
    with pytest.raises(ValueError):
        generate("stylevel", None, 0)


def test_corpus_checksum_reproducible_and_per_sample_seeded():
    def digest(maps):
        h = hashlib.sha256()
        for m in maps:
            h.update(m.grid.tobytes())
        return h.hexdigest()

    a = gen_corpus("flatvel", 2000, seed=11)
    b = gen_corpus("flatvel", 2000, seed=11)
    assert digest(a) == digest(b)
    assert np.array_equal(generate("flatvel", None, 11 + 1234).grid, a[1234].grid)


def test_family_separability():
    expected = {"flatvel": "flat", "curvevel": "curved", "flatfault": "faulted", "curvefault": "faulted"}
    for fam, label in expected.items():
        maps = gen_corpus(fam, 100, seed=500)
        assert [classify(m.grid) for m in maps] == [label] * 100, fam
