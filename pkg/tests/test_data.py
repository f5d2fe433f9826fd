import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ubdiff.data import (DatasetManifest, NormalizationSpec, PairedSample, denormalize, load_dataset,
                         load_tensors, modality_arrays, normalize, read_manifest, save_dataset,
                         save_tensors, split_unbalanced)
from ubdiff.errors import DatasetError, MissingArtifactError


def _dataset(n=6, paired=(1, 4)):
    rng = np.random.default_rng(0)
    samples = [PairedSample(i, rng.standard_normal((4, 4)).astype(np.float32),
                            rng.standard_normal((2, 5, 4)).astype(np.float32) if i in paired else None)
               for i in range(n)]
    man = DatasetManifest("velocity", list(range(n)), list(paired), seed=3,
                          normalization={"velocity": NormalizationSpec(0.5, 2.0)})
    return samples, man


def test_velocity_only_dataset_layout(tmp_path):
    samples = [PairedSample(i, np.full((3, 3), i, np.float32)) for i in range(10)]
    man = DatasetManifest("velocity", list(range(10)), [], seed=0)
    save_dataset(samples, man, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.f32")) == sorted(f"vel_{i}.f32" for i in range(10))
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["paired_ids"] == [] and doc["dtype"] == "f32le"
    for key in ("version", "majority_modality", "shapes", "majority_ids", "normalization", "seed"):
        assert key in doc


def test_round_trip_bitwise(tmp_path):
    samples, man = _dataset()
    save_dataset(samples, man, tmp_path)
    back, man2 = load_dataset(tmp_path)
    assert man2.paired_ids == [1, 4] and man2.seed == 3
    assert man2.normalization["velocity"] == NormalizationSpec(0.5, 2.0)
    for a, b in zip(samples, back):
        assert a.id == b.id
        assert a.ma.tobytes() == b.ma.tobytes()
        assert (a.mi is None) == (b.mi is None)
        if a.mi is not None:
            assert a.mi.tobytes() == b.mi.tobytes()


def test_binary_is_raw_little_endian_row_major(tmp_path):
    samples, man = _dataset()
    save_dataset(samples, man, tmp_path)
    raw = np.frombuffer((tmp_path / "vel_2.f32").read_bytes(), dtype="<f4").reshape(4, 4)
    assert np.array_equal(raw, samples[2].ma)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_container_round_trip_any_float32(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt")
    save_tensors(path, {"x": arr}, {"note": 1})
    back, meta = load_tensors(path)
    assert back["x"].tobytes() == arr.tobytes() and meta["note"] == 1


def test_paired_ids_must_be_subset():
    with pytest.raises(DatasetError):
        DatasetManifest("velocity", [0, 1, 2], [5])


def test_shape_mismatch_names_sample(tmp_path):
    samples, man = _dataset()
    samples[3] = PairedSample(3, np.zeros((5, 4), np.float32))
    with pytest.raises(DatasetError, match="sample 3"):
        save_dataset(samples, man, tmp_path)


def test_pairing_disagreement_rejected(tmp_path):
    samples, man = _dataset()
    samples[0] = PairedSample(0, samples[0].ma, np.zeros((2, 5, 4), np.float32))
    with pytest.raises(DatasetError):
        save_dataset(samples, man, tmp_path)


def test_corrupted_manifest_names_file(tmp_path):
    samples, man = _dataset()
    save_dataset(samples, man, tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="manifest.json"):
        load_dataset(tmp_path)


def test_truncated_binary_names_tensor(tmp_path):
    samples, man = _dataset()
    save_dataset(samples, man, tmp_path)
    f = tmp_path / "seis_4.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DatasetError, match="seis_4"):
        load_dataset(tmp_path)


def test_missing_tensor_file(tmp_path):
    samples, man = _dataset()
    save_dataset(samples, man, tmp_path)
    (tmp_path / "vel_0.f32").unlink()
    with pytest.raises(MissingArtifactError):
        load_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_manifest(tmp_path)
    with pytest.raises(MissingArtifactError):
        load_tensors(tmp_path)


def test_split_deterministic():
    a = split_unbalanced(range(2000), 100, seed=7)
    b = split_unbalanced(range(2000), 100, seed=7)
    assert a.paired_ids == b.paired_ids and len(a.paired_ids) == 100
    assert set(a.paired_ids) <= set(a.majority_ids)
    assert split_unbalanced(range(2000), 100, seed=8).paired_ids != a.paired_ids


def test_split_edge_cases():
    full = split_unbalanced(range(10), 10, seed=1)
    assert full.paired_ids == list(range(10)) and full.n == full.m == 10
    none = split_unbalanced(range(10), 0, seed=1)
    assert none.paired_ids == [] and none.n == 0
    with pytest.raises(ValueError):
        split_unbalanced(range(10), 11, seed=1)


def test_split_is_roughly_uniform():
    counts = np.zeros(20)
    for s in range(2000):
        counts[split_unbalanced(range(20), 5, seed=s).paired_ids] += 1
    # each id expected 500 times; binomial sd is about 19
    assert np.all(np.abs(counts - 500) < 100)


def test_normalize_examples():
    spec = NormalizationSpec.from_range(1500.0, 4500.0)
    assert normalize(3000.0, spec) == 0.0
    assert normalize(1500.0, spec) == -1.0
    assert normalize(4500.0, spec) == 1.0


@given(arrays(np.float64, 20, elements=st.floats(1500, 4500)))
def test_normalize_round_trip(x):
    spec = NormalizationSpec.from_range(1500.0, 4500.0)
    y = normalize(x, spec)
    assert np.all(np.abs(y) <= 1.0)
    np.testing.assert_allclose(denormalize(y, spec), x, rtol=1e-6)


def test_non_positive_scale_rejected():
    with pytest.raises(ValueError):
        NormalizationSpec(0.0, 0.0)


def test_fit_symmetric_maps_zero_to_zero():
    spec = NormalizationSpec.fit([np.array([-0.2, 0.5])], symmetric=True)
    assert normalize(0.0, spec) == 0.0 and normalize(0.5, spec) == 1.0 and normalize(-0.5, spec) == -1.0


def test_modality_arrays_reversed_majority():
    rng = np.random.default_rng(1)
    samples = [PairedSample(i, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 4)) if i < 2 else None)
               for i in range(3)]
    man = DatasetManifest("seismic", [0, 1, 2], [0, 1])
    assert modality_arrays(samples, man, "seismic").shape == (3, 2, 3, 4)
    assert modality_arrays(samples, man, "velocity").shape == (2, 4, 4)
