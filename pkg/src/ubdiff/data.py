"""Data model, normalization and the on-disk dataset container.

A dataset directory holds ``manifest.json`` plus one raw little-endian
float32 file per tensor (``vel_<id>.f32`` / ``seis_<id>.f32``), row-major.
The same flat-binary layout backs network checkpoints (see
:func:`save_tensors`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DatasetError, MissingArtifactError

MODALITIES = ("velocity", "seismic")
FILE_PREFIX = {"velocity": "vel", "seismic": "seis"}
DTYPE_TAG = "f32le"
MANIFEST_VERSION = 1

_F32 = np.dtype("<f4")


@dataclass
class VelocityMap:
    """2-D wave-speed grid in m/s, rows are depth."""

    grid: np.ndarray
    spacing: float = 10.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError(f"velocity grid must be 2-D, got shape {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)) or np.any(self.grid <= 0):
            raise ValueError("velocity values must be finite and strictly positive")
        if self.spacing <= 0:
            raise ValueError("grid spacing must be positive")

    @property
    def shape(self):
        return self.grid.shape

    def check_bounds(self, v_min: float, v_max: float) -> None:
        lo, hi = float(self.grid.min()), float(self.grid.max())
        if lo < v_min or hi > v_max:
            raise ValueError(f"velocity range [{lo}, {hi}] outside [{v_min}, {v_max}]")


@dataclass
class SeismicGather:
    """Recorded pressure traces, shape (sources, time samples, receivers)."""

    traces: np.ndarray
    dt: float = 1e-3

    def __post_init__(self):
        self.traces = np.asarray(self.traces, dtype=np.float32)
        if self.traces.ndim != 3:
            raise ValueError(f"seismic gather must be 3-D, got shape {self.traces.shape}")
        if not np.all(np.isfinite(self.traces)):
            raise ValueError("seismic gather contains NaN or Inf")

    @property
    def shape(self):
        return self.traces.shape


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine map ``(x - shift) / scale`` onto [-1, 1]."""

    shift: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"normalization scale must be positive, got {self.scale}")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "NormalizationSpec":
        return cls(shift=(hi + lo) / 2.0, scale=(hi - lo) / 2.0)

    @classmethod
    def fit(cls, arrays: Iterable[np.ndarray], symmetric: bool = False) -> "NormalizationSpec":
        """Global min/max over ``arrays``.

        With ``symmetric=True`` the range is ``[-max|x|, max|x|]`` so that zero
        maps to zero, which is what seismic amplitudes want.
        """
        lo, hi = np.inf, -np.inf
        for a in arrays:
            lo = min(lo, float(np.min(a)))
            hi = max(hi, float(np.max(a)))
        if not np.isfinite(lo):
            raise ValueError("cannot fit normalization on an empty collection")
        if symmetric:
            hi = max(abs(lo), abs(hi))
            lo = -hi
        if hi <= lo:
            hi = lo + 1.0
        return cls.from_range(lo, hi)

    def to_dict(self) -> dict:
        return {"shift": self.shift, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(shift=float(d["shift"]), scale=float(d["scale"]))


def normalize(x, spec: NormalizationSpec):
    """Map physical values to normalized units (in-range values land in [-1, 1])."""
    if not spec.scale > 0:
        raise ValueError("non-positive normalization scale")
    return (np.asarray(x, dtype=np.float64) - spec.shift) / spec.scale


def denormalize(x, spec: NormalizationSpec):
    if not spec.scale > 0:
        raise ValueError("non-positive normalization scale")
    return np.asarray(x, dtype=np.float64) * spec.scale + spec.shift


@dataclass
class PairedSample:
    """One majority array plus its minority counterpart when paired."""

    id: Any
    ma: np.ndarray
    mi: np.ndarray | None = None

    @property
    def paired(self) -> bool:
        return self.mi is not None


def other_modality(modality: str) -> str:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    return MODALITIES[1 - MODALITIES.index(modality)]


@dataclass
class DatasetManifest:
    majority_modality: str
    majority_ids: list
    paired_ids: list
    seed: int | None = None
    shapes: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)
    generated: bool = False
    extra: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self.validate()

    @property
    def minority_modality(self) -> str:
        return other_modality(self.majority_modality)

    @property
    def m(self) -> int:
        return len(self.majority_ids)

    @property
    def n(self) -> int:
        return len(self.paired_ids)

    def validate(self) -> None:
        if self.majority_modality not in MODALITIES:
            raise DatasetError(f"unknown majority modality {self.majority_modality!r}")
        if len(set(self.majority_ids)) != len(self.majority_ids):
            raise DatasetError("duplicate majority ids")
        if len(set(self.paired_ids)) != len(self.paired_ids):
            raise DatasetError("duplicate paired ids")
        stray = set(self.paired_ids) - set(self.majority_ids)
        if stray:
            raise DatasetError(f"paired_ids not a subset of majority_ids: {sorted(stray, key=str)[:5]}")
        for mod, spec in self.normalization.items():
            if mod not in MODALITIES:
                raise DatasetError(f"normalization for unknown modality {mod!r}")
            if not isinstance(spec, NormalizationSpec):
                raise DatasetError(f"normalization[{mod!r}] must be a NormalizationSpec")

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "majority_modality": self.majority_modality,
            "shapes": {k: list(v) for k, v in self.shapes.items()},
            "dtype": DTYPE_TAG,
            "majority_ids": list(self.majority_ids),
            "paired_ids": list(self.paired_ids),
            "normalization": {k: v.to_dict() for k, v in self.normalization.items()},
            "seed": self.seed,
            "generated": self.generated,
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        missing = {"version", "majority_modality", "shapes", "dtype", "majority_ids",
                   "paired_ids", "normalization", "seed"} - set(d)
        if missing:
            raise DatasetError(f"manifest missing keys: {sorted(missing)}")
        if d["dtype"] != DTYPE_TAG:
            raise DatasetError(f"unsupported dtype {d['dtype']!r}, expected {DTYPE_TAG!r}")
        return cls(
            majority_modality=d["majority_modality"],
            majority_ids=list(d["majority_ids"]),
            paired_ids=list(d["paired_ids"]),
            seed=d["seed"],
            shapes={k: tuple(v) for k, v in d["shapes"].items()},
            normalization={k: NormalizationSpec.from_dict(v) for k, v in d["normalization"].items()},
            generated=bool(d.get("generated", False)),
            extra=dict(d.get("extra", {})),
            version=int(d["version"]),
        )


def split_unbalanced(ids: Sequence, n_paired: int, seed: int,
                     majority_modality: str = "velocity") -> DatasetManifest:
    """Choose a uniformly random subset of ``n_paired`` ids to carry both modalities.

    Pure function of its arguments; paired ids keep their order in ``ids``.
    """
    ids = list(ids)
    if n_paired < 0 or n_paired > len(ids):
        raise ValueError(f"n_paired={n_paired} not in [0, {len(ids)}]")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(ids), size=n_paired, replace=False))
    return DatasetManifest(
        majority_modality=majority_modality,
        majority_ids=ids,
        paired_ids=[ids[i] for i in picked],
        seed=seed,
    )


def _tensor_file(root: Path, modality: str, sample_id) -> Path:
    return root / f"{FILE_PREFIX[modality]}_{sample_id}.f32"


def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=_F32).tobytes(order="C"))


def _read_f32(path: Path, shape: Sequence[int], name: str) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(f"tensor file listed in manifest is missing: {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * _F32.itemsize
    if len(raw) != expected:
        raise DatasetError(f"size mismatch for tensor {name!r} ({path.name}): "
                           f"{len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)


def save_dataset(samples: Sequence[PairedSample], manifest: DatasetManifest, path) -> None:
    """Write ``samples`` and ``manifest`` under directory ``path``.

    Sample order must follow ``manifest.majority_ids``; a sample carries a
    minority array iff its id is in ``manifest.paired_ids``.
    """
    manifest.validate()
    root = Path(path)
    ma_mod, mi_mod = manifest.majority_modality, manifest.minority_modality
    if [s.id for s in samples] != list(manifest.majority_ids):
        raise DatasetError("sample ids do not match manifest.majority_ids")
    paired = set(manifest.paired_ids)
    shapes = dict(manifest.shapes)
    for s in samples:
        arrays = [(ma_mod, s.ma)]
        if s.mi is not None:
            arrays.append((mi_mod, s.mi))
        if (s.id in paired) != s.paired:
            raise DatasetError(f"sample {s.id!r}: pairing disagrees with manifest")
        for mod, arr in arrays:
            shape = tuple(np.shape(arr))
            shapes.setdefault(mod, shape)
            if tuple(shapes[mod]) != shape:
                raise DatasetError(f"sample {s.id!r}: {mod} shape {shape} != {tuple(shapes[mod])}")
    manifest.shapes = {k: tuple(v) for k, v in shapes.items()}

    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        _write_f32(_tensor_file(root, ma_mod, s.id), s.ma)
        if s.mi is not None:
            _write_f32(_tensor_file(root, mi_mod, s.id), s.mi)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(f"no manifest.json in {path}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(doc)


def load_dataset(path) -> tuple[list[PairedSample], DatasetManifest]:
    root = Path(path)
    manifest = read_manifest(root)
    ma_mod, mi_mod = manifest.majority_modality, manifest.minority_modality
    paired = set(manifest.paired_ids)
    samples = []
    for sid in manifest.majority_ids:
        ma = _read_f32(_tensor_file(root, ma_mod, sid), manifest.shapes[ma_mod], f"{ma_mod}_{sid}")
        mi = None
        if sid in paired:
            mi = _read_f32(_tensor_file(root, mi_mod, sid), manifest.shapes[mi_mod], f"{mi_mod}_{sid}")
        samples.append(PairedSample(id=sid, ma=ma, mi=mi))
    return samples, manifest


def modality_arrays(samples: Sequence[PairedSample], manifest: DatasetManifest,
                    modality: str, paired_only: bool = False) -> np.ndarray:
    """Stack every available array of ``modality`` into one float32 block."""
    if modality == manifest.majority_modality:
        arrs = [s.ma for s in samples if s.paired or not paired_only]
    else:
        arrs = [s.mi for s in samples if s.paired]
    if not arrs:
        return np.zeros((0, *manifest.shapes.get(modality, ())), dtype=np.float32)
    return np.stack(arrs).astype(np.float32)


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Checkpoint layout: ``meta.json`` plus ``<name>.f32`` per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        _write_f32(root / f"{name}.f32", arr)
        index[name] = list(arr.shape)
    doc = {"version": MANIFEST_VERSION, "dtype": DTYPE_TAG, "tensors": index, "meta": meta or {}}
    (root / "meta.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_tensors(path) -> tuple[dict, dict]:
    root = Path(path)
    mpath = root / "meta.json"
    if not mpath.exists():
        raise MissingArtifactError(f"no checkpoint at {root}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from exc
    tensors = {name: _read_f32(root / f"{name}.f32", shape, name)
               for name, shape in doc["tensors"].items()}
    return tensors, doc.get("meta", {})
