"""Domain types, on-disk formats and the synthetic cohort generator."""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from pcamil.errors import (
    BadMagic,
    DataError,
    DuplicatePatientId,
    InvalidConfig,
    MalformedRow,
    MissingFile,
    NonFiniteEntry,
    TruncatedPayload,
    UnknownLabel,
    UnknownSide,
    VersionMismatch,
)

BAG_MAGIC = b"MILB"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sIII")
MANIFEST_HEADER = ["patient_id", "label", "side", "bag_path"]


class Label(enum.Enum):
    MSI = "MSI"
    MSS = "MSS"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise UnknownLabel(f"unknown label {text!r}") from None

    @property
    def y(self) -> int:
        """1 for the positive class (MSI), 0 otherwise."""
        return 1 if self is Label.MSI else 0


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    UNDEFINED = "undefined"

    @classmethod
    def parse(cls, text: str) -> "Side":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise UnknownSide(f"unknown side {text!r}") from None


@dataclass(frozen=True)
class FeatureBag:
    patient_id: str
    features: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features)
        if x.ndim != 2:
            raise DataError(f"bag {self.patient_id}: features must be 2-D, got shape {x.shape}")
        if x.shape[0] < 2 or x.shape[1] < 2:
            raise DataError(f"bag {self.patient_id}: need N >= 2 and d >= 2, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteEntry(f"bag {self.patient_id} contains NaN/Inf")
        x = x.view()
        x.flags.writeable = False
        object.__setattr__(self, "features", x)

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: Label
    side: Side
    bag_path: Path


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[PatientRecord, ...]
    split_tag: str = "train"

    def __post_init__(self):
        if not self.records:
            raise DataError("manifest has no records")
        if self.split_tag not in ("train", "test"):
            raise DataError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> list[Label]:
        return [r.label for r in self.records]

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(tuple(self.records[i] for i in indices), self.split_tag)


# ---------------------------------------------------------------- manifest


def load_manifest(path, split_tag: str | None = None) -> DatasetManifest:
    """Parse a ``patient_id,label,side,bag_path`` CSV.

    Relative ``bag_path`` values resolve against the manifest's directory.
    ``split_tag`` defaults to the file stem when that is ``train``/``test``.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    if split_tag is None:
        split_tag = path.stem if path.stem in ("train", "test") else "train"

    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise MalformedRow(1, f"header must be {','.join(MANIFEST_HEADER)}")

    records = []
    seen = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise MalformedRow(line_no, f"expected 4 fields, got {len(row)}")
        pid, label, side, bag = (c.strip() for c in row)
        if not pid or not bag:
            raise MalformedRow(line_no, "empty patient_id or bag_path")
        if pid in seen:
            raise DuplicatePatientId(f"line {line_no}: duplicate patient_id {pid!r}")
        seen.add(pid)
        bag_path = Path(bag)
        if not bag_path.is_absolute():
            bag_path = path.parent / bag_path
        records.append(PatientRecord(pid, Label.parse(label), Side.parse(side), bag_path))
    return DatasetManifest(tuple(records), split_tag)


def write_manifest(manifest: DatasetManifest, path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            try:
                bag = r.bag_path.relative_to(base)
            except ValueError:
                bag = r.bag_path
            w.writerow([r.patient_id, r.label.value, r.side.value, bag.as_posix()])


def load_bags(manifest: DatasetManifest) -> dict[str, FeatureBag]:
    """Read every bag of ``manifest``, checking ids and a shared feature dim."""
    bags = {}
    dim = None
    for r in manifest.records:
        bag = read_feature_bag(r.bag_path, patient_id=r.patient_id)
        if dim is None:
            dim = bag.feature_dim
        elif bag.feature_dim != dim:
            raise DataError(
                f"{r.patient_id}: feature_dim {bag.feature_dim} differs from dataset value {dim}"
            )
        bags[r.patient_id] = bag
    return bags


# ---------------------------------------------------------------- bag files


def write_feature_bag(bag: FeatureBag, path) -> None:
    n, d = bag.features.shape
    payload = np.ascontiguousarray(bag.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, n, d))
        fh.write(payload.tobytes())


def read_feature_bag(path, patient_id: str | None = None) -> FeatureBag:
    """Read a ``MILB`` file. The patient id defaults to the file stem."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"bag file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _BAG_HEADER.size:
        raise TruncatedPayload(f"{path}: file shorter than header")
    magic, version, n, d = _BAG_HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {BAG_VERSION}")
    need = n * d * 4
    have = len(raw) - _BAG_HEADER.size
    if have < need:
        raise TruncatedPayload(f"{path}: header declares {n}x{d} floats, payload holds {have // 4}")
    x = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_BAG_HEADER.size).reshape(n, d)
    if not np.all(np.isfinite(x)):
        raise NonFiniteEntry(f"{path}: payload contains NaN/Inf")
    return FeatureBag(patient_id if patient_id is not None else path.stem, x)


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 260
    msi_fraction: float = 0.18
    patches_min: int = 16
    patches_max: int = 48
    feature_dim: int = 64
    signal_rank: int = 4
    noise_sigma: float = 0.3
    signal_scale: float = 1.0
    p_right_given_msi: float = 0.87
    p_right_given_mss: float = 0.3456
    p_undefined: float = 0.0
    p_ambiguous: float = 0.35
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_patients < 1:
            problems.append("n_patients must be >= 1")
        if not 0.0 < self.msi_fraction < 1.0:
            problems.append("msi_fraction must lie in (0, 1)")
        if self.patches_min < 2 or self.patches_max < self.patches_min:
            problems.append("need 2 <= patches_min <= patches_max")
        if self.feature_dim < 2:
            problems.append("feature_dim must be >= 2")
        if not 1 <= self.signal_rank < min(self.patches_min - 1, self.feature_dim):
            problems.append("need 1 <= signal_rank < min(patches_min - 1, feature_dim)")
        if 2 * self.signal_rank > self.feature_dim:
            problems.append("two class bases of signal_rank columns must fit in feature_dim")
        if not self.noise_sigma > 0 or not self.signal_scale > 0:
            problems.append("noise_sigma and signal_scale must be > 0")
        for name in ("p_right_given_msi", "p_right_given_mss", "p_undefined", "p_ambiguous"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def n_msi(self) -> int:
        # round half away from zero; Python's round() is banker's rounding
        return int(math.floor(self.n_patients * self.msi_fraction + 0.5))

    @property
    def signal_variances(self) -> np.ndarray:
        r = self.signal_rank
        return self.signal_scale * np.arange(r, 0, -1, dtype=np.float64) / r


_SPLIT_STREAM = {"train": 1, "test": 2}


def class_bases(cfg: SynthConfig) -> dict[Label, np.ndarray]:
    """The per-class orthonormal signal bases (d x r), fixed by ``cfg.seed``.

    Both splits of one seed share these bases, so a test cohort drawn with
    the same seed is exchangeable with the training cohort.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    g = rng.standard_normal((cfg.feature_dim, 2 * cfg.signal_rank))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return {Label.MSI: q[:, : cfg.signal_rank], Label.MSS: q[:, cfg.signal_rank :]}


def generate_synthetic(cfg: SynthConfig, out_dir, split: str = "train") -> DatasetManifest:
    """Write ``cfg.n_patients`` bags plus ``<split>.csv`` into ``out_dir``.

    Patches are ``x = U_c z + noise`` with ``z ~ N(0, diag(signal_variances))``,
    so the two classes share a zero mean and differ only in which subspace
    carries the variance. With probability ``cfg.p_ambiguous`` a patient's
    patches draw from both class bases at once, which leaves its bag
    uninformative about the label.
    """
    if split not in _SPLIT_STREAM:
        raise InvalidConfig(f"split must be 'train' or 'test', got {split!r}")
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)

    bases = class_bases(cfg)
    stds = np.sqrt(cfg.signal_variances)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_SPLIT_STREAM[split],)))

    labels = np.array([Label.MSI] * cfg.n_msi + [Label.MSS] * (cfg.n_patients - cfg.n_msi))
    labels = labels[rng.permutation(cfg.n_patients)]

    records = []
    for i, label in enumerate(labels):
        pid = f"{split}-{i:04d}"
        u = rng.random()
        if u < cfg.p_undefined:
            side = Side.UNDEFINED
        else:
            p_right = cfg.p_right_given_msi if label is Label.MSI else cfg.p_right_given_mss
            side = Side.RIGHT if rng.random() < p_right else Side.LEFT
        ambiguous = rng.random() < cfg.p_ambiguous
        n = int(rng.integers(cfg.patches_min, cfg.patches_max + 1))
        if ambiguous:
            basis = np.hstack([bases[Label.MSI], bases[Label.MSS]])
            z = rng.standard_normal((n, 2 * cfg.signal_rank)) * np.tile(stds, 2)
        else:
            basis = bases[label]
            z = rng.standard_normal((n, cfg.signal_rank)) * stds
        noise = rng.standard_normal((n, cfg.feature_dim)) * cfg.noise_sigma
        x = (z @ basis.T + noise).astype(np.float32)
        path = bag_dir / f"{pid}.milb"
        write_feature_bag(FeatureBag(pid, x), path)
        records.append(PatientRecord(pid, label, side, path))

    manifest = DatasetManifest(tuple(records), split)
    write_manifest(manifest, out_dir / f"{split}.csv")
    return manifest
