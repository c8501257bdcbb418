"""Synthetic class-conditional segment sequences, partial views and dataset files.

Each synthetic sequence stands in for one video cut into ``K`` segments, one
raw vector per segment. A sequence has a per-video appearance offset, an
ambiguous opening that looks alike across classes, and a class-specific motion
that starts at a random onset segment. All classes drift at the same speed
along one common axis, each from its own starting position, so a single
segment's position is shared by neighbouring classes at different times; the
order of the segments tells them apart while their average does not. A weak
class signature off that axis is the only order-free cue. Two modalities are
two independent noisy views of one latent sequence.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DATA_MAGIC = b"EAPDATA\x00"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQQI")  # magic, version, C, K, d_raw, count, seed, checksum
_NO_SEED = 2**64 - 1
MODALITIES = ("a", "b")


class DatasetError(RuntimeError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


@dataclass
class FeatureSequence:
    id: int
    label: int
    segments: np.ndarray  # (K, d_raw)
    modality: str = "a"

    @property
    def n_segments(self) -> int:
        return self.segments.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and self.modality == other.modality
                and self.segments.shape == other.segments.shape
                and self.segments.tobytes() == other.segments.tobytes())


@dataclass
class PartialView:
    source_id: int
    k: int
    n_segments: int
    segments: np.ndarray  # (k, d_raw)
    label: int

    @property
    def ratio(self) -> float:
        return self.k / self.n_segments

    @property
    def exact_ratio(self) -> Fraction:
        return Fraction(self.k, self.n_segments)


@dataclass
class Dataset:
    sequences: list[FeatureSequence]
    n_classes: int
    n_segments: int
    d_raw: int
    seed: int | None = None

    def __post_init__(self):
        for s in self.sequences:
            if s.segments.shape != (self.n_segments, self.d_raw):
                raise DatasetError(
                    f"sequence {s.id} has shape {s.segments.shape}, expected {(self.n_segments, self.d_raw)}")
            if not 0 <= s.label < self.n_classes:
                raise DatasetError(f"sequence {s.id} label {s.label} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[FeatureSequence]:
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return ((self.n_classes, self.n_segments, self.d_raw, self.seed)
                == (other.n_classes, other.n_segments, other.d_raw, other.seed)
                and self.sequences == other.sequences)

    def raw(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros((0, self.n_segments, self.d_raw))
        return np.stack([s.segments for s in self.sequences])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.sequences], dtype=np.int64)

    def subset(self, index: Sequence[int]) -> "Dataset":
        return Dataset([self.sequences[i] for i in index], self.n_classes, self.n_segments, self.d_raw, self.seed)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Parameters of the synthetic benchmark.

    ``ambiguity`` (alpha) blends the pre-onset segments between the shared
    opening (alpha=1, class-free) and the class's first motion frame
    (alpha=0). ``onset`` is the inclusive range of the uniformly drawn onset
    segment. ``sigma`` is the per-modality observation noise; the per-video
    appearance offset has standard deviation ``appearance * sigma``. The
    class motion reaches full strength ``ramp`` segments after onset.

    Class ``c`` starts at ``spacing * (c - (C - 1) / 2)`` on the common axis
    and moves ``drift`` per segment; ``signature`` scales its off-axis cue and
    ``opening`` the norm scale of the shared opening vector.
    """

    n_classes: int = 8
    n_segments: int = 10
    d_raw: int = 32
    n_train: int = 200
    n_test: int = 100
    ambiguity: float = 1.0
    onset: tuple[int, int] = (1, 2)
    sigma: float = 0.3
    appearance: float = 1.0
    drift: float = 1.0
    spacing: float = 1.0
    signature: float = 0.1
    opening: float = 0.0
    ramp: int = 3
    seed: int = 0

    def __post_init__(self):
        self.onset = (int(self.onset[0]), int(self.onset[1]))
        self.validate()

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_segments < 1 or self.d_raw < 1:
            raise ValueError("n_segments and d_raw must be >= 1")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sequence counts must be non-negative")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if min(self.sigma, self.appearance, self.signature, self.opening) < 0:
            raise ValueError("sigma, appearance, signature and opening must be non-negative")
        lo, hi = self.onset
        if not 1 <= lo <= hi <= self.n_segments:
            raise ValueError(f"onset support {self.onset} must lie within [1, {self.n_segments}]")
        if self.ramp < 1:
            raise ValueError("ramp must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["onset"] = list(self.onset)
        return d


def _prototypes(spec: SynthSpec, rng: np.random.Generator):
    K, d, C = spec.n_segments, spec.d_raw, spec.n_classes
    shared = spec.opening * rng.normal(size=d)
    axis = rng.normal(size=d)
    axis /= np.linalg.norm(axis)
    cue = rng.normal(size=(C, d))
    start = spec.spacing * (np.arange(C) - (C - 1) / 2)
    pos = start[:, None] + spec.drift * np.arange(K)[None, :]  # (C, K)
    traj = shared + pos[:, :, None] * axis + spec.signature * cue[:, None, :]
    return shared, traj  # (d,), (C, K, d)


def _latent(spec: SynthSpec, n: int, rng: np.random.Generator, shared, traj):
    K, d = spec.n_segments, spec.d_raw
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    lo, hi = spec.onset
    onsets = rng.integers(lo, hi + 1, size=n)
    offsets = rng.normal(scale=spec.appearance * spec.sigma, size=(n, d))
    x = np.empty((n, K, d))
    a = spec.ambiguity
    for s in range(n):
        c, o = labels[s], onsets[s]
        for i in range(1, K + 1):
            if i < o:
                x[s, i - 1] = a * shared + (1.0 - a) * traj[c, 0]
            else:
                w = min(1.0, (i - o + 1) / spec.ramp)
                x[s, i - 1] = (1.0 - w) * shared + w * traj[c, i - o]
        x[s] += offsets[s]
    return labels, x


def synthesize(spec: SynthSpec, modality: str = "a") -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) datasets for one modality.

    Latent sequences depend only on ``spec``; the modality picks an
    independent observation-noise stream, so ``a`` and ``b`` are paired views
    with equal ids and labels.
    """
    spec.validate()
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}")
    ss = np.random.SeedSequence(spec.seed)
    proto_seq, train_seq, test_seq, noise_a, noise_b = ss.spawn(5)
    shared, traj = _prototypes(spec, np.random.default_rng(proto_seq))
    noise_seq = noise_a if modality == "a" else noise_b
    noise_train, noise_test = (np.random.default_rng(s) for s in noise_seq.spawn(2))
    out = []
    for n, lat_seq, noise_rng, id0 in ((spec.n_train, train_seq, noise_train, 0),
                                      (spec.n_test, test_seq, noise_test, spec.n_train)):
        labels, x = _latent(spec, n, np.random.default_rng(lat_seq), shared, traj)
        x = x + noise_rng.normal(scale=spec.sigma, size=x.shape) if spec.sigma > 0 else x
        seqs = [FeatureSequence(id0 + i, int(labels[i]), x[i], modality) for i in range(n)]
        out.append(Dataset(seqs, spec.n_classes, spec.n_segments, spec.d_raw, spec.seed))
    return out[0], out[1]


def expand_views(sequences: Iterable[FeatureSequence]) -> list[PartialView]:
    """All ``K`` prefix views of every sequence, ordered by (sequence, k)."""
    views = []
    K = None
    for s in sequences:
        if K is None:
            K = s.n_segments
        elif s.n_segments != K:
            raise DatasetError(f"heterogeneous segment counts: {K} and {s.n_segments} (sequence {s.id})")
        for k in range(1, K + 1):
            views.append(PartialView(s.id, k, K, s.segments[:k], s.label))
    return views


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _record_dtype(K: int, d_raw: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("modality", "S1"), ("pad", "S3"),
                     ("x", "<f8", (K, d_raw))])


def save_dataset(path, ds: Dataset) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.n_segments, ds.d_raw))
    for i, s in enumerate(ds.sequences):
        rec[i] = (s.id, s.label, s.modality.encode("ascii"), b"", s.segments)
    payload = rec.tobytes()
    seed = _NO_SEED if ds.seed is None else ds.seed
    header = _HEADER.pack(DATA_MAGIC, DATA_VERSION, ds.n_classes, ds.n_segments, ds.d_raw, len(ds), seed,
                          zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def read_header(path) -> dict:
    blob = Path(path).read_bytes()[: _HEADER.size]
    if len(blob) < _HEADER.size:
        raise DatasetTruncatedError(f"{path}: file shorter than header")
    magic, version, C, K, d_raw, count, seed, crc = _HEADER.unpack(blob)
    if magic != DATA_MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    return {"version": version, "n_classes": C, "n_segments": K, "d_raw": d_raw, "count": count,
            "seed": None if seed == _NO_SEED else seed, "checksum": crc}


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    h = read_header(path)
    if h["version"] != DATA_VERSION:
        raise DatasetVersionError(f"{path}: dataset version {h['version']} (supported: {DATA_VERSION})")
    dt = _record_dtype(h["n_segments"], h["d_raw"])
    payload = blob[_HEADER.size:]
    if len(payload) != h["count"] * dt.itemsize:
        raise DatasetTruncatedError(
            f"{path}: expected {h['count'] * dt.itemsize} payload bytes, found {len(payload)}")
    if zlib.crc32(payload) != h["checksum"]:
        raise DatasetChecksumError(f"{path}: payload checksum mismatch")
    rec = np.frombuffer(payload, dtype=dt)
    seqs = [FeatureSequence(int(r["id"]), int(r["label"]), np.array(r["x"], dtype=np.float64),
                            r["modality"].decode("ascii")) for r in rec]
    return Dataset(seqs, h["n_classes"], h["n_segments"], h["d_raw"], h["seed"])


def export_text(path, ds: Dataset) -> None:
    """One record per line: id,label,modality,x[0,0],x[0,1],..."""
    lines = []
    for s in ds.sequences:
        vals = ",".join(repr(float(v)) for v in s.segments.reshape(-1))
        lines.append(f"{s.id},{s.label},{s.modality},{vals}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
