"""Dataset container, epoch windowing, electrode layouts and a synthetic
sleep-recording generator.

Binary container layout (little-endian)::

    "MSTG" | version u16 | N u16 | samples-per-epoch u32 | record count u64
    channel-name table: N x (length u16, UTF-8 bytes)
    records: subject_id u32 | epoch_index u32 | label u8 | signal f32[N * samples]
    CRC32 u32 over every preceding byte
"""
from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, LabelError, OrderingError, ParameterError, ParseError
from .graph import ElectrodeLayout

STAGES = ("Wake", "N1", "N2", "N3", "REM")
N_CLASSES = len(STAGES)
EPOCH_SECONDS = 30
SAMPLES_PER_EPOCH = 3000
MAGIC = b"MSTG"
VERSION = 1
_HEADER = struct.Struct("<4sHHIQ")


@dataclass(frozen=True)
class EpochRecord:
    subject_id: int
    epoch_index: int
    signal: np.ndarray
    label: int


@dataclass
class DatasetManifest:
    n_channels: int
    channel_names: list[str]
    samples_per_epoch: int
    subjects: list[int]
    class_counts: list[int]

    @property
    def sampling_rate(self) -> float:
        return self.samples_per_epoch / EPOCH_SECONDS

    @property
    def n_records(self) -> int:
        return int(sum(self.class_counts))


@dataclass
class Dataset:
    """Struct-of-arrays epoch table; signals are stored as float32."""

    channel_names: list[str]
    subject_ids: np.ndarray
    epoch_index: np.ndarray
    labels: np.ndarray
    signals: np.ndarray
    samples_per_epoch: int = field(default=SAMPLES_PER_EPOCH)

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64).reshape(-1)
        self.epoch_index = np.asarray(self.epoch_index, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.channel_names)
        self.signals = np.asarray(self.signals, dtype=np.float32).reshape(-1, n, self.samples_per_epoch)
        count = len(self.labels)
        if not (len(self.subject_ids) == len(self.epoch_index) == count == len(self.signals)):
            raise ParameterError("dataset arrays have inconsistent record counts")
        if count and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise LabelError(f"labels must lie in 0..{N_CLASSES - 1}")
        if count and (self.subject_ids.min() < 0 or self.epoch_index.min() < 0):
            raise ParameterError("subject ids and epoch indices must be non-negative")
        if not np.isfinite(self.signals).all():
            raise ParameterError("signals must be finite")
        keys = self.subject_ids * (int(self.epoch_index.max(initial=0)) + 1) + self.epoch_index
        if len(np.unique(keys)) != count:
            raise ParameterError("(subject_id, epoch_index) pairs must be unique")

    def __len__(self):
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject_ids))

    @property
    def manifest(self) -> DatasetManifest:
        counts = np.bincount(self.labels, minlength=N_CLASSES)
        return DatasetManifest(self.n_channels, list(self.channel_names), self.samples_per_epoch,
                               self.subjects, [int(c) for c in counts])

    def records(self) -> Iterator[EpochRecord]:
        for i in range(len(self)):
            yield EpochRecord(int(self.subject_ids[i]), int(self.epoch_index[i]), self.signals[i],
                              int(self.labels[i]))

    @classmethod
    def from_records(cls, records: Sequence[EpochRecord], channel_names: Sequence[str],
                     samples_per_epoch: int = SAMPLES_PER_EPOCH) -> "Dataset":
        n = len(channel_names)
        signals = (np.stack([r.signal for r in records]) if records
                   else np.zeros((0, n, samples_per_epoch), np.float32))
        return cls(list(channel_names), [r.subject_id for r in records], [r.epoch_index for r in records],
                   [r.label for r in records], signals, samples_per_epoch)

    def select(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        return Dataset(list(self.channel_names), self.subject_ids[idx], self.epoch_index[idx],
                       self.labels[idx], self.signals[idx], self.samples_per_epoch)

    def for_subjects(self, subjects) -> "Dataset":
        return self.select(np.isin(self.subject_ids, list(subjects)))

    def sorted(self) -> "Dataset":
        order = np.lexsort((self.epoch_index, self.subject_ids))
        return self.select(order)


# -- binary container -------------------------------------------------------------

def _record_dtype(n_channels: int, samples: int) -> np.dtype:
    return np.dtype([("subject", "<u4"), ("epoch", "<u4"), ("label", "u1"),
                     ("signal", "<f4", (n_channels, samples))])


def save_dataset(dataset: Dataset, path) -> None:
    names = [nm.encode("utf-8") for nm in dataset.channel_names]
    parts = [_HEADER.pack(MAGIC, VERSION, dataset.n_channels, dataset.samples_per_epoch, len(dataset))]
    for nm in names:
        parts.append(struct.pack("<H", len(nm)) + nm)
    table = np.empty(len(dataset), dtype=_record_dtype(dataset.n_channels, dataset.samples_per_epoch))
    table["subject"] = dataset.subject_ids
    table["epoch"] = dataset.epoch_index
    table["label"] = dataset.labels
    table["signal"] = dataset.signals
    parts.append(table.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    """Read a container; the whole file is validated before anything is returned."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the container header", offset=len(buf))
    magic, version, n, samples, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    pos = _HEADER.size
    names = []
    for _ in range(n):
        if pos + 2 > len(buf):
            raise FormatError("truncated channel-name table", offset=len(buf))
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + length > len(buf):
            raise FormatError("truncated channel name", offset=len(buf))
        try:
            names.append(buf[pos:pos + length].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("channel name is not valid UTF-8", offset=pos) from None
        pos += length
    dtype = _record_dtype(n, samples)
    expected = pos + count * dtype.itemsize + 4
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {len(buf)}", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} unexpected trailing bytes", offset=expected)
    (stored,) = struct.unpack_from("<I", buf, expected - 4)
    if zlib.crc32(buf[:expected - 4]) != stored:
        raise FormatError("checksum mismatch", offset=expected - 4)
    table = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    if count and table["label"].max() >= N_CLASSES:
        bad = int(np.argmax(table["label"] >= N_CLASSES))
        raise FormatError(f"label out of range in record {bad}", offset=pos + bad * dtype.itemsize + 8)
    return Dataset(names, table["subject"].astype(np.int64), table["epoch"].astype(np.int64),
                   table["label"].astype(np.int64), table["signal"].copy(), samples)


# -- windowing ----------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    epochs: tuple
    label: int
    subject_id: int


def context_positions(n_epochs: int, d: int) -> np.ndarray:
    """(n_epochs, 2d+1) positions of each epoch's context, clamped at the night edges."""
    if d < 0:
        raise ParameterError(f"temporal context d must be >= 0, got {d}")
    offsets = np.arange(-d, d + 1)
    return np.clip(np.arange(n_epochs)[:, None] + offsets[None, :], 0, max(n_epochs - 1, 0))


def window_sequence(records: Sequence[EpochRecord], d: int) -> list[Window]:
    """One window per epoch of a single subject's night, edge epochs repeated."""
    if not records:
        return []
    subjects = {r.subject_id for r in records}
    if len(subjects) != 1:
        raise ParameterError(f"window_sequence takes one subject's records, got subjects {sorted(subjects)}")
    idx = [r.epoch_index for r in records]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise OrderingError("records must be sorted by strictly increasing epoch_index")
    pos = context_positions(len(records), d)
    return [Window(tuple(records[j] for j in row), records[i].label, records[i].subject_id)
            for i, row in enumerate(pos)]


@dataclass
class WindowIndex:
    """Windows as row positions into a :class:`Dataset`."""

    rows: np.ndarray       # (W, 2d+1) dataset row per context slot
    labels: np.ndarray     # (W,) label of the centre epoch
    subjects: np.ndarray   # (W,)
    centers: np.ndarray    # (W,) dataset row of the centre epoch

    def __len__(self):
        return len(self.labels)

    def select(self, idx) -> "WindowIndex":
        return WindowIndex(self.rows[idx], self.labels[idx], self.subjects[idx], self.centers[idx])


def build_windows(dataset: Dataset, d: int) -> WindowIndex:
    """Windows for every epoch of every subject; rows are visited in epoch order."""
    rows, labels, subjects, centers = [], [], [], []
    for s in dataset.subjects:
        where = np.flatnonzero(dataset.subject_ids == s)
        where = where[np.argsort(dataset.epoch_index[where], kind="stable")]
        pos = context_positions(len(where), d)
        rows.append(where[pos])
        centers.append(where)
        labels.append(dataset.labels[where])
        subjects.append(np.full(len(where), s))
    if not rows:
        width = 2 * d + 1
        empty = np.zeros(0, np.int64)
        return WindowIndex(np.zeros((0, width), np.int64), empty, empty, empty)
    return WindowIndex(np.concatenate(rows), np.concatenate(labels), np.concatenate(subjects),
                       np.concatenate(centers))


# -- synthetic recordings ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    subjects: int = 5
    epochs_per_subject: int = 200
    channels: int = 6
    classes: int = N_CLASSES
    # one frequency band (Hz) and amplitude per class, Wake..REM
    class_bands: tuple = ((9.0, 11.0), (5.0, 7.0), (12.0, 14.0), (1.0, 2.0), (3.0, 4.0))
    class_amplitudes: tuple = (1.0, 0.8, 0.9, 1.5, 0.7)
    bias_strength: float = 0.5
    noise_sigma: float = 0.5
    run_length: tuple = (5, 12)
    seed: int = 0
    samples_per_epoch: int = SAMPLES_PER_EPOCH
    channel_names: tuple | None = None

    def validate(self):
        for name in ("subjects", "epochs_per_subject", "channels", "classes", "samples_per_epoch"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.bias_strength < 0 or self.noise_sigma < 0:
            raise ParameterError("bias strength and noise sigma must be >= 0")
        if len(self.class_bands) < self.classes or len(self.class_amplitudes) < self.classes:
            raise ParameterError("need a frequency band and amplitude for every class")
        lo, hi = self.run_length
        if not 1 <= lo <= hi:
            raise ParameterError("run_length must satisfy 1 <= min <= max")


def _label_sequence(n_epochs: int, classes: int, run_length: tuple, rng) -> np.ndarray:
    counts = np.full(classes, n_epochs // classes)
    counts[: n_epochs % classes] += 1
    runs = []
    lo, hi = run_length
    for c, total in enumerate(counts):
        sizes, left = [], int(total)
        while left > 0:
            size = min(int(rng.integers(lo, hi + 1)), left)
            if size < lo and sizes:
                sizes[-1] += size
            else:
                sizes.append(size)
            left -= size
        runs.extend(np.full(size, c) for size in sizes)
    order = rng.permutation(len(runs))
    return np.concatenate([runs[i] for i in order]) if runs else np.zeros(0, np.int64)


def _default_channel_names(n: int) -> list[str]:
    if n == 6:
        return ["F3", "F4", "C3", "C4", "O1", "O2"]
    return [f"Ch{i}" for i in range(n)]


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class-coded sinusoid mixtures with per-subject channel gains and offsets.

    Each epoch of class c holds, per channel, two sinusoids drawn from the
    class band with a class-specific channel topography, plus Gaussian noise.
    Subject s rescales channel n by exp(bias * g_sn) and shifts it by
    bias * o_sn, with g, o standard normal and drawn once per subject.
    Labels come in runs (like a hypnogram) and classes are balanced.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    topo_seq, *subject_seqs = root.spawn(spec.subjects + 1)
    topo = np.random.default_rng(topo_seq).uniform(0.5, 1.5, size=(spec.classes, spec.channels))
    t = np.arange(spec.samples_per_epoch) / (spec.samples_per_epoch / EPOCH_SECONDS)
    names = list(spec.channel_names) if spec.channel_names else _default_channel_names(spec.channels)
    sids, eidx, labels, signals = [], [], [], []
    for s, seq in enumerate(subject_seqs):
        bias_rng, label_rng, sig_rng = (np.random.default_rng(q) for q in seq.spawn(3))
        gain = np.exp(spec.bias_strength * bias_rng.standard_normal(spec.channels))
        offset = spec.bias_strength * bias_rng.standard_normal(spec.channels)
        y = _label_sequence(spec.epochs_per_subject, spec.classes, spec.run_length, label_rng)
        bands = np.asarray(spec.class_bands, dtype=np.float64)[y]           # (E, 2)
        shape = (len(y), spec.channels, 2)
        freq = bands[:, None, None, 0] + sig_rng.random(shape) * (bands[:, None, None, 1] - bands[:, None, None, 0])
        phase = sig_rng.uniform(0.0, 2 * np.pi, shape)
        amp = np.asarray(spec.class_amplitudes)[y][:, None] * topo[y]        # (E, N)
        waves = np.sin(2 * np.pi * freq[..., None] * t + phase[..., None]).sum(axis=2)
        x = amp[..., None] * waves + spec.noise_sigma * sig_rng.standard_normal(waves.shape)
        x = gain[None, :, None] * x + offset[None, :, None]
        sids.append(np.full(len(y), s))
        eidx.append(np.arange(len(y)))
        labels.append(y)
        signals.append(x.astype(np.float32))
    return Dataset(names, np.concatenate(sids), np.concatenate(eidx), np.concatenate(labels),
                   np.concatenate(signals), spec.samples_per_epoch)


# -- electrode layouts --------------------------------------------------------------

def _sph(polar_deg: float, azimuth_deg: float) -> tuple[float, float, float]:
    th, ph = np.radians(polar_deg), np.radians(azimuth_deg)
    return (float(np.sin(th) * np.cos(ph)), float(np.sin(th) * np.sin(ph)), float(np.cos(th)))


# polar angle from the vertex, azimuth from the right ear towards the nose
_ISRUC6 = {
    "F3": _sph(50.0, 130.0),
    "F4": _sph(50.0, 50.0),
    "C3": _sph(36.0, 180.0),
    "C4": _sph(36.0, 0.0),
    "O1": _sph(72.0, 252.0),
    "O2": _sph(72.0, 288.0),
}


def builtin_layout(name: str) -> ElectrodeLayout:
    """``"isruc6"`` or ``"grid RxC"`` (unit spacing in the z=0 plane)."""
    key = name.strip().lower()
    if key == "isruc6":
        return ElectrodeLayout(list(_ISRUC6), np.array(list(_ISRUC6.values())))
    if key.startswith("grid"):
        try:
            rows, cols = (int(v) for v in key[4:].strip().split("x"))
        except ValueError:
            raise ParameterError(f"grid layout must look like 'grid 2x3', got {name!r}") from None
        if rows < 1 or cols < 1:
            raise ParameterError("grid dimensions must be positive")
        names = [f"R{r}C{c}" for r in range(rows) for c in range(cols)]
        coords = [(float(c), float(r), 0.0) for r in range(rows) for c in range(cols)]
        return ElectrodeLayout(names, np.array(coords))
    raise ParameterError(f"unknown builtin layout {name!r}")


def load_electrode_layout(path) -> ElectrodeLayout:
    """Read a ``name,x,y,z`` CSV file."""
    names, coords, seen = [], [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["name", "x", "y", "z"]:
            raise ParseError("layout header must be 'name,x,y,z'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            name = row[0].strip()
            if name in seen:
                raise ParseError(f"duplicate electrode {name!r} (first on line {seen[name]})", line=lineno)
            try:
                xyz = [float(c) for c in row[1:]]
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {row[1:]}", line=lineno) from None
            if not np.all(np.isfinite(xyz)):
                raise ParseError("coordinates must be finite", line=lineno)
            seen[name] = lineno
            names.append(name)
            coords.append(xyz)
    return ElectrodeLayout(names, np.array(coords).reshape(-1, 3))


def save_electrode_layout(layout: ElectrodeLayout, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "z"])
        for name, (x, y, z) in zip(layout.names, layout.coords):
            writer.writerow([name, repr(float(x)), repr(float(y)), repr(float(z))])
