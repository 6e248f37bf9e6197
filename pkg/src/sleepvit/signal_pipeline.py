"""Recording -> fixed-shape, normalized, subject-split dataset.

Raw recordings are cut into 30 s epochs, each epoch is linearly resampled to
64 Hz, every channel is z-scored with statistics taken over the whole subject,
and the four channels are stacked into a ``[4, 1920]`` example.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CHANNELS = ("PPG", "RF", "RC", "RA")
EPOCH_SECONDS = 30
TARGET_FS = 64
SEGMENT_SAMPLES = EPOCH_SECONDS * TARGET_FS  # 1920
ZSCORE_EPS = 1e-8
ARCHIVE_VERSION = 1


class Stage(enum.IntEnum):
    Wake = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


class Apnea(enum.IntEnum):
    NoApnea = 0
    CentralApnea = 1
    ObstructiveApnea = 2
    ObstructiveHypopnea = 3


class Disorder(str, enum.Enum):
    OSA = "OSA"
    Hypersomnia = "Hypersomnia"
    Insomnia = "Insomnia"
    Other = "Other"


STAGE_NAMES = tuple(s.name for s in Stage)
APNEA_NAMES = tuple(a.name for a in Apnea)


class ArchiveError(ValueError):
    """Malformed or corrupted dataset archive."""


@dataclass
class SignalRecord:
    """One subject's multichannel recording and its per-epoch annotations.

    ``event_windows`` optionally gives, per epoch, the (onset, offset) of the
    apnea event in seconds relative to the epoch start, or ``None``.
    """

    subject_id: str
    sampling_rate_hz: float
    channels: dict[str, np.ndarray]
    disorder: Disorder
    epoch_annotations: list[tuple[Stage, Apnea]]
    event_windows: list[tuple[float, float] | None] | None = None

    @property
    def n_samples(self) -> int:
        return len(self.channels[CHANNELS[0]])

    @property
    def epoch_samples(self) -> int:
        n = self.sampling_rate_hz * EPOCH_SECONDS
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"{self.sampling_rate_hz} Hz does not give whole-sample epochs")
        return int(round(n))

    @property
    def n_epochs(self) -> int:
        return self.n_samples // self.epoch_samples

    def validate(self) -> None:
        if not self.sampling_rate_hz > 0:
            raise ValueError("sampling rate must be positive")
        if set(self.channels) != set(CHANNELS):
            raise ValueError(f"record {self.subject_id}: channels must be {CHANNELS}")
        lengths = {len(self.channels[c]) for c in CHANNELS}
        if len(lengths) != 1:
            raise ValueError(f"record {self.subject_id}: channels differ in length")
        if len(self.epoch_annotations) != self.n_epochs:
            raise ValueError(
                f"annotation/epoch mismatch: {len(self.epoch_annotations)} annotations "
                f"for {self.n_epochs} epochs in {self.subject_id}"
            )
        if self.event_windows is not None and len(self.event_windows) != self.n_epochs:
            raise ValueError(f"annotation/epoch mismatch: event windows in {self.subject_id}")


@dataclass
class Segment:
    subject_id: str
    index: int
    channel_data: np.ndarray  # [4, samples], channel-major
    stage: Stage
    apnea: Apnea
    event_window: tuple[float, float] | None = None


@dataclass(frozen=True)
class SplitIndex:
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": list(self.train_subjects),
            "val": list(self.val_subjects),
            "test": list(self.test_subjects),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitIndex":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))

    def subjects(self, part: str) -> tuple[str, ...]:
        return {"train": self.train_subjects, "val": self.val_subjects,
                "test": self.test_subjects}[part]


# ---------------------------------------------------------------------------
# per-channel transforms
# ---------------------------------------------------------------------------


def resample_linear(samples, fs_in: float, fs_out: float) -> np.ndarray:
    """Linear-interpolation resampling on an origin-aligned grid.

    Output sample ``j`` is the input interpolated at fractional position
    ``j * fs_in / fs_out``; integer positions return the input sample exactly.
    Positions past the last input sample hold the last value.
    """
    x = np.asarray(samples, dtype=np.float64)
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    if x.ndim != 1 or x.size < 2:
        raise ValueError("insufficient samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite signal")
    if fs_in == fs_out:
        return x.copy()
    n_out = int(round(x.size * fs_out / fs_in))
    ratio = fs_in / fs_out
    pos = np.arange(n_out) * ratio
    if float(ratio).is_integer():
        return x[(np.arange(n_out) * int(ratio))].copy()
    lo = np.minimum(np.floor(pos).astype(np.int64), x.size - 1)
    hi = np.minimum(lo + 1, x.size - 1)
    frac = pos - lo
    out = x[lo] + frac * (x[hi] - x[lo])
    exact = frac == 0
    out[exact] = x[lo[exact]]
    return out


def zscore_normalize(channel, eps: float = ZSCORE_EPS) -> np.ndarray:
    """``(x - mean) / std`` with the population std; all zeros if ``std < eps``."""
    x = np.asarray(channel, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite signal")
    mu = x.mean()
    sd = x.std()
    if sd < eps:
        return np.zeros_like(x)
    return (x - mu) / max(sd, eps)


def segment_recording(record: SignalRecord) -> list[Segment]:
    """Cut a recording into whole 30 s epochs; a trailing partial epoch is dropped."""
    record.validate()
    n = record.epoch_samples
    stacked = np.stack([np.asarray(record.channels[c]) for c in CHANNELS])
    out = []
    for k, (stage, apnea) in enumerate(record.epoch_annotations):
        window = None if record.event_windows is None else record.event_windows[k]
        out.append(Segment(record.subject_id, k, stacked[:, k * n:(k + 1) * n],
                           Stage(stage), Apnea(apnea), window))
    return out


def split_by_subject(subject_ids: Iterable[str], fractions=(0.70, 0.15, 0.15),
                     seed: int = 0) -> SplitIndex:
    """Seeded inter-patient split with largest-remainder part sizes.

    Ties in the fractional remainders go to the later part, so 123 subjects
    at 70/15/15 split into 86/18/19.
    """
    ids = sorted(set(subject_ids))
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(ids)
    if n < len(fractions):
        raise ValueError(f"need at least {len(fractions)} subjects to split, got {n}")
    counts = largest_remainder(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return SplitIndex(tuple(sorted(shuffled[:a])), tuple(sorted(shuffled[a:b])),
                      tuple(sorted(shuffled[b:])), seed)


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    rem = [q - c for q, c in zip(quotas, counts)]
    # round to kill float noise so equal remainders compare equal
    rem = [round(r, 9) for r in rem]
    left = n - sum(counts)
    order = sorted(range(len(rem)), key=lambda i: (-rem[i], -i))
    for i in order[:left]:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# dataset archive
# ---------------------------------------------------------------------------


@dataclass
class DatasetArchive:
    """Stacked examples plus labels and per-subject metadata.

    ``x`` is float32 ``[example, channel, sample]``; examples of one subject
    are contiguous and in epoch order.
    """

    x: np.ndarray
    subject_ids: np.ndarray
    segment_index: np.ndarray
    stage: np.ndarray
    apnea: np.ndarray
    disorders: dict[str, Disorder]
    event_windows: list[tuple[float, float] | None] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def subjects(self) -> list[str]:
        return list(self.disorders)

    def indices_for(self, subjects: Iterable[str]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.subject_ids, list(subjects)))

    def subset(self, subjects: Iterable[str]) -> "DatasetArchive":
        subjects = list(subjects)
        idx = self.indices_for(subjects)
        return DatasetArchive(
            self.x[idx], self.subject_ids[idx], self.segment_index[idx],
            self.stage[idx], self.apnea[idx],
            {s: d for s, d in self.disorders.items() if s in set(subjects)},
            [self.event_windows[i] for i in idx] if self.event_windows else [],
        )

    def example_disorders(self) -> list[Disorder]:
        return [self.disorders[s] for s in self.subject_ids]

    def class_counts(self) -> dict[str, dict[str, int]]:
        return {
            "stage": {n: int(np.sum(self.stage == i)) for i, n in enumerate(STAGE_NAMES)},
            "apnea": {n: int(np.sum(self.apnea == i)) for i, n in enumerate(APNEA_NAMES)},
        }

    def class_percentages(self) -> dict[str, dict[str, float]]:
        total = max(len(self), 1)
        return {task: {k: round(100.0 * v / total, 2) for k, v in counts.items()}
                for task, counts in self.class_counts().items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetArchive):
            return NotImplemented
        return (
            self.x.dtype == other.x.dtype
            and self.x.shape == other.x.shape
            and np.array_equal(self.x.view(np.uint32), other.x.view(np.uint32))
            and list(self.subject_ids) == list(other.subject_ids)
            and np.array_equal(self.segment_index, other.segment_index)
            and np.array_equal(self.stage, other.stage)
            and np.array_equal(self.apnea, other.apnea)
            and self.disorders == other.disorders
            and _windows_equal(self.event_windows, other.event_windows)
        )


def _windows_equal(a, b) -> bool:
    if len(a) != len(b):
        return False
    for u, v in zip(a, b):
        if (u is None) != (v is None):
            return False
        if u is not None and not np.allclose(u, v, rtol=0, atol=1e-6):
            return False
    return True


def preprocess_record(record: SignalRecord, fs_out: float = TARGET_FS) -> list[Segment]:
    """Segment, resample each epoch, and z-score each channel over the subject."""
    segments = segment_recording(record)
    if not segments:
        return []
    data = np.stack([
        np.stack([resample_linear(seg.channel_data[c], record.sampling_rate_hz, fs_out)
                  for c in range(len(CHANNELS))])
        for seg in segments
    ])  # [n, 4, samples]
    for c in range(len(CHANNELS)):
        data[:, c, :] = zscore_normalize(data[:, c, :].reshape(-1)).reshape(data.shape[0], -1)
    for seg, block in zip(segments, data):
        seg.channel_data = block
    return segments


def assemble_dataset(records: Iterable[SignalRecord], fs_out: float = TARGET_FS) -> DatasetArchive:
    """Run the preprocessing chain over every record and stack the examples."""
    xs, sids, idxs, stages, apneas, windows = [], [], [], [], [], []
    disorders: dict[str, Disorder] = {}
    for record in records:
        if record.subject_id in disorders:
            raise ValueError(f"duplicate subject_id: {record.subject_id}")
        _check_subject_id(record.subject_id)
        disorders[record.subject_id] = Disorder(record.disorder)
        for seg in preprocess_record(record, fs_out):
            xs.append(seg.channel_data.astype(np.float32))
            sids.append(seg.subject_id)
            idxs.append(seg.index)
            stages.append(int(seg.stage))
            apneas.append(int(seg.apnea))
            windows.append(seg.event_window)
    n_samples = int(round(EPOCH_SECONDS * fs_out))
    x = np.stack(xs) if xs else np.zeros((0, len(CHANNELS), n_samples), np.float32)
    return DatasetArchive(
        x, np.array(sids, dtype=object), np.array(idxs, dtype=np.int64),
        np.array(stages, dtype=np.int64), np.array(apneas, dtype=np.int64),
        disorders, windows,
    )


def _check_subject_id(sid: str) -> None:
    if not sid or any(ch in sid for ch in '/\\:,"\n') or sid.startswith("."):
        raise ValueError(f"subject id not usable as a file name: {sid!r}")


def write_archive(archive: DatasetArchive, path) -> None:
    """Write ``manifest.json``, ``labels.csv`` and ``tensors/<subject>.f32``."""
    order = [s for s in archive.disorders for _ in range(int(np.sum(archive.subject_ids == s)))]
    if order != list(archive.subject_ids):
        raise ArchiveError("examples must be grouped by subject in subject order")
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid, disorder in archive.disorders.items():
        idx = archive.indices_for([sid])
        blob = np.ascontiguousarray(archive.x[idx], dtype="<f4").tobytes()
        fname = f"tensors/{sid}.f32"
        (root / fname).write_bytes(blob)
        subjects.append({
            "subject_id": sid,
            "disorder": Disorder(disorder).value,
            "n_segments": int(idx.size),
            "file": fname,
            "crc32": zlib.crc32(blob),
        })
    manifest = {
        "version": ARCHIVE_VERSION,
        "channel_order": list(CHANNELS),
        "sample_rate_hz": TARGET_FS,
        "samples_per_segment": int(archive.x.shape[2]),
        "dtype": "float32-le",
        "layout": "example,channel,sample",
        "n_examples": len(archive),
        "class_counts": archive.class_counts(),
        "class_percentages": archive.class_percentages(),
        "subjects": subjects,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "segment_index", "stage", "apnea",
                "event_onset_s", "event_offset_s"])
    windows = archive.event_windows or [None] * len(archive)
    for i in range(len(archive)):
        win = windows[i]
        w.writerow([archive.subject_ids[i], int(archive.segment_index[i]),
                    STAGE_NAMES[archive.stage[i]], APNEA_NAMES[archive.apnea[i]],
                    "" if win is None else repr(float(win[0])),
                    "" if win is None else repr(float(win[1]))])
    (root / "labels.csv").write_text(buf.getvalue())


def read_archive(path) -> DatasetArchive:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise ArchiveError(f"missing manifest: {root / 'manifest.json'}") from None
    if manifest.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {manifest.get('version')}")
    if list(manifest.get("channel_order", [])) != list(CHANNELS):
        raise ArchiveError(f"channel order must be {list(CHANNELS)}, got {manifest.get('channel_order')}")
    n_s = int(manifest["samples_per_segment"])
    blocks, disorders = [], {}
    for entry in manifest["subjects"]:
        blob = (root / entry["file"]).read_bytes()
        expected = entry["n_segments"] * len(CHANNELS) * n_s * 4
        if len(blob) != expected:
            raise ArchiveError(f"shape mismatch: {entry['file']} has {len(blob)} bytes, "
                               f"manifest implies {expected}")
        if zlib.crc32(blob) != entry["crc32"]:
            raise ArchiveError(f"checksum mismatch: {entry['file']}")
        blocks.append(np.frombuffer(blob, dtype="<f4").astype(np.float32)
                      .reshape(entry["n_segments"], len(CHANNELS), n_s))
        disorders[entry["subject_id"]] = Disorder(entry["disorder"])

    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != manifest["n_examples"]:
        raise ArchiveError("shape mismatch: labels.csv row count differs from manifest")
    x = np.concatenate(blocks) if blocks else np.zeros((0, len(CHANNELS), n_s), np.float32)
    if x.shape[0] != len(rows):
        raise ArchiveError("shape mismatch: tensor rows differ from labels")
    windows = [None if not r["event_onset_s"] else
               (float(r["event_onset_s"]), float(r["event_offset_s"])) for r in rows]
    return DatasetArchive(
        x,
        np.array([r["subject_id"] for r in rows], dtype=object),
        np.array([int(r["segment_index"]) for r in rows], dtype=np.int64),
        np.array([Stage[r["stage"]] for r in rows], dtype=np.int64),
        np.array([Apnea[r["apnea"]] for r in rows], dtype=np.int64),
        disorders,
        windows,
    )


def write_split(split: SplitIndex, path) -> None:
    Path(path).write_text(json.dumps(split.to_dict(), indent=2) + "\n")


def read_split(path) -> SplitIndex:
    return SplitIndex.from_dict(json.loads(Path(path).read_text()))
