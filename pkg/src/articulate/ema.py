"""EMA recordings, timed phone labels, and phone classes.

Recording JSON is the canonical interchange format::

    {"utterance": "u01", "frameRate": 200.0,
     "channels": {"T1": {"position": [[x, y, z], ...]}, ...},
     "rms": {"T1": [...], ...}}

Missing samples are ``null`` (whole triple or a single coordinate);
they load as NaN and stay NaN until :func:`interpolate_invalid`.  A CSV
importer is provided for convenience: one row per frame, header columns
``<coil>_x, <coil>_y, <coil>_z``, empty cell means missing.

Label files are UTF-8 lines ``start<TAB>end<TAB>phone`` in seconds
(any whitespace accepted when reading).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DataError, FileError, FormatError, ShapeError

__all__ = [
    "EmaRecording",
    "Segment",
    "Segmentation",
    "PhoneClass",
    "PhoneClassTable",
    "RigidTransform",
    "load_recording",
    "save_recording",
    "load_recording_csv",
    "interpolate_invalid",
    "align_to_reference",
    "select_channels",
    "parse_labels",
    "save_labels",
    "phone_class",
]

DEFAULT_PAUSE_SYMBOLS = ("pau", "sil", "#")


@dataclass(frozen=True)
class EmaRecording:
    """Per-coil 3D trajectories (mm) at a fixed frame rate."""

    utterance: str
    frame_rate: float
    channels: dict[str, np.ndarray]            # label -> (T, 3)
    rms: dict[str, np.ndarray] | None = None   # label -> (T,)

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise DataError(f"frame rate must be positive, got {self.frame_rate}")
        if not self.channels:
            raise DataError("recording has no channels")
        chans = {}
        length = None
        for label, arr in self.channels.items():
            arr = np.array(arr, dtype=np.float64, copy=True).reshape(-1, 3)
            if length is None:
                length = len(arr)
            elif len(arr) != length:
                raise DataError(
                    f"channel {label} has {len(arr)} frames, expected {length}"
                )
            arr.flags.writeable = False
            chans[label] = arr
        object.__setattr__(self, "channels", chans)
        if self.rms is not None:
            rms = {}
            for label, arr in self.rms.items():
                arr = np.array(arr, dtype=np.float64, copy=True).reshape(-1)
                if len(arr) != length:
                    raise DataError(f"rms channel {label} length mismatch")
                arr.flags.writeable = False
                rms[label] = arr
            object.__setattr__(self, "rms", rms)

    @property
    def n_frames(self) -> int:
        return len(next(iter(self.channels.values())))

    def stacked(self, labels) -> np.ndarray:
        """Positions of the given coils as a (T, K, 3) array."""
        missing = [l for l in labels if l not in self.channels]
        if missing:
            raise DataError(f"unknown coil(s): {', '.join(missing)}")
        return np.stack([self.channels[l] for l in labels], axis=1)


@dataclass(frozen=True)
class Segment:
    label: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Segmentation:
    """Sorted, non-overlapping phone segments tiling [0, end]."""

    entries: tuple[Segment, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        prev_end = 0.0
        for e in entries:
            if e.start < -1e-9 or e.start >= e.end:
                raise DataError(f"bad segment ({e.label}, {e.start}, {e.end})")
            if e.start < prev_end - 1e-9:
                raise DataError(f"segment ({e.label}, {e.start}) overlaps previous")
            prev_end = e.end
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def end(self) -> float:
        return self.entries[-1].end if self.entries else 0.0

    def labels(self) -> list[str]:
        return [e.label for e in self.entries]


class PhoneClass(Enum):
    SILENCE = "silence"
    CORONAL = "coronal"
    DORSAL = "dorsal"
    OTHER = "other"


@dataclass(frozen=True)
class PhoneClassTable:
    coronal: frozenset = frozenset("tdnlsz") | frozenset(["ʃ", "ʒ", "θ", "ð"])
    dorsal: frozenset = frozenset(["g", "k", "ŋ"])
    silence: frozenset = frozenset(DEFAULT_PAUSE_SYMBOLS)

    @classmethod
    def from_json(cls, path) -> "PhoneClassTable":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise FileError(f"cannot read phone-class table {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
        return cls(
            coronal=frozenset(raw.get("coronal", [])),
            dorsal=frozenset(raw.get("dorsal", [])),
            silence=frozenset(raw.get("silence", DEFAULT_PAUSE_SYMBOLS)),
        )


DEFAULT_PHONE_CLASSES = PhoneClassTable()


def phone_class(label: str, table: PhoneClassTable | None = None) -> PhoneClass:
    """Total lookup: silence, coronal, dorsal, or other."""
    table = table or DEFAULT_PHONE_CLASSES
    if label in table.silence:
        return PhoneClass.SILENCE
    if label in table.coronal:
        return PhoneClass.CORONAL
    if label in table.dorsal:
        return PhoneClass.DORSAL
    return PhoneClass.OTHER


def _coord(value, path, label):
    if value is None:
        return np.nan
    if not isinstance(value, (int, float)):
        raise FormatError(f"{path}: channel {label}: non-numeric coordinate")
    return float(value)


def load_recording(path) -> EmaRecording:
    """Read recording JSON; nulls become NaN placeholders."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise FileError(f"cannot read recording {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: top level must be an object")
    if "frameRate" not in raw:
        raise FormatError(f"{path}: missing field 'frameRate'")
    if not isinstance(raw["frameRate"], (int, float)) or raw["frameRate"] <= 0:
        raise FormatError(f"{path}: field 'frameRate' must be a positive number")
    if "channels" not in raw or not isinstance(raw["channels"], dict) or not raw["channels"]:
        raise FormatError(f"{path}: missing or empty field 'channels'")

    channels = {}
    length = None
    for label, chan in raw["channels"].items():
        if not isinstance(chan, dict) or "position" not in chan:
            raise FormatError(f"{path}: channel {label}: missing field 'position'")
        frames = chan["position"]
        arr = np.empty((len(frames), 3))
        for t, sample in enumerate(frames):
            if sample is None:
                arr[t] = np.nan
                continue
            if not isinstance(sample, list) or len(sample) != 3:
                raise FormatError(
                    f"{path}: channel {label}: frame {t} is not an [x, y, z] triple"
                )
            arr[t] = [_coord(v, path, label) for v in sample]
        if length is None:
            length = len(arr)
        elif len(arr) != length:
            raise DataError(
                f"{path}: channel {label} has {len(arr)} frames, expected {length}"
            )
        channels[label] = arr

    rms = None
    if "rms" in raw and raw["rms"] is not None:
        rms = {}
        for label, values in raw["rms"].items():
            arr = np.array([np.nan if v is None else float(v) for v in values])
            if len(arr) != length:
                raise DataError(f"{path}: rms channel {label} length mismatch")
            rms[label] = arr

    return EmaRecording(
        utterance=str(raw.get("utterance", "")),
        frame_rate=float(raw["frameRate"]),
        channels=channels,
        rms=rms,
    )


def save_recording(rec: EmaRecording, path) -> None:
    doc = {
        "utterance": rec.utterance,
        "frameRate": rec.frame_rate,
        "channels": {
            label: {
                "position": [
                    [None if np.isnan(v) else float(v) for v in row] for row in arr
                ]
            }
            for label, arr in rec.channels.items()
        },
    }
    if rec.rms is not None:
        doc["rms"] = {
            label: [None if np.isnan(v) else float(v) for v in arr]
            for label, arr in rec.rms.items()
        }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise FileError(f"cannot write recording {path}: {exc}") from exc


def load_recording_csv(path, frame_rate: float, utterance: str = "") -> EmaRecording:
    """CSV importer: header ``<coil>_x,<coil>_y,<coil>_z``, empty cell = missing."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FileError(f"cannot read CSV {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    coils: dict[str, dict[str, int]] = {}
    for col, name in enumerate(header):
        if "_" not in name or name.rsplit("_", 1)[1] not in ("x", "y", "z"):
            raise FormatError(f"{path}: column '{name}' is not <coil>_{{x,y,z}}")
        coil, axis = name.rsplit("_", 1)
        coils.setdefault(coil, {})[axis] = col
    for coil, axes in coils.items():
        if sorted(axes) != ["x", "y", "z"]:
            raise FormatError(f"{path}: coil {coil} is missing an axis column")
    n = len(rows) - 1
    channels = {}
    for coil, axes in coils.items():
        arr = np.empty((n, 3))
        for t, row in enumerate(rows[1:]):
            for a, axis in enumerate(("x", "y", "z")):
                cell = row[axes[axis]].strip()
                arr[t, a] = np.nan if cell == "" else float(cell)
        channels[coil] = arr
    return EmaRecording(utterance=utterance, frame_rate=frame_rate, channels=channels)


def interpolate_invalid(rec: EmaRecording) -> EmaRecording:
    """Fill NaN samples by per-axis linear interpolation.

    Interior gaps interpolate between the nearest valid neighbors;
    leading and trailing gaps extend the nearest valid value.  Valid
    samples pass through bitwise; no smoothing of any kind is applied.
    """
    channels = {}
    for label, arr in rec.channels.items():
        out = arr.copy()
        for axis in range(3):
            col = out[:, axis]
            valid = np.isfinite(col)
            if not valid.any():
                raise DataError(f"channel {label}: no valid samples on axis {axis}")
            if not valid.all():
                idx = np.arange(len(col))
                col[~valid] = np.interp(idx[~valid], idx[valid], col[valid])
        channels[label] = out
    return EmaRecording(rec.utterance, rec.frame_rate, channels, rec.rms)


@dataclass(frozen=True)
class RigidTransform:
    """Optional user-supplied alignment applied after translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rot)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (points @ self.rotation.T)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (points / self.scale) @ np.linalg.inv(self.rotation).T


def align_to_reference(rec: EmaRecording, ref_coil: str,
                       transform: RigidTransform | None = None) -> EmaRecording:
    """Translate so the time-mean of ``ref_coil`` is the origin, then transform."""
    if ref_coil not in rec.channels:
        raise DataError(f"reference coil {ref_coil} not present")
    origin = rec.channels[ref_coil].mean(axis=0)
    channels = {}
    for label, arr in rec.channels.items():
        shifted = arr - origin
        channels[label] = transform.apply(shifted) if transform is not None else shifted
    return EmaRecording(rec.utterance, rec.frame_rate, channels, rec.rms)


def select_channels(rec: EmaRecording, labels) -> EmaRecording:
    """Subset of coils, preserved in the requested order."""
    labels = list(labels)
    missing = [l for l in labels if l not in rec.channels]
    if missing:
        raise DataError(f"unknown coil(s): {', '.join(missing)}")
    channels = {l: rec.channels[l] for l in labels}
    rms = None
    if rec.rms is not None:
        rms = {l: rec.rms[l] for l in labels if l in rec.rms}
    return EmaRecording(rec.utterance, rec.frame_rate, channels, rms)


def parse_labels(path, pause_label: str = "pau") -> Segmentation:
    """Parse ``start end phone`` lines; gaps become pause segments."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise FileError(f"cannot read label file {path}: {exc}") from exc
    entries: list[Segment] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'start end phone'")
        try:
            start, end = float(tokens[0]), float(tokens[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad timestamp") from exc
        if start < 0:
            raise FormatError(f"{path}:{lineno}: negative start time")
        if start >= end:
            raise FormatError(f"{path}:{lineno}: start must precede end")
        if entries and start < entries[-1].end - 1e-9:
            raise FormatError(
                f"{path}:{lineno}: segment overlaps the previous one"
            )
        if entries and start > entries[-1].end + 1e-9:
            entries.append(Segment(pause_label, entries[-1].end, start))
        elif not entries and start > 1e-9:
            entries.append(Segment(pause_label, 0.0, start))
        entries.append(Segment(tokens[2], start, end))
    return Segmentation(tuple(entries))


def save_labels(seg: Segmentation, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for e in seg:
                fh.write(f"{e.start:.6f}\t{e.end:.6f}\t{e.label}\n")
    except OSError as exc:
        raise FileError(f"cannot write label file {path}: {exc}") from exc
