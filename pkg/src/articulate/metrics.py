"""Objective evaluation measures and their aggregation.

Frame-level measures assume the imposed-duration condition (equal
frame counts); duration RMSE compares two segmentations of the same
phone sequence.  The F0 cent measure follows the standard definition,
1200 * log2(r/s) per frame, evaluated over the frames voiced in both
series; it is undefined (None) when that set is empty.  Mel-cepstral
distortion excludes the first (energy) coefficient.

Aggregates weight utterances equally; the 95% confidence half-width is
1.96 * std / sqrt(N).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .ema import EmaRecording, PhoneClass, PhoneClassTable, Segmentation, phone_class
from .errors import DataError, FileError, ShapeError

__all__ = [
    "duration_rmse",
    "vuv_rate",
    "rmse_hz",
    "rmse_cent",
    "mcd",
    "coil_distances",
    "euclidean_stats",
    "dynamics_rmse",
    "phone_class_report",
    "MetricsReport",
]

log = logging.getLogger("articulate")


def duration_rmse(ref: Segmentation, hyp: Segmentation) -> float:
    """Phone-level duration RMSE in milliseconds."""
    if ref.labels() != hyp.labels():
        for i, (a, b) in enumerate(zip(ref.labels(), hyp.labels())):
            if a != b:
                raise DataError(
                    f"label sequences diverge at index {i}: '{a}' vs '{b}'"
                )
        raise DataError(
            f"label sequences differ in length: {len(ref)} vs {len(hyp)}"
        )
    diffs = [
        (r.duration - h.duration) * 1000.0 for r, h in zip(ref, hyp)
    ]
    return float(np.sqrt(np.mean(np.square(diffs))))


def _equal_length(r, s):
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if r.shape != s.shape:
        raise ShapeError(f"series lengths differ: {r.shape} vs {s.shape}")
    return r, s


def vuv_rate(r, s) -> float:
    """Percentage of frames whose voiced/unvoiced status disagrees."""
    r, s = _equal_length(r, s)
    return float(100.0 * np.mean((r > 0) != (s > 0)))


def rmse_hz(r, s) -> float:
    """RMSE in Hz over all frames (unvoiced frames enter as 0)."""
    r, s = _equal_length(r, s)
    return float(np.sqrt(np.mean((r - s) ** 2)))


def rmse_cent(r, s) -> float | None:
    """RMSE in cents over the frames voiced in both series; None if none."""
    r, s = _equal_length(r, s)
    both = (r > 0) & (s > 0)
    if not both.any():
        return None
    cents = 1200.0 * np.log2(r[both] / s[both])
    return float(np.sqrt(np.mean(cents**2)))


def mcd(r, s) -> float:
    """Mel-cepstral distortion in dB; the first coefficient is excluded."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if r.shape != s.shape:
        raise ShapeError(f"cepstra shapes differ: {r.shape} vs {s.shape}")
    if r.ndim != 2 or r.shape[1] < 2:
        raise ShapeError("cepstra must be (T, M) with M >= 2")
    d = ((r[:, 1:] - s[:, 1:]) ** 2).sum(axis=1)
    return float(10.0 / np.log(10.0) * np.sqrt(2.0) * np.sqrt(d.mean()))


def coil_distances(ref: EmaRecording, hyp: EmaRecording, coils) -> dict:
    """Per-frame Euclidean distance (mm) per coil."""
    if ref.n_frames != hyp.n_frames:
        raise ShapeError(
            f"frame counts differ: {ref.n_frames} vs {hyp.n_frames}"
        )
    out = {}
    for coil in coils:
        r = ref.channels.get(coil)
        h = hyp.channels.get(coil)
        if r is None or h is None:
            raise DataError(f"coil {coil} missing from a recording")
        out[coil] = np.linalg.norm(r - h, axis=1)
    return out


def euclidean_stats(ref: EmaRecording, hyp: EmaRecording, coils) -> dict:
    """Per-coil (mean, std) of the frame-wise Euclidean distance."""
    return {
        coil: (float(d.mean()), float(d.std()))
        for coil, d in coil_distances(ref, hyp, coils).items()
    }


def dynamics_rmse(ref: EmaRecording, hyp: EmaRecording, coils) -> dict:
    """Per-coil RMSE between frame-difference vectors (mm per frame)."""
    if ref.n_frames != hyp.n_frames:
        raise ShapeError(
            f"frame counts differ: {ref.n_frames} vs {hyp.n_frames}"
        )
    if ref.n_frames < 2:
        raise ShapeError("dynamics need at least two frames")
    out = {}
    for coil in coils:
        dr = np.diff(ref.channels[coil], axis=0)
        dh = np.diff(hyp.channels[coil], axis=0)
        out[coil] = float(np.sqrt(np.mean(((dr - dh) ** 2).sum(axis=1))))
    return out


def phone_class_report(distances: dict, seg: Segmentation, frame_rate: float,
                       classes: PhoneClassTable | None = None) -> dict:
    """Distance distributions bucketed by phone class, per coil.

    ``distances`` maps coil label to a per-frame distance array.  A
    frame joins the segment containing its midpoint; frames outside all
    segments count as silence (with a warning).  Returns
    ``{(class name, coil): {count, mean, median, q25, q75}}``.
    """
    buckets: dict = {}
    outside = 0
    for coil, values in distances.items():
        values = np.asarray(values, dtype=np.float64)
        frame_class = []
        for t in range(len(values)):
            mid = (t + 0.5) / frame_rate
            entry = next((e for e in seg if e.start <= mid < e.end), None)
            if entry is None:
                outside += 1
                frame_class.append(PhoneClass.SILENCE)
            else:
                frame_class.append(phone_class(entry.label, classes))
        for cls in PhoneClass:
            member = values[[c == cls for c in frame_class]]
            key = (cls.value, coil)
            if len(member):
                buckets[key] = {
                    "count": int(len(member)),
                    "mean": float(member.mean()),
                    "median": float(np.median(member)),
                    "q25": float(np.quantile(member, 0.25)),
                    "q75": float(np.quantile(member, 0.75)),
                }
            else:
                buckets[key] = {"count": 0}
    if outside:
        log.warning("%d frames outside all segments counted as silence", outside)
    return buckets


@dataclass
class MetricsReport:
    """Equal-weight aggregation of per-utterance metric values.

    ``None`` values mark a metric undefined for that utterance (an
    empty both-voiced set, for example); they are excluded from that
    metric's N rather than counted as zero.
    """

    utterances: list = field(default_factory=list)
    values: dict = field(default_factory=dict)     # metric -> list of floats
    frames: int = 0

    def add(self, utterance: str, metrics: dict, frames: int = 0) -> None:
        self.utterances.append(utterance)
        self.frames += int(frames)
        for name, value in metrics.items():
            if value is None:
                continue
            self.values.setdefault(name, []).append(float(value))

    def summary(self) -> dict:
        out = {}
        for name in sorted(self.values):
            vals = np.asarray(self.values[name])
            n = len(vals)
            std = float(vals.std(ddof=1)) if n > 1 else 0.0
            out[name] = {
                "mean": float(vals.mean()),
                "std": std,
                "ci95": float(1.96 * std / np.sqrt(n)) if n else 0.0,
                "n": n,
            }
        return out

    def to_json(self) -> dict:
        return {
            "utterances": len(self.utterances),
            "frames": self.frames,
            "metrics": self.summary(),
        }

    def to_text(self) -> str:
        rows = [("metric", "mean", "std", "ci95", "n")]
        for name, stats in self.summary().items():
            rows.append((
                name,
                f"{stats['mean']:.4f}",
                f"{stats['std']:.4f}",
                f"{stats['ci95']:.4f}",
                str(stats["n"]),
            ))
        widths = [max(len(row[k]) for row in rows) for k in range(5)]
        lines = []
        for row in rows:
            lines.append("  ".join(
                cell.ljust(widths[k]) if k == 0 else cell.rjust(widths[k])
                for k, cell in enumerate(row)
            ))
        return "\n".join(lines)

    def save(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(self.to_json(), fh, sort_keys=True, indent=1)
        except OSError as exc:
            raise FileError(f"cannot write report {path}: {exc}") from exc
