"""Simplified statistical parametric synthesis of trajectory streams.

Monophone models with a fixed number of states per phone; each
(phone, state, stream) cell is a single diagonal Gaussian over stacked
window features (static plus delta by default).  State alignment is
uniform within each labeled phone span, replacing forced alignment;
the corpus segmentations are already time-aligned at the phone level.

Trajectory generation solves, per stream dimension,

    (W^T S^-1 W) c = W^T S^-1 mu

where W stacks the window rows over time (edges replicate the first
and last frame) and S is the diagonal of frame variances.  The normal
matrix is banded with bandwidth twice the window reach, so the solve is
linear in the number of frames.

F0-like streams are voiced-aware: they are modeled on the log of the
positive samples only, each (phone, state) carries a voiced
probability, generation solves each maximal voiced run independently,
exponentiates, and writes the 0 sentinel on unvoiced frames.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .ema import Segmentation
from .errors import DataError, FileError, FormatError, NumericError, ShapeError, UsageError

__all__ = [
    "STATIC_WINDOW",
    "DELTA_WINDOW",
    "DELTA_DELTA_WINDOW",
    "StreamSpec",
    "StatModel",
    "GaussianSequence",
    "compute_deltas",
    "apply_windows",
    "align_states",
    "train",
    "predict_durations",
    "durations_to_segmentation",
    "build_gaussian_sequence",
    "mlpg",
    "synthesize",
    "save_stat_model",
    "load_stat_model",
    "save_streams",
    "load_streams",
]

log = logging.getLogger("articulate")

STATIC_WINDOW = (1.0,)
DELTA_WINDOW = (-0.5, 0.0, 0.5)
DELTA_DELTA_WINDOW = (1.0, -2.0, 1.0)

VARIANCE_FLOOR = 1e-6
VOICING_THRESHOLD = 0.5


@dataclass(frozen=True)
class StreamSpec:
    """Name, dimension, window stack, and voicing behaviour of one stream."""

    name: str
    dim: int
    windows: tuple = (STATIC_WINDOW, DELTA_WINDOW)
    voiced_aware: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError(f"stream {self.name}: dim must be >= 1")
        windows = tuple(tuple(float(c) for c in w) for w in self.windows)
        if not windows or windows[0] != STATIC_WINDOW:
            raise UsageError(
                f"stream {self.name}: first window must be the static identity"
            )
        if any(len(w) % 2 == 0 for w in windows):
            raise UsageError(f"stream {self.name}: windows must have odd length")
        if self.voiced_aware and self.dim != 1:
            raise UsageError(f"stream {self.name}: voiced-aware streams are scalar")
        object.__setattr__(self, "windows", windows)

    @property
    def stacked_dim(self) -> int:
        return self.dim * len(self.windows)

    @property
    def reach(self) -> int:
        return max((len(w) - 1) // 2 for w in self.windows)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "windows": [list(w) for w in self.windows],
            "voicedAware": self.voiced_aware,
        }

    @classmethod
    def from_dict(cls, raw) -> "StreamSpec":
        return cls(
            name=raw["name"],
            dim=int(raw["dim"]),
            windows=tuple(tuple(w) for w in raw["windows"]),
            voiced_aware=bool(raw.get("voicedAware", False)),
        )


def apply_windows(traj: np.ndarray, windows) -> np.ndarray:
    """Window features of a (T, d) trajectory: (T, len(windows)*d).

    Coefficients that fall outside the trajectory accumulate on the
    clamped edge frame (the replicate-first/last convention).
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim == 1:
        traj = traj[:, None]
    T, d = traj.shape
    idx = np.arange(T)
    out = np.zeros((T, len(windows) * d))
    for w, coeffs in enumerate(windows):
        reach = (len(coeffs) - 1) // 2
        block = out[:, w * d:(w + 1) * d]
        for o, coef in zip(range(-reach, reach + 1), coeffs):
            if coef == 0.0:
                continue
            block += coef * traj[np.clip(idx + o, 0, T - 1)]
    return out


def compute_deltas(traj: np.ndarray) -> np.ndarray:
    """Stacked [static, delta] features with the default windows."""
    return apply_windows(traj, (STATIC_WINDOW, DELTA_WINDOW))


def _instance_bounds(seg: Segmentation, frame_rate: float):
    """Frame span per segment, sequentially widened to at least 1 frame."""
    raw = [int(round(e.start * frame_rate)) for e in seg]
    total = int(round(seg.end * frame_rate))
    bounds = []
    cursor = raw[0] if raw else 0
    widened = False
    for i, e in enumerate(seg):
        start = max(raw[i], cursor) if i else cursor
        end = int(round(e.end * frame_rate))
        if end <= start:
            end = start + 1
            widened = True
        bounds.append((e.label, start, end))
        cursor = end
    if bounds and bounds[-1][2] > total:
        if widened:
            raise DataError(
                "segmentation too dense: cannot give every phone one frame"
            )
        raise DataError("segmentation exceeds the utterance frame count")
    if widened:
        log.warning("sub-frame phone spans widened to one frame")
    # the final span absorbs any rounding slack so the frames tile exactly
    if bounds and bounds[-1][2] < total:
        label, start, _ = bounds[-1]
        bounds[-1] = (label, start, total)
    return bounds, total


def _split_states(n: int, S: int) -> list[int]:
    """n frames over S contiguous states, earlier states take the remainder."""
    base, rem = divmod(n, S)
    return [base + (1 if k < rem else 0) for k in range(S)]


def align_states(seg: Segmentation, frame_rate: float, S: int):
    """Per-frame (phone, state) labels under uniform within-phone alignment."""
    if S < 1:
        raise UsageError("state count must be >= 1")
    bounds, total = _instance_bounds(seg, frame_rate)
    labels: list[tuple[str, int]] = [None] * total
    for label, start, end in bounds:
        counts = _split_states(end - start, S)
        cursor = start
        for state, count in enumerate(counts):
            for t in range(cursor, cursor + count):
                labels[t] = (label, state)
            cursor += count
    if any(label is None for label in labels):
        raise DataError("segmentation does not tile the utterance")
    return labels


@dataclass
class CellStats:
    """Gaussians of one (phone, state): per-stream mean/variance plus duration."""

    streams: dict            # name -> (mean, var) arrays of stacked dim
    voiced_prob: dict        # name -> float, voiced-aware streams only
    dur_mean: float
    dur_var: float


@dataclass
class StatModel:
    phones: tuple[str, ...]
    states: int
    specs: tuple[StreamSpec, ...]
    frame_rate: float
    cells: dict              # (phone, state) -> CellStats
    global_cell: CellStats
    backoff_report: tuple[str, ...] = ()

    def spec(self, name: str) -> StreamSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise UsageError(f"unknown stream '{name}'")

    def cell(self, phone: str, state: int, allow_unseen: bool = True) -> CellStats:
        key = (phone, state)
        if key in self.cells:
            return self.cells[key]
        if not allow_unseen:
            raise DataError(f"phone '{phone}' unknown to the model")
        return self.global_cell


class _Accumulator:
    def __init__(self):
        self.obs = []

    def add(self, rows):
        if len(rows):
            self.obs.append(np.asarray(rows, dtype=np.float64))

    def stats(self, dim):
        if not self.obs:
            return None
        data = np.concatenate(self.obs, axis=0)
        mean = data.mean(axis=0)
        var = np.maximum(data.var(axis=0), VARIANCE_FLOOR)
        return mean, var, len(data)


def _voiced_runs(mask):
    """(start, end) pairs of the maximal True runs."""
    runs = []
    start = None
    for t, v in enumerate(mask):
        if v and start is None:
            start = t
        elif not v and start is not None:
            runs.append((start, t))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def _stream_features(spec: StreamSpec, traj: np.ndarray):
    """Window features plus a per-frame validity mask.

    Voiced-aware streams are transformed to the log domain and windowed
    within each maximal voiced run; unvoiced frames are invalid.
    """
    T = len(traj)
    if not spec.voiced_aware:
        return apply_windows(traj, spec.windows), np.ones(T, dtype=bool)
    values = np.asarray(traj, dtype=np.float64).reshape(T)
    voiced = values > 0
    feats = np.zeros((T, spec.stacked_dim))
    for start, end in _voiced_runs(voiced):
        feats[start:end] = apply_windows(np.log(values[start:end]), spec.windows)
    return feats, voiced


def train(corpus, specs, S: int = 5, frame_rate: float | None = None) -> StatModel:
    """Estimate per-(phone, state, stream) Gaussians and duration models.

    ``corpus`` is a list of (Segmentation, streams) pairs where streams
    maps stream name to a (T, dim) array.  Unseen (phone, state) cells
    back off to the phone pool, then to the global pool; the backoff
    report lists every substitution.
    """
    corpus = list(corpus)
    if not corpus:
        raise UsageError("training corpus is empty")
    specs = tuple(specs)
    if frame_rate is None or frame_rate <= 0:
        raise UsageError("frame_rate must be positive")

    feature_acc: dict = {}   # (phone, state, stream) -> _Accumulator
    voiced_acc: dict = {}    # (phone, state, stream) -> [n_voiced, n_total]
    duration_acc: dict = {}  # (phone, state) -> list of counts
    phones_seen: set[str] = set()

    for seg, streams in corpus:
        bounds, total = _instance_bounds(seg, frame_rate)
        stream_feats = {}
        for spec in specs:
            if spec.name not in streams:
                raise DataError(f"utterance is missing stream '{spec.name}'")
            traj = np.asarray(streams[spec.name], dtype=np.float64)
            if traj.ndim == 1:
                traj = traj[:, None]
            if traj.shape != (total, spec.dim):
                raise ShapeError(
                    f"stream '{spec.name}' has shape {traj.shape}, "
                    f"expected ({total}, {spec.dim})"
                )
            stream_feats[spec.name] = _stream_features(spec, traj)
        for label, start, end in bounds:
            phones_seen.add(label)
            counts = _split_states(end - start, S)
            cursor = start
            for state, count in enumerate(counts):
                duration_acc.setdefault((label, state), []).append(count)
                span = slice(cursor, cursor + count)
                for spec in specs:
                    feats, valid = stream_feats[spec.name]
                    key = (label, state, spec.name)
                    ok = valid[span]
                    if spec.voiced_aware:
                        tally = voiced_acc.setdefault(key, [0, 0])
                        tally[1] += count
                        tally[0] += int(ok.sum())
                    rows = feats[span][ok]
                    if len(rows):
                        feature_acc.setdefault(key, _Accumulator()).add(rows)
                cursor += count

    phones = tuple(sorted(phones_seen))
    report: list[str] = []

    def pool_stats(spec, keys):
        acc = _Accumulator()
        for key in keys:
            if key in feature_acc:
                for rows in feature_acc[key].obs:
                    acc.add(rows)
        return acc.stats(spec.stacked_dim)

    def pool_voiced(keys):
        num = den = 0
        for key in keys:
            if key in voiced_acc:
                num += voiced_acc[key][0]
                den += voiced_acc[key][1]
        return (num / den) if den else 0.0

    global_streams = {}
    global_voiced = {}
    for spec in specs:
        all_keys = [(ph, st, spec.name) for ph in phones for st in range(S)]
        stats = pool_stats(spec, all_keys)
        if stats is None:
            raise DataError(f"stream '{spec.name}' has no valid training frames")
        global_streams[spec.name] = (stats[0], stats[1])
        if spec.voiced_aware:
            global_voiced[spec.name] = pool_voiced(all_keys)
    all_durations = [c for counts in duration_acc.values() for c in counts]
    global_cell = CellStats(
        streams=global_streams,
        voiced_prob=global_voiced,
        dur_mean=max(1.0, float(np.mean(all_durations))),
        dur_var=max(VARIANCE_FLOOR, float(np.var(all_durations))),
    )

    cells = {}
    for phone in phones:
        for state in range(S):
            streams_out = {}
            voiced_out = {}
            for spec in specs:
                key = (phone, state, spec.name)
                stats = (feature_acc[key].stats(spec.stacked_dim)
                         if key in feature_acc else None)
                if stats is None:
                    phone_keys = [(phone, st, spec.name) for st in range(S)]
                    stats = pool_stats(spec, phone_keys)
                    if stats is not None:
                        report.append(
                            f"{phone}/{state}/{spec.name}: phone-pool backoff"
                        )
                    else:
                        stats = (*global_streams[spec.name], 0)
                        report.append(
                            f"{phone}/{state}/{spec.name}: global backoff"
                        )
                streams_out[spec.name] = (stats[0], stats[1])
                if spec.voiced_aware:
                    key_list = [key] if key in voiced_acc else \
                        [(phone, st, spec.name) for st in range(S)]
                    voiced_out[spec.name] = pool_voiced(key_list)
            counts = duration_acc.get((phone, state), [])
            if counts:
                dur_mean = max(1.0, float(np.mean(counts)))
                dur_var = max(VARIANCE_FLOOR, float(np.var(counts)))
            else:
                dur_mean, dur_var = global_cell.dur_mean, global_cell.dur_var
                report.append(f"{phone}/{state}: duration global backoff")
            cells[(phone, state)] = CellStats(
                streams=streams_out,
                voiced_prob=voiced_out,
                dur_mean=dur_mean,
                dur_var=dur_var,
            )

    return StatModel(
        phones=phones,
        states=S,
        specs=specs,
        frame_rate=frame_rate,
        cells=cells,
        global_cell=global_cell,
        backoff_report=tuple(report),
    )


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    floors = np.floor(quotas).astype(int)
    remainder = total - int(floors.sum())
    if remainder > 0:
        frac = quotas - floors
        order = np.argsort(-frac, kind="stable")  # ties to the lower index
        floors[order[:remainder]] += 1
    return floors


def predict_durations(model: StatModel, phones, condition: str = "free",
                      spans=None):
    """Frame counts per (phone instance, state).

    ``condition="free"`` rounds each state's duration mean (half up,
    floor 1).  ``condition="imposed"`` splits the given frame span of
    each phone across its states proportionally to the duration means
    with largest-remainder rounding; spans shorter than the state count
    are rejected.
    """
    phones = list(phones)
    if condition == "imposed":
        if spans is None or len(spans) != len(phones):
            raise UsageError("imposed durations need one frame span per phone")
    elif condition != "free":
        raise UsageError(f"unknown condition '{condition}'")
    out = []
    for i, phone in enumerate(phones):
        means = np.array([
            model.cell(phone, st).dur_mean for st in range(model.states)
        ])
        if condition == "free":
            counts = np.maximum(1, np.floor(means + 0.5).astype(int))
        else:
            span = int(spans[i])
            if span < 1:
                raise DataError(f"segment {i} ('{phone}'): span shorter than 1 frame")
            if span < model.states:
                raise DataError(
                    f"segment {i} ('{phone}'): span of {span} frames cannot "
                    f"cover {model.states} states"
                )
            counts = _largest_remainder(span * means / means.sum(), span)
            while (counts == 0).any():  # min one frame per state
                counts[int(np.argmax(counts == 0))] += 1
                counts[int(np.argmax(counts))] -= 1
        out.append(counts)
    return out


def durations_to_segmentation(phones, durations, frame_rate: float) -> Segmentation:
    """Segmentation whose phone spans match the predicted frame counts."""
    from .ema import Segment

    entries = []
    cursor = 0
    for phone, counts in zip(phones, durations):
        frames = int(np.sum(counts))
        entries.append(Segment(phone, cursor / frame_rate,
                               (cursor + frames) / frame_rate))
        cursor += frames
    return Segmentation(tuple(entries))


@dataclass
class GaussianSequence:
    """Frame-level Gaussians produced for one utterance."""

    specs: tuple[StreamSpec, ...]
    frame_rate: float
    labels: list            # (phone, state) per frame
    means: dict             # stream -> (T, stacked_dim)
    variances: dict         # stream -> (T, stacked_dim)
    voiced: dict            # stream -> (T,) bool, voiced-aware streams only

    @property
    def n_frames(self) -> int:
        return len(self.labels)


def build_gaussian_sequence(model: StatModel, phones, durations,
                            allow_unseen: bool = True) -> GaussianSequence:
    """Concatenate per-state frame Gaussians for the given durations."""
    labels = []
    for phone, counts in zip(phones, durations):
        for state, count in enumerate(np.asarray(counts)):
            if count < 0:
                raise UsageError("negative state duration")
            labels.extend([(phone, int(state))] * int(count))
    T = len(labels)
    means = {}
    variances = {}
    voiced = {}
    for spec in model.specs:
        mu = np.empty((T, spec.stacked_dim))
        var = np.empty((T, spec.stacked_dim))
        flags = np.zeros(T, dtype=bool) if spec.voiced_aware else None
        for t, (phone, state) in enumerate(labels):
            cell = model.cell(phone, state, allow_unseen)
            mu[t], var[t] = cell.streams[spec.name]
            if spec.voiced_aware:
                flags[t] = cell.voiced_prob.get(spec.name, 0.0) >= VOICING_THRESHOLD
        means[spec.name] = mu
        variances[spec.name] = var
        if spec.voiced_aware:
            voiced[spec.name] = flags
    return GaussianSequence(
        specs=model.specs,
        frame_rate=model.frame_rate,
        labels=labels,
        means=means,
        variances=variances,
        voiced=voiced,
    )


def _solve_window_system(spec: StreamSpec, means, variances) -> np.ndarray:
    """Banded SPD solve of the window-consistency normal equations."""
    T = len(means)
    d = spec.dim
    n_w = len(spec.windows)
    prec = 1.0 / np.maximum(variances, VARIANCE_FLOOR)
    reach = spec.reach
    bandwidth = 2 * reach
    idx = np.arange(T)
    # precompute clipped column indices per window offset
    offsets = []
    for w, coeffs in enumerate(spec.windows):
        r = (len(coeffs) - 1) // 2
        for o, coef in zip(range(-r, r + 1), coeffs):
            if coef != 0.0:
                offsets.append((w, coef, np.clip(idx + o, 0, T - 1)))
    out = np.empty((T, d))
    for dim in range(d):
        band = np.zeros((bandwidth + 1, T))
        rhs = np.zeros(T)
        for w1, c1, cols1 in offsets:
            p = prec[:, w1 * d + dim]
            rhs_contrib = c1 * p * means[:, w1 * d + dim]
            np.add.at(rhs, cols1, rhs_contrib)
            for w2, c2, cols2 in offsets:
                if w1 != w2:
                    continue
                diff = cols1 - cols2
                keep = diff >= 0
                if keep.any():
                    np.add.at(band, (diff[keep], cols2[keep]), (c1 * c2 * p)[keep])
        try:
            out[:, dim] = solveh_banded(band, rhs, lower=True)
        except np.linalg.LinAlgError as exc:  # cannot occur with floored variances
            raise NumericError(f"window system not SPD: {exc}") from exc
    return out


def mlpg(seq: GaussianSequence, stream: str) -> np.ndarray:
    """Maximum-likelihood static trajectory for one stream.

    Voiced-aware streams solve each maximal voiced run independently in
    the log domain and exponentiate; unvoiced frames carry the 0
    sentinel.
    """
    spec = next((s for s in seq.specs if s.name == stream), None)
    if spec is None:
        raise UsageError(f"unknown stream '{stream}'")
    means = seq.means[stream]
    variances = seq.variances[stream]
    if not spec.voiced_aware:
        return _solve_window_system(spec, means, variances)
    T = seq.n_frames
    out = np.zeros((T, spec.dim))
    for start, end in _voiced_runs(seq.voiced[stream]):
        log_traj = _solve_window_system(spec, means[start:end], variances[start:end])
        out[start:end] = np.exp(log_traj)
    return out


def synthesize(model: StatModel, seg_or_phones, condition: str = "free"):
    """Phones (or a reference segmentation) to a trajectory per stream.

    Returns (streams dict, realized Segmentation).  The imposed
    condition requires a Segmentation and reuses its frame spans.
    """
    if isinstance(seg_or_phones, Segmentation):
        phones = seg_or_phones.labels()
        if condition == "imposed":
            bounds, _ = _instance_bounds(seg_or_phones, model.frame_rate)
            spans = [end - start for _, start, end in bounds]
        else:
            spans = None
    else:
        phones = list(seg_or_phones)
        spans = None
        if condition == "imposed":
            raise UsageError("imposed durations need a reference segmentation")
    durations = predict_durations(model, phones, condition, spans)
    seq = build_gaussian_sequence(model, phones, durations)
    streams = {spec.name: mlpg(seq, spec.name) for spec in model.specs}
    return streams, durations_to_segmentation(phones, durations, model.frame_rate)


def _cell_to_json(cell: CellStats) -> dict:
    return {
        "streams": {
            name: {"mean": list(mean), "var": list(var)}
            for name, (mean, var) in sorted(cell.streams.items())
        },
        "voicedProb": dict(sorted(cell.voiced_prob.items())),
        "durMean": cell.dur_mean,
        "durVar": cell.dur_var,
    }


def _cell_from_json(raw) -> CellStats:
    return CellStats(
        streams={
            name: (np.asarray(entry["mean"]), np.asarray(entry["var"]))
            for name, entry in raw["streams"].items()
        },
        voiced_prob=dict(raw.get("voicedProb", {})),
        dur_mean=float(raw["durMean"]),
        dur_var=float(raw["durVar"]),
    )


def save_stat_model(model: StatModel, path) -> None:
    doc = {
        "phones": list(model.phones),
        "states": model.states,
        "frameRate": model.frame_rate,
        "specs": [s.to_dict() for s in model.specs],
        "cells": {
            f"{phone}\t{state}": _cell_to_json(cell)
            for (phone, state), cell in sorted(model.cells.items())
        },
        "globalCell": _cell_to_json(model.global_cell),
        "backoffReport": list(model.backoff_report),
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise FileError(f"cannot write synthesis model {path}: {exc}") from exc


def load_stat_model(path) -> StatModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise FileError(f"cannot read synthesis model {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("phones", "states", "frameRate", "specs", "cells", "globalCell"):
        if key not in raw:
            raise FormatError(f"{path}: missing field '{key}'")
    cells = {}
    for key, entry in raw["cells"].items():
        phone, state = key.rsplit("\t", 1)
        cells[(phone, int(state))] = _cell_from_json(entry)
    return StatModel(
        phones=tuple(raw["phones"]),
        states=int(raw["states"]),
        specs=tuple(StreamSpec.from_dict(s) for s in raw["specs"]),
        frame_rate=float(raw["frameRate"]),
        cells=cells,
        global_cell=_cell_from_json(raw["globalCell"]),
        backoff_report=tuple(raw.get("backoffReport", [])),
    )


def save_streams(streams: dict, frame_rate: float, path, utterance: str = "") -> None:
    doc = {
        "utterance": utterance,
        "frameRate": frame_rate,
        "streams": {
            name: [list(row) for row in np.atleast_2d(np.asarray(arr, dtype=float))]
            for name, arr in sorted(streams.items())
        },
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise FileError(f"cannot write stream file {path}: {exc}") from exc


def load_streams(path):
    """Returns (streams dict of (T, d) arrays, frame_rate, utterance)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise FileError(f"cannot read stream file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if "streams" not in raw or "frameRate" not in raw:
        raise FormatError(f"{path}: missing 'streams' or 'frameRate'")
    streams = {
        name: np.asarray(rows, dtype=np.float64)
        for name, rows in raw["streams"].items()
    }
    return streams, float(raw["frameRate"]), str(raw.get("utterance", ""))
