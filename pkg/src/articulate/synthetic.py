"""Seeded desk-scale synthetic corpora.

Real articulatory corpora are not redistributable, so validation runs
on generated stand-ins: a small mesh grid (speakers x poses), smooth
pose-parameter trajectories driven by a random phone segmentation,
planted coil targets read off chosen model vertices (with optional
measurement jitter and dropouts), plus F0-like and cepstrum-like
streams.  Everything derives from one seed.

Each phone is tied to a fixed target pose, so the mapping from labels
to trajectories is learnable by construction; transitions are
raised-cosine crossfades.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ema import EmaRecording, Segment, Segmentation
from .errors import UsageError
from .fitting import Correspondence
from .mesh import Mesh, MeshCorpus
from .model import MultilinearModel, build_model

__all__ = [
    "SyntheticConfig",
    "make_template",
    "make_corpus",
    "plant_correspondence",
    "random_segmentation",
    "segment_frame_bounds",
    "make_pose_trajectory",
    "make_recording",
    "make_streams",
    "SyntheticUtterance",
    "make_utterance",
]


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    speakers: int = 3
    poses: int = 4
    grid: int = 8                    # mesh is a grid x grid sheet
    utterances: int = 40
    phones: tuple[str, ...] = ("a", "i", "u", "t", "k")
    voiced: tuple[str, ...] = ("a", "i", "u")
    pause: str = "pau"
    frame_rate: float = 200.0
    phones_per_utt: tuple[int, int] = (3, 7)
    phone_dur: tuple[float, float] = (0.12, 0.3)
    pause_dur: tuple[float, float] = (0.08, 0.16)
    coils: tuple[str, ...] = ("T1", "T2", "T3")
    ref_coil: str = "ref"
    head_offset: tuple[float, float, float] = (5.0, -10.0, 40.0)
    jitter_mm: float = 0.25
    dropout: float = 0.005
    target_spread: float = 1.0       # phone pose targets, in training sigmas
    noise_sigma: float = 0.04        # trajectory noise, in training sigmas
    transition_ms: float = 50.0
    mgc_dim: int = 4
    speaker_spread: float = 0.5      # true speaker, in training sigmas

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "speakers": self.speakers,
            "poses": self.poses,
            "grid": self.grid,
            "utterances": self.utterances,
            "phones": list(self.phones),
            "voiced": list(self.voiced),
            "pause": self.pause,
            "frameRate": self.frame_rate,
            "phonesPerUtt": list(self.phones_per_utt),
            "phoneDur": list(self.phone_dur),
            "pauseDur": list(self.pause_dur),
            "coils": list(self.coils),
            "refCoil": self.ref_coil,
            "headOffset": list(self.head_offset),
            "jitterMm": self.jitter_mm,
            "dropout": self.dropout,
            "targetSpread": self.target_spread,
            "noiseSigma": self.noise_sigma,
            "transitionMs": self.transition_ms,
            "mgcDim": self.mgc_dim,
            "speakerSpread": self.speaker_spread,
        }


def _smooth_grid_field(rng, gx, gy, amplitude, waves=4):
    xs = np.linspace(0.0, 1.0, gx)[:, None]
    ys = np.linspace(0.0, 1.0, gy)[None, :]
    out = np.zeros((gx, gy))
    for _ in range(waves):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phx, phy = rng.uniform(0.0, 2.0 * np.pi, size=2)
        out += rng.normal() * np.sin(2 * np.pi * fx * xs + phx) \
            * np.sin(2 * np.pi * fy * ys + phy)
    return amplitude * out / np.sqrt(waves)


def make_template(rng, grid=8):
    """Curved rectangular sheet (grid x grid vertices, mm scale)."""
    gx = gy = int(grid)
    u = np.linspace(0.0, 1.0, gx)
    v = np.linspace(0.0, 1.0, gy)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    verts = np.stack(
        [
            40.0 * uu - 20.0,
            30.0 * vv - 15.0,
            8.0 * np.sin(np.pi * uu) * np.sin(np.pi * vv)
            + _smooth_grid_field(rng, gx, gy, 2.0),
        ],
        axis=-1,
    ).reshape(-1, 3)
    faces = []
    for i in range(gx - 1):
        for j in range(gy - 1):
            a = i * gy + j
            b = a + 1
            c = a + gy
            d = c + 1
            faces.append((a, b, c))
            faces.append((b, d, c))
    return verts, np.array(faces, dtype=np.int64)


def make_corpus(rng, cfg: SyntheticConfig) -> MeshCorpus:
    """Random full grid of deformed sheets sharing one face set."""
    gx = gy = cfg.grid
    base, faces = make_template(rng, cfg.grid)
    speaker_fields = [
        np.stack([_smooth_grid_field(rng, gx, gy, 2.0).reshape(-1) for _ in range(3)],
                 axis=1)
        for _ in range(cfg.speakers)
    ]
    pose_fields = [
        np.stack([_smooth_grid_field(rng, gx, gy, 3.0).reshape(-1) for _ in range(3)],
                 axis=1)
        for _ in range(cfg.poses)
    ]
    meshes = []
    for i in range(cfg.speakers):
        row = []
        for j in range(cfg.poses):
            cross = np.stack(
                [_smooth_grid_field(rng, gx, gy, 0.5).reshape(-1) for _ in range(3)],
                axis=1,
            )
            row.append(Mesh(base + speaker_fields[i] + pose_fields[j] + cross, faces))
        meshes.append(row)
    speakers = [f"spk{i:02d}" for i in range(cfg.speakers)]
    poses = [f"pose{j:02d}" for j in range(cfg.poses)]
    return MeshCorpus(speakers, poses, meshes)


def plant_correspondence(rng, model: MultilinearModel, coils) -> Correspondence:
    """Pick well-separated vertices of the mean mesh as the true coil sites."""
    coils = list(coils)
    verts = model.mean.reshape(-1, 3)
    diag = np.linalg.norm(verts.max(axis=0) - verts.min(axis=0))
    min_sep = 0.25 * diag
    while True:
        chosen: list[int] = []
        for _ in range(200):
            cand = int(rng.integers(0, len(verts)))
            if cand in chosen:
                continue
            if all(np.linalg.norm(verts[cand] - verts[c]) >= min_sep for c in chosen):
                chosen.append(cand)
            if len(chosen) == len(coils):
                break
        if len(chosen) == len(coils):
            break
        min_sep *= 0.7
    return Correspondence(pairs=tuple(zip(coils, chosen)), mean_distance_mm=0.0)


def random_segmentation(rng, cfg: SyntheticConfig) -> Segmentation:
    """Pause-wrapped random phone sequence with random durations."""
    entries = []
    t = 0.0
    dur = rng.uniform(*cfg.pause_dur)
    entries.append(Segment(cfg.pause, t, t + dur))
    t += dur
    count = int(rng.integers(cfg.phones_per_utt[0], cfg.phones_per_utt[1] + 1))
    for _ in range(count):
        label = cfg.phones[int(rng.integers(0, len(cfg.phones)))]
        dur = rng.uniform(*cfg.phone_dur)
        entries.append(Segment(label, t, t + dur))
        t += dur
    dur = rng.uniform(*cfg.pause_dur)
    entries.append(Segment(cfg.pause, t, t + dur))
    return Segmentation(tuple(entries))


def segment_frame_bounds(seg: Segmentation, frame_rate: float) -> list[tuple[str, int, int]]:
    """(label, first frame, end frame) per segment; shared bounds match."""
    return [
        (e.label, int(round(e.start * frame_rate)), int(round(e.end * frame_rate)))
        for e in seg
    ]


def _crossfade_targets(bounds, targets, T, dim, fade):
    """Per-frame target track: plateaus with raised-cosine boundaries."""
    track = np.empty((T, dim))
    for label, start, end in bounds:
        track[start:end] = targets[label]
    half = fade // 2
    if half >= 1:
        for _, start, _ in bounds[1:]:
            lo = max(0, start - half)
            hi = min(T, start + half)
            if hi - lo < 2:
                continue
            w = 0.5 * (1.0 - np.cos(np.pi * (np.arange(hi - lo) + 0.5) / (hi - lo)))
            left = track[lo - 1] if lo > 0 else track[lo]
            right = track[min(hi, T - 1)]
            track[lo:hi] = (1.0 - w[:, None]) * left + w[:, None] * right
    return track


def _smooth_noise(rng, T, dim, sigma_per_dim, span=9):
    noise = rng.standard_normal((T + span, dim)) * sigma_per_dim
    kernel = np.hanning(span + 2)[1:-1]
    kernel /= kernel.sum()
    out = np.empty((T + span, dim))
    for d in range(dim):
        out[:, d] = np.convolve(noise[:, d], kernel, mode="same")
    return out[span // 2: span // 2 + T]


def phone_pose_targets(rng, model: MultilinearModel, cfg: SyntheticConfig) -> dict:
    """Fixed target pose per phone; pauses sit at the training mean."""
    mean, sigma = model.pose_stats.mean, model.pose_stats.sigma
    targets = {cfg.pause: mean.copy()}
    for label in cfg.phones:
        targets[label] = mean + rng.uniform(-1.0, 1.0, size=mean.size) \
            * sigma * cfg.target_spread
    return targets


def make_pose_trajectory(rng, model, cfg, seg: Segmentation, targets) -> np.ndarray:
    """Smooth in-box pose trajectory following the segmentation's targets."""
    T = int(round(seg.end * cfg.frame_rate))
    bounds = segment_frame_bounds(seg, cfg.frame_rate)
    fade = max(2, int(round(cfg.transition_ms / 1000.0 * cfg.frame_rate)))
    track = _crossfade_targets(bounds, targets, T, model.pose_dim, fade)
    track += _smooth_noise(rng, T, model.pose_dim,
                           model.pose_stats.sigma * cfg.noise_sigma)
    lo, hi = model.pose_stats.box(1.9)  # stay inside the pass-2 (c = 2) box
    return np.clip(track, lo, hi)


def make_recording(rng, model, cfg, corr: Correspondence, speaker,
                   pose_frames, utterance: str) -> EmaRecording:
    """Planted coil channels in a shifted head frame, with jitter and dropouts."""
    contracted = np.einsum("qrv,q->rv", model.core.array, speaker)
    feats = model.mean + pose_frames @ contracted        # (T, 3V)
    verts = feats.reshape(len(pose_frames), -1, 3)
    offset = np.asarray(cfg.head_offset)
    channels = {}
    for label, vertex in corr.pairs:
        chan = verts[:, vertex, :] + offset
        if cfg.jitter_mm > 0:
            chan = chan + rng.normal(0.0, cfg.jitter_mm, size=chan.shape)
        channels[label] = chan
    ref = np.tile(offset, (len(pose_frames), 1))
    if cfg.jitter_mm > 0:
        ref = ref + rng.normal(0.0, cfg.jitter_mm, size=ref.shape)
    channels[cfg.ref_coil] = ref
    if cfg.dropout > 0:
        for label in channels:
            chan = channels[label].copy()
            drop = rng.random(len(chan)) < cfg.dropout
            drop[0] = drop[-1] = False  # keep the ends anchored
            chan[drop] = np.nan
            channels[label] = chan
    return EmaRecording(utterance=utterance, frame_rate=cfg.frame_rate,
                        channels=channels)


def make_streams(rng, cfg, seg: Segmentation, f0_targets, mgc_targets) -> dict:
    """F0-like (Hz, 0 = unvoiced) and cepstrum-like streams."""
    T = int(round(seg.end * cfg.frame_rate))
    bounds = segment_frame_bounds(seg, cfg.frame_rate)
    fade = max(2, int(round(cfg.transition_ms / 1000.0 * cfg.frame_rate)))
    mgc = _crossfade_targets(bounds, mgc_targets, T, cfg.mgc_dim, fade)
    mgc += _smooth_noise(rng, T, cfg.mgc_dim, np.full(cfg.mgc_dim, 0.01))
    f0 = np.zeros((T, 1))
    for label, start, end in bounds:
        if label in cfg.voiced:
            wiggle = _smooth_noise(rng, end - start, 1, np.array([0.01]))
            f0[start:end, 0] = f0_targets[label] * np.exp(wiggle[:, 0])
    return {"f0": f0, "mgc": mgc}


@dataclass(frozen=True)
class SyntheticUtterance:
    utterance: str
    segmentation: Segmentation
    recording: EmaRecording
    streams: dict
    pose_frames: np.ndarray


def make_utterance(rng, model, cfg, corr, speaker, pose_targets,
                   f0_targets, mgc_targets, name) -> SyntheticUtterance:
    seg = random_segmentation(rng, cfg)
    pose = make_pose_trajectory(rng, model, cfg, seg, pose_targets)
    rec = make_recording(rng, model, cfg, corr, speaker, pose, name)
    streams = make_streams(rng, cfg, seg, f0_targets, mgc_targets)
    return SyntheticUtterance(name, seg, rec, streams, pose)


def make_world(cfg: SyntheticConfig):
    """Everything the generator and the tests share: corpus, model, truth.

    Returns (corpus, model, correspondence, speaker, pose_targets,
    f0_targets, mgc_targets, rng) with the rng positioned to draw
    utterances.
    """
    if cfg.utterances < 1:
        raise UsageError("need at least one utterance")
    rng = np.random.default_rng(cfg.seed)
    corpus = make_corpus(rng, cfg)
    model, _, _ = build_model(corpus)
    corr = plant_correspondence(rng, model, cfg.coils)
    speaker = model.speaker_stats.mean + rng.uniform(
        -1.0, 1.0, size=model.speaker_dim
    ) * model.speaker_stats.sigma * cfg.speaker_spread
    pose_targets = phone_pose_targets(rng, model, cfg)
    f0_targets = {label: float(rng.uniform(100.0, 180.0)) for label in cfg.voiced}
    mgc_targets = {
        label: rng.normal(0.0, 0.7, size=cfg.mgc_dim)
        for label in list(cfg.phones) + [cfg.pause]
    }
    mgc_targets[cfg.pause] = np.zeros(cfg.mgc_dim)
    return corpus, model, corr, speaker, pose_targets, f0_targets, mgc_targets, rng
