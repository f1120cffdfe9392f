"""Registration of EMA coil trajectories to the multilinear model.

Per frame, the fitted (s, p) minimizes

    E(s, p) = E_Data + alpha * E_SC + beta * E_PS

where E_Data is the sum of squared distances (mm^2) between the
corresponded model vertices and the coil targets, E_SC = |s - s_prev|^2
penalizes speaker drift and E_PS = |p - p_prev|^2 penalizes pose jumps.
The first frame of a sequence has no previous step, so its temporal
terms are zero.  Every parameter entry is confined to the interval
[mean_i - c * sigma_i, mean_i + c * sigma_i] of its training statistic;
the minimizer is the projected L-BFGS solver in :mod:`.optimize`.

Gradients are analytic.  With x_k(s, p) = mu_k + G_k x_1 s x_2 p and
residual r_k = x_k - target_k:

    dE_Data/ds = 2 * sum_k (G_k x_2 p)^T r_k
    dE_Data/dp = 2 * sum_k (G_k x_1 s)^T r_k
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .ema import EmaRecording
from .errors import DataError, FileError, FormatError, NumericError, ShapeError, UsageError
from .model import ModelParams, MultilinearModel
from .optimize import minimize_box_lbfgs

__all__ = [
    "FitOptions",
    "Correspondence",
    "FitResult",
    "PoseTrajectory",
    "eval_energy",
    "fit_frame",
    "fit_sequence",
    "estimate_correspondence",
    "estimate_speaker",
    "virtual_ema",
    "save_fit_result",
    "save_pose_trajectory",
    "load_pose_trajectory",
]


@dataclass(frozen=True)
class FitOptions:
    """Energy weights, constraint radius, and solver settings."""

    alpha: float = 0.0           # speaker-consistency weight
    beta: float = 0.0            # pose-smoothness weight
    c: float = 3.0               # box half-width in training sigmas
    fix_speaker: np.ndarray | None = None
    gtol: float = 1e-6           # projected-gradient infinity norm
    max_iter: int = 200
    restarts: int = 10           # correspondence restarts
    seed: int = 0                # RNG seed for correspondence sampling
    corr_iters: int = 20         # fit/reassign alternations per restart
    corr_frames: int = 10        # representative frames used for correspondence

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise UsageError("alpha and beta must be non-negative")
        if self.c <= 0:
            raise UsageError("constraint radius c must be positive")
        if self.fix_speaker is not None:
            object.__setattr__(
                self, "fix_speaker",
                np.asarray(self.fix_speaker, dtype=np.float64).reshape(-1),
            )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "c": self.c,
            "fixSpeaker": None if self.fix_speaker is None else list(self.fix_speaker),
            "gtol": self.gtol,
            "maxIter": self.max_iter,
            "restarts": self.restarts,
            "seed": self.seed,
            "corrIters": self.corr_iters,
            "corrFrames": self.corr_frames,
        }


@dataclass(frozen=True)
class Correspondence:
    """Coil-to-vertex assignment plus its achieved mean distance."""

    pairs: tuple[tuple[str, int], ...]
    mean_distance_mm: float

    def __post_init__(self):
        pairs = tuple((str(l), int(v)) for l, v in self.pairs)
        vertices = [v for _, v in pairs]
        if len(set(vertices)) != len(vertices):
            raise DataError("correspondence vertices must be distinct")
        object.__setattr__(self, "pairs", pairs)

    @property
    def labels(self) -> list[str]:
        return [l for l, _ in self.pairs]

    @property
    def vertices(self) -> np.ndarray:
        return np.array([v for _, v in self.pairs], dtype=np.int64)


@dataclass
class FitResult:
    """Per-frame parameters, energy terms, and coil residuals."""

    utterance: str
    frame_rate: float
    coil_labels: list[str]
    s: np.ndarray           # (T, ms)
    p: np.ndarray           # (T, np)
    energies: np.ndarray    # (T, 3): data, speaker-consistency, pose-smoothness
    residuals: np.ndarray   # (T, K) per-coil distance, mm
    options: dict

    @property
    def n_frames(self) -> int:
        return len(self.p)

    def pose_trajectory(self) -> "PoseTrajectory":
        return PoseTrajectory(
            frame_rate=self.frame_rate,
            speaker=self.s[0].copy() if len(self.s) else np.zeros(0),
            frames=self.p.copy(),
            utterance=self.utterance,
        )


@dataclass(frozen=True)
class PoseTrajectory:
    """A fitted or synthesized pose-parameter sequence for one utterance."""

    frame_rate: float
    speaker: np.ndarray
    frames: np.ndarray      # (T, np)
    utterance: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "speaker", np.asarray(self.speaker, dtype=np.float64).reshape(-1)
        )
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ShapeError("pose trajectory must be a (T, n) array")
        object.__setattr__(self, "frames", frames)


class _CoilSystem:
    """Sub-core restricted to the corresponded vertices, for fast energy evals."""

    def __init__(self, model: MultilinearModel, vertex_indices):
        idx = np.asarray(vertex_indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= model.vertex_count):
            raise ShapeError("correspondence vertex index out of range")
        ms, npd, vdim = model.core.dims
        self.mu = model.mean.reshape(-1, 3)[idx]                       # (K, 3)
        self.core = model.core.array.reshape(ms, npd, -1, 3)[:, :, idx, :]

    def positions(self, s, p):
        return self.mu + np.einsum("qrka,q,r->ka", self.core, s, p)

    def trajectory_positions(self, speaker, frames):
        contracted = np.einsum("qrka,q->rka", self.core, speaker)
        return self.mu + np.einsum("rka,tr->tka", contracted, frames)

    def energy(self, s, p, targets, prev, alpha, beta):
        """Returns (value, grad_s, grad_p, e_data, e_sc, e_ps)."""
        bs = np.einsum("qrka,r->qka", self.core, p)        # d positions / d s
        x = self.mu + np.einsum("qka,q->ka", bs, s)
        r = x - targets
        e_data = float((r * r).sum())
        grad_s = 2.0 * np.einsum("qka,ka->q", bs, r)
        bp = np.einsum("qrka,q->rka", self.core, s)        # d positions / d p
        grad_p = 2.0 * np.einsum("rka,ka->r", bp, r)
        e_sc = e_ps = 0.0
        if prev is not None:
            ds = s - prev.s
            dp = p - prev.p
            e_sc = float(ds @ ds)
            e_ps = float(dp @ dp)
            grad_s = grad_s + 2.0 * alpha * ds
            grad_p = grad_p + 2.0 * beta * dp
        value = e_data + alpha * e_sc + beta * e_ps
        return value, grad_s, grad_p, e_data, e_sc, e_ps

    def residual_distances(self, s, p, targets):
        return np.linalg.norm(self.positions(s, p) - targets, axis=1)


def _split_coils(model, coils):
    indices = [int(v) for v, _ in coils]
    targets = np.array([t for _, t in coils], dtype=np.float64).reshape(-1, 3)
    return _CoilSystem(model, indices), targets


def eval_energy(model, coils, s, p, prev: ModelParams | None = None,
                alpha: float = 0.0, beta: float = 0.0):
    """Energy and analytic gradients for one frame.

    ``coils`` is a list of (vertex index, target point) pairs.  With no
    previous-frame parameters the temporal terms are zero.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if s.size != model.speaker_dim or p.size != model.pose_dim:
        raise ShapeError("parameter lengths do not match the model")
    system, targets = _split_coils(model, coils)
    value, grad_s, grad_p, _, _, _ = system.energy(s, p, targets, prev, alpha, beta)
    return value, grad_s, grad_p


def _frame_minimize(system, targets, model, opts, prev):
    ms = model.speaker_dim
    lo_s, hi_s = model.speaker_stats.box(opts.c)
    lo_p, hi_p = model.pose_stats.box(opts.c)

    if opts.fix_speaker is not None:
        s_fixed = opts.fix_speaker
        if s_fixed.size != ms:
            raise ShapeError("fix_speaker length does not match the model")

        def fun(p):
            value, _, grad_p, *_ = system.energy(
                s_fixed, p, targets, prev, opts.alpha, opts.beta
            )
            return value, grad_p

        x0 = prev.p if prev is not None else model.pose_stats.mean
        res = minimize_box_lbfgs(fun, x0, lo_p, hi_p,
                                 gtol=opts.gtol, max_iter=opts.max_iter)
        params = ModelParams(s_fixed, res.x)
    else:
        lower = np.concatenate([lo_s, lo_p])
        upper = np.concatenate([hi_s, hi_p])

        def fun(z):
            value, grad_s, grad_p, *_ = system.energy(
                z[:ms], z[ms:], targets, prev, opts.alpha, opts.beta
            )
            return value, np.concatenate([grad_s, grad_p])

        if prev is not None:
            x0 = np.concatenate([prev.s, prev.p])
        else:
            x0 = np.concatenate([model.speaker_stats.mean, model.pose_stats.mean])
        res = minimize_box_lbfgs(fun, x0, lower, upper,
                                 gtol=opts.gtol, max_iter=opts.max_iter)
        params = ModelParams(res.x[:ms], res.x[ms:])

    _, _, _, e_data, e_sc, e_ps = system.energy(
        params.s, params.p, targets, prev, opts.alpha, opts.beta
    )
    diagnostics = {
        "e_data": e_data,
        "e_sc": e_sc,
        "e_ps": e_ps,
        "iterations": res.iterations,
        "pg_norm": res.pg_norm,
        "converged": res.converged,
        "residuals": system.residual_distances(params.s, params.p, targets),
    }
    return params, diagnostics


def fit_frame(model, coil_targets, correspondence: Correspondence,
              opts: FitOptions, prev: ModelParams | None = None):
    """Fit one frame; ``coil_targets`` rows follow ``correspondence.pairs``.

    Warm-starts from ``prev`` when given, else from the training means.
    Returns (ModelParams, diagnostics dict).
    """
    targets = np.asarray(coil_targets, dtype=np.float64).reshape(-1, 3)
    if len(targets) != len(correspondence.pairs):
        raise ShapeError("target count does not match correspondence")
    system = _CoilSystem(model, correspondence.vertices)
    return _frame_minimize(system, targets, model, opts, prev)


def fit_sequence(model, rec: EmaRecording, correspondence: Correspondence,
                 opts: FitOptions) -> FitResult:
    """Fit all frames in temporal order with warm starts and temporal coupling."""
    labels = correspondence.labels
    targets = rec.stacked(labels)
    if not np.isfinite(targets).all():
        raise DataError(
            f"{rec.utterance}: coil positions contain missing values; "
            "run interpolate_invalid first"
        )
    system = _CoilSystem(model, correspondence.vertices)
    T = len(targets)
    s_out = np.empty((T, model.speaker_dim))
    p_out = np.empty((T, model.pose_dim))
    energies = np.empty((T, 3))
    residuals = np.empty((T, len(labels)))
    # With both temporal weights at zero the frames are independent by
    # contract, so no warm start either; results are then invariant
    # under frame permutation.
    coupled = opts.alpha > 0 or opts.beta > 0
    prev = None
    for t in range(T):
        try:
            params, diag = _frame_minimize(system, targets[t], model, opts, prev)
        except NumericError as exc:
            raise NumericError(f"{rec.utterance}: frame {t}: {exc}") from exc
        s_out[t] = params.s
        p_out[t] = params.p
        energies[t] = (diag["e_data"], diag["e_sc"], diag["e_ps"])
        residuals[t] = diag["residuals"]
        prev = params if coupled else None
    return FitResult(
        utterance=rec.utterance,
        frame_rate=rec.frame_rate,
        coil_labels=list(labels),
        s=s_out,
        p=p_out,
        energies=energies,
        residuals=residuals,
        options=opts.to_dict(),
    )


def _assign_distinct(positions, targets):
    """Greedy nearest-vertex assignment, coil by coil.

    ``positions``: (F, V, 3) vertex positions over the representative
    frames; ``targets``: (F, K, 3).  Each coil takes the unused vertex
    with the smallest mean squared distance (ties go to the lower
    index); a collision falls through to the next nearest.
    """
    n_vertices = positions.shape[1]
    taken = np.zeros(n_vertices, dtype=bool)
    assignment = []
    for k in range(targets.shape[1]):
        d2 = ((positions - targets[:, k][:, None, :]) ** 2).sum(axis=2).mean(axis=0)
        d2 = np.where(taken, np.inf, d2)
        vertex = int(np.argmin(d2))
        taken[vertex] = True
        assignment.append(vertex)
    return assignment


def estimate_correspondence(model, rec: EmaRecording, coil_labels,
                            opts: FitOptions | None = None) -> Correspondence:
    """Semi-supervised coil-to-vertex search with seeded random restarts.

    Each restart samples parameters uniformly inside the c-box, assigns
    nearest distinct vertices, then alternates per-frame fitting and
    reassignment until the assignment is stable (at most
    ``opts.corr_iters`` rounds).  The restart with the smallest mean
    Euclidean distance wins; ties keep the earlier restart.
    """
    opts = opts if opts is not None else FitOptions(c=0.25)
    coil_labels = list(coil_labels)
    if model.vertex_count < len(coil_labels):
        raise DataError("model has fewer vertices than coils")
    if rec.n_frames < 1:
        raise DataError("recording has no frames")

    all_targets = rec.stacked(coil_labels)
    if not np.isfinite(all_targets).all():
        raise DataError("coil positions contain missing values")
    n_sel = min(opts.corr_frames, rec.n_frames)
    sel = np.unique(np.round(np.linspace(0, rec.n_frames - 1, n_sel)).astype(int))
    targets = all_targets[sel]                                   # (F, K, 3)

    ms, npd, vdim = model.core.dims
    lo_s, hi_s = model.speaker_stats.box(opts.c)
    lo_p, hi_p = model.pose_stats.box(opts.c)
    frame_opts = replace(opts, alpha=0.0, beta=0.0)
    rng = np.random.default_rng(opts.seed)

    best: tuple[float, list[int]] | None = None
    for _ in range(max(1, opts.restarts)):
        s0 = rng.uniform(lo_s, hi_s)
        p0 = rng.uniform(lo_p, hi_p)
        params = [ModelParams(s0, p0) for _ in sel]
        feats = model.mean + np.einsum("qrv,q,r->v", model.core.array, s0, p0)
        positions = np.broadcast_to(
            feats.reshape(1, -1, 3), (len(sel), model.vertex_count, 3)
        )
        assignment = _assign_distinct(positions, targets)
        for _ in range(max(1, opts.corr_iters)):
            system = _CoilSystem(model, assignment)
            params = [
                _frame_minimize(system, targets[f], model, frame_opts, params[f])[0]
                for f in range(len(sel))
            ]
            positions = np.stack([
                (model.mean + np.einsum("qrv,q,r->v", model.core.array,
                                        prm.s, prm.p)).reshape(-1, 3)
                for prm in params
            ])
            new_assignment = _assign_distinct(positions, targets)
            if new_assignment == assignment:
                break
            assignment = new_assignment
        vertex_pos = positions[:, assignment, :]                 # (F, K, 3)
        residual = float(np.linalg.norm(vertex_pos - targets, axis=2).mean())
        if best is None or residual < best[0]:
            best = (residual, assignment)

    residual, assignment = best
    return Correspondence(
        pairs=tuple(zip(coil_labels, assignment)),
        mean_distance_mm=residual,
    )


def estimate_speaker(model, recs, correspondence: Correspondence,
                     pass1_opts: FitOptions, pass2_opts: FitOptions):
    """Two-pass anatomy estimation.

    Pass 1 fits every recording with free (s, p) and averages all
    per-frame speaker parameters into one estimate.  Pass 2 refits every
    frame with the speaker fixed to that estimate, yielding the pose
    trajectories used as synthesis training data.

    Returns (speaker estimate, list of pass-2 FitResults).
    """
    recs = list(recs)
    if not recs:
        raise UsageError("estimate_speaker needs at least one recording")
    frames = 0
    acc = np.zeros(model.speaker_dim)
    for rec in recs:
        result = fit_sequence(model, rec, correspondence, pass1_opts)
        acc += result.s.sum(axis=0)
        frames += result.n_frames
    s_hat = acc / frames
    fixed_opts = replace(pass2_opts, fix_speaker=s_hat)
    results = [fit_sequence(model, rec, correspondence, fixed_opts) for rec in recs]
    return s_hat, results


def virtual_ema(model, correspondence: Correspondence, pose_frames,
                speaker, frame_rate: float, utterance: str = "") -> EmaRecording:
    """Synthetic coil trajectories read off the corresponded vertices."""
    pose_frames = np.asarray(pose_frames, dtype=np.float64)
    if pose_frames.ndim == 1:
        pose_frames = pose_frames[None, :]
    speaker = np.asarray(speaker, dtype=np.float64).reshape(-1)
    if pose_frames.shape[1] != model.pose_dim or speaker.size != model.speaker_dim:
        raise ShapeError("trajectory dims do not match the model")
    system = _CoilSystem(model, correspondence.vertices)
    positions = system.trajectory_positions(speaker, pose_frames)   # (T, K, 3)
    channels = {
        label: positions[:, k, :] for k, label in enumerate(correspondence.labels)
    }
    return EmaRecording(utterance=utterance, frame_rate=frame_rate,
                        channels=channels)


def save_fit_result(result: FitResult, path) -> None:
    doc = {
        "utterance": result.utterance,
        "frameRate": result.frame_rate,
        "coils": result.coil_labels,
        "options": result.options,
        "frames": [
            {
                "s": list(result.s[t]),
                "p": list(result.p[t]),
                "energy": {
                    "data": result.energies[t, 0],
                    "speakerConsistency": result.energies[t, 1],
                    "poseSmoothness": result.energies[t, 2],
                },
                "residuals": {
                    label: result.residuals[t, k]
                    for k, label in enumerate(result.coil_labels)
                },
            }
            for t in range(result.n_frames)
        ],
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise FileError(f"cannot write fit result {path}: {exc}") from exc


def save_pose_trajectory(traj: PoseTrajectory, path) -> None:
    doc = {
        "utterance": traj.utterance,
        "frameRate": traj.frame_rate,
        "speaker": list(traj.speaker),
        "frames": [list(row) for row in traj.frames],
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise FileError(f"cannot write pose trajectory {path}: {exc}") from exc


def load_pose_trajectory(path) -> PoseTrajectory:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise FileError(f"cannot read pose trajectory {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("frameRate", "speaker", "frames"):
        if key not in raw:
            raise FormatError(f"{path}: missing field '{key}'")
    return PoseTrajectory(
        frame_rate=float(raw["frameRate"]),
        speaker=np.asarray(raw["speaker"], dtype=np.float64),
        frames=np.asarray(raw["frames"], dtype=np.float64),
        utterance=str(raw.get("utterance", "")),
    )
