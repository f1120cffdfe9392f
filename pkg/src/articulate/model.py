"""Multilinear tongue-shape model: build, generate, truncate, persist.

The model couples a speaker subspace (mode 1) and a pose subspace
(mode 2) through a core tensor whose long third mode carries the
serialized vertex positions.  Generation is

    v(s, p) = mean + core x_1 s^T x_2 p^T

so ``s = 0`` or ``p = 0`` yields the mean mesh exactly.

The data tensor is built from mean-subtracted feature vectors of the
centered meshes, which makes the ``+ mean`` in generation exact at
reconstruction time.

Model file format (magic ``MLTM0001``, all integers unsigned 64-bit
little-endian, all floats IEEE-754 doubles, strings u64-length-prefixed
UTF-8):

    magic | ms np vdim | mean[vdim] | core[ms*np*vdim] |
    nfaces | faces[3*nfaces] | speaker mean[ms] sigma[ms] |
    pose mean[np] sigma[np] | ncorr (label vertex)* |
    nspeakers label* | nposes label*
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileError, FormatError, ShapeError
from .mesh import Mesh, MeshCorpus, center, from_feature_vector, to_feature_vector
from .tensor import Tensor3, hosvd

__all__ = [
    "ParamStats",
    "ModelParams",
    "MultilinearModel",
    "build_model",
    "generate",
    "generate_features",
    "truncate",
    "save_model",
    "load_model",
]

MAGIC = b"MLTM0001"


@dataclass(frozen=True)
class ParamStats:
    """Per-dimension mean and standard deviation of one factor's rows."""

    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mean.shape != sigma.shape:
            raise ShapeError("stats mean/sigma length mismatch")
        if (sigma < 0).any():
            raise ShapeError("stats sigma must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)

    def __len__(self) -> int:
        return self.mean.size

    def box(self, c: float) -> tuple[np.ndarray, np.ndarray]:
        """Interval bounds [mean - c*sigma, mean + c*sigma]."""
        return self.mean - c * self.sigma, self.mean + c * self.sigma


@dataclass(frozen=True)
class ModelParams:
    """A (speaker, pose) coordinate pair in the model subspaces."""

    s: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class MultilinearModel:
    core: Tensor3                       # (ms, np, 3V)
    mean: np.ndarray                    # (3V,)
    faces: np.ndarray                   # (F, 3)
    speaker_stats: ParamStats
    pose_stats: ParamStats
    correspondence: list[tuple[str, int]] | None = None
    speakers: tuple[str, ...] = ()
    poses: tuple[str, ...] = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        ms, npd, vdim = self.core.dims
        if mean.size != vdim:
            raise ShapeError(f"mean length {mean.size} != core third mode {vdim}")
        if vdim % 3 != 0:
            raise ShapeError("core third mode must be 3 * vertex count")
        if faces.size and faces.max() >= vdim // 3:
            raise ShapeError("face index exceeds vertex count")
        if len(self.speaker_stats) != ms or len(self.pose_stats) != npd:
            raise ShapeError("stats lengths must match core dims")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "poses", tuple(self.poses))

    @property
    def speaker_dim(self) -> int:
        return self.core.dims[0]

    @property
    def pose_dim(self) -> int:
        return self.core.dims[1]

    @property
    def vertex_count(self) -> int:
        return self.core.dims[2] // 3

    def mean_params(self) -> ModelParams:
        return ModelParams(self.speaker_stats.mean, self.pose_stats.mean)


def build_model(corpus: MeshCorpus) -> tuple[MultilinearModel, np.ndarray, np.ndarray]:
    """Decompose a mesh corpus; returns (model, U1, U2).

    Rows of U1/U2 are the training speaker/pose parameters:
    ``generate(model, ModelParams(U1[i], U2[j]))`` reproduces training
    mesh (i, j) after centering.
    """
    m, n = len(corpus.speakers), len(corpus.poses)
    vdim = corpus.vertex_count * 3
    feats = np.empty((m, n, vdim))
    for i in range(m):
        for j in range(n):
            centered, _ = center(corpus.meshes[i][j])
            feats[i, j] = to_feature_vector(centered)
    mu = feats.reshape(m * n, vdim).mean(axis=0)
    core, u1, u2 = hosvd(Tensor3(feats - mu))
    model = MultilinearModel(
        core=core,
        mean=mu,
        faces=corpus.faces,
        speaker_stats=ParamStats(u1.mean(axis=0), u1.std(axis=0)),
        pose_stats=ParamStats(u2.mean(axis=0), u2.std(axis=0)),
        speakers=tuple(corpus.speakers),
        poses=tuple(corpus.poses),
    )
    return model, u1, u2


def generate_features(model: MultilinearModel, params: ModelParams) -> np.ndarray:
    """Positional feature vector ``mean + core x_1 s x_2 p`` (length 3V)."""
    if params.s.size != model.speaker_dim:
        raise ShapeError(
            f"speaker parameter length {params.s.size} != {model.speaker_dim}"
        )
    if params.p.size != model.pose_dim:
        raise ShapeError(f"pose parameter length {params.p.size} != {model.pose_dim}")
    offset = np.einsum("qrv,q,r->v", model.core.array, params.s, params.p)
    return model.mean + offset


def generate(model: MultilinearModel, params: ModelParams) -> Mesh:
    """Mesh for the given (speaker, pose) parameters."""
    return from_feature_vector(generate_features(model, params), model.faces)


def truncate(model: MultilinearModel, ms: int, npd: int) -> MultilinearModel:
    """Keep the leading ``ms`` speaker and ``npd`` pose subspace dimensions."""
    full_ms, full_np, _ = model.core.dims
    if not (1 <= ms <= full_ms) or not (1 <= npd <= full_np):
        raise ShapeError(
            f"truncation ({ms}, {npd}) out of range for core ({full_ms}, {full_np})"
        )
    return MultilinearModel(
        core=Tensor3(model.core.array[:ms, :npd, :]),
        mean=model.mean,
        faces=model.faces,
        speaker_stats=ParamStats(model.speaker_stats.mean[:ms],
                                 model.speaker_stats.sigma[:ms]),
        pose_stats=ParamStats(model.pose_stats.mean[:npd],
                              model.pose_stats.sigma[:npd]),
        correspondence=model.correspondence,
        speakers=model.speakers,
        poses=model.poses,
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FileError(f"{self.path}: truncated model file")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def u64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<u8").astype(np.int64)

    def string(self) -> str:
        return self.take(self.u64()).decode("utf-8")


def save_model(model: MultilinearModel, path) -> None:
    ms, npd, vdim = model.core.dims
    parts = [MAGIC, struct.pack("<QQQ", ms, npd, vdim)]
    parts.append(model.mean.astype("<f8").tobytes())
    parts.append(model.core.data.astype("<f8").tobytes())
    parts.append(struct.pack("<Q", len(model.faces)))
    parts.append(model.faces.astype("<u8").tobytes())
    for stats in (model.speaker_stats, model.pose_stats):
        parts.append(stats.mean.astype("<f8").tobytes())
        parts.append(stats.sigma.astype("<f8").tobytes())
    corr = model.correspondence or []
    parts.append(struct.pack("<Q", len(corr)))
    for label, vertex in corr:
        parts.append(_pack_str(label))
        parts.append(struct.pack("<Q", vertex))
    for names in (model.speakers, model.poses):
        parts.append(struct.pack("<Q", len(names)))
        for name in names:
            parts.append(_pack_str(name))
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise FileError(f"cannot write model file {path}: {exc}") from exc


def load_model(path) -> MultilinearModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FileError(f"cannot read model file {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    ms, npd, vdim = (r.u64() for _ in range(3))
    mean = r.f64s(vdim)
    core = Tensor3.from_flat((ms, npd, vdim), r.f64s(ms * npd * vdim))
    nfaces = r.u64()
    faces = r.u64s(3 * nfaces).reshape(-1, 3)
    speaker_stats = ParamStats(r.f64s(ms), r.f64s(ms))
    pose_stats = ParamStats(r.f64s(npd), r.f64s(npd))
    ncorr = r.u64()
    corr = []
    for _ in range(ncorr):
        label = r.string()
        corr.append((label, int(r.u64())))
    speakers = tuple(r.string() for _ in range(r.u64()))
    poses = tuple(r.string() for _ in range(r.u64()))
    return MultilinearModel(
        core=core,
        mean=mean,
        faces=faces,
        speaker_stats=speaker_stats,
        pose_stats=pose_stats,
        correspondence=corr or None,
        speakers=speakers,
        poses=poses,
    )


def with_correspondence(model: MultilinearModel,
                        pairs: list[tuple[str, int]]) -> MultilinearModel:
    """Copy of the model carrying coil-to-vertex assignments."""
    return MultilinearModel(
        core=model.core,
        mean=model.mean,
        faces=model.faces,
        speaker_stats=model.speaker_stats,
        pose_stats=model.pose_stats,
        correspondence=list(pairs),
        speakers=model.speakers,
        poses=model.poses,
    )
