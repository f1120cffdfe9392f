"""Triangle meshes, OBJ I/O, feature vectors, and nearest-vertex queries.

Coordinates are millimeters throughout.  Faces are triangles only;
vertex indices are 0-based in memory and 1-based in OBJ files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusError, FileError, FormatError, NumericError, ShapeError

__all__ = [
    "Mesh",
    "MeshCorpus",
    "load_obj",
    "save_obj",
    "center",
    "to_feature_vector",
    "from_feature_vector",
    "nearest_vertex",
]


@dataclass(frozen=True)
class Mesh:
    """Vertex positions (V x 3, mm) plus triangular faces (F x 3, 0-based)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if not np.isfinite(verts).all():
            raise NumericError("mesh coordinates must be finite")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ShapeError(
                f"face index out of range (vertex count {len(verts)})"
            )
        verts.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class MeshCorpus:
    """Fully populated speakers x poses grid of meshes sharing one face set."""

    speakers: list[str]
    poses: list[str]
    meshes: list[list[Mesh]]

    def __post_init__(self):
        m, n = len(self.speakers), len(self.poses)
        if m < 1 or n < 1:
            raise CorpusError("corpus needs at least one speaker and one pose")
        if len(self.meshes) != m or any(len(row) != n for row in self.meshes):
            raise CorpusError(f"mesh grid is not fully populated ({m} x {n})")
        ref = self.meshes[0][0]
        for i, row in enumerate(self.meshes):
            for j, mesh in enumerate(row):
                if mesh.vertex_count != ref.vertex_count:
                    raise CorpusError(
                        f"mesh ({self.speakers[i]}, {self.poses[j]}) has "
                        f"{mesh.vertex_count} vertices, expected {ref.vertex_count}"
                    )
                if not np.array_equal(mesh.faces, ref.faces):
                    raise CorpusError(
                        f"mesh ({self.speakers[i]}, {self.poses[j]}) face set differs"
                    )

    @property
    def vertex_count(self) -> int:
        return self.meshes[0][0].vertex_count

    @property
    def faces(self) -> np.ndarray:
        return self.meshes[0][0].faces


def load_obj(path) -> Mesh:
    """Parse the `v`/`f` subset of Wavefront OBJ (triangles only)."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise FileError(f"cannot read OBJ file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            if len(tokens) != 4:
                raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(x) for x in tokens[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad vertex coordinate") from exc
        elif tag == "f":
            if len(tokens) != 4:
                raise FormatError(
                    f"{path}:{lineno}: only triangular faces are supported"
                )
            try:
                idx = [int(x) for x in tokens[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad face index") from exc
            if any(i < 1 for i in idx):
                raise FormatError(f"{path}:{lineno}: face indices are 1-based")
            faces.append([i - 1 for i in idx])
        # other record types (vn, vt, o, ...) are ignored
    try:
        return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                    np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_obj(mesh: Mesh, path) -> None:
    """Write `v` records at 9 significant digits and 1-based `f` records."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for x, y, z in mesh.vertices:
                fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
            for a, b, c in mesh.faces:
                fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
    except OSError as exc:
        raise FileError(f"cannot write OBJ file {path}: {exc}") from exc


def center(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """Translate the vertex centroid to the origin; returns (mesh', centroid)."""
    if mesh.vertex_count < 1:
        raise ShapeError("cannot center an empty mesh")
    centroid = mesh.vertices.mean(axis=0)
    return Mesh(mesh.vertices - centroid, mesh.faces), centroid


def to_feature_vector(mesh: Mesh) -> np.ndarray:
    """Serialize vertex positions as (x, y, z) per vertex, order preserved."""
    return mesh.vertices.reshape(-1).copy()


def from_feature_vector(vec, faces) -> Mesh:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size % 3 != 0:
        raise ShapeError(f"feature vector length {vec.size} is not a multiple of 3")
    return Mesh(vec.reshape(-1, 3), faces)


def nearest_vertex(mesh: Mesh, point) -> tuple[int, float]:
    """Exhaustive nearest-vertex search; ties go to the lowest index."""
    point = np.asarray(point, dtype=np.float64).reshape(3)
    d2 = np.einsum("ij,ij->i", mesh.vertices - point, mesh.vertices - point)
    idx = int(np.argmin(d2))  # argmin returns the first minimum
    return idx, float(np.sqrt(d2[idx]))
