"""Core surface-domain containers: models, fragments, label maps, voxel grids.

All coordinates are in millimeters.  The global ID of a surface point is its
row index in the model arrays; it is stable for the lifetime of the model and
is what fragments carry around so per-fragment results can be written back
onto the whole model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ARTERY = 0
ANEURYSM = 1

_NORMAL_TOL = 1e-6


class SurfaceError(ValueError):
    """Raised when a surface container violates its invariants."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SurfaceModel:
    """Indexed point set with unit normals and optional triangle connectivity.

    Parameters
    ----------
    positions : (N, 3) float array, mm
    normals : (N, 3) float array, unit length
    triangles : (M, 3) int array or None
        Vertex-index triples; orientation is taken as given.
    """

    positions: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        nrm = np.asarray(self.normals, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] == 0:
            raise SurfaceError(f"positions must be a nonempty (N, 3) array, got {pos.shape}")
        if nrm.shape != pos.shape:
            raise SurfaceError(f"normals shape {nrm.shape} does not match positions {pos.shape}")
        if not np.isfinite(pos).all():
            raise SurfaceError("non-finite coordinate in positions")
        if not np.isfinite(nrm).all():
            raise SurfaceError("non-finite value in normals")
        lens = np.linalg.norm(nrm, axis=1)
        bad = np.abs(lens - 1.0) > _NORMAL_TOL
        if bad.any():
            raise SurfaceError(f"{int(bad.sum())} normals are not unit length (first at index {int(np.argmax(bad))})")
        tri = self.triangles
        if tri is not None:
            tri = np.asarray(tri, dtype=np.int64)
            if tri.ndim != 2 or tri.shape[1] != 3:
                raise SurfaceError(f"triangles must be (M, 3), got {tri.shape}")
            if tri.size and (tri.min() < 0 or tri.max() >= pos.shape[0]):
                raise SurfaceError("triangle index out of range")
            degen = (tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])
            if degen.any():
                raise SurfaceError(f"{int(degen.sum())} degenerate triangles (repeated vertex index)")
            object.__setattr__(self, "triangles", _freeze(tri))
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "normals", _freeze(nrm))

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def checksum(self) -> str:
        """Digest of the point set; binds fragments to their source model."""
        h = hashlib.blake2b(digest_size=16)
        h.update(np.int64(self.n_points).tobytes())
        h.update(self.positions.tobytes())
        return h.hexdigest()

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


@dataclass(frozen=True)
class Fragment:
    """A geodesic patch of a parent model.

    ``member_ids`` are global point IDs (strictly increasing); ``positions``
    and ``normals`` are row-aligned copies so a fragment can be processed
    without the parent model in hand.  ``parent_checksum`` must match the
    parent's :attr:`SurfaceModel.checksum` before results are merged back.
    """

    seed: int
    member_ids: np.ndarray
    positions: np.ndarray
    normals: np.ndarray
    parent_checksum: str

    def __post_init__(self):
        ids = np.asarray(self.member_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise SurfaceError("member_ids must be a nonempty 1-D array")
        if not (np.diff(ids) > 0).all():
            raise SurfaceError("member_ids must be strictly increasing")
        if ids[0] < 0:
            raise SurfaceError("negative global ID")
        if self.seed not in ids:
            raise SurfaceError(f"seed {self.seed} not among member_ids")
        pos = np.asarray(self.positions, dtype=np.float64)
        nrm = np.asarray(self.normals, dtype=np.float64)
        if pos.shape != (ids.size, 3) or nrm.shape != (ids.size, 3):
            raise SurfaceError("positions/normals must align with member_ids")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "member_ids", _freeze(ids))
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "normals", _freeze(nrm))

    @property
    def size(self) -> int:
        return self.member_ids.size

    @classmethod
    def from_model(cls, model: SurfaceModel, seed: int, member_ids: np.ndarray) -> "Fragment":
        ids = np.asarray(member_ids, dtype=np.int64)
        if ids.size and ids.max() >= model.n_points:
            raise SurfaceError("member ID exceeds parent model size")
        return cls(
            seed=int(seed),
            member_ids=ids,
            positions=model.positions[ids],
            normals=model.normals[ids],
            parent_checksum=model.checksum,
        )


@dataclass(frozen=True)
class LabelMap:
    """Per-point binary labels with aneurysm probability and pass coverage.

    ``coverage`` counts how many segmentation passes sampled each point; a
    point never sampled must be labeled artery.
    """

    labels: np.ndarray
    prob: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.uint8)
        prob = np.asarray(self.prob, dtype=np.float64)
        cov = np.asarray(self.coverage, dtype=np.int64)
        n = lab.shape[0]
        if lab.ndim != 1 or prob.shape != (n,) or cov.shape != (n,):
            raise SurfaceError("labels, prob and coverage must be 1-D arrays of equal length")
        if not np.isin(lab, (ARTERY, ANEURYSM)).all():
            raise SurfaceError("labels must be 0 (artery) or 1 (aneurysm)")
        if not (np.isfinite(prob).all() and (prob >= 0).all() and (prob <= 1).all()):
            raise SurfaceError("prob must lie in [0, 1]")
        if (cov < 0).any():
            raise SurfaceError("coverage must be non-negative")
        if (lab[cov == 0] == ANEURYSM).any():
            raise SurfaceError("point with zero coverage labeled aneurysm")
        object.__setattr__(self, "labels", _freeze(lab))
        object.__setattr__(self, "prob", _freeze(prob))
        object.__setattr__(self, "coverage", _freeze(cov))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def all_artery(cls, n: int) -> "LabelMap":
        return cls(np.zeros(n, np.uint8), np.zeros(n), np.zeros(n, np.int64))

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "LabelMap":
        """Wrap bare labels (e.g. ground truth) with full coverage and 0/1 prob."""
        lab = np.asarray(labels, dtype=np.uint8)
        return cls(lab, lab.astype(np.float64), np.ones(lab.shape[0], np.int64))

    def aneurysm_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels == ANEURYSM)


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned occupancy grid.

    ``origin`` is the corner of voxel (0, 0, 0); the center of voxel
    (i, j, k) sits at ``origin + (i+.5, j+.5, k+.5) * spacing``.  Occupancy is
    stored as a (nx, ny, nz) boolean array; the serialized layout is
    x-fastest.
    """

    origin: np.ndarray
    spacing: float
    occupancy: np.ndarray
    winding: np.ndarray | None = field(default=None)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or min(occ.shape) < 1:
            raise SurfaceError(f"occupancy must be a 3-D array with positive dims, got {occ.shape}")
        if not (self.spacing > 0):
            raise SurfaceError("spacing must be positive")
        if self.winding is not None:
            w = np.asarray(self.winding, dtype=np.float64)
            if w.shape != occ.shape:
                raise SurfaceError("winding shape must match occupancy")
            object.__setattr__(self, "winding", _freeze(w))
        object.__setattr__(self, "origin", _freeze(origin))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "occupancy", _freeze(occ))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    def centers(self) -> np.ndarray:
        """Voxel-center coordinates, shape (nx*ny*nz, 3), x-fastest order."""
        nx, ny, nz = self.dims
        idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
        flat = idx.transpose(2, 1, 0, 3).reshape(-1, 3)
        return self.origin + (flat + 0.5) * self.spacing

    def occupied_lattice(self) -> set[tuple[int, int, int]]:
        """Occupied voxels as world-lattice indices (grids with a shared
        spacing and lattice-aligned origins become directly comparable)."""
        shift = np.rint(self.origin / self.spacing).astype(np.int64)
        ii, jj, kk = np.nonzero(self.occupancy)
        return {(int(i + shift[0]), int(j + shift[1]), int(k + shift[2])) for i, j, k in zip(ii, jj, kk)}
