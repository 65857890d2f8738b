"""Voxel design grid: bundle deposition, body extraction, and morphometrics.

The grid is a dense rho^3 lattice of material indices (uint8).  Material 0 is
empty space; depositing material 0 erases.  All objects here are immutable
value objects and all operations are pure functions, so they are safe to share
across threads and worker processes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

BUNDLE_EDGE = 2

# 6-face adjacency structuring element for component labelling.
_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)


class VoxelGrid:
    """Immutable rho x rho x rho lattice of material ids.

    Cells are stored in a C-ordered uint8 array indexed [x, y, z]; id 0 is
    the null material, ids 1..k-1 are physical materials.
    """

    __slots__ = ("resolution", "num_materials", "cells")

    def __init__(self, cells: np.ndarray, num_materials: int):
        cells = np.ascontiguousarray(cells, dtype=np.uint8)
        if cells.ndim != 3 or len(set(cells.shape)) != 1:
            raise ValueError(f"grid cells must be cubic, got shape {cells.shape}")
        if num_materials < 2:
            raise ValueError("need at least the null material and one physical material")
        if cells.max(initial=0) >= num_materials:
            raise ValueError("cell material id out of range")
        cells.flags.writeable = False
        self.resolution = cells.shape[0]
        self.num_materials = num_materials
        self.cells = cells

    @classmethod
    def empty(cls, resolution: int, num_materials: int) -> "VoxelGrid":
        return cls(np.zeros((resolution,) * 3, dtype=np.uint8), num_materials)

    def with_cells(self, cells: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(cells, self.num_materials)

    def __eq__(self, other):
        return (
            isinstance(other, VoxelGrid)
            and self.num_materials == other.num_materials
            and np.array_equal(self.cells, other.cells)
        )

    def __repr__(self):
        filled = int(np.count_nonzero(self.cells))
        return f"VoxelGrid(rho={self.resolution}, k={self.num_materials}, filled={filled})"


@dataclass(frozen=True)
class Bundle:
    """A 2x2x2 block of one material, addressed by its minimum corner.

    The corner may stick out of the grid by at most one voxel per axis
    (components in [-1, rho-1]), which guarantees 1..8 covered cells inside.
    """

    min_corner: tuple[int, int, int]
    material: int

    def covered_cells(self, resolution: int) -> np.ndarray:
        """In-grid (n, 3) indices covered by this bundle."""
        axes = []
        for c in self.min_corner:
            lo = max(c, 0)
            hi = min(c + BUNDLE_EDGE, resolution)
            if lo >= hi:
                return np.empty((0, 3), dtype=np.intp)
            axes.append(np.arange(lo, hi))
        xs, ys, zs = np.meshgrid(*axes, indexing="ij")
        return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)


@dataclass(frozen=True)
class Body:
    """Largest face-connected component of non-null voxels in a grid.

    ``indices`` are sorted lexicographically by (x, y, z); ``materials`` are
    aligned with them.  The bounding box is inclusive on both ends.
    """

    indices: np.ndarray     # (n, 3) int
    materials: np.ndarray   # (n,) uint8
    bbox_min: tuple[int, int, int]
    bbox_max: tuple[int, int, int]

    @property
    def volume(self) -> int:
        return self.indices.shape[0]

    def crop(self) -> np.ndarray:
        """Material array over the bounding box; cells outside the body are 0."""
        shape = tuple(hi - lo + 1 for lo, hi in zip(self.bbox_min, self.bbox_max))
        out = np.zeros(shape, dtype=np.uint8)
        rel = self.indices - np.asarray(self.bbox_min)
        out[rel[:, 0], rel[:, 1], rel[:, 2]] = self.materials
        return out

    def occupancy(self, resolution: int) -> np.ndarray:
        occ = np.zeros((resolution,) * 3, dtype=bool)
        occ[self.indices[:, 0], self.indices[:, 1], self.indices[:, 2]] = True
        return occ


@dataclass(frozen=True)
class BodyMetrics:
    volume: int
    surface_ratio: float
    passive_ratio: float
    lcc_ratio: float
    substructures: int
    symmetry: float
    gzip_score: float

    FIELDS = (
        "volume", "surface_ratio", "passive_ratio", "lcc_ratio",
        "substructures", "symmetry", "gzip_score",
    )

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def deposit_bundle(grid: VoxelGrid, bundle: Bundle) -> VoxelGrid:
    """Overwrite the bundle's in-grid cells with its material (0 erases)."""
    if not 0 <= bundle.material < grid.num_materials:
        raise ValueError(f"material {bundle.material} out of range")
    cells = bundle.covered_cells(grid.resolution)
    if cells.shape[0] == 0:
        raise ValueError(f"bundle at {bundle.min_corner} covers no in-grid cells")
    new = grid.cells.copy()
    new[cells[:, 0], cells[:, 1], cells[:, 2]] = bundle.material
    return grid.with_cells(new)


def extract_body(grid: VoxelGrid) -> Body | None:
    """Largest 6-connected component over all non-null cells, or None if empty.

    Size ties are broken in favour of the component containing the
    lexicographically smallest (x, y, z) index.
    """
    occupied = grid.cells != 0
    if not occupied.any():
        return None
    labels, n = ndimage.label(occupied, structure=_FACE_STRUCT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best)
    if candidates.size == 1:
        winner = candidates[0]
    else:
        # Lexicographic order on (x, y, z) is flat C order of labels[x, y, z].
        flat = labels.ravel()
        winner = flat[np.isin(flat, candidates).argmax()]
    mask = labels == winner
    idx = np.argwhere(mask)   # argwhere returns C-order, i.e. lexicographic
    return Body(
        indices=idx,
        materials=grid.cells[mask],
        bbox_min=tuple(int(v) for v in idx.min(axis=0)),
        bbox_max=tuple(int(v) for v in idx.max(axis=0)),
    )


def _surface_count(occ: np.ndarray) -> int:
    """Voxels of the occupancy mask with fewer than 6 face neighbours inside."""
    padded = np.pad(occ, 1)
    neighbours = np.zeros(occ.shape, dtype=np.int8)
    for axis in range(3):
        for shift in (-1, 1):
            neighbours += np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return int(np.count_nonzero(occ & (neighbours < 6)))


def _symmetry(crop: np.ndarray) -> float:
    occ = crop != 0
    volume = int(np.count_nonzero(occ))
    total = 0
    for axis in range(3):
        mirrored = np.flip(crop, axis=axis)
        total += int(np.count_nonzero(occ & (crop == mirrored)))
    return total / (3 * volume)


def _substructures(crop: np.ndarray) -> int:
    count = 0
    for material in np.unique(crop):
        if material == 0:
            continue
        _, n = ndimage.label(crop == material, structure=_FACE_STRUCT)
        count += n
    return count


def gzip_score(crop: np.ndarray) -> float:
    """Deflate (level 6) size of the raw material bytes over the raw size."""
    raw = np.ascontiguousarray(crop, dtype=np.uint8).tobytes()
    return len(zlib.compress(raw, 6)) / len(raw)


def compute_metrics(grid: VoxelGrid, body: Body | None) -> BodyMetrics:
    if body is None or body.volume == 0:
        raise ValueError("cannot compute metrics of an empty body")
    crop = body.crop()
    occ = crop != 0
    volume = body.volume
    return BodyMetrics(
        volume=volume,
        surface_ratio=_surface_count(occ) / volume,
        passive_ratio=int(np.count_nonzero(body.materials == 1)) / volume,
        lcc_ratio=volume / int(np.count_nonzero(grid.cells)),
        substructures=_substructures(crop),
        symmetry=_symmetry(crop),
        gzip_score=gzip_score(crop),
    )


def save_vxg(path, grid: VoxelGrid) -> None:
    """Write the text grid format: header ``VXG1 <rho> <k>``, then rho^3 ids.

    Cells are listed x-major (x slowest, z fastest), one grid row per line.
    """
    with open(path, "w") as f:
        f.write(f"VXG1 {grid.resolution} {grid.num_materials}\n")
        flat = grid.cells.reshape(grid.resolution * grid.resolution, grid.resolution)
        for row in flat:
            f.write(" ".join(str(int(v)) for v in row))
            f.write("\n")


def load_vxg(path) -> VoxelGrid:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "VXG1":
            raise ValueError(f"{path}: not a VXG1 file")
        rho, k = int(header[1]), int(header[2])
        values = f.read().split()
    if len(values) != rho**3:
        raise ValueError(f"{path}: expected {rho**3} cells, found {len(values)}")
    cells = np.array(values, dtype=np.uint8).reshape(rho, rho, rho)
    return VoxelGrid(cells, k)
