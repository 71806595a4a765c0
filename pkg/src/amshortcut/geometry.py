"""Periodic cell arithmetic: wrapping, minimum-image displacements and
cutoff neighbor lists.

Cells are stored as a 3x3 matrix whose rows are the lattice vectors.
The minimum image is found by enumerating the 27 nearest images of the
reduced fractional displacement, which is exact for orthorhombic cells.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

BRUTE_FORCE_MAX_ATOMS = 512

_IMAGE_SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


class DegenerateCellError(ValueError):
    pass


class CutoffWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Cell:
    lattice: np.ndarray

    def __post_init__(self):
        lattice = np.asarray(self.lattice, dtype=float).reshape(3, 3)
        det = float(np.linalg.det(lattice))
        if not np.isfinite(det) or det <= 0.0:
            raise DegenerateCellError(f"cell lattice must have positive determinant, got {det}")
        object.__setattr__(self, "lattice", lattice)

    @classmethod
    def cubic(cls, edge: float) -> "Cell":
        return cls(np.eye(3) * float(edge))

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.lattice))

    @property
    def heights(self) -> np.ndarray:
        """Perpendicular widths of the cell along each lattice direction."""
        a, b, c = self.lattice
        areas = np.array([
            np.linalg.norm(np.cross(b, c)),
            np.linalg.norm(np.cross(c, a)),
            np.linalg.norm(np.cross(a, b)),
        ])
        return self.volume / areas

    @property
    def orthorhombic(self) -> bool:
        return not np.any(self.lattice[~np.eye(3, dtype=bool)])

    def to_fractional(self, positions) -> np.ndarray:
        return np.asarray(positions, dtype=float) @ np.linalg.inv(self.lattice)

    def to_cartesian(self, fractional) -> np.ndarray:
        return np.asarray(fractional, dtype=float) @ self.lattice

    def __eq__(self, other):
        return isinstance(other, Cell) and np.array_equal(self.lattice, other.lattice)

    def __hash__(self):
        return hash(self.lattice.tobytes())


def _as_cell(cell) -> Cell:
    return cell if isinstance(cell, Cell) else Cell(np.asarray(cell))


def min_image_vectors(cell, disp) -> np.ndarray:
    """Minimum-image version of an array of raw displacements (..., 3)."""
    cell = _as_cell(cell)
    disp = np.asarray(disp, dtype=float)
    frac = cell.to_fractional(disp)
    frac = frac - np.round(frac)
    if cell.orthorhombic:
        # rounding alone is exact for orthogonal lattice vectors
        return frac @ cell.lattice
    cand = (frac[..., None, :] + _IMAGE_SHIFTS) @ cell.lattice
    best = np.argmin(np.einsum("...ij,...ij->...i", cand, cand), axis=-1)
    return np.take_along_axis(cand, best[..., None, None], axis=-2)[..., 0, :]


def min_image_displacement(cell, a, b) -> np.ndarray:
    """Shortest periodic image of ``a - b``."""
    return min_image_vectors(cell, np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def wrap_into_cell(cell, pos) -> np.ndarray:
    """Map positions so every fractional coordinate lies in [0, 1)."""
    cell = _as_cell(cell)
    frac = cell.to_fractional(pos)
    frac = frac - np.floor(frac)
    # floor can leave exactly 1.0 after rounding of tiny negatives
    frac[frac >= 1.0] = 0.0
    return cell.to_cartesian(frac)


@dataclass
class NeighborGraph:
    """Directed edge list; ``offsets[e] = pos[i] - pos[j] - disp[e]``."""

    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray
    distances: np.ndarray
    cutoff: float

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist(), self.offsets, self.distances.tolist()))


def _finish_graph(src, dst, disp, positions, cutoff) -> NeighborGraph:
    dist = np.linalg.norm(disp, axis=1)
    # order edges by (center atom, distance) so per-atom sums do not depend on atom numbering
    order = np.lexsort((dst, dist, src))
    src, dst, disp, dist = src[order], dst[order], disp[order], dist[order]
    offsets = positions[src] - positions[dst] - disp
    return NeighborGraph(src.astype(np.int64), dst.astype(np.int64), offsets, dist, float(cutoff))


def _brute_force_pairs(cell: Cell, positions: np.ndarray, cutoff: float):
    n = len(positions)
    disp = min_image_vectors(cell, positions[:, None, :] - positions[None, :, :])
    d2 = np.einsum("ijk,ijk->ij", disp, disp)
    mask = d2 <= cutoff * cutoff
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return src, dst, disp[src, dst]


def _cell_list_pairs(cell: Cell, positions: np.ndarray, cutoff: float):
    nbins = np.floor(cell.heights / cutoff).astype(int)
    frac = cell.to_fractional(positions)
    frac -= np.floor(frac)
    bins = np.minimum((frac * nbins).astype(int), nbins - 1)
    flat = np.ravel_multi_index(bins.T, nbins)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=int(np.prod(nbins)))
    starts = np.concatenate([[0], np.cumsum(counts)])
    srcs, dsts, disps = [], [], []
    for shift in itertools.product((-1, 0, 1), repeat=3):
        nb = np.ravel_multi_index(((bins + shift) % nbins).T, nbins)
        for i in range(len(positions)):
            cand = order[starts[nb[i]]:starts[nb[i] + 1]]
            if len(cand) == 0:
                continue
            srcs.append(np.full(len(cand), i))
            dsts.append(cand)
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    # a pair may be visited from several neighbor bins when nbins == 3 along an axis
    pair = np.unique(src * len(positions) + dst)
    src, dst = pair // len(positions), pair % len(positions)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    disp = min_image_vectors(cell, positions[src] - positions[dst])
    within = np.einsum("ij,ij->i", disp, disp) <= cutoff * cutoff
    return src[within], dst[within], disp[within]


def build_neighbor_graph(cell, positions, cutoff: float) -> NeighborGraph:
    """All ordered pairs (i, j), i != j, with minimum-image distance <= cutoff."""
    cell = _as_cell(cell)
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions contain non-finite values")
    too_large = cutoff >= 0.5 * cell.heights.min()
    if too_large:
        warnings.warn(
            f"cutoff {cutoff} >= half the smallest cell width {cell.heights.min():.3f}; "
            "only the minimum image of each pair is connected",
            CutoffWarning,
            stacklevel=2,
        )
    if len(positions) < 2:
        empty = np.zeros(0, dtype=np.int64)
        return NeighborGraph(empty, empty.copy(), np.zeros((0, 3)), np.zeros(0), float(cutoff))
    if len(positions) > BRUTE_FORCE_MAX_ATOMS and not too_large and np.all(cell.heights >= 3 * cutoff):
        src, dst, disp = _cell_list_pairs(cell, positions, cutoff)
    else:
        src, dst, disp = _brute_force_pairs(cell, positions, cutoff)
    return _finish_graph(src, dst, disp, positions, cutoff)
