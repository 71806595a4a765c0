"""Structural analysis: RDF, ADF, distribution RMSD, shortest-path ring
statistics, simple observables and regression metrics.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import build_neighbor_graph, min_image_vectors
from .material import MaterialSample, strip_ghost_atoms

# Single-bond covalent radii in Angstrom (Cordero et al. values).
COVALENT_RADII = {
    "H": 0.31, "Li": 1.28, "B": 0.84, "C": 0.76, "N": 0.71, "O": 0.66, "F": 0.57,
    "Na": 1.66, "Mg": 1.41, "Al": 1.21, "Si": 1.11, "P": 1.07, "S": 1.05, "Cl": 1.02,
    "K": 2.03, "Ca": 1.76, "Ge": 1.20,
}


@dataclass
class BinnedDistribution:
    bin_edges: np.ndarray
    values: np.ndarray
    kind: str = "generic"

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) != len(self.bin_edges) - 1:
            raise ValueError("need exactly one value per bin")
        widths = np.diff(self.bin_edges)
        if len(widths) and not np.allclose(widths, widths[0]):
            raise ValueError("bin edges must be uniform")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("distribution values must be finite")
        if self.kind in ("rdf", "adf") and np.any(self.values < 0):
            raise ValueError(f"{self.kind} values must be non-negative")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def to_table(self) -> str:
        return "".join(f"{float(c)!r}\t{float(v)!r}\n" for c, v in zip(self.centers, self.values))


def _pair_vectors(sample: MaterialSample) -> np.ndarray:
    """Minimum-image vectors r_j - r_i for all ordered pairs, shape (N, N, 3)."""
    disp = sample.positions[None, :, :] - sample.positions[:, None, :]
    return min_image_vectors(sample.cell, disp.reshape(-1, 3)).reshape(disp.shape)


def _check_ensemble(samples):
    samples = list(samples)
    if not samples:
        raise ValueError("empty sample set")
    for s in samples:
        if not s.decoded:
            raise ValueError("analysis needs decoded samples")
    return samples


def rdf(samples, cutoff: float = 5.0, bins: int = 100) -> BinnedDistribution:
    """Radial distribution function averaged over an ensemble.

    g(r_c) = V / N^2 * hist(r_c) / (4 pi r_c^2 dr) with hist over ordered pairs.
    """
    samples = _check_ensemble(samples)
    edges = np.linspace(0.0, cutoff, bins + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    shell = 4.0 * math.pi * centers**2 * (edges[1] - edges[0])
    total = np.zeros(bins)
    usable = [s for s in samples if s.n_atoms >= 2]
    if not usable:
        raise ValueError("RDF needs at least one sample with two or more atoms")
    if len(usable) < len(samples):
        warnings.warn(f"skipped {len(samples) - len(usable)} samples with fewer than two atoms", RuntimeWarning,
                      stacklevel=2)
    for s in usable:
        n = s.n_atoms
        d = np.linalg.norm(_pair_vectors(s), axis=-1)[~np.eye(n, dtype=bool)]
        hist, _ = np.histogram(d, bins=edges)
        total += s.cell.volume / n**2 * hist / shell
    return BinnedDistribution(edges, total / len(usable), "rdf")


def bond_angles(sample: MaterialSample, cutoff: float = 3.0) -> np.ndarray:
    """Angles in degrees at every centre for unordered neighbour pairs within ``cutoff``."""
    vec = _pair_vectors(sample)
    dist = np.linalg.norm(vec, axis=-1)
    angles = []
    skipped = 0
    for i in range(sample.n_atoms):
        nb = np.flatnonzero((dist[i] < cutoff) & (np.arange(sample.n_atoms) != i))
        if len(nb) < 2:
            continue
        v, r = vec[i, nb], dist[i, nb]
        ok = r > 0
        skipped += int(np.sum(~ok)) * (len(nb) - 1)
        v, r = v[ok], r[ok]
        j, k = np.triu_indices(len(r), 1)
        cos = np.einsum("ij,ij->i", v[j], v[k]) / (r[j] * r[k])
        angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    if skipped:
        warnings.warn(f"skipped {skipped} triplets with zero-length bonds", RuntimeWarning, stacklevel=2)
    return np.concatenate(angles) if angles else np.zeros(0)


def adf(samples, cutoff: float = 3.0, bins: int = 180) -> BinnedDistribution:
    """Bond-angle distribution on [0, 180] degrees, unit mass, averaged over samples."""
    samples = _check_ensemble(samples)
    edges = np.linspace(0.0, 180.0, bins + 1)
    acc, used = np.zeros(bins), 0
    for s in samples:
        hist, _ = np.histogram(bond_angles(s, cutoff), bins=edges)
        if hist.sum():
            acc += hist / hist.sum()
            used += 1
    if not used:
        warnings.warn("no bond angles found in the ensemble", RuntimeWarning, stacklevel=2)
        return BinnedDistribution(edges, acc, "adf")
    return BinnedDistribution(edges, acc / used, "adf")


def dist_rmsd(gen: BinnedDistribution, ref: BinnedDistribution) -> float:
    if gen.bin_edges.shape != ref.bin_edges.shape or not np.allclose(gen.bin_edges, ref.bin_edges):
        raise ValueError("distributions use different binning")
    return float(np.sqrt(np.mean((gen.values - ref.values) ** 2)))


# ---------------------------------------------------------------------------
# rings


def _canonical(ring):
    """Translation-invariant key for a ring given as (atom, image shift) pairs."""
    best = None
    for _, ref in ring:
        key = tuple(sorted((a, tuple(np.subtract(s, ref))) for a, s in ring))
        if best is None or key < best:
            best = key
    return best


def shortest_path_rings(n_nodes: int, bonds, max_depth: int = 12):
    """All shortest-path rings of a (possibly periodic) bond graph.

    ``bonds`` holds ``(a, b, shift)`` with ``b`` bonded to ``a`` across the
    integer lattice ``shift``; use shift ``(0, 0, 0)`` for finite graphs.
    For every bond the shortest paths from ``a`` to ``b``'s image that avoid
    the bond itself close a ring. Nodes in the search are (atom, image)
    states, so a walk that returns to an atom in a different image is not a
    ring. Returns a list of rings, each a tuple of (atom, shift) pairs.
    """
    adj = [[] for _ in range(n_nodes)]
    for a, b, s in bonds:
        s = tuple(int(v) for v in s)
        adj[a].append((b, s))
        adj[b].append((a, tuple(-v for v in s)))
    seen = {}
    for a, b, s in bonds:
        s = tuple(int(v) for v in s)
        start, goal = (a, (0, 0, 0)), (b, s)
        for path in _shortest_paths_avoiding(adj, start, goal, max_depth):
            if len(path) < 3:
                continue
            key = _canonical(path)
            seen.setdefault(key, path)
    return list(seen.values())


def _shortest_paths_avoiding(adj, start, goal, max_depth):
    """All shortest start->goal paths (<= max_depth edges) that skip the direct start-goal edge."""

    def neighbours(state):
        atom, shift = state
        for nb, s in adj[atom]:
            nxt = (nb, (shift[0] + s[0], shift[1] + s[1], shift[2] + s[2]))
            if {state, nxt} == {start, goal}:
                continue
            yield nxt

    dist = {start: 0}
    parents = {start: []}
    frontier = deque([start])
    while frontier:
        cur = frontier.popleft()
        if cur == goal or dist[cur] >= max_depth:
            continue
        for nxt in neighbours(cur):
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                parents[nxt] = [cur]
                frontier.append(nxt)
            elif dist[nxt] == dist[cur] + 1:
                parents[nxt].append(cur)
    if goal not in dist:
        return []
    paths = []

    def unwind(node, tail):
        if node == start:
            paths.append([start] + tail)
            return
        for p in parents[node]:
            unwind(p, [node] + tail)

    unwind(goal, [])
    # a shortest path never revisits a state, but may revisit an atom in another image
    return [p for p in paths if len({a for a, _ in p}) == len(p)]


@dataclass
class RingStatistics:
    sizes: np.ndarray
    histogram: dict

    @property
    def mean(self):
        return float(np.mean(self.sizes)) if len(self.sizes) else None


def bond_graph(sample: MaterialSample, symbols, radii: dict, radius_factor: float = 1.3):
    """Bonds ``(a, b, shift)`` with a < b; ``shift`` is the lattice image of ``b``."""
    r = np.array([radii[sym] for sym in symbols])
    cutoff = radius_factor * 2 * float(r.max()) if len(r) else 0.0
    if sample.n_atoms < 2 or cutoff <= 0:
        return []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_neighbor_graph(sample.cell, sample.positions, cutoff)
    frac_shift = np.rint(sample.cell.to_fractional(g.offsets)).astype(int)
    bonds = []
    for a, b, s, d in zip(g.src, g.dst, frac_shift, g.distances):
        # offsets = pos_a - pos_b - disp: the bonded image of b sits at pos_b + offsets
        if a < b and d < radius_factor * (r[a] + r[b]):
            shift = tuple(int(v) for v in s)
            bonds.append((int(a), int(b), shift))
    return bonds


def ring_size_distribution(sample: MaterialSample, symbols, radii: dict = COVALENT_RADII,
                           formers=None, radius_factor: float = 1.3, max_depth: int = 12) -> RingStatistics:
    """Ring sizes counted in network-former atoms (all atoms if ``formers`` is None).

    ``symbols`` lists the per-atom species of a decoded, ghost-free sample.
    """
    symbols = list(symbols)
    if len(symbols) != sample.n_atoms:
        raise ValueError("need one symbol per atom")
    rings = shortest_path_rings(sample.n_atoms, bond_graph(sample, symbols, radii, radius_factor), max_depth)
    former = np.array([formers is None or sym in formers for sym in symbols])
    sizes = np.array([int(sum(former[a] for a, _ in ring)) for ring in rings], dtype=int)
    hist = {int(k): int(v) for k, v in zip(*np.unique(sizes, return_counts=True))}
    return RingStatistics(sizes, hist)


# ---------------------------------------------------------------------------
# observables and metrics


def coordination(sample: MaterialSample, cutoff: float) -> float:
    if sample.n_atoms == 0:
        return 0.0
    g = build_neighbor_graph(sample.cell, sample.positions, cutoff)
    return g.n_edges / sample.n_atoms


def observables(sample: MaterialSample, coord_cutoff: float, symbols=None) -> dict:
    """Density (real atoms per cubic Angstrom), composition fractions and mean coordination.

    Ghost atoms (last element column) are removed first. Fractions are keyed
    by ``symbols`` (the real species) when given, else by column index.
    """
    real = strip_ghost_atoms(sample)
    n = real.n_atoms
    counts = real.elements[:, :-1].sum(axis=0) if n else np.zeros(sample.d_E - 1)
    keys = list(symbols) if symbols is not None else list(range(sample.d_E - 1))
    fractions = {k: (float(c / n) if n else float("nan")) for k, c in zip(keys, counts)}
    return {
        "density": n / real.cell.volume,
        "fractions": fractions,
        "coordination": coordination(real, coord_cutoff),
    }


def regression_metrics(targets, realized, mape: bool = True) -> dict:
    """MAE, RMSE and MAPE (in percent)."""
    targets = np.asarray(targets, dtype=float)
    realized = np.asarray(realized, dtype=float)
    if targets.shape != realized.shape or targets.size == 0:
        raise ValueError("targets and realized values must be non-empty and equally long")
    err = realized - targets
    out = {"MAE": float(np.mean(np.abs(err))), "RMSE": float(np.sqrt(np.mean(err**2)))}
    if mape:
        if np.any(targets == 0):
            raise ValueError("MAPE is undefined for zero targets")
        out["MAPE"] = float(100.0 * np.mean(np.abs(err / targets)))
    return out
