"""Synthetic two-species soft-sphere packings with computable labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import observables
from .geometry import Cell, build_neighbor_graph, wrap_into_cell
from .material import ElementVocabulary, MaterialSample, PropertySet, inject_ghost_atoms
from .seeding import stream

TOY_SPECIES = ("A", "B")
PROPERTY_NAMES = ("density", "frac_A", "coordination")
COORD_FACTOR = 1.2
MAX_HALVINGS = 5
# below this force magnitude the packing counts as relaxed (roundoff level)
GRAD_TOL = 1e-9


class RelaxationError(RuntimeError):
    pass


@dataclass
class ToyDatasetConfig:
    n_samples: int = 500
    edge: float = 10.0
    atoms_min: int = 32
    atoms_max: int = 32
    frac_A_min: float = 0.5
    frac_A_max: float = 0.5
    r0: float = 3.4
    rho_max: float = 0.036
    relax_steps: int = 20
    step_size: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.frac_A_min <= self.frac_A_max <= 1.0):
            raise ValueError("species fractions must satisfy 0 <= min <= max <= 1")
        if self.r0 <= 0 or self.edge <= 0:
            raise ValueError("r0 and the cell edge must be positive")
        if not 0 <= self.atoms_min <= self.atoms_max:
            raise ValueError("atom range must satisfy 0 <= min <= max")
        if self.n_samples < 0 or self.relax_steps < 0 or self.step_size <= 0:
            raise ValueError("n_samples, relax_steps must be non-negative and step_size positive")

    @property
    def vocab(self) -> ElementVocabulary:
        return ElementVocabulary(TOY_SPECIES)

    @property
    def coord_cutoff(self) -> float:
        return COORD_FACTOR * self.r0


def soft_sphere_energy(cell: Cell, positions, r0: float):
    """Energy sum over pairs r < r0 of (1 - r/r0)^2, and its gradient."""
    g = build_neighbor_graph(cell, positions, r0)
    if g.n_edges == 0:
        return 0.0, np.zeros_like(positions)
    r = g.distances
    ok = (r < r0) & (r > 0)
    src, dst, r = g.src[ok], g.dst[ok], r[ok]
    vec = positions[src] - positions[dst] - g.offsets[ok]
    overlap = 1.0 - r / r0
    # directed edges count each pair twice
    energy = 0.5 * float(np.sum(overlap**2))
    force = (-2.0 * overlap / (r0 * r))[:, None] * vec
    grad = np.zeros_like(positions)
    np.add.at(grad, src, force)
    return energy, grad


def relax(cell: Cell, positions, r0: float, steps: int, step_size: float):
    """Gradient descent with step halving on energy increase.

    Returns ``(positions, energies)`` with the energy after every accepted step.
    """
    pos = wrap_into_cell(cell, positions)
    energy, grad = soft_sphere_energy(cell, pos, r0)
    energies = [energy]
    eta = step_size
    for _ in range(steps):
        if energy == 0.0 or np.abs(grad).max() < GRAD_TOL:
            break
        for _halving in range(MAX_HALVINGS + 1):
            trial = wrap_into_cell(cell, pos - eta * grad)
            e_trial, g_trial = soft_sphere_energy(cell, trial, r0)
            if e_trial <= energy:
                break
            eta *= 0.5
        else:
            raise RelaxationError(f"energy still increasing after {MAX_HALVINGS} step halvings")
        pos, energy, grad = trial, e_trial, g_trial
        energies.append(energy)
    return pos, energies


def label(sample: MaterialSample, r0: float) -> dict:
    obs = observables(sample, COORD_FACTOR * r0, TOY_SPECIES)
    return {"density": obs["density"], "frac_A": obs["fractions"]["A"], "coordination": obs["coordination"]}


def make_sample(cfg: ToyDatasetConfig, index: int) -> MaterialSample:
    rng = stream(cfg.seed, "toy-data", index)
    cell = Cell.cubic(cfg.edge)
    n = int(rng.integers(cfg.atoms_min, cfg.atoms_max + 1))
    frac = rng.uniform(cfg.frac_A_min, cfg.frac_A_max)
    n_A = int(round(frac * n))
    species = np.array(["A"] * n_A + ["B"] * (n - n_A))[rng.permutation(n)]
    pos, _ = relax(cell, rng.random((n, 3)) @ cell.lattice, cfg.r0, cfg.relax_steps, cfg.step_size)
    sample = MaterialSample(cell, pos, cfg.vocab.one_hot(species), True)
    sample = inject_ghost_atoms(sample, cfg.rho_max, rng)
    sample.props = label(sample, cfg.r0)
    return sample


def properties_of(sample: MaterialSample, names) -> PropertySet:
    return PropertySet.from_dict(list(names), sample.props)


def generate_toy_dataset(cfg: ToyDatasetConfig, names=PROPERTY_NAMES):
    """List of ``(sample, PropertySet)``; samples carry all labels in ``props``."""
    out = []
    for i in range(cfg.n_samples):
        s = make_sample(cfg, i)
        out.append((s, properties_of(s, names)))
    return out
