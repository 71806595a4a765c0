"""Material samples, element vocabularies, property sets and ghost atoms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Cell

GHOST_SYMBOL = "Gh"


@dataclass(frozen=True)
class ElementVocabulary:
    """Ordered element classes; the ghost class always sits last."""

    symbols: tuple

    def __post_init__(self):
        symbols = tuple(s for s in self.symbols if s != GHOST_SYMBOL)
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"duplicate element symbols in {symbols}")
        if not symbols:
            raise ValueError("vocabulary needs at least one real element")
        object.__setattr__(self, "symbols", symbols + (GHOST_SYMBOL,))

    @property
    def d_E(self) -> int:
        return len(self.symbols)

    @property
    def ghost_index(self) -> int:
        return self.d_E - 1

    @property
    def real_symbols(self) -> tuple:
        return self.symbols[:-1]

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown element symbol {symbol!r}") from None

    def one_hot(self, symbols) -> np.ndarray:
        idx = [self.index(s) for s in symbols]
        out = np.zeros((len(idx), self.d_E))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def decode(self, elements) -> list:
        elements = np.asarray(elements)
        return [self.symbols[i] for i in np.argmax(elements, axis=1)] if len(elements) else []


@dataclass
class MaterialSample:
    """Atoms in a periodic cell.

    ``elements`` is one-hot when ``decoded`` is set and an arbitrary real
    matrix while the sample is being noised. ``props`` carries per-frame
    property values (labels or conditioning targets).
    """

    cell: Cell
    positions: np.ndarray
    elements: np.ndarray
    decoded: bool = True
    props: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.elements = np.asarray(self.elements, dtype=float)
        if self.elements.ndim != 2:
            self.elements = self.elements.reshape(len(self.positions), -1)
        if len(self.positions) != len(self.elements):
            raise ValueError(
                f"positions have {len(self.positions)} rows but elements have {len(self.elements)}"
            )
        if self.decoded and len(self.elements):
            ok = np.all((self.elements == 0) | (self.elements == 1)) and np.all(self.elements.sum(1) == 1)
            if not ok:
                raise ValueError("decoded sample must have exactly one 1 per element row")

    @property
    def n_atoms(self) -> int:
        return len(self.positions)

    @property
    def d_E(self) -> int:
        return self.elements.shape[1]

    def copy(self) -> "MaterialSample":
        return MaterialSample(self.cell, self.positions.copy(), self.elements.copy(), self.decoded, dict(self.props))


@dataclass
class PropertySet:
    values: np.ndarray
    available: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        self.available = np.asarray(self.available, dtype=bool).reshape(-1)
        if self.values.shape != self.available.shape:
            raise ValueError("values and availability mask differ in length")
        if not np.all(np.isfinite(self.values[self.available])):
            raise ValueError("available property values must be finite")

    @classmethod
    def from_dict(cls, names, mapping) -> "PropertySet":
        values = [float(mapping[n]) if n in mapping and mapping[n] is not None else 0.0 for n in names]
        available = [n in mapping and mapping[n] is not None for n in names]
        return cls(np.array(values), np.array(available, dtype=bool))

    @classmethod
    def empty(cls, n_p: int) -> "PropertySet":
        return cls(np.zeros(n_p), np.zeros(n_p, dtype=bool))

    @property
    def n_p(self) -> int:
        return len(self.values)


def ghost_quota(cell: Cell, rho_max: float) -> int:
    return int(math.floor(rho_max * cell.volume))


def inject_ghost_atoms(sample: MaterialSample, rho_max: float, rng, ghost_index: int | None = None) -> MaterialSample:
    """Pad ``sample`` with uniformly placed ghost atoms up to floor(rho_max * V)."""
    if not sample.decoded:
        raise ValueError("ghost injection needs a decoded sample")
    rng = np.random.default_rng(rng)
    total = ghost_quota(sample.cell, rho_max)
    if total < sample.n_atoms:
        raise ValueError(
            f"rho_max * volume = {rho_max * sample.cell.volume:.3f} is below the existing atom count {sample.n_atoms}"
        )
    n_ghost = total - sample.n_atoms
    ghost_index = sample.d_E - 1 if ghost_index is None else ghost_index
    pos = rng.random((n_ghost, 3)) @ sample.cell.lattice
    elem = np.zeros((n_ghost, sample.d_E))
    elem[:, ghost_index] = 1.0
    return MaterialSample(
        sample.cell,
        np.vstack([sample.positions, pos]),
        np.vstack([sample.elements, elem]),
        True,
        dict(sample.props),
    )


def strip_ghost_atoms(sample: MaterialSample, ghost_index: int | None = None) -> MaterialSample:
    if not sample.decoded:
        raise ValueError("ghost stripping needs a decoded sample")
    ghost_index = sample.d_E - 1 if ghost_index is None else ghost_index
    keep = sample.elements[:, ghost_index] != 1 if sample.n_atoms else np.zeros(0, dtype=bool)
    return MaterialSample(sample.cell, sample.positions[keep], sample.elements[keep], True, dict(sample.props))


def decode_elements(elements) -> np.ndarray:
    """One-hot of each row's argmax (ties go to the lowest index)."""
    elements = np.asarray(elements, dtype=float)
    if not np.all(np.isfinite(elements)):
        raise ValueError("element matrix contains non-finite values")
    out = np.zeros_like(elements)
    if elements.size:
        out[np.arange(len(elements)), np.argmax(elements, axis=1)] = 1.0
    return out
