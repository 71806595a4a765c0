"""Extended-XYZ reading and writing.

Each frame is::

    <n atoms>
    Lattice="c11 c12 c13 c21 c22 c23 c31 c32 c33" Properties=species:S:1:pos:R:3 pbc="T T T" prop_density=0.031
    Sym x y z
    ...

Ghost atoms use the symbol ``Gh``.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .geometry import Cell
from .material import ElementVocabulary, MaterialSample

_KEY_QUOTED = re.compile(r'([A-Za-z_][A-Za-z0-9_\-]*)\s*=\s*"([^"]*)"')
_KEY_PLAIN = re.compile(r'([A-Za-z_][A-Za-z0-9_\-]*)\s*=\s*([^\s"]+)')


class ExtXYZError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def parse_comment(line: str) -> dict:
    info = {}
    for key, val in _KEY_QUOTED.findall(line):
        info[key] = val
    stripped = _KEY_QUOTED.sub(" ", line)
    for key, val in _KEY_PLAIN.findall(stripped):
        info[key] = val
    return info


def _fmt(x: float) -> str:
    return repr(float(x))


def format_frame(sample: MaterialSample, vocab: ElementVocabulary) -> str:
    lattice = " ".join(_fmt(v) for v in sample.cell.lattice.reshape(-1))
    header = [f'Lattice="{lattice}"', "Properties=species:S:1:pos:R:3", 'pbc="T T T"']
    for name, value in sample.props.items():
        header.append(f"prop_{name}={_fmt(value)}")
    lines = [str(sample.n_atoms), " ".join(header)]
    for sym, (x, y, z) in zip(vocab.decode(sample.elements), sample.positions):
        lines.append(f"{sym} {_fmt(x)} {_fmt(y)} {_fmt(z)}")
    return "\n".join(lines) + "\n"


def write_extxyz(samples, path, vocab: ElementVocabulary) -> None:
    with open(path, "w") as fh:
        for sample in samples:
            fh.write(format_frame(sample, vocab))


def read_extxyz(path, vocab: ElementVocabulary) -> list:
    path = Path(path)
    lines = path.read_text().splitlines()
    samples = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise ExtXYZError(path, i + 1, f"expected atom count, got {lines[i]!r}") from None
        if n < 0:
            raise ExtXYZError(path, i + 1, f"negative atom count {n}")
        if i + 1 >= len(lines):
            raise ExtXYZError(path, i + 2, "missing comment line")
        info = parse_comment(lines[i + 1])
        if "Lattice" not in info:
            raise ExtXYZError(path, i + 2, "comment line has no Lattice=")
        try:
            lattice = np.array([float(v) for v in info["Lattice"].split()])
        except ValueError:
            raise ExtXYZError(path, i + 2, f"bad Lattice value {info['Lattice']!r}") from None
        if lattice.size != 9:
            raise ExtXYZError(path, i + 2, f"Lattice needs 9 numbers, got {lattice.size}")
        props = {}
        for key, val in info.items():
            if key.startswith("prop_"):
                try:
                    props[key[5:]] = float(val)
                except ValueError:
                    raise ExtXYZError(path, i + 2, f"non-numeric property {key}={val}") from None
        symbols, pos = [], []
        for k in range(n):
            lineno = i + 3 + k
            if lineno - 1 >= len(lines):
                raise ExtXYZError(path, lineno, f"frame declares {n} atoms but file ends after {k}")
            parts = lines[lineno - 1].split()
            if len(parts) < 4:
                raise ExtXYZError(path, lineno, f"expected 'Symbol x y z', got {lines[lineno - 1]!r}")
            try:
                xyz = [float(v) for v in parts[1:4]]
            except ValueError:
                raise ExtXYZError(path, lineno, f"bad coordinates in {lines[lineno - 1]!r}") from None
            try:
                vocab.index(parts[0])
            except KeyError:
                raise ExtXYZError(path, lineno, f"unknown element symbol {parts[0]!r}") from None
            symbols.append(parts[0])
            pos.append(xyz)
        elements = vocab.one_hot(symbols) if n else np.zeros((0, vocab.d_E))
        samples.append(
            MaterialSample(Cell(lattice.reshape(3, 3)), np.array(pos).reshape(-1, 3), elements, True, props)
        )
        i += 2 + n
    return samples
