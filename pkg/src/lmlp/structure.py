"""Atomic structures with optional reference labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elements import element_descriptors


@dataclass
class Conformation:
    """One atomic structure; positions in Angstrom, energy in eV, forces in eV/Angstrom."""

    numbers: np.ndarray
    positions: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    conf_id: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.numbers = np.asarray(self.numbers, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.numbers) != len(self.positions):
            raise ValueError("numbers and positions differ in length")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
            if self.forces.shape != self.positions.shape:
                raise ValueError("forces and positions differ in shape")
        if self.energy is not None:
            self.energy = float(self.energy)

    @property
    def n_atoms(self) -> int:
        return len(self.numbers)

    @property
    def has_labels(self) -> bool:
        return self.energy is not None and self.forces is not None

    def validate(self) -> None:
        for z in self.numbers:
            element_descriptors(int(z))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"non-finite positions in conformation {self.conf_id or '?'}")

    def copy(self, **changes) -> "Conformation":
        kw = dict(
            numbers=self.numbers.copy(),
            positions=self.positions.copy(),
            energy=self.energy,
            forces=None if self.forces is None else self.forces.copy(),
            conf_id=self.conf_id,
            info=dict(self.info),
        )
        kw.update(changes)
        return Conformation(**kw)
