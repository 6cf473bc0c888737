"""Analytic toy potential and synthetic cluster datasets.

The toy energy of a cluster is

    E = sum_i E0(Z_i)
      + sum_{i<j} D_ij [(1 - exp(-a_ij (r - r0_ij)))^2 - 1] f_s(r; r_pair)
      + sum_i sum_{j<k} k_i (cos theta_jik - c0)^2 f_s(r_ij; r_ang) f_s(r_ik; r_ang)

with smooth switches f_s that vanish with all derivatives at their radius,
so atoms farther apart than ``r_pair`` do not interact at all.  Forces are
the exact negative gradient.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import elements
from .descriptors import cutoff, cutoff_prime
from .structure import Conformation


@dataclass(frozen=True)
class ToyElement:
    offset: float       # isolated-atom energy, eV
    depth: float        # Morse well depth contribution, eV
    radius: float       # bond radius, Angstrom
    stiffness: float    # Morse exponent, 1/Angstrom
    bend: float         # three-body strength at this center, eV


_TUNED = {
    1: ToyElement(offset=-13.6, depth=1.4, radius=0.45, stiffness=1.9, bend=0.3),
    6: ToyElement(offset=-1027.5, depth=3.6, radius=0.75, stiffness=1.7, bend=1.2),
    7: ToyElement(offset=-1484.0, depth=2.8, radius=0.72, stiffness=1.8, bend=1.0),
    8: ToyElement(offset=-2041.0, depth=2.2, radius=0.70, stiffness=1.9, bend=0.9),
    9: ToyElement(offset=-2713.0, depth=1.6, radius=0.68, stiffness=2.0, bend=0.4),
    17: ToyElement(offset=-12577.0, depth=2.0, radius=1.00, stiffness=1.4, bend=0.5),
    35: ToyElement(offset=-70036.0, depth=1.7, radius=1.15, stiffness=1.3, bend=0.4),
}


def toy_element(z: int) -> ToyElement:
    """Parameters of element ``z``; hand-set for common elements, generic otherwise."""
    if z in _TUNED:
        return _TUNED[z]
    info = elements.element_descriptors(z)
    return ToyElement(offset=-13.6 * z ** 1.6, depth=0.6 + 0.3 * (info.m or info.d / 2.5),
                      radius=0.35 + 0.2 * info.n, stiffness=2.2 - 0.2 * info.n,
                      bend=0.2 + 0.1 * (info.m or 1.0))


@dataclass(frozen=True)
class ToyPotential:
    r_pair: float = 6.0
    r_ang: float = 3.5
    cos0: float = -0.3

    def offsets(self, numbers) -> float:
        return float(sum(toy_element(int(z)).offset for z in numbers))

    def bond_length(self, zi, zj) -> float:
        return toy_element(int(zi)).radius + toy_element(int(zj)).radius

    def _pair_table(self, numbers):
        params = [toy_element(int(z)) for z in numbers]
        return tuple(np.array([getattr(p, f) for p in params])
                     for f in ("depth", "radius", "stiffness", "bend"))

    def interaction_energy_forces(self, numbers, positions) -> tuple[float, np.ndarray]:
        """Energy without isolated-atom offsets, and forces."""
        numbers = np.asarray(numbers, dtype=np.int64)
        pos = np.asarray(positions, dtype=np.float64)
        n = len(numbers)
        depth, radius, stiff, bend = self._pair_table(numbers)
        energy = 0.0
        grad = np.zeros((n, 3))

        i, j = np.triu_indices(n, k=1)
        if len(i):
            d = pos[j] - pos[i]
            r = np.linalg.norm(d, axis=1)
            D = np.sqrt(depth[i] * depth[j])
            r0 = radius[i] + radius[j]
            a = 0.5 * (stiff[i] + stiff[j])
            e = np.exp(-a * (r - r0))
            morse = D * ((1.0 - e) ** 2 - 1.0)
            dmorse = D * 2.0 * (1.0 - e) * a * e
            sw, dsw = cutoff(r, self.r_pair), cutoff_prime(r, self.r_pair)
            energy += float(np.sum(morse * sw))
            dv = (dmorse * sw + morse * dsw)[:, None] * d / r[:, None]
            np.add.at(grad, j, dv)
            np.add.at(grad, i, -dv)

        # angle j-c-k for every center c and neighbor pair j < k
        c, jj, kk = _triples(n)
        if len(c):
            vj, vk = pos[jj] - pos[c], pos[kk] - pos[c]
            rj, rk = np.linalg.norm(vj, axis=1), np.linalg.norm(vk, axis=1)
            uj, uk = vj / rj[:, None], vk / rk[:, None]
            cos = np.einsum("ij,ij->i", uj, uk)
            wj, wk = cutoff(rj, self.r_ang), cutoff(rk, self.r_ang)
            dwj, dwk = cutoff_prime(rj, self.r_ang), cutoff_prime(rk, self.r_ang)
            k3 = bend[c]
            dev = cos - self.cos0
            energy += float(np.sum(k3 * dev * dev * wj * wk))
            dcos_j = (uk - cos[:, None] * uj) / rj[:, None]
            dcos_k = (uj - cos[:, None] * uk) / rk[:, None]
            gj = k3[:, None] * ((2.0 * dev * wj * wk)[:, None] * dcos_j + (dev * dev * dwj * wk)[:, None] * uj)
            gk = k3[:, None] * ((2.0 * dev * wj * wk)[:, None] * dcos_k + (dev * dev * wj * dwk)[:, None] * uk)
            np.add.at(grad, jj, gj)
            np.add.at(grad, kk, gk)
            np.add.at(grad, c, -(gj + gk))
        return energy, -grad

    def energy_forces(self, numbers, positions) -> tuple[float, np.ndarray]:
        e, f = self.interaction_energy_forces(numbers, positions)
        return self.offsets(numbers) + e, f

    def label(self, conf: Conformation) -> Conformation:
        e, f = self.energy_forces(conf.numbers, conf.positions)
        return conf.copy(energy=e, forces=f)


def _triples(n: int):
    c, j, k = [], [], []
    for center in range(n):
        others = [o for o in range(n) if o != center]
        for x in range(len(others)):
            for y in range(x + 1, len(others)):
                c.append(center)
                j.append(others[x])
                k.append(others[y])
    return np.array(c, dtype=np.int64), np.array(j, dtype=np.int64), np.array(k, dtype=np.int64)


@dataclass(frozen=True)
class SystemSpec:
    elements: tuple[int, ...]
    n_min: int
    n_max: int

    @classmethod
    def parse(cls, text: str) -> "SystemSpec":
        """``"H,C,Cl:5"`` or ``"H,C,Cl:3-8"``."""
        m = re.fullmatch(r"\s*([A-Za-z]+(?:\s*,\s*[A-Za-z]+)*)\s*:\s*(\d+)(?:\s*-\s*(\d+))?\s*", text)
        if not m:
            raise ValueError(f"invalid system spec {text!r} (expected e.g. 'H,C,Cl:3-8')")
        syms = [s.strip() for s in m.group(1).split(",")]
        zs = tuple(elements.atomic_number(s) for s in syms)
        lo = int(m.group(2))
        hi = int(m.group(3)) if m.group(3) else lo
        return cls(zs, lo, hi)

    def __post_init__(self):
        if len(set(self.elements)) != len(self.elements):
            raise ValueError("duplicate element in system spec")
        if not 2 <= len(self.elements) <= 4:
            raise ValueError("a toy system has 2 to 4 elements")
        if not 3 <= self.n_min <= self.n_max <= 8:
            raise ValueError("cluster sizes must satisfy 3 <= n_min <= n_max <= 8")
        if self.n_min < len(self.elements):
            raise ValueError("every element must fit into the smallest cluster")


def _place(numbers, rng, potential: ToyPotential, star: bool, min_dist=0.6, max_tries=200):
    """Grow a cluster by attaching atoms near bonding distance.

    With ``star`` every atom binds to atom 0, otherwise to a random member.
    """
    pos = np.zeros((1, 3))
    for a in range(1, len(numbers)):
        for _ in range(max_tries):
            host = 0 if star else rng.integers(len(pos))
            r0 = potential.bond_length(numbers[host], numbers[a])
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            cand = pos[host] + direction * r0 * rng.uniform(0.95, 1.3)
            if np.min(np.linalg.norm(pos - cand, axis=1)) >= min_dist:
                pos = np.vstack([pos, cand])
                break
        else:
            raise RuntimeError("could not place atom without overlap")
    return pos


def _relax(numbers, pos, potential: ToyPotential, steps: int, max_move=0.1):
    for _ in range(steps):
        _, f = potential.interaction_energy_forces(numbers, pos)
        step = 0.02 * f
        norm = np.linalg.norm(step, axis=1, keepdims=True)
        pos = pos + step * np.minimum(1.0, max_move / np.maximum(norm, 1e-12))
    return pos


def generate(system: SystemSpec, n_frames: int, seed: int, potential: ToyPotential | None = None,
             relax_steps: int = 200, noise: float = 0.06, topology: str = "star"
             ) -> list[Conformation]:
    """Labeled random clusters.

    Compositions contain every element at least once; geometries are grown,
    partially relaxed and thermally perturbed by Gaussian displacements of
    width ``noise`` Angstrom.  ``topology="star"`` builds molecule-like
    clusters around one atom of the first listed element.
    """
    if topology not in ("random", "star"):
        raise ValueError(f"unknown topology {topology!r}")
    if n_frames < 0:
        raise ValueError("number of frames must be >= 0")
    potential = potential or ToyPotential()
    rng = np.random.default_rng(seed)
    out = []
    for f in range(n_frames):
        n = int(rng.integers(system.n_min, system.n_max + 1))
        extra = rng.choice(system.elements, size=n - len(system.elements))
        numbers = np.concatenate([system.elements, extra]).astype(np.int64)
        if topology == "star":
            numbers[1:] = numbers[1:][rng.permutation(n - 1)]
        else:
            numbers = numbers[rng.permutation(n)]
        pos = _place(numbers, rng, potential, topology == "star")
        pos = _relax(numbers, pos, potential, relax_steps)
        pos = pos + rng.normal(scale=noise, size=pos.shape)
        pos -= pos.mean(axis=0)
        e, frc = potential.energy_forces(numbers, pos)
        out.append(Conformation(numbers, pos, e, frc, conf_id=f"synth:{seed}:{f}"))
    return out


def offsets_for(system: SystemSpec) -> dict[int, float]:
    """Isolated-atom energies of the system's elements (the toy reference energies)."""
    return {z: toy_element(z).offset for z in system.elements}


def energy_std_per_atom(confs, ref_energies: dict | None = None) -> float:
    """Standard deviation of (E - sum of reference energies)/N_atom."""
    ref = ref_energies or {}
    vals = [(c.energy - sum(ref.get(int(z), 0.0) for z in c.numbers)) / c.n_atoms for c in confs]
    return float(np.std(vals))


def force_std(confs) -> float:
    return float(np.std(np.concatenate([c.forces.ravel() for c in confs])))
