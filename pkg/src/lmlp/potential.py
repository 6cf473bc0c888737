"""Total energies, forces, the training loss and its exact weight gradient.

The total energy is the sum of atomic network outputs (plus optional free-atom
reference energies).  Forces follow from the chain rule through the
descriptor derivatives,

    F_c = - sum_n sum_i dE_n/dG_{n,i} dG_{n,i}/dr_c .

The training loss over a subsample of conformations is

    L = q^2/N_conf sum_r (dE_r/N_r)^2 + 1/(3 sum_r N_r) sum_{r,n,x} dF^2 .
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .descriptors import DescriptorBlock, DescriptorSpec, compute_block
from .network import WeightSet, forward, input_gradient, weight_gradient
from .structure import Conformation


class MissingLabelError(ValueError):
    """A conformation used for training lacks reference energy or forces."""


@dataclass
class Prediction:
    energy: float
    forces: np.ndarray
    atomic_energies: np.ndarray


@dataclass
class LossReport:
    total: float
    energy_term: float
    force_term: float
    per_conformation: np.ndarray
    energy_errors: np.ndarray = field(repr=False, default=None)   # eV, per conformation
    force_errors: list = field(repr=False, default=None)          # eV/Angstrom arrays


def reference_offset(numbers, ref_energies: dict | None) -> float:
    if not ref_energies:
        return 0.0
    return float(sum(ref_energies.get(int(z), 0.0) for z in numbers))


class FeatureCache:
    """Descriptor blocks of a fixed list of conformations, grouped by atom count.

    Conformations of equal size are stacked so that one epoch's subsample can
    be evaluated with a handful of batched array operations.
    """

    def __init__(self, confs: Sequence[Conformation], spec: DescriptorSpec,
                 ref_energies: dict | None = None, blocks: Sequence[DescriptorBlock] | None = None,
                 require_labels: bool = True):
        self.spec = spec
        self.confs = list(confs)
        self.ref_energies = dict(ref_energies or {})
        if blocks is None:
            blocks = [compute_block(c, spec) for c in self.confs]
        if require_labels:
            for i, c in enumerate(self.confs):
                if not c.has_labels:
                    raise MissingLabelError(
                        f"conformation {c.conf_id or i} lacks reference energy or forces")
        self.n_atoms = np.array([c.n_atoms for c in self.confs], dtype=np.int64)
        self.groups: dict[int, dict] = {}
        self.locate = np.empty((len(self.confs), 2), dtype=np.int64)
        for size in sorted(set(self.n_atoms.tolist())):
            members = np.flatnonzero(self.n_atoms == size)
            n_g = spec.n_features
            grp = dict(
                members=members,
                G=np.stack([blocks[i].values for i in members]),
                dG=np.stack([blocks[i].derivatives.reshape(size * n_g, size * 3)
                             for i in members]),
                Z=np.stack([self.confs[i].numbers for i in members]),
            )
            if require_labels:
                grp["target"] = np.array([
                    self.confs[i].energy - reference_offset(self.confs[i].numbers, self.ref_energies)
                    for i in members])
                grp["F"] = np.stack([self.confs[i].forces for i in members])
            self.groups[size] = grp
            self.locate[members, 0] = size
            self.locate[members, 1] = np.arange(len(members))
        self.elements = tuple(sorted(set(np.concatenate([c.numbers for c in self.confs]).tolist()))) \
            if self.confs else ()

    def __len__(self):
        return len(self.confs)

    def evaluate(self, indices, weights: WeightSet, q: float = 1.0, gradient: bool = False,
                 labels: bool = True):
        """Energies/forces of ``indices`` and, with labels, the loss report.

        Returns ``(energies, forces, report, grad, participating_elements)``;
        energies are network energies (without reference offsets), forces a
        list in the order of ``indices``.
        """
        indices = np.asarray(indices, dtype=np.int64)
        missing = set(self.elements) - set(weights.elements)
        if missing and any(set(self.confs[i].numbers.tolist()) & missing for i in indices):
            raise KeyError(f"no network for elements {sorted(missing)}")
        order = np.argsort(indices, kind="stable")
        sorted_idx = indices[order]

        # gather per size group, in ascending conformation index
        parts = []
        loc_rows = self.locate[sorted_idx]
        for size, grp in self.groups.items():
            sel = sorted_idx[loc_rows[:, 0] == size]
            if len(sel) == 0:
                continue
            rows = self.locate[sel, 1]
            parts.append((size, sel, rows, grp))

        n_g = self.spec.n_features
        X_list, Z_list = [], []
        for size, sel, rows, grp in parts:
            X_list.append(grp["G"][rows].reshape(-1, n_g))
            Z_list.append(grp["Z"][rows].reshape(-1))
        X = np.concatenate(X_list) if X_list else np.zeros((0, n_g))
        Z = np.concatenate(Z_list) if Z_list else np.zeros(0, dtype=np.int64)
        present = tuple(int(z) for z in np.unique(Z))

        E_atom = np.empty(len(X))
        D = np.empty_like(X)
        caches = {}
        for z in present:
            idx = np.flatnonzero(Z == z)
            net = weights.network(z)
            e, cache = forward(net, X[idx])
            E_atom[idx] = e
            D[idx] = input_gradient(net, cache)
            caches[z] = (idx, net, cache)

        energies = {}
        forces = {}
        pos = 0
        group_data = []
        for size, sel, rows, grp in parts:
            b = len(sel)
            span = slice(pos, pos + b * size)
            e = E_atom[span].reshape(b, size).sum(axis=1)
            Dg = D[span].reshape(b, 1, size * n_g)
            dG = grp["dG"][rows]
            F = -(Dg @ dG).reshape(b, size, 3)
            for k, i in enumerate(sel):
                energies[int(i)] = e[k]
                forces[int(i)] = F[k]
            group_data.append((size, sel, rows, grp, span, e, F, dG))
            pos += b * size

        E_out = np.array([energies[int(i)] for i in indices])
        F_out = [forces[int(i)] for i in indices]
        if not labels:
            return E_out, F_out, None, None, present

        n_conf = len(sorted_idx)
        n_atoms_total = int(sum(len(sel) * size for size, sel, *_ in parts))
        e_terms, f_terms = [], []
        per_conf = {}
        dE_err, dF_err = {}, {}
        e_adj_atom = np.empty(len(X)) if gradient else None
        V = np.empty_like(X) if gradient else None
        for size, sel, rows, grp, span, e, F, dG in group_data:
            dE = e - grp["target"][rows]
            dF = F - grp["F"][rows]
            sq_f = np.einsum("bnx,bnx->b", dF, dF)
            e_terms.append((dE / size) ** 2)
            f_terms.append(sq_f)
            pc = (q * q * dE * dE + sq_f / 3.0) / size
            for k, i in enumerate(sel):
                per_conf[int(i)] = pc[k]
                dE_err[int(i)] = dE[k]
                dF_err[int(i)] = dF[k]
            if gradient:
                b = len(sel)
                dLdE = 2.0 * q * q / n_conf * dE / (size * size)
                e_adj_atom[span] = np.repeat(dLdE, size)
                dLdF = (2.0 / (3.0 * n_atoms_total)) * dF
                V[span] = -(dLdF.reshape(b, 1, size * 3) @ dG.transpose(0, 2, 1)).reshape(-1, n_g)

        energy_term = q * q / n_conf * float(np.sum(np.concatenate(e_terms))) if n_conf else 0.0
        force_term = float(np.sum(np.concatenate(f_terms))) / (3.0 * n_atoms_total) if n_conf else 0.0
        report = LossReport(
            total=energy_term + force_term,
            energy_term=energy_term,
            force_term=force_term,
            per_conformation=np.array([per_conf[int(i)] for i in indices]),
            energy_errors=np.array([dE_err[int(i)] for i in indices]),
            force_errors=[dF_err[int(i)] for i in indices],
        )
        grad = None
        if gradient:
            grad = weights.zeros()
            for z in present:
                idx, net, cache = caches[z]
                sl = weights.element_slice(z)
                weight_gradient(net, cache, e_adj_atom[idx], V[idx], grad[sl])
        return E_out, F_out, report, grad, present


def predict(conf: Conformation, weights: WeightSet, spec: DescriptorSpec,
            ref_energies: dict | None = None) -> Prediction:
    """Total energy (eV) and forces (eV/Angstrom) of one conformation."""
    block = compute_block(conf, spec)
    return predict_block(conf, block, weights, ref_energies)


def predict_block(conf: Conformation, block: DescriptorBlock, weights: WeightSet,
                  ref_energies: dict | None = None) -> Prediction:
    n = conf.n_atoms
    if block.values.shape[1] != weights.layout.n_inputs:
        raise ValueError("descriptor width does not match the network input layer")
    E_atom = np.empty(n)
    D = np.empty_like(block.values)
    for z in np.unique(conf.numbers):
        idx = np.flatnonzero(conf.numbers == z)
        net = weights.network(int(z))
        e, cache = forward(net, block.values[idx])
        E_atom[idx] = e
        D[idx] = input_gradient(net, cache)
    forces = -np.einsum("ni,nijx->jx", D, block.derivatives)
    energy = float(E_atom.sum()) + reference_offset(conf.numbers, ref_energies)
    return Prediction(energy, forces, E_atom)


def loss(subsample: Sequence[Conformation], weights: WeightSet, spec: DescriptorSpec,
         q: float, ref_energies: dict | None = None) -> LossReport:
    if q <= 0:
        raise ValueError("q must be positive")
    cache = FeatureCache(subsample, spec, ref_energies)
    return cache.evaluate(np.arange(len(cache)), weights, q)[2]


def loss_weight_gradient(subsample: Sequence[Conformation], weights: WeightSet,
                         spec: DescriptorSpec, q: float,
                         ref_energies: dict | None = None) -> tuple[LossReport, np.ndarray]:
    if q <= 0:
        raise ValueError("q must be positive")
    cache = FeatureCache(subsample, spec, ref_energies)
    _, _, report, grad, _ = cache.evaluate(np.arange(len(cache)), weights, q, gradient=True)
    return report, grad
