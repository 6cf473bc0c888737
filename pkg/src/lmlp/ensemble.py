"""Committees of independently trained potentials.

The ensemble energy is the member mean; its uncertainty is

    dE = max(RMSE floor, c * sample standard deviation of member energies)

and analogously per force component.  Floors are kept in meV/atom and
meV/Angstrom as reported by training and converted to eV per structure at
prediction time.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptors import DescriptorSpec, compute_block
from .network import NetworkLayout, WeightSet
from .potential import predict_block
from .structure import Conformation


class ManifestError(ValueError):
    pass


@dataclass
class Member:
    weights: WeightSet
    spec: DescriptorSpec
    ref_energies: dict
    floors: tuple = (0.0, 0.0)          # final test RMSE, meV/atom and meV/Angstrom
    source: str = ""


@dataclass
class UncertainPrediction:
    energy: float                 # eV
    forces: np.ndarray            # eV/Angstrom
    d_energy: float               # eV
    d_forces: np.ndarray          # eV/Angstrom per component
    member_energies: np.ndarray = field(repr=False)


def _sorted_mean_std(values: np.ndarray):
    """Mean and sample std over axis 0 with an order-independent summation."""
    v = np.sort(values, axis=0)
    n = v.shape[0]
    mean = v.sum(axis=0) / n
    if n < 2:
        return mean, np.zeros_like(mean)
    dev = np.sort((v - mean) ** 2, axis=0)
    return mean, np.sqrt(dev.sum(axis=0) / (n - 1))


@dataclass
class EnsembleModel:
    members: list
    c: float = 2.0
    floor_energy: float = 0.0      # meV/atom
    floor_force: float = 0.0       # meV/Angstrom

    def __post_init__(self):
        if not self.members:
            raise ManifestError("an ensemble needs at least one member")
        if self.c <= 0:
            raise ManifestError("uncertainty scale c must be positive")
        if self.floor_energy < 0 or self.floor_force < 0:
            raise ManifestError("RMSE floors must be >= 0")
        spec = self.members[0].spec
        for m in self.members[1:]:
            if m.spec != spec:
                raise ManifestError("ensemble members use different descriptor sets")
            if m.weights.layout.n_inputs != spec.n_features:
                raise ManifestError("member network does not match the descriptor width")

    @property
    def spec(self) -> DescriptorSpec:
        return self.members[0].spec

    @property
    def elements(self) -> tuple:
        return tuple(sorted(set.intersection(*(set(m.weights.elements) for m in self.members))))

    def predict(self, conf: Conformation) -> UncertainPrediction:
        return predict_with_uncertainty(conf, self)


def predict_with_uncertainty(conf: Conformation, ensemble: EnsembleModel) -> UncertainPrediction:
    missing = set(conf.numbers.tolist()) - set(ensemble.elements)
    if missing:
        raise KeyError(f"ensemble has no network for elements {sorted(missing)}")
    block = compute_block(conf, ensemble.spec)
    preds = [predict_block(conf, block, m.weights, m.ref_energies) for m in ensemble.members]
    energies = np.array([p.energy for p in preds])
    forces = np.stack([p.forces for p in preds])
    e_mean, e_std = _sorted_mean_std(energies)
    f_mean, f_std = _sorted_mean_std(forces)
    e_floor = ensemble.floor_energy * conf.n_atoms / 1000.0
    f_floor = ensemble.floor_force / 1000.0
    return UncertainPrediction(
        energy=float(e_mean),
        forces=f_mean,
        d_energy=float(max(e_floor, ensemble.c * e_std)),
        d_forces=np.maximum(f_floor, ensemble.c * f_std),
        member_energies=energies,
    )


@dataclass
class CalibrationReport:
    """Fraction of points whose uncertainty covers the actual error, per bucket."""

    energy_edges: tuple           # meV/atom
    force_edges: tuple            # meV/Angstrom
    energy_coverage: list         # per bucket, NaN if empty
    energy_counts: list
    force_coverage: list
    force_counts: list

    def rows(self):
        for kind, edges, cov, cnt in (("energy", self.energy_edges, self.energy_coverage, self.energy_counts),
                                      ("force", self.force_edges, self.force_coverage, self.force_counts)):
            for k in range(len(cnt)):
                yield kind, edges[k], edges[k + 1], cnt[k], cov[k]


def _bucket(unc, covered, edges):
    cov, cnt = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (unc > lo) & (unc <= hi) if lo > 0 else (unc <= hi)
        cnt.append(int(np.count_nonzero(sel)))
        cov.append(float(np.mean(covered[sel])) if cnt[-1] else float("nan"))
    return cov, cnt


def calibration_report(ensemble: EnsembleModel, confs: Sequence[Conformation],
                       energy_edges=(0.0, 10.0, np.inf), force_edges=(0.0, 250.0, np.inf)
                       ) -> CalibrationReport:
    """Coverage of |error| by the predicted uncertainty, bucketed by uncertainty.

    Energies are bucketed by dE per atom in meV, forces by component
    uncertainty in meV/Angstrom; the default edges separate low from high
    uncertainty.
    """
    if not confs:
        raise ValueError("calibration needs a nonempty labeled validation set")
    e_unc, e_cov, f_unc, f_cov = [], [], [], []
    for c in confs:
        if not c.has_labels:
            raise ValueError(f"validation conformation {c.conf_id or '?'} lacks references")
        p = predict_with_uncertainty(c, ensemble)
        e_unc.append(1000.0 * p.d_energy / c.n_atoms)
        e_cov.append(p.d_energy >= abs(p.energy - c.energy))
        f_unc.append(1000.0 * p.d_forces.ravel())
        f_cov.append((p.d_forces >= np.abs(p.forces - c.forces)).ravel())
    e_unc, e_cov = np.array(e_unc), np.array(e_cov)
    f_unc, f_cov = np.concatenate(f_unc), np.concatenate(f_cov)
    ecov, ecnt = _bucket(e_unc, e_cov, energy_edges)
    fcov, fcnt = _bucket(f_unc, f_cov, force_edges)
    return CalibrationReport(tuple(energy_edges), tuple(force_edges), ecov, ecnt, fcov, fcnt)


# --------------------------------------------------------------------------
# members and manifests
# --------------------------------------------------------------------------

def load_member(path) -> Member:
    """Network, descriptors and floors of a checkpoint, without rebuilding the training caches."""
    from .storage import config_from_dict, read_checkpoint
    arrays, meta = read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    layout = NetworkLayout(cfg.descriptor.n_features, cfg.hidden)
    weights = WeightSet(layout, meta["elements"], arrays["weights"].copy())
    floors = tuple(float(x) for x in arrays["floors"])
    return Member(weights, cfg.descriptor, cfg.ref_energies, floors, str(path))


def member_from_run(run) -> Member:
    return Member(run.weights.copy(), run.config.descriptor, dict(run.config.ref_energies),
                  tuple(run.floors))


def from_members(members: Sequence[Member], c: float = 2.0, floor_energy=None,
                 floor_force=None) -> EnsembleModel:
    """Assemble an ensemble; floors default to the member-averaged test RMSE."""
    if floor_energy is None:
        vals = [m.floors[0] for m in members if np.isfinite(m.floors[0])]
        floor_energy = float(np.mean(vals)) if vals else 0.0
    if floor_force is None:
        vals = [m.floors[1] for m in members if np.isfinite(m.floors[1])]
        floor_force = float(np.mean(vals)) if vals else 0.0
    return EnsembleModel(list(members), c, floor_energy, floor_force)


def write_manifest(path, checkpoints: Sequence, c: float = 2.0, floor_energy=None,
                   floor_force=None) -> None:
    path = Path(path)
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["ensemble"] = {"c": repr(float(c)), "floor_source": "member-averaged test RMSE"}
    if floor_energy is not None:
        parser["ensemble"]["floor_energy"] = repr(float(floor_energy))
    if floor_force is not None:
        parser["ensemble"]["floor_force"] = repr(float(floor_force))
    parser["members"] = {}
    for k, ckpt in enumerate(checkpoints):
        ckpt = Path(ckpt)
        try:
            rel = ckpt.resolve().relative_to(path.parent.resolve())
        except ValueError:
            rel = ckpt.resolve()
        parser["members"][f"member{k}"] = str(rel)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def load_manifest(path) -> EnsembleModel:
    """Read an ensemble manifest; member paths are relative to the manifest."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if not parser.has_section("members") or not parser["members"]:
        raise ManifestError(f"{path}: no [members] listed")
    ens = parser["ensemble"] if parser.has_section("ensemble") else {}
    members = []
    for key, rel in parser["members"].items():
        member_path = Path(rel) if Path(rel).is_absolute() else path.parent / rel
        members.append(load_member(member_path))
    try:
        c = float(ens.get("c", 2.0))
        fe = float(ens["floor_energy"]) if "floor_energy" in ens else None
        ff = float(ens["floor_force"]) if "floor_force" in ens else None
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return from_members(members, c, fe, ff)
