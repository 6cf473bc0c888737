"""Training loop: subsample choice, loss gradient, CoRe step, selection update.

A :class:`TrainingRun` holds everything needed to continue training
bit-for-bit: weights, optimizer state, selection state, the data split,
the RNG state and the epoch logs.  ``to_bundle``/``from_bundle`` map it onto
the flat arrays-plus-metadata form written by :mod:`lmlp.storage`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .descriptors import DescriptorSpec, compute_block
from .network import NetworkLayout, WeightSet, descriptor_stats, init_weights
from .optimizer import CoreConfig, CoreOptimizer, OptimizerState
from .potential import FeatureCache
from .selection import (INCONSISTENT, REDUNDANT, SelectionConfig, SelectionState,
                        choose_random, choose_subsample, update_selection)
from .structure import Conformation

log = logging.getLogger(__name__)

SELECTION_MODES = ("adaptive", "random")


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class IncompatibleDataError(ValueError):
    """Data that the trained architecture cannot take (e.g. a new element)."""


@dataclass(frozen=True)
class TrainConfig:
    descriptor: DescriptorSpec = field(default_factory=DescriptorSpec.standard)
    hidden: tuple[int, ...] = (102, 61, 44)
    optimizer: CoreConfig = field(default_factory=CoreConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    selection_mode: str = "adaptive"
    q: float = 10.9
    fit_fraction: float = 0.1
    test_fraction: float = 0.1
    ref_energies: dict = field(default_factory=dict)
    test_subset: int = 0          # >0: log test RMSE on this many fixed test frames
    train_log_every: int = 1      # train RMSE cadence (0 disables)
    seed: int = 0

    def __post_init__(self):
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")
        if self.q <= 0:
            raise ValueError("q must be positive")
        if not 0.0 < self.fit_fraction <= 1.0:
            raise ValueError("fit_fraction must lie in (0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "ref_energies",
                           {int(k): float(v) for k, v in dict(self.ref_energies).items()})

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class Injection:
    epoch: int                    # data join after this epoch has finished
    confs: list


@dataclass
class TrainPlan:
    epochs: int
    injections: Sequence[Injection] = ()
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        marks = [inj.epoch for inj in self.injections]
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ValueError("injection epochs must be strictly increasing")
        if marks and (marks[0] < 0 or marks[-1] >= max(self.epochs, 1)):
            raise ValueError("injection epochs must lie in [0, epochs)")


@dataclass
class EpochLog:
    epoch: int
    rmse_e_train: float           # meV/atom
    rmse_e_test: float
    rmse_f_train: float           # meV/Angstrom
    rmse_f_test: float
    n_active: int
    n_excluded_redundant: int
    n_excluded_inconsistent: int
    p_good: float

    FIELDS = ("epoch", "rmse_e_train", "rmse_e_test", "rmse_f_train", "rmse_f_test",
              "n_active", "n_excluded_redundant", "n_excluded_inconsistent", "p_good")

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def split_data(confs: Sequence[Conformation], test_fraction: float, rng: np.random.Generator):
    """Seeded shuffle into (train, test)."""
    order = rng.permutation(len(confs))
    n_test = int(round(test_fraction * len(confs)))
    if len(confs) >= 2 and test_fraction > 0:
        n_test = min(max(n_test, 1), len(confs) - 1)
    test = [confs[i] for i in np.sort(order[:n_test])]
    train = [confs[i] for i in np.sort(order[n_test:])]
    return train, test


def rmse(cache: FeatureCache, indices, weights: WeightSet) -> tuple[float, float]:
    """Energy RMSE in meV/atom and force-component RMSE in meV/Angstrom."""
    if len(indices) == 0:
        return float("nan"), float("nan")
    _, _, report, _, _ = cache.evaluate(indices, weights)
    n_atoms = cache.n_atoms[np.asarray(indices)]
    e = np.sqrt(np.mean((report.energy_errors / n_atoms) ** 2))
    f = np.sqrt(np.mean(np.concatenate([d.ravel() for d in report.force_errors]) ** 2))
    return 1000.0 * float(e), 1000.0 * float(f)


class TrainingRun:
    """Mutable state of one training run."""

    def __init__(self, config: TrainConfig, train: list, test: list, weights: WeightSet,
                 opt_state: OptimizerState | None, selection: SelectionState, epoch: int = 0,
                 rng_state: dict | None = None, logs: list | None = None,
                 n_injections: int = 0, floors: tuple = (float("nan"), float("nan")),
                 train_blocks: list | None = None):
        self.config = config
        self.train = list(train)
        self.test = list(test)
        self.weights = weights
        self.optimizer = CoreOptimizer.for_weights(weights, config.optimizer, opt_state)
        self.selection = selection
        self.epoch = epoch
        self.rng = np.random.default_rng([config.seed, 1])
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.logs = list(logs or [])
        self.n_injections = n_injections
        self.floors = floors
        self._train_blocks = train_blocks
        self._check_elements(self.train + self.test)
        self._rebuild_caches()

    # ---- construction ------------------------------------------------

    @classmethod
    def initialize(cls, config: TrainConfig, data: Sequence[Conformation]) -> "TrainingRun":
        if not data:
            raise ValueError("training data set is empty")
        for c in data:
            c.validate()
        train, test = split_data(list(data), config.test_fraction,
                                 np.random.default_rng([config.seed, 0]))
        blocks = [compute_block(c, config.descriptor) for c in train]
        stats = descriptor_stats([b.values for b in blocks], [c.numbers for c in train])
        layout = NetworkLayout(config.descriptor.n_features, config.hidden)
        weights = init_weights(layout, sorted(stats), config.seed, stats)
        return cls(config, train, test, weights, None, SelectionState.fresh(len(train)),
                   train_blocks=blocks)

    def _check_elements(self, confs):
        known = set(self.weights.elements)
        for c in confs:
            extra = set(c.numbers.tolist()) - known
            if extra:
                raise IncompatibleDataError(
                    f"conformation {c.conf_id or '?'} contains elements {sorted(extra)} "
                    f"without a trained network")

    def _rebuild_caches(self):
        spec, ref = self.config.descriptor, self.config.ref_energies
        blocks = self._train_blocks
        if blocks is None or len(blocks) != len(self.train):
            blocks = [compute_block(c, spec) for c in self.train]
        self._train_blocks = blocks
        self.train_cache = FeatureCache(self.train, spec, ref, blocks)
        self.test_cache = FeatureCache(self.test, spec, ref)

    # ---- training ------------------------------------------------------

    def n_fit(self) -> int:
        return math.ceil(self.config.fit_fraction * len(self.train))

    def inject(self, confs: Sequence[Conformation]) -> None:
        """Add late data, split with the run's test fraction."""
        for c in confs:
            c.validate()
        self._check_elements(confs)
        self.n_injections += 1
        rng = np.random.default_rng([self.config.seed, 0, self.n_injections])
        new_train, new_test = split_data(list(confs), self.config.test_fraction, rng)
        spec = self.config.descriptor
        self._train_blocks = self._train_blocks + [compute_block(c, spec) for c in new_train]
        self.train += new_train
        self.test += new_test
        self.selection.extend(len(new_train))
        self._rebuild_caches()

    def step(self) -> np.ndarray:
        """One epoch; returns the subsample indices."""
        cfg = self.config
        if cfg.selection_mode == "adaptive":
            idx = choose_subsample(self.selection, self.n_fit(), cfg.selection, self.rng)
        else:
            idx = choose_random(self.selection, self.n_fit(), self.rng)
        with np.errstate(over="ignore", invalid="ignore"):
            _, _, report, grad, present = self.train_cache.evaluate(idx, self.weights, cfg.q, gradient=True)
        epoch = self.epoch + 1
        if not (np.isfinite(report.total) and np.all(np.isfinite(report.per_conformation))
                and np.all(np.isfinite(grad))):
            bad = [self.train[i].conf_id or str(i)
                   for i, v in zip(idx, report.per_conformation) if not np.isfinite(v)]
            raise NumericFailure(f"non-finite loss in epoch {epoch}; conformations: {bad or 'all'}")
        groups = self.optimizer.groups_of_elements(self.weights, present)
        with np.errstate(over="ignore", invalid="ignore"):
            self.optimizer.step(self.weights.params, grad, groups)
        if not np.all(np.isfinite(self.weights.params)):
            raise NumericFailure(f"non-finite weights after the update in epoch {epoch}")
        if cfg.selection_mode == "adaptive":
            update_selection(self.selection, idx, report.per_conformation, report.total, cfg.selection)
        self.epoch = epoch
        return idx

    def test_indices(self) -> np.ndarray:
        n = len(self.test)
        k = self.config.test_subset
        return np.arange(n if k <= 0 else min(k, n))

    def record(self) -> EpochLog:
        cfg = self.config
        every = cfg.train_log_every
        if every > 0 and (self.epoch % every == 0):
            e_tr, f_tr = rmse(self.train_cache, np.flatnonzero(self.selection.active), self.weights)
        else:
            e_tr = f_tr = float("nan")
        e_te, f_te = rmse(self.test_cache, self.test_indices(), self.weights)
        sel = self.selection
        entry = EpochLog(self.epoch, e_tr, e_te, f_tr, f_te, sel.n_active(),
                         sel.n_excluded(REDUNDANT), sel.n_excluded(INCONSISTENT),
                         sel.p_good(cfg.selection))
        self.logs.append(entry)
        return entry

    def run(self, plan: TrainPlan, save=None) -> list[EpochLog]:
        """Train ``plan.epochs`` further epochs.

        Injection epochs count from the start of this call; ``save`` is a
        callable receiving the run at checkpoint cadence.
        """
        start = self.epoch
        pending = list(plan.injections)
        while pending and pending[0].epoch == 0:
            self.inject(pending.pop(0).confs)
        for _ in range(plan.epochs):
            self.step()
            self.record()
            if pending and self.epoch - start == pending[0].epoch:
                self.inject(pending.pop(0).confs)
            if save is not None and plan.checkpoint_every and \
                    (self.epoch - start) % plan.checkpoint_every == 0:
                save(self)
        self.floors = self.final_rmse()
        return self.logs[-plan.epochs:] if plan.epochs else []

    def final_rmse(self) -> tuple[float, float]:
        """Full test-set RMSE (meV/atom, meV/Angstrom); used as ensemble floor."""
        return rmse(self.test_cache, np.arange(len(self.test)), self.weights)

    # ---- serialization ---------------------------------------------------

    def to_bundle(self) -> tuple[dict, dict]:
        from .storage import config_to_dict, pack_conformations
        arrays = {
            "weights": self.weights.params,
            "opt.tau": self.optimizer.state.tau,
            "opt.g": self.optimizer.state.g,
            "opt.h": self.optimizer.state.h,
            "opt.s": self.optimizer.state.s,
            "opt.S": self.optimizer.state.S,
            "sel.l_old": self.selection.l_old,
            "sel.s_hist": self.selection.s_hist,
            "sel.strikes": self.selection.strikes,
            "sel.reason": self.selection.reason,
            "sel.l_bar_old": np.array([self.selection.l_bar_old]),
            "floors": np.array(self.floors, dtype=np.float64),
            "logs": np.array([e.as_row() for e in self.logs], dtype=np.float64).reshape(-1, len(EpochLog.FIELDS)),
        }
        train_arrays, train_ids = pack_conformations(self.train)
        test_arrays, test_ids = pack_conformations(self.test)
        arrays.update({f"train.{k}": v for k, v in train_arrays.items()})
        arrays.update({f"test.{k}": v for k, v in test_arrays.items()})
        meta = {
            "config": config_to_dict(self.config),
            "elements": list(self.weights.elements),
            "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
            "p_good_steps": self.selection.p_good_steps,
            "n_injections": self.n_injections,
            "train_ids": train_ids,
            "test_ids": test_ids,
        }
        return arrays, meta

    @classmethod
    def from_bundle(cls, arrays: dict, meta: dict) -> "TrainingRun":
        from .storage import config_from_dict, unpack_conformations
        config = config_from_dict(meta["config"])
        layout = NetworkLayout(config.descriptor.n_features, config.hidden)
        weights = WeightSet(layout, meta["elements"], arrays["weights"].copy())
        opt_state = OptimizerState(arrays["opt.tau"].copy(), arrays["opt.g"].copy(),
                                   arrays["opt.h"].copy(), arrays["opt.s"].copy(),
                                   arrays["opt.S"].copy())
        selection = SelectionState(arrays["sel.l_old"].copy(), arrays["sel.s_hist"].copy(),
                                   arrays["sel.strikes"].copy(), arrays["sel.reason"].copy(),
                                   float(arrays["sel.l_bar_old"][0]), int(meta["p_good_steps"]))
        train = unpack_conformations({k[6:]: v for k, v in arrays.items() if k.startswith("train.")},
                                     meta["train_ids"])
        test = unpack_conformations({k[5:]: v for k, v in arrays.items() if k.startswith("test.")},
                                    meta["test_ids"])
        logs = [EpochLog(int(r[0]), *map(float, r[1:5]), int(r[5]), int(r[6]), int(r[7]), float(r[8]))
                for r in arrays["logs"]]
        if len(selection) != len(train):
            raise ValueError("selection state and training data differ in length")
        floors = tuple(float(x) for x in arrays["floors"])
        return cls(config, train, test, weights, opt_state, selection, int(meta["epoch"]),
                   meta["rng_state"], logs, int(meta["n_injections"]), floors)


def train(plan: TrainPlan, data: Sequence[Conformation], config: TrainConfig,
          save=None) -> TrainingRun:
    run = TrainingRun.initialize(config, data)
    run.run(plan, save)
    return run


def resume(run: TrainingRun, plan: TrainPlan, new_data: Sequence[Conformation] = (),
           save=None) -> TrainingRun:
    """Continue ``run``; optional new data join before the first new epoch."""
    if new_data:
        run.inject(new_data)
    run.run(plan, save)
    return run
