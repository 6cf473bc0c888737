"""Lifelong adaptive data selection.

Every training conformation r carries an adaptive selection factor S_hist
(1 at start, 0 once excluded), its last loss contribution L_old (NaN until
first evaluated) and a strike counter X.  :func:`choose_subsample` draws each
epoch's subsample from "bad" (high loss) and "good" (well represented) data;
:func:`update_selection` adapts the factors from the fresh losses and
excludes conformations whose factor leaves [S_min, S_max] or which keep
producing extreme losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVE, REDUNDANT, INCONSISTENT = 0, 1, 2
# exclusion bounds are compared with this relative slack so that exactly N
# factor applications land on the bound instead of one rounding error past it
BOUND_RTOL = 1e-12


class SelectionConfigError(ValueError):
    pass


class AllDataExcludedError(RuntimeError):
    """No conformation with a positive selection factor is left."""


@dataclass(frozen=True)
class SelectionConfig:
    s_min: float = 0.1
    s_max: float = 100.0
    t_f1: float = 0.81          # thresholds are stored squared
    t_f2: float = 1.44
    t_f3: float = 4.0
    t_x: float = 56.25
    n_f_minus2: int = 30
    n_f_minus: int = 100
    n_f_plus: int = 500
    n_f_plus2: int = 150
    n_x: int = 5
    p_good_max: float = 2.0 / 3.0
    n_p: int = 20
    eps_prime: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.s_min < 1.0 < self.s_max:
            raise SelectionConfigError("need 0 < s_min < 1 < s_max")
        if not 0.0 < self.t_f1 < 1.0 < self.t_f2 < self.t_f3 < self.t_x:
            raise SelectionConfigError("need 0 < T_F1 < 1 < T_F2 < T_F3 < T_X")
        counts = (self.n_f_minus2, self.n_f_minus, self.n_f_plus, self.n_f_plus2, self.n_x, self.n_p)
        if min(counts) < 1:
            raise SelectionConfigError("all N hyperparameters must be >= 1")
        if not 0.0 <= self.p_good_max < 1.0:
            raise SelectionConfigError("p_good_max must lie in [0, 1)")
        if not 0.0 < self.eps_prime <= 1.0:
            raise SelectionConfigError("eps_prime must lie in (0, 1]")

    @classmethod
    def from_roots(cls, sqrt_t_f1=0.9, sqrt_t_f2=1.2, sqrt_t_f3=2.0, sqrt_t_x=7.5, **kw):
        return cls(t_f1=sqrt_t_f1 ** 2, t_f2=sqrt_t_f2 ** 2, t_f3=sqrt_t_f3 ** 2,
                   t_x=sqrt_t_x ** 2, **kw)


@dataclass(frozen=True)
class Factors:
    f_minus2: float
    f_minus: float
    f_plus: float
    f_plus2: float
    p_step: float


def derive_factors(config: SelectionConfig) -> Factors:
    return Factors(
        f_minus2=config.s_min ** (1.0 / config.n_f_minus2),
        f_minus=config.s_min ** (1.0 / config.n_f_minus),
        f_plus=config.s_max ** (1.0 / config.n_f_plus),
        f_plus2=config.s_max ** (1.0 / config.n_f_plus2),
        p_step=config.p_good_max / config.n_p,
    )


@dataclass
class SelectionState:
    l_old: np.ndarray
    s_hist: np.ndarray
    strikes: np.ndarray
    reason: np.ndarray                  # ACTIVE, REDUNDANT or INCONSISTENT
    l_bar_old: float = np.inf
    p_good_steps: int = 0               # p_good = p_good_steps * p_step

    @classmethod
    def fresh(cls, n: int) -> "SelectionState":
        return cls(np.full(n, np.nan), np.ones(n), np.zeros(n, dtype=np.int64),
                   np.zeros(n, dtype=np.int64))

    def __len__(self):
        return len(self.s_hist)

    def p_good(self, config: SelectionConfig) -> float:
        return self.p_good_steps * derive_factors(config).p_step

    @property
    def active(self) -> np.ndarray:
        return self.s_hist > 0

    def n_active(self) -> int:
        return int(np.count_nonzero(self.s_hist > 0))

    def n_excluded(self, reason: int) -> int:
        return int(np.count_nonzero(self.reason == reason))

    def extend(self, n: int) -> None:
        """Append ``n`` fresh entries (late-injected data)."""
        fresh = SelectionState.fresh(n)
        self.l_old = np.concatenate([self.l_old, fresh.l_old])
        self.s_hist = np.concatenate([self.s_hist, fresh.s_hist])
        self.strikes = np.concatenate([self.strikes, fresh.strikes])
        self.reason = np.concatenate([self.reason, fresh.reason])

    def copy(self) -> "SelectionState":
        return SelectionState(self.l_old.copy(), self.s_hist.copy(), self.strikes.copy(),
                              self.reason.copy(), self.l_bar_old, self.p_good_steps)


def bad_probabilities(l_old: np.ndarray, s_hist: np.ndarray) -> np.ndarray:
    """Normalized P_bad; never-evaluated entries get max(S_hist)."""
    seen = ~np.isnan(l_old)
    l_max = np.max(l_old[seen]) if seen.any() else np.nan
    p = np.full(len(l_old), np.max(s_hist)) if len(l_old) else np.zeros(0)
    if seen.any():
        p[seen] = s_hist[seen] * (l_old[seen] / l_max) if l_max > 0 else 0.0
    if not p.sum() > 0:                 # every seen loss is exactly zero
        p = s_hist.copy()
    return p / p.sum()


def good_probabilities(l_old: np.ndarray, s_hist: np.ndarray, l_max: float,
                       eps_prime: float) -> np.ndarray:
    """Normalized P_good over the conformations not yet drawn."""
    with np.errstate(invalid="ignore", divide="ignore"):
        p = s_hist * (1.0 - l_old / l_max)
    positive = p[p > 0]
    p_min = min(positive.min() if len(positive) else 1.0, 1.0) * eps_prime
    p[(l_old == l_max) | np.isnan(p)] = p_min
    return p / p.sum()


def choose_subsample(state: SelectionState, n_fit: int, config: SelectionConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Indices (sorted) of this epoch's training subsample."""
    active = np.flatnonzero(state.s_hist > 0)
    if len(active) == 0:
        raise AllDataExcludedError("all training data are excluded by the selection factors")
    n_fit = min(int(n_fit), len(active))
    n_good = int(np.floor(state.p_good(config) * n_fit))
    n_bad = n_fit - n_good

    l_old = state.l_old[active]
    s_hist = state.s_hist[active]
    p_bad = bad_probabilities(l_old, s_hist)
    bad = rng.choice(len(active), size=n_bad, replace=False, p=p_bad)
    chosen = [bad]
    if n_good > 0:
        rest = np.setdiff1d(np.arange(len(active)), bad)
        seen = ~np.isnan(l_old)
        l_max = np.max(l_old[seen]) if seen.any() else np.nan
        p_good = good_probabilities(l_old[rest], s_hist[rest], l_max, config.eps_prime)
        chosen.append(rest[rng.choice(len(rest), size=n_good, replace=False, p=p_good)])
    return np.sort(active[np.concatenate(chosen)])


def choose_random(state: SelectionState, n_fit: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subsample over the active set (control runs without adaptive selection)."""
    active = np.flatnonzero(state.s_hist > 0)
    if len(active) == 0:
        raise AllDataExcludedError("all training data are excluded by the selection factors")
    return np.sort(rng.choice(active, size=min(int(n_fit), len(active)), replace=False))


def update_selection(state: SelectionState, indices, l_new, l_bar_new: float,
                     config: SelectionConfig) -> None:
    """Adapt factors, strikes, p_good and loss history in place."""
    indices = np.asarray(indices, dtype=np.int64)
    l_new = np.asarray(l_new, dtype=np.float64)
    if indices.shape != l_new.shape:
        raise ValueError("indices and losses differ in length")
    if len(indices) and (indices.min() < 0 or indices.max() >= len(state)):
        raise IndexError("subsample index outside the training set")
    if not (np.all(np.isfinite(l_new)) and np.isfinite(l_bar_new)):
        raise FloatingPointError("non-finite loss in selection update")
    fac = derive_factors(config)

    l_rel = l_new / l_bar_new if l_bar_new > 0 else np.zeros_like(l_new)
    l_old = state.l_old[indices]
    S = state.s_hist[indices].copy()
    X = state.strikes[indices].copy()

    X = np.where(l_rel > config.t_x, X + 1, 0)
    S = np.where(l_rel >= config.t_f1, np.maximum(1.0, S), S)
    S = np.where(l_rel <= config.t_f2, np.minimum(S, 1.0), S)
    seen = ~np.isnan(l_old)
    better = seen & (l_new <= l_old)
    worse = seen & (l_new > l_old)
    S = np.where((l_rel < config.t_f1) & better, S * fac.f_minus2, S)
    S = np.where((l_rel < config.t_f1) & worse, S * fac.f_minus, S)
    S = np.where((l_rel > config.t_f2) & (l_rel <= config.t_f3) & worse, S * fac.f_plus, S)
    S = np.where((l_rel > config.t_f3) & worse, S * fac.f_plus2, S)

    struck = X >= config.n_x
    too_low = S < config.s_min * (1.0 - BOUND_RTOL)
    too_high = S > config.s_max * (1.0 + BOUND_RTOL)
    reason = state.reason[indices].copy()
    reason[too_low] = REDUNDANT
    reason[struck | too_high] = INCONSISTENT
    S[struck | too_low | too_high] = 0.0

    state.s_hist[indices] = S
    state.strikes[indices] = X
    state.reason[indices] = reason
    state.l_old[indices] = l_new
    if l_bar_new != state.l_bar_old:
        direction = 1 if l_bar_new > state.l_bar_old else -1
        state.p_good_steps = int(np.clip(state.p_good_steps + direction, 0, config.n_p))
    state.l_bar_old = float(l_bar_new)
