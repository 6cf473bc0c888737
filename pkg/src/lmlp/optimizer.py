"""CoRe optimizer: Adam-style moments with RPROP step sizes, plasticity and weight decay.

Per weight xi and per group step tau:

    beta1    = b1_b + (b1_a - b1_b) exp(-((tau - 1)/b1_c)^2)
    g        = beta1 g + (1 - beta1) grad
    h        = beta2 h + (1 - beta2) grad^2
    u        = [g/(1 - beta1^tau)] / (sqrt(h/(1 - beta2^tau)) + eps)     (or sgn(g))
    P        = 0 for the n_frozen highest scores of the group once tau > t_hist
    s        = clip(eta_+- s) depending on sgn(g_prev g P)
    w        = (1 - d |u| P s) w - u P s
    S        = running mean, later moving average, of g u P s

Only groups that take part in a step advance their counter tau; this is how
subsamples that miss an element leave that element's network untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

UPDATE_MODES = ("adaptive", "sign", "gradient")


class OptimizerConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CoreConfig:
    beta1_a: float = 0.45
    beta1_b: float = 0.7
    beta1_c: float = 500.0
    beta2: float = 0.999
    epsilon: float = 1e-8
    eta_minus: float = 0.5
    eta_plus: float = 1.2
    s_min: float = 1e-6
    s_max: float = 1.0
    s0: float = 1e-3
    t_hist: int = 500
    frozen_fraction: float = 0.01     # of hidden a/b groups; output, alpha, beta use 0
    decay_hidden: float = 0.1
    decay_output: float = 0.0
    decay_standardization: float = 0.01
    update: str = "adaptive"          # "sign" gives RPROP-like steps, "gradient" plain SGD

    def __post_init__(self):
        if self.update not in UPDATE_MODES:
            raise OptimizerConfigError(f"unknown update mode {self.update!r}")
        for name in ("beta1_a", "beta1_b", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise OptimizerConfigError(f"{name} must lie in [0, 1)")
        if self.beta1_c <= 0 or self.t_hist <= 0:
            raise OptimizerConfigError("beta1_c and t_hist must be positive")
        if not 0.0 < self.eta_minus <= 1.0 <= self.eta_plus:
            raise OptimizerConfigError("need 0 < eta_minus <= 1 <= eta_plus")
        if not 0.0 < self.s_min <= self.s0 <= self.s_max:
            raise OptimizerConfigError("need 0 < s_min <= s0 <= s_max")
        if not 0.0 <= self.frozen_fraction < 1.0:
            raise OptimizerConfigError("frozen_fraction must lie in [0, 1)")
        for name in ("decay_hidden", "decay_output", "decay_standardization"):
            d = getattr(self, name)
            if not 0.0 <= d * self.s_max < 1.0:
                raise OptimizerConfigError(f"{name} must lie in [0, 1/s_max)")

    def with_changes(self, **kw) -> "CoreConfig":
        return replace(self, **kw)


def core_preset(**kw) -> CoreConfig:
    return CoreConfig(**kw)


def adam_preset(lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                epsilon: float = 1e-8) -> CoreConfig:
    """CoRe settings that reproduce Adam with a constant learning rate."""
    return CoreConfig(beta1_a=beta1, beta1_b=beta1, beta2=beta2, epsilon=epsilon,
                      eta_minus=1.0, eta_plus=1.0, s_min=lr, s_max=lr, s0=lr,
                      frozen_fraction=0.0, decay_hidden=0.0, decay_output=0.0,
                      decay_standardization=0.0)


def rprop_preset(s0: float = 1e-3, eta_minus: float = 0.5, eta_plus: float = 1.2,
                 s_min: float = 1e-6, s_max: float = 50.0) -> CoreConfig:
    """RPROP without weight backtracking."""
    return CoreConfig(beta1_a=0.0, beta1_b=0.0, beta2=0.0, eta_minus=eta_minus,
                      eta_plus=eta_plus, s_min=s_min, s_max=s_max, s0=s0,
                      frozen_fraction=0.0, decay_hidden=0.0, decay_output=0.0,
                      decay_standardization=0.0, update="sign")


def sgd_preset(lr: float = 0.00075) -> CoreConfig:
    return CoreConfig(beta1_a=0.0, beta1_b=0.0, beta2=0.0, eta_minus=1.0, eta_plus=1.0,
                      s_min=lr, s_max=lr, s0=lr, frozen_fraction=0.0, decay_hidden=0.0,
                      decay_output=0.0, decay_standardization=0.0, update="gradient")


PRESETS = {"core": core_preset, "adam": adam_preset, "rprop": rprop_preset, "sgd": sgd_preset}


def preset(name: str, **kw) -> CoreConfig:
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise OptimizerConfigError(
            f"unknown optimizer {name!r} (choose from {', '.join(PRESETS)})") from None


def beta1_schedule(tau, config: CoreConfig):
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 1):
        raise ValueError("tau must be >= 1")
    val = config.beta1_b + (config.beta1_a - config.beta1_b) * np.exp(-((tau - 1.0) / config.beta1_c) ** 2)
    return float(val) if val.ndim == 0 else val


def plasticity_masks(scores, n_frozen, tau, t_hist):
    """0/1 masks freezing the ``n_frozen`` highest scores of each group.

    ``scores``, ``n_frozen`` and ``tau`` are per-group sequences.  Ties go
    to the lowest index.
    """
    masks = []
    for S, n, t in zip(scores, n_frozen, tau):
        S = np.asarray(S, dtype=np.float64)
        if n >= len(S) and n > 0:
            raise OptimizerConfigError(f"n_frozen={n} must be smaller than the group size {len(S)}")
        mask = np.ones(len(S))
        if n > 0 and t > t_hist:
            mask[np.argsort(-S, kind="stable")[:n]] = 0.0
        masks.append(mask)
    return masks


@dataclass
class GroupPlan:
    """How the flat parameter vector splits into optimizer groups."""

    bounds: np.ndarray            # (n_groups, 2) start/stop
    n_frozen: np.ndarray          # per group
    decay: np.ndarray             # per group
    labels: tuple = ()

    @property
    def n_groups(self) -> int:
        return len(self.bounds)

    @property
    def n_params(self) -> int:
        return int(self.bounds[-1, 1]) if len(self.bounds) else 0

    def group_index(self) -> np.ndarray:
        """Group number of every weight."""
        return np.repeat(np.arange(self.n_groups), self.bounds[:, 1] - self.bounds[:, 0])

    @classmethod
    def single(cls, n_params: int, n_frozen: int = 0, decay: float = 0.0) -> "GroupPlan":
        return cls(np.array([[0, n_params]]), np.array([n_frozen]), np.array([decay]), ("all",))

    @classmethod
    def for_weights(cls, weights, config: CoreConfig) -> "GroupPlan":
        bounds, frozen, decay, labels = [], [], [], []
        for grp in weights.groups:
            bounds.append((grp.start, grp.stop))
            labels.append(grp.key)
            if grp.kind in ("alpha", "beta"):
                frozen.append(0)
                decay.append(config.decay_standardization)
            elif grp.is_output:
                frozen.append(0)
                decay.append(config.decay_output)
            else:
                frozen.append(int(np.floor(config.frozen_fraction * grp.size)))
                decay.append(config.decay_hidden)
        return cls(np.array(bounds, dtype=np.int64), np.array(frozen, dtype=np.int64),
                   np.array(decay, dtype=np.float64), tuple(labels))


@dataclass
class OptimizerState:
    tau: np.ndarray               # per group
    g: np.ndarray
    h: np.ndarray
    s: np.ndarray
    S: np.ndarray = field(repr=False)

    @classmethod
    def fresh(cls, plan: GroupPlan, config: CoreConfig) -> "OptimizerState":
        n = plan.n_params
        return cls(np.zeros(plan.n_groups, dtype=np.int64), np.zeros(n), np.zeros(n),
                   np.full(n, config.s0), np.zeros(n))

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.tau.copy(), self.g.copy(), self.h.copy(), self.s.copy(), self.S.copy())


class CoreOptimizer:
    """CoRe over one flat parameter vector split into groups."""

    def __init__(self, config: CoreConfig, plan: GroupPlan, state: OptimizerState | None = None):
        self.config = config
        self.plan = plan
        for (lo, hi), n in zip(plan.bounds, plan.n_frozen):
            if n > 0 and n >= hi - lo:
                raise OptimizerConfigError(f"n_frozen={n} must be smaller than the group size {hi - lo}")
        self.state = state if state is not None else OptimizerState.fresh(plan, config)
        self._gidx = plan.group_index()
        self._decay = plan.decay[self._gidx]

    @classmethod
    def for_weights(cls, weights, config: CoreConfig, state=None) -> "CoreOptimizer":
        return cls(config, GroupPlan.for_weights(weights, config), state)

    def groups_of_elements(self, weights, elements) -> np.ndarray:
        wanted = set(int(z) for z in elements)
        return np.array([i for i, grp in enumerate(weights.groups) if grp.element in wanted],
                        dtype=np.int64)

    def step(self, params: np.ndarray, grad: np.ndarray, participating=None) -> None:
        """Update ``params`` in place.

        ``participating`` lists group numbers taking part; by default every
        group with a nonzero gradient entry.
        """
        cfg, st, plan = self.config, self.state, self.plan
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape or params.shape != (plan.n_params,):
            raise ValueError(f"gradient shape {grad.shape} does not match {plan.n_params} parameters")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError("non-finite gradient; optimizer step aborted")
        if participating is None:
            participating = [i for i, (lo, hi) in enumerate(plan.bounds) if np.any(grad[lo:hi])]
        active_groups = np.zeros(plan.n_groups, dtype=bool)
        active_groups[np.asarray(participating, dtype=np.int64)] = True
        if not active_groups.any():
            return
        st.tau[active_groups] += 1
        on = active_groups[self._gidx]
        idx = np.flatnonzero(on)
        tau_w = st.tau[self._gidx[idx]].astype(np.float64)
        gr = grad[idx]

        beta1 = beta1_schedule(tau_w, cfg)
        g_prev = st.g[idx]
        g = beta1 * g_prev + (1.0 - beta1) * gr
        h = cfg.beta2 * st.h[idx] + (1.0 - cfg.beta2) * gr * gr
        if cfg.update == "sign":
            u = np.sign(g)
        elif cfg.update == "gradient":
            u = gr
        else:
            g_hat = g / (1.0 - beta1 ** tau_w)
            h_hat = h / (1.0 - cfg.beta2 ** tau_w)
            u = g_hat / (np.sqrt(h_hat) + cfg.epsilon)

        P = np.ones(len(idx))
        pos = np.empty(plan.n_params, dtype=np.int64)
        pos[idx] = np.arange(len(idx))
        for k in np.flatnonzero(active_groups):
            n = plan.n_frozen[k]
            if n > 0 and st.tau[k] > cfg.t_hist:
                lo, hi = plan.bounds[k]
                top = np.argsort(-st.S[lo:hi], kind="stable")[:n]
                P[pos[lo + top]] = 0.0

        s = st.s[idx]
        trend = g_prev * g * P
        s = np.where(trend > 0, np.minimum(cfg.eta_plus * s, cfg.s_max),
                     np.where(trend < 0, np.maximum(cfg.eta_minus * s, cfg.s_min), s))
        step = u * P * s
        w = params[idx]
        params[idx] = (1.0 - self._decay[idx] * np.abs(step)) * w - step

        contrib = g * step / cfg.t_hist
        S = st.S[idx]
        st.S[idx] = np.where(tau_w <= cfg.t_hist, S + contrib, (1.0 - 1.0 / cfg.t_hist) * S + contrib)
        st.g[idx] = g
        st.h[idx] = h
        st.s[idx] = s
