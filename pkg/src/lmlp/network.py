"""Per-element atomic feed-forward networks with input standardization.

Each element m owns

    E_atom = b_out + a_out . f(... f(b_1 + a_01^T [alpha * (G - beta)]) ...)

with f(x) = 1.59223 tanh(x) on every hidden layer and a linear output.
All parameters of all elements live in one flat vector so the optimizer can
treat them uniformly; :class:`WeightGroup` records how the vector splits
into (element, type, layer) groups.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ACT_SCALE = 1.59223
MIN_STD = 1e-6


def activation(x):
    return ACT_SCALE * np.tanh(x)


def activation_prime(x):
    t = np.tanh(x)
    return ACT_SCALE * (1.0 - t * t)


def activation_second(x):
    t = np.tanh(x)
    return -2.0 * ACT_SCALE * t * (1.0 - t * t)


@dataclass(frozen=True)
class NetworkLayout:
    n_inputs: int
    hidden: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if self.n_inputs < 1 or min(self.hidden) < 1:
            raise ValueError("layer sizes must be >= 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.n_inputs, *self.hidden, 1)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return 2 * s[0] + sum(s[k] * s[k + 1] + s[k + 1] for k in range(len(s) - 1))


@dataclass(frozen=True)
class WeightGroup:
    element: int
    kind: str          # "alpha", "beta", "a" or "b"
    layer: str         # "mu nu" label such as "01"; empty for alpha/beta
    start: int
    stop: int
    is_output: bool

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def key(self) -> str:
        return f"{self.element}:{self.kind}:{self.layer}"


class ElementNet(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    weights: list
    biases: list


class WeightSet:
    """Parameters of every element network in one flat float64 vector."""

    def __init__(self, layout: NetworkLayout, elements, params: np.ndarray | None = None):
        self.layout = layout
        self.elements = tuple(sorted(int(z) for z in elements))
        per = layout.n_params
        self.offsets = {z: i * per for i, z in enumerate(self.elements)}
        n_total = per * len(self.elements)
        if params is None:
            params = np.zeros(n_total)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (n_total,):
            raise ValueError(f"expected {n_total} parameters, got {params.shape}")
        self.params = params
        self.groups = self._make_groups()

    def _make_groups(self) -> list[WeightGroup]:
        groups = []
        sizes = self.layout.sizes
        n_layers = len(sizes) - 1
        for z in self.elements:
            pos = self.offsets[z]
            for kind in ("alpha", "beta"):
                groups.append(WeightGroup(z, kind, "", pos, pos + sizes[0], False))
                pos += sizes[0]
            for k in range(n_layers):
                label = f"{k}{k + 1}"
                out = k == n_layers - 1
                n_w = sizes[k] * sizes[k + 1]
                groups.append(WeightGroup(z, "a", label, pos, pos + n_w, out))
                pos += n_w
                groups.append(WeightGroup(z, "b", str(k + 1), pos, pos + sizes[k + 1], out))
                pos += sizes[k + 1]
        return groups

    def __len__(self):
        return len(self.params)

    def element_slice(self, z: int) -> slice:
        start = self.offsets[z]
        return slice(start, start + self.layout.n_params)

    def network(self, z: int) -> ElementNet:
        if z not in self.offsets:
            raise KeyError(f"no network for element Z={z}")
        return unpack(self.params[self.element_slice(z)], self.layout)

    def copy(self) -> "WeightSet":
        return WeightSet(self.layout, self.elements, self.params.copy())

    def zeros(self) -> np.ndarray:
        return np.zeros_like(self.params)


def unpack(vec: np.ndarray, layout: NetworkLayout) -> ElementNet:
    """Views of one element's parameter slice."""
    sizes = layout.sizes
    n0 = sizes[0]
    alpha = vec[:n0]
    beta = vec[n0:2 * n0]
    pos = 2 * n0
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        n_w = sizes[k] * sizes[k + 1]
        weights.append(vec[pos:pos + n_w].reshape(sizes[k], sizes[k + 1]))
        pos += n_w
        biases.append(vec[pos:pos + sizes[k + 1]])
        pos += sizes[k + 1]
    return ElementNet(alpha, beta, weights, biases)


def descriptor_stats(values_by_atom, numbers_by_atom) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-element mean and (population) standard deviation of descriptors."""
    X = np.concatenate(values_by_atom, axis=0)
    Z = np.concatenate(numbers_by_atom)
    stats = {}
    for z in np.unique(Z):
        rows = X[Z == z]
        stats[int(z)] = (rows.mean(axis=0), rows.std(axis=0), len(rows))
    return stats


def init_weights(layout: NetworkLayout, elements, seed: int, stats) -> WeightSet:
    """Standardization from descriptor statistics, uniform hidden weights, zero biases.

    alpha = 1/max(std, 1e-6), beta = mean; connection weights drawn from
    U(-sqrt(3/fan_in), sqrt(3/fan_in)).
    """
    ws = WeightSet(layout, elements)
    rng = np.random.default_rng(seed)
    sizes = layout.sizes
    for z in ws.elements:
        if z not in stats:
            raise ValueError(f"no descriptor statistics for element Z={z}")
        mean, std, count = stats[z]
        if count < 2:
            raise ValueError(f"need at least two atoms of element Z={z} for statistics")
        net = ws.network(z)
        net.beta[:] = mean
        net.alpha[:] = 1.0 / np.maximum(std, MIN_STD)
        for k, W in enumerate(net.weights):
            lim = np.sqrt(3.0 / sizes[k])
            W[:] = rng.uniform(-lim, lim, size=W.shape)
        for b in net.biases:
            b[:] = 0.0
    return ws


# --------------------------------------------------------------------------
# forward and reverse passes, batched over atoms of one element
# --------------------------------------------------------------------------

class ForwardCache(NamedTuple):
    shifted: np.ndarray        # G - beta
    pre: list                  # pre-activations h_k
    acts: list                 # a_0 (standardized input), a_1 ... a_L


def forward(net: ElementNet, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(net.alpha):
        raise ValueError(f"descriptor width {X.shape[-1]} does not match network input {len(net.alpha)}")
    shifted = X - net.beta
    a = shifted * net.alpha
    acts, pre = [a], []
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        h = a @ W + b
        a = activation(h)
        pre.append(h)
        acts.append(a)
    energy = (a @ net.weights[-1])[:, 0] + net.biases[-1][0]
    return energy, ForwardCache(shifted, pre, acts)


def input_gradient(net: ElementNet, cache: ForwardCache) -> np.ndarray:
    """dE_atom/dG for every row of the batch."""
    delta = np.broadcast_to(net.weights[-1][:, 0], cache.acts[-1].shape)
    for k in range(len(cache.pre) - 1, -1, -1):
        delta = (delta * activation_prime(cache.pre[k])) @ net.weights[k].T
    return delta * net.alpha


def weight_gradient(net: ElementNet, cache: ForwardCache, e_adj: np.ndarray,
                    tangent: np.ndarray | None, out: np.ndarray) -> None:
    """Accumulate d/dw [ sum_n e_adj_n E_n + sum_n tangent_n . dE_n/dG_n ] into ``out``.

    The second term is the force-loss contribution; it is differentiated by
    carrying the input-direction derivative forward alongside the values and
    reversing through both.
    """
    n_hidden = len(cache.pre)
    g = unpack(out, _layout_of(net))
    W_out = net.weights[-1][:, 0]
    a_L = cache.acts[-1]
    B = a_L.shape[0]

    if tangent is not None:
        dots = [tangent * net.alpha]
        for k in range(n_hidden):
            dots.append(activation_prime(cache.pre[k]) * (dots[-1] @ net.weights[k]))

    g.weights[-1][:, 0] += a_L.T @ e_adj
    g.biases[-1][0] += e_adj.sum()
    abar = np.outer(e_adj, W_out)
    if tangent is not None:
        g.weights[-1][:, 0] += dots[-1].sum(axis=0)
        adbar = np.broadcast_to(W_out, (B, len(W_out)))

    for k in range(n_hidden - 1, -1, -1):
        h = cache.pre[k]
        fp = activation_prime(h)
        hbar = abar * fp
        if tangent is not None:
            hdot = dots[k] @ net.weights[k]
            hbar = hbar + adbar * activation_second(h) * hdot
            hdbar = adbar * fp
        W = net.weights[k]
        g.weights[k] += cache.acts[k].T @ hbar
        g.biases[k] += hbar.sum(axis=0)
        abar = hbar @ W.T
        if tangent is not None:
            g.weights[k] += dots[k].T @ hdbar
            adbar = hdbar @ W.T

    g.alpha[:] += np.einsum("bi,bi->i", abar, cache.shifted)
    g.beta[:] -= abar.sum(axis=0) * net.alpha
    if tangent is not None:
        g.alpha[:] += np.einsum("bi,bi->i", adbar, tangent)


def _layout_of(net: ElementNet) -> NetworkLayout:
    return NetworkLayout(len(net.alpha), tuple(W.shape[1] for W in net.weights[:-1]))


def atomic_energy(G, z: int, weights: WeightSet) -> float:
    energy, _ = forward(weights.network(z), np.atleast_2d(G))
    return float(energy[0])


def atomic_energy_with_input_grad(G, z: int, weights: WeightSet):
    net = weights.network(z)
    energy, cache = forward(net, np.atleast_2d(G))
    return float(energy[0]), input_gradient(net, cache)[0]
