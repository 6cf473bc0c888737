"""Element-embracing atom-centered symmetry functions (eeACSFs).

Radial functions weight every neighbor by one periodic-table channel value,

    G_rad = sqrt( 1/H_max * sum_j H_j exp(-eta R_nj^2) f_c(R_nj) ),

angular functions by a linear combination of two channel values,

    G_ang = sqrt( 2^-zeta / H_max_ang * sum_{j != k} H_jk (1 + lambda cos theta)^zeta
                  exp(-eta (R_nj^2 + R_nk^2)) f_c(R_nj) f_c(R_nk) ),

with H_jk = |H_j + gamma H_k| + C.  A conventional element-resolved ACSF
baseline runs through the same kernel with indicator weights.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import elements
from .structure import Conformation

# below this inner sum the square-root derivative is taken as zero
SQRT_GUARD = 1e-30

STANDARD_RADIAL_ETA = (0.0, 0.010702, 0.023348, 0.044203, 0.066118,
                     0.104168, 0.180285, 0.370959, 1.115414)
STANDARD_ANGULAR_ETA = (0.011238, 0.090144)
STANDARD_LAMBDA = (-1.0, 1.0)
STANDARD_ZETA = (1.0, 2.409421, 9.996864)
STANDARD_CHANNELS = ("unity", "n", "m", "n_bar", "m_bar")
STANDARD_CUTOFF = 12.0
# angular channels built with gamma=+1 only
SINGLE_GAMMA = ("unity", "d", "d_bar")


@dataclass(frozen=True)
class RadialParam:
    channel: str
    eta: float

    def __post_init__(self):
        elements.channel_max(self.channel)
        if self.eta < 0:
            raise ValueError("radial eta must be >= 0")


@dataclass(frozen=True)
class AngularParam:
    channel: str
    gamma: float
    eta: float
    lam: float
    zeta: float

    def __post_init__(self):
        elements.channel_max(self.channel)
        if self.gamma not in (-1.0, 1.0) or self.lam not in (-1.0, 1.0):
            raise ValueError("gamma and lambda must be +1 or -1")
        if self.eta < 0:
            raise ValueError("angular eta must be >= 0")
        if self.zeta < 1:
            raise ValueError("zeta must be >= 1")
        if self.channel == "unity" and self.gamma != 1.0:
            raise ValueError("the unity channel only admits gamma=+1")


@dataclass(frozen=True)
class DescriptorSpec:
    """Ordered descriptor parameter set.

    In ``acsf`` mode the radial parameters are expanded per neighbor element
    and the angular parameters per unordered neighbor-element pair; channel
    and gamma are ignored there.
    """

    cutoff: float
    radial: tuple[RadialParam, ...]
    angular: tuple[AngularParam, ...]
    mode: str = "eeacsf"
    elements: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff radius must be positive")
        if self.mode not in ("eeacsf", "acsf"):
            raise ValueError(f"unknown descriptor mode {self.mode!r}")
        if self.mode == "acsf" and not self.elements:
            raise ValueError("acsf mode needs an element list")
        object.__setattr__(self, "radial", tuple(self.radial))
        object.__setattr__(self, "angular", tuple(self.angular))
        object.__setattr__(self, "elements", tuple(sorted(int(z) for z in self.elements)))

    @property
    def element_pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations_with_replacement(self.elements, 2))

    @property
    def n_radial(self) -> int:
        if self.mode == "acsf":
            return len(self.elements) * len(self.radial)
        return len(self.radial)

    @property
    def n_angular(self) -> int:
        if self.mode == "acsf":
            return len(self.element_pairs) * len(self.angular)
        return len(self.angular)

    @property
    def n_features(self) -> int:
        return self.n_radial + self.n_angular

    @classmethod
    def from_grid(cls, cutoff, radial_channels, radial_eta, angular_channels,
                  angular_eta, lambdas, zetas, mode="eeacsf", elements=()):
        """All combinations in the persisted order.

        Radial: channel-major, eta-minor.  Angular: channel, gamma (+1 first),
        eta, lambda, zeta.  The unity, d and d_bar channels take gamma=+1
        only: for two d-block neighbors |d_j - d_k| equals |d_bar_j - d_bar_k|.
        """
        radial = [RadialParam(c, float(e)) for c in radial_channels for e in radial_eta]
        angular = []
        for c in angular_channels:
            gammas = (1.0,) if c in SINGLE_GAMMA else (1.0, -1.0)
            for g, e, lam, z in itertools.product(gammas, angular_eta, lambdas, zetas):
                angular.append(AngularParam(c, g, float(e), float(lam), float(z)))
        return cls(float(cutoff), tuple(radial), tuple(angular), mode, tuple(elements))

    @classmethod
    def standard(cls, cutoff: float = STANDARD_CUTOFF) -> "DescriptorSpec":
        """The 153-function default set.

        For a cutoff other than 12 Angstrom all eta values are scaled by
        (12/cutoff)^2, which keeps the Gaussian widths fixed relative to
        the cutoff sphere.
        """
        scale = (STANDARD_CUTOFF / cutoff) ** 2
        return cls.from_grid(cutoff, STANDARD_CHANNELS, [scale * e for e in STANDARD_RADIAL_ETA],
                             STANDARD_CHANNELS, [scale * e for e in STANDARD_ANGULAR_ETA],
                             STANDARD_LAMBDA, STANDARD_ZETA)

    def labels(self) -> list[dict]:
        """One description per descriptor index, in vector order."""
        out = []
        if self.mode == "acsf":
            for z in self.elements:
                for p in self.radial:
                    out.append(dict(kind="radial", channel=f"elem:{elements.symbol(z)}",
                                    gamma="", eta=p.eta, lam="", zeta=""))
            for a, b in self.element_pairs:
                for p in self.angular:
                    out.append(dict(kind="angular",
                                    channel=f"pair:{elements.symbol(a)}-{elements.symbol(b)}",
                                    gamma="", eta=p.eta, lam=p.lam, zeta=p.zeta))
            return out
        for p in self.radial:
            out.append(dict(kind="radial", channel=p.channel, gamma="", eta=p.eta,
                            lam="", zeta=""))
        for p in self.angular:
            out.append(dict(kind="angular", channel=p.channel, gamma=p.gamma,
                            eta=p.eta, lam=p.lam, zeta=p.zeta))
        return out


@dataclass
class DescriptorBlock:
    """Per-atom descriptor vectors and their position derivatives.

    ``derivatives[n, i, j, :]`` holds dG_{n,i}/dr_j in 1/Angstrom; entries are
    nonzero only for atoms j within the cutoff of center n (and j = n).
    """

    values: np.ndarray        # (N, n_G)
    derivatives: np.ndarray   # (N, n_G, N, 3)

    @property
    def n_atoms(self) -> int:
        return self.values.shape[0]


def descriptor_count(n_channels_rad, n_channels_ang, n_eta_rad, n_eta_ang,
                     n_lambda, n_zeta, has_d_block=None):
    """Number of radial and angular eeACSFs for a full parameter grid.

    ``n_channels_ang`` counts the angular channels taking both gamma signs
    plus the unity channel, which only takes gamma=+1 (hence ``2 c - 1``).
    With ``has_d_block`` given the channel counts are fixed instead: 5
    radial and 9 angular terms without d-block (unity, n, m, n_bar, m_bar),
    7 radial and 11 angular terms with it, since d and d_bar enter the
    angular set with gamma=+1 only.
    """
    if has_d_block is not None:
        n_channels_rad = 7 if has_d_block else 5
        n_ang_terms = 11 if has_d_block else 9
    else:
        n_ang_terms = 2 * n_channels_ang - 1
    counts = (n_channels_rad, n_ang_terms, n_eta_rad, n_eta_ang, n_lambda, n_zeta)
    if min(counts) < 1:
        raise ValueError("all counts must be >= 1")
    n_rad = n_channels_rad * n_eta_rad
    n_ang = n_ang_terms * n_eta_ang * n_lambda * n_zeta
    return n_rad, n_ang


def acsf_count(n_elements, n_eta_rad, n_eta_ang, n_lambda, n_zeta):
    n_rad = n_elements * n_eta_rad
    n_ang = n_elements * (n_elements + 1) // 2 * n_eta_ang * n_lambda * n_zeta
    return n_rad, n_ang


# --------------------------------------------------------------------------
# cutoff function
# --------------------------------------------------------------------------

def cutoff(r, rc):
    """exp(1 - 1/(1 - R^2/Rc^2)) inside the cutoff sphere, 0 outside."""
    r = np.asarray(r, dtype=np.float64)
    x = np.square(r) / (rc * rc)
    inside = x < 1.0
    xs = np.where(inside, x, 0.0)
    out = np.where(inside, np.exp(1.0 - 1.0 / (1.0 - xs)), 0.0)
    return out if out.ndim else float(out)


def cutoff_prime(r, rc):
    """d f_c / dR."""
    r = np.asarray(r, dtype=np.float64)
    x = np.square(r) / (rc * rc)
    inside = x < 1.0
    xs = np.where(inside, x, 0.0)
    one_minus = 1.0 - xs
    fc = np.exp(1.0 - 1.0 / one_minus)
    out = np.where(inside, -fc / np.square(one_minus) * 2.0 * r / (rc * rc), 0.0)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# neighbor lists
# --------------------------------------------------------------------------

def neighbor_list(positions: np.ndarray, rc: float, method: str = "cell") -> list[np.ndarray]:
    """Indices of atoms strictly within ``rc`` of each atom.

    Each list is ordered by squared distance, ties broken by the neighbor
    coordinates, so every later sum runs in an order that does not depend on
    how the atoms are numbered.  ``cell`` bins atoms into cubes of edge
    ``rc`` and only compares adjacent bins; ``brute`` compares all pairs.
    Both return identical lists.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    rc2 = rc * rc

    def canonical(idx, d2):
        order = np.lexsort((pos[idx, 2], pos[idx, 1], pos[idx, 0], d2))
        return idx[order]

    if method == "brute" or n < 16:
        diff = pos[None, :, :] - pos[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(d2, np.inf)
        out = []
        for row in d2:
            idx = np.flatnonzero(row < rc2)
            out.append(canonical(idx, row[idx]))
        return out
    if method != "cell":
        raise ValueError(f"unknown neighbor-list method {method!r}")

    keys = np.floor((pos - pos.min(axis=0)) / rc).astype(np.int64)
    bins: dict[tuple, list[int]] = {}
    for idx, key in enumerate(map(tuple, keys)):
        bins.setdefault(key, []).append(idx)
    offsets = list(itertools.product((-1, 0, 1), repeat=3))
    out = []
    for i in range(n):
        kx, ky, kz = keys[i]
        cand = []
        for dx, dy, dz in offsets:
            cand.extend(bins.get((kx + dx, ky + dy, kz + dz), ()))
        cand = np.array(sorted(cand), dtype=np.int64)
        diff = pos[cand] - pos[i]
        d2 = np.einsum("ij,ij->i", diff, diff)
        keep = (d2 < rc2) & (cand != i)
        out.append(canonical(cand[keep], d2[keep]))
    return out


def _pairs_and_triples(nlist):
    centers, neigh = [], []
    tc, tj, tk = [], [], []
    for i, nb in enumerate(nlist):
        centers.extend([i] * len(nb))
        neigh.extend(nb.tolist())
        for a in range(len(nb)):
            for b in range(a + 1, len(nb)):
                tc.append(i)
                tj.append(nb[a])
                tk.append(nb[b])
    as_int = lambda v: np.asarray(v, dtype=np.int64)
    return as_int(centers), as_int(neigh), as_int(tc), as_int(tj), as_int(tk)


# --------------------------------------------------------------------------
# weights per parameter
# --------------------------------------------------------------------------

def _channel_matrix(numbers, channels):
    infos = [elements.element_descriptors(int(z)) for z in numbers]
    return {c: np.array([info.channel(c) for info in infos]) for c in channels}


def _eeacsf_weights(spec, numbers, pj, tj, tk):
    chans = {p.channel for p in spec.radial} | {p.channel for p in spec.angular}
    H = _channel_matrix(numbers, chans)
    w_rad = np.empty((len(spec.radial), len(pj)))
    for p, par in enumerate(spec.radial):
        w_rad[p] = H[par.channel][pj] / elements.channel_max(par.channel)
    w_ang = np.empty((len(spec.angular), len(tj)))
    for p, par in enumerate(spec.angular):
        hj = H[par.channel][tj]
        hk = H[par.channel][tk]
        c = np.where((par.gamma == 1.0) | ((hj == 0.0) & (hk == 0.0)), 0.0, 1.0)
        h_ang = np.abs(hj + par.gamma * hk) + c
        h_max = elements.channel_max(par.channel)
        if par.gamma == 1.0:
            h_max *= 2.0
        w_ang[p] = h_ang / h_max
    eta_r = np.array([p.eta for p in spec.radial])
    eta_a = np.array([p.eta for p in spec.angular])
    lam = np.array([p.lam for p in spec.angular])
    zeta = np.array([p.zeta for p in spec.angular])
    return w_rad, eta_r, w_ang, eta_a, lam, zeta


def _acsf_weights(spec, numbers, pj, tj, tk):
    zj, zk = numbers[tj], numbers[tk]
    w_rad, eta_r = [], []
    for z in spec.elements:
        ind = (numbers[pj] == z).astype(np.float64)
        for par in spec.radial:
            w_rad.append(ind)
            eta_r.append(par.eta)
    w_ang, eta_a, lam, zeta = [], [], [], []
    for a, b in spec.element_pairs:
        ind = (((zj == a) & (zk == b)) | ((zj == b) & (zk == a))).astype(np.float64)
        for par in spec.angular:
            # same normalization as the unity-channel eeACSF: H/H_max = 1
            w_ang.append(ind)
            eta_a.append(par.eta)
            lam.append(par.lam)
            zeta.append(par.zeta)
    shape_r = (len(w_rad), len(pj))
    shape_a = (len(w_ang), len(tj))
    return (np.array(w_rad).reshape(shape_r), np.array(eta_r),
            np.array(w_ang).reshape(shape_a), np.array(eta_a), np.array(lam),
            np.array(zeta))


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------

def _check(conf: Conformation, spec: DescriptorSpec):
    conf.validate()
    if spec.mode == "acsf":
        missing = set(conf.numbers.tolist()) - set(spec.elements)
        if missing:
            raise elements.UnsupportedElementError(
                f"elements {sorted(missing)} not in the ACSF element list")


def compute_block(conf: Conformation, spec: DescriptorSpec,
                  with_derivatives: bool = True, neighbor_method: str = "cell") -> DescriptorBlock:
    """Descriptor values and analytic position derivatives for every atom."""
    _check(conf, spec)
    pos = conf.positions
    numbers = conf.numbers
    n = len(numbers)
    rc = spec.cutoff
    nlist = neighbor_list(pos, rc, neighbor_method)
    pi, pj, ti, tj, tk = _pairs_and_triples(nlist)

    if spec.mode == "acsf":
        w_rad, eta_r, w_ang, eta_a, lam, zeta = _acsf_weights(spec, numbers, pj, tj, tk)
    else:
        w_rad, eta_r, w_ang, eta_a, lam, zeta = _eeacsf_weights(spec, numbers, pj, tj, tk)
    n_rad, n_ang = len(eta_r), len(eta_a)
    n_g = n_rad + n_ang

    inner = np.zeros((n_g, n))
    dinner = np.zeros((n, n_g, n, 3)) if with_derivatives else None

    # radial
    if len(pi):
        vec = pos[pj] - pos[pi]
        r = np.sqrt(np.einsum("ij,ij->i", vec, vec))
        unit = vec / r[:, None]
        fc = cutoff(r, rc)
        gauss = np.exp(-np.outer(eta_r, r * r))                     # (P, pairs)
        terms = w_rad * gauss * fc
        np.add.at(inner[:n_rad].T, pi, terms.T)
        if with_derivatives:
            dfc = cutoff_prime(r, rc)
            dterm = w_rad * gauss * (dfc - 2.0 * eta_r[:, None] * r * fc)   # dT/dR
            dvec = dterm[:, :, None] * unit[None, :, :]               # (P, pairs, 3)
            p_idx = np.arange(n_rad)[:, None]
            np.add.at(dinner, (pi[None, :], p_idx, pj[None, :]), dvec)
            np.add.at(dinner, (pi[None, :], p_idx, pi[None, :]), -dvec)

    # angular, each unordered neighbor pair counted twice
    if len(ti) and n_ang:
        vj = pos[tj] - pos[ti]
        vk = pos[tk] - pos[ti]
        rj = np.sqrt(np.einsum("ij,ij->i", vj, vj))
        rk = np.sqrt(np.einsum("ij,ij->i", vk, vk))
        uj = vj / rj[:, None]
        uk = vk / rk[:, None]
        cos = np.einsum("ij,ij->i", uj, uk)
        fcj, fck = cutoff(rj, rc), cutoff(rk, rc)
        ej = np.exp(-np.outer(eta_a, rj * rj))
        ek = np.exp(-np.outer(eta_a, rk * rk))
        gj, gk = ej * fcj, ek * fck
        base = np.maximum(1.0 + lam[:, None] * cos[None, :], 0.0)
        powz = base ** zeta[:, None]
        pref = 2.0 * 2.0 ** (-zeta)[:, None] * w_ang
        terms = pref * powz * gj * gk
        np.add.at(inner[n_rad:].T, ti, terms.T)
        if with_derivatives:
            dfcj, dfck = cutoff_prime(rj, rc), cutoff_prime(rk, rc)
            dgj = ej * (dfcj - 2.0 * eta_a[:, None] * rj * fcj)
            dgk = ek * (dfck - 2.0 * eta_a[:, None] * rk * fck)
            dpow = zeta[:, None] * base ** (zeta[:, None] - 1.0) * lam[:, None]
            dcos_j = (uk - cos[:, None] * uj) / rj[:, None]
            dcos_k = (uj - cos[:, None] * uk) / rk[:, None]
            a_cos = (pref * dpow * gj * gk)[:, :, None]
            d_j = a_cos * dcos_j[None] + (pref * powz * dgj * gk)[:, :, None] * uj[None]
            d_k = a_cos * dcos_k[None] + (pref * powz * gj * dgk)[:, :, None] * uk[None]
            p_idx = np.arange(n_rad, n_g)[:, None]
            np.add.at(dinner, (ti[None, :], p_idx, tj[None, :]), d_j)
            np.add.at(dinner, (ti[None, :], p_idx, tk[None, :]), d_k)
            np.add.at(dinner, (ti[None, :], p_idx, ti[None, :]), -(d_j + d_k))

    inner = np.maximum(inner.T, 0.0)        # (N, n_G)
    values = np.sqrt(inner)
    if not with_derivatives:
        return DescriptorBlock(values, np.zeros((n, n_g, n, 3)))
    safe = np.where(inner < SQRT_GUARD, np.inf, 2.0 * values)
    dinner /= safe[:, :, None, None]
    return DescriptorBlock(values, dinner)


def compute_block_acsf(conf: Conformation, spec: DescriptorSpec, **kw) -> DescriptorBlock:
    if spec.mode != "acsf":
        raise ValueError("compute_block_acsf needs a spec in acsf mode")
    return compute_block(conf, spec, **kw)


def radial_eeacsf(center: int, param: RadialParam, conf: Conformation, cutoff_radius: float) -> float:
    spec = DescriptorSpec(cutoff_radius, (param,), ())
    return float(compute_block(conf, spec, with_derivatives=False).values[center, 0])


def angular_eeacsf(center: int, param: AngularParam, conf: Conformation, cutoff_radius: float) -> float:
    spec = DescriptorSpec(cutoff_radius, (), (param,))
    return float(compute_block(conf, spec, with_derivatives=False).values[center, 0])


def compute_many(confs: Sequence[Conformation], spec: DescriptorSpec,
                 with_derivatives: bool = True) -> list[DescriptorBlock]:
    return [compute_block(c, spec, with_derivatives) for c in confs]
