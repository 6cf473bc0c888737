import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmlp.descriptors import (AngularParam, DescriptorSpec, RadialParam, acsf_count,
                              angular_eeacsf, compute_block, cutoff, cutoff_prime,
                              descriptor_count, neighbor_list, radial_eeacsf)
from lmlp.elements import UnsupportedElementError, channel_max, element_descriptors
from lmlp.structure import Conformation

from conftest import random_conformation, random_rotation

SMALL = DescriptorSpec.from_grid(6.0, ("unity", "n", "m_bar"), (0.0, 0.3),
                                 ("unity", "m", "n_bar"), (0.05,), (-1.0, 1.0), (1.0, 3.5))


def literal_values(conf, spec):
    """Direct double-sum evaluation over ordered neighbor pairs."""
    pos, z = conf.positions, conf.numbers
    n = len(z)
    rc = spec.cutoff
    H = lambda c, a: element_descriptors(int(z[a])).channel(c)
    out = np.zeros((n, spec.n_features))
    for i in range(n):
        for p, par in enumerate(spec.radial):
            s = 0.0
            for j in range(n):
                if j == i:
                    continue
                r = np.linalg.norm(pos[j] - pos[i])
                if r < rc:
                    s += H(par.channel, j) * math.exp(-par.eta * r * r) * cutoff(r, rc)
            out[i, p] = math.sqrt(s / channel_max(par.channel))
        for p, par in enumerate(spec.angular):
            hmax = channel_max(par.channel) * (2.0 if par.gamma == 1 else 1.0)
            s = 0.0
            for j in range(n):
                for k in range(n):
                    if len({i, j, k}) < 3:
                        continue
                    rij = np.linalg.norm(pos[j] - pos[i])
                    rik = np.linalg.norm(pos[k] - pos[i])
                    if rij >= rc or rik >= rc:
                        continue
                    cos = np.dot(pos[j] - pos[i], pos[k] - pos[i]) / (rij * rik)
                    hj, hk = H(par.channel, j), H(par.channel, k)
                    c = 0.0 if par.gamma == 1 or (hj == 0 and hk == 0) else 1.0
                    h = abs(hj + par.gamma * hk) + c
                    s += (h * max(1 + par.lam * cos, 0.0) ** par.zeta
                          * math.exp(-par.eta * (rij ** 2 + rik ** 2)) * cutoff(rij, rc) * cutoff(rik, rc))
            out[i, len(spec.radial) + p] = math.sqrt(2.0 ** -par.zeta / hmax * s)
    return out


# ---- cutoff -------------------------------------------------------------

def test_cutoff_values():
    assert cutoff(0.0, 12.0) == 1.0
    assert cutoff(12.0, 12.0) == 0.0
    assert cutoff(15.0, 12.0) == 0.0
    assert cutoff(12.0 * math.sqrt(0.5), 12.0) == pytest.approx(math.exp(-1), rel=1e-14)


def test_cutoff_derivative_fd():
    r = np.linspace(0.1, 11.9, 50)
    h = 1e-6
    fd = (cutoff(r + h, 12.0) - cutoff(r - h, 12.0)) / (2 * h)
    assert np.allclose(cutoff_prime(r, 12.0), fd, rtol=1e-6, atol=1e-10)


def test_cutoff_smooth_at_rc():
    rc = 5.0
    assert cutoff(rc - 1e-6, rc) < 1e-300 or cutoff(rc - 1e-6, rc) < 1e-100
    assert abs(cutoff_prime(rc - 1e-6, rc)) < 1e-100
    assert cutoff_prime(rc + 1e-6, rc) == 0.0


# ---- single functions ----------------------------------------------------

def pair(z_center, z_neighbor, r):
    return Conformation([z_center, z_neighbor], [[0, 0, 0], [r, 0, 0]])


def test_radial_unity_at_origin_limit():
    conf = pair(6, 1, 1e-9)
    assert radial_eeacsf(0, RadialParam("unity", 0.0), conf, 12.0) == pytest.approx(1.0, abs=1e-12)


def test_radial_no_neighbors():
    conf = pair(6, 1, 13.0)
    assert radial_eeacsf(0, RadialParam("unity", 0.0), conf, 12.0) == 0.0


def test_radial_m_bar_hydrogen_at_half_cutoff():
    # f_c(6; 12) = exp(1 - 1/(1 - 1/4)) = exp(-1/3), channel value 8/8
    conf = pair(6, 1, 6.0)
    value = radial_eeacsf(0, RadialParam("m_bar", 0.0), conf, 12.0)
    assert value == pytest.approx(math.sqrt(math.exp(-1.0 / 3.0)), rel=1e-14)
    assert value == pytest.approx(0.846482, abs=1e-6)


def test_angular_two_unity_neighbors_collapsed():
    conf = Conformation([6, 1, 1], [[0, 0, 0], [1e-9, 0, 0], [2e-9, 0, 0]])
    value = angular_eeacsf(0, AngularParam("unity", 1.0, 0.0, 1.0, 1.0), conf, 12.0)
    assert value == pytest.approx(math.sqrt(2.0), rel=1e-9)


def test_angular_fewer_than_two_neighbors():
    conf = pair(6, 1, 1.0)
    assert angular_eeacsf(0, AngularParam("m", -1.0, 0.0, 1.0, 1.0), conf, 12.0) == 0.0


def test_angular_gamma_minus_same_element():
    # gamma=-1 with two Cl neighbors (m=7): H = |7 - 7| + 1 = 1
    conf = Conformation([6, 17, 17], [[0, 0, 0], [1e-9, 0, 0], [2e-9, 0, 0]])
    value = angular_eeacsf(0, AngularParam("m", -1.0, 0.0, 1.0, 1.0), conf, 12.0)
    # two ordered pairs * 2^-1 / 8 * H(=1) * (1 + 1)
    assert value == pytest.approx(math.sqrt(2 * 0.5 / 8 * 1 * 2), rel=1e-9)


@pytest.mark.parametrize("bad", [
    dict(channel="unity", gamma=-1.0, eta=0.0, lam=1.0, zeta=1.0),
    dict(channel="m", gamma=0.5, eta=0.0, lam=1.0, zeta=1.0),
    dict(channel="m", gamma=1.0, eta=-1.0, lam=1.0, zeta=1.0),
    dict(channel="m", gamma=1.0, eta=0.0, lam=1.0, zeta=0.5),
])
def test_invalid_angular_params(bad):
    with pytest.raises(ValueError):
        AngularParam(**bad)


# ---- counting -----------------------------------------------------------------

def test_standard_has_153():
    spec = DescriptorSpec.standard()
    assert spec.n_features == 153
    assert (spec.n_radial, spec.n_angular) == (45, 108)
    assert spec.cutoff == 12.0
    assert len(spec.labels()) == 153


def test_descriptor_count_typical():
    assert descriptor_count(0, 0, 5, 2, 2, 3, has_d_block=False) == (25, 108)
    assert descriptor_count(0, 0, 5, 2, 2, 3, has_d_block=True) == (35, 132)
    assert sum(descriptor_count(0, 0, 9, 2, 2, 3, has_d_block=False)) == 153
    with pytest.raises(ValueError):
        descriptor_count(0, 5, 5, 2, 2, 3)


def test_acsf_count():
    assert acsf_count(4, 5, 2, 2, 3) == (20, 120)
    spec = DescriptorSpec(12.0, tuple(RadialParam("unity", e) for e in np.linspace(0, 1, 9)), (),
                          mode="acsf", elements=(1, 6, 8, 17))
    assert spec.n_radial == 36


def test_ordering():
    spec = DescriptorSpec.standard()
    assert [p.channel for p in spec.radial[:10]] == ["unity"] * 9 + ["n"]
    first_n = next(p for p in spec.angular if p.channel == "n")
    assert first_n.gamma == 1.0
    unity = [p for p in spec.angular if p.channel == "unity"]
    assert len(unity) == 12 and all(p.gamma == 1.0 for p in unity)
    assert [(p.lam, p.zeta) for p in unity[:6]] == list(itertools.product((-1.0, 1.0), spec.angular[0:3] and (1.0, 2.409421, 9.996864)))


# ---- full blocks ------------------------------------------------------------

def test_literal_double_sum_equivalence(rng):
    for _ in range(5):
        conf = random_conformation(rng, 6, numbers=(1, 6, 8, 17, 26))
        block = compute_block(conf, SMALL, with_derivatives=False)
        assert np.allclose(block.values, literal_values(conf, SMALL), rtol=1e-12, atol=1e-14)


def test_standard_literal_single_conformation(rng):
    conf = random_conformation(rng, 5, numbers=(1, 6, 17))
    spec = DescriptorSpec.standard()
    assert np.allclose(compute_block(conf, spec, with_derivatives=False).values,
                       literal_values(conf, spec), rtol=1e-12, atol=1e-14)


def test_translation_exact(rng):
    conf = random_conformation(rng, 6)
    a = compute_block(conf, SMALL)
    b = compute_block(conf.copy(positions=conf.positions + np.array([1.0, 2.0, 3.0])), SMALL)
    # shifting by exactly representable offsets keeps all distances at ulp level
    assert np.allclose(a.values, b.values, rtol=0, atol=1e-14)


def test_translation_bitwise_for_exact_shift():
    pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.25, 1.5, 0.75], [1.5, 1.0, 1.25]])
    conf = Conformation([6, 1, 17, 8], pos)
    a = compute_block(conf, SMALL).values
    b = compute_block(conf.copy(positions=pos + [1.0, 2.0, 3.0]), SMALL).values
    assert np.array_equal(a, b)


def test_rotation(rng):
    conf = random_conformation(rng, 6)
    a = compute_block(conf, SMALL, with_derivatives=False).values
    rot = random_rotation(rng)
    b = compute_block(conf.copy(positions=conf.positions @ rot.T), SMALL, with_derivatives=False).values
    assert np.max(np.abs(a - b)) < 1e-10


def test_permutation(rng):
    conf = random_conformation(rng, 6)
    perm = rng.permutation(6)
    a = compute_block(conf, SMALL, with_derivatives=False).values
    b = compute_block(conf.copy(numbers=conf.numbers[perm], positions=conf.positions[perm]), SMALL,
                      with_derivatives=False).values
    assert np.allclose(a[perm], b, rtol=1e-13, atol=0)


def test_derivative_sum_rule(rng):
    conf = random_conformation(rng, 6)
    d = compute_block(conf, SMALL).derivatives
    assert np.max(np.abs(d.sum(axis=2))) < 1e-10


def test_derivatives_fd(rng):
    h = 1e-4
    for _ in range(3):
        conf = random_conformation(rng, 6)
        block = compute_block(conf, SMALL)
        for a in range(conf.n_atoms):
            for x in range(3):
                plus, minus = conf.positions.copy(), conf.positions.copy()
                plus[a, x] += h
                minus[a, x] -= h
                gp = compute_block(conf.copy(positions=plus), SMALL, with_derivatives=False).values
                gm = compute_block(conf.copy(positions=minus), SMALL, with_derivatives=False).values
                fd = (gp - gm) / (2 * h)
                an = block.derivatives[:, :, a, x]
                assert np.max(np.abs(fd - an)) <= 1e-5 * max(np.max(np.abs(an)), 1e-3)


def test_isolated_atom_no_nan():
    conf = Conformation([6, 1], [[0, 0, 0], [20.0, 0, 0]])
    block = compute_block(conf, SMALL)
    assert np.all(block.values == 0.0)
    assert np.all(np.isfinite(block.derivatives)) and np.all(block.derivatives == 0.0)


def test_neighbor_crossing_cutoff_continuous():
    rc = SMALL.cutoff
    inside = compute_block(pair(6, 1, rc - 1e-6), SMALL)
    outside = compute_block(pair(6, 1, rc + 1e-6), SMALL)
    assert np.max(inside.values) < 1e-100 and np.all(outside.values == 0.0)
    assert np.max(np.abs(inside.derivatives)) < 1e-40


def test_unsupported_element_and_nonfinite():
    with pytest.raises(UnsupportedElementError):
        compute_block(Conformation([6, 86], [[0, 0, 0], [1, 0, 0]]), SMALL)
    with pytest.raises(ValueError):
        compute_block(Conformation([6, 1], [[0, 0, 0], [np.nan, 0, 0]]), SMALL)


def test_cell_list_matches_brute_force(rng):
    pos = rng.uniform(0, 15, size=(60, 3))
    a = neighbor_list(pos, 4.0, "cell")
    b = neighbor_list(pos, 4.0, "brute")
    assert all(np.array_equal(np.sort(x), np.sort(y)) for x, y in zip(a, b))


def test_acsf_single_element_equals_unity_eeacsf(rng):
    conf = random_conformation(rng, 5, numbers=(6,))
    eta_r, eta_a = (0.0, 0.2), (0.05,)
    ee = DescriptorSpec.from_grid(6.0, ("unity",), eta_r, ("unity",), eta_a, (-1.0, 1.0), (1.0, 2.0))
    ac = DescriptorSpec.from_grid(6.0, ("unity",), eta_r, ("unity",), eta_a, (-1.0, 1.0), (1.0, 2.0),
                                  mode="acsf", elements=(6,))
    assert np.allclose(compute_block(conf, ee).values, compute_block(conf, ac).values, rtol=1e-14)


def test_acsf_element_resolution(rng):
    conf = random_conformation(rng, 5, numbers=(1, 6))
    spec = DescriptorSpec.from_grid(6.0, ("unity",), (0.0,), ("unity",), (0.0,), (1.0,), (1.0,),
                                    mode="acsf", elements=(1, 6))
    v = compute_block(conf, spec).values
    assert v.shape == (5, 2 + 3)
    with pytest.raises(UnsupportedElementError):
        compute_block(Conformation([8, 1], [[0, 0, 0], [1, 0, 0]]), spec)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_nonnegative_and_finite(seed):
    conf = random_conformation(np.random.default_rng(seed), 5, numbers=(1, 2, 6, 26, 53))
    block = compute_block(conf, SMALL)
    assert np.all(block.values >= 0.0)
    assert np.all(np.isfinite(block.derivatives))


def test_d_block_grid_matches_count():
    chans = ("unity", "n", "m", "d", "n_bar", "m_bar", "d_bar")
    spec = DescriptorSpec.from_grid(12.0, chans, (0.0, 0.01, 0.05, 0.1, 0.5), chans, (0.01, 0.09),
                                    (-1.0, 1.0), (1.0, 2.4, 10.0))
    assert (spec.n_radial, spec.n_angular) == (35, 132)
    assert all(p.gamma == 1.0 for p in spec.angular if p.channel in ("d", "d_bar"))
