"""Acceptance criteria 1-11.

Each test checks one criterion at its stated tolerance and records a
``criterion N: PASS|FAIL`` line; the lines are printed together in the
pytest terminal summary (see ``conftest.py``).  The toy-training criteria
share one synthesized dataset and one 4-member ensemble.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import random_conformation, random_rotation
from lmlp.descriptors import DescriptorSpec, compute_block, descriptor_count
from lmlp.ensemble import calibration_report, from_members, member_from_run, predict_with_uncertainty
from lmlp.network import NetworkLayout, descriptor_stats, init_weights
from lmlp.optimizer import adam_preset, preset, rprop_preset
from lmlp.potential import FeatureCache, loss, loss_weight_gradient, predict
from lmlp.selection import (INCONSISTENT, REDUNDANT, SelectionConfig, SelectionState,
                            bad_probabilities, derive_factors, update_selection)
from lmlp.storage import load_checkpoint, save_checkpoint
from lmlp.synth import SystemSpec, energy_std_per_atom, generate, offsets_for
from lmlp.trainer import Injection, NumericFailure, TrainConfig, TrainingRun, TrainPlan, rmse
from test_optimizer import reference_adam, reference_rprop, run_core

SYSTEM = SystemSpec.parse("C,H,Cl:5")
TOY_SPEC = DescriptorSpec.standard(8.0)
TOY_HIDDEN = (50, 50)
TOY_FIT = 0.5
TOY_EPOCHS = 2000


def toy_config(seed, **kw):
    base = dict(descriptor=TOY_SPEC, hidden=TOY_HIDDEN, fit_fraction=TOY_FIT,
                ref_energies=offsets_for(SYSTEM), train_log_every=0, seed=seed)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def single_thread():
    with threadpool_limits(limits=1):
        yield


# --------------------------------------------------------------------------
# 1-5: oracles and invariants
# --------------------------------------------------------------------------

def _dyadic(conf, bits=30):
    """Positions rounded to multiples of 2^-bits, so integer shifts are exact."""
    return conf.copy(positions=np.round(conf.positions * 2.0 ** bits) / 2.0 ** bits)


def test_criterion_1_descriptor_invariances(criterion):
    rng = np.random.default_rng(101)
    spec = DescriptorSpec.standard()
    t0 = time.perf_counter()
    worst = dict(translation=0.0, rotation=0.0, permutation=0.0, sum_rule=0.0, fd=0.0)
    h = 1e-4
    for _ in range(50):
        conf = _dyadic(random_conformation(rng, 6, numbers=(1, 6, 8, 17, 26), box=3.5))
        block = compute_block(conf, spec)
        shifted = compute_block(conf.copy(positions=conf.positions + rng.integers(-50, 50, size=3)), spec)
        worst["translation"] = max(worst["translation"],
                                   float(np.max(np.abs(shifted.values - block.values))),
                                   float(np.max(np.abs(shifted.derivatives - block.derivatives))))
        rot = random_rotation(rng)
        rotated = compute_block(conf.copy(positions=conf.positions @ rot.T), spec, with_derivatives=False)
        worst["rotation"] = max(worst["rotation"], float(np.max(np.abs(rotated.values - block.values))))
        perm = rng.permutation(6)
        permuted = compute_block(conf.copy(numbers=conf.numbers[perm], positions=conf.positions[perm]), spec)
        worst["permutation"] = max(
            worst["permutation"],
            float(np.max(np.abs(permuted.values - block.values[perm]))),
            float(np.max(np.abs(permuted.derivatives - block.derivatives[perm][:, :, perm]))))
        worst["sum_rule"] = max(worst["sum_rule"], float(np.max(np.abs(block.derivatives.sum(axis=2)))))
        fd = np.empty_like(block.derivatives)
        for a in range(6):
            for x in range(3):
                plus, minus = conf.positions.copy(), conf.positions.copy()
                plus[a, x] += h
                minus[a, x] -= h
                gp = compute_block(conf.copy(positions=plus), spec, with_derivatives=False).values
                gm = compute_block(conf.copy(positions=minus), spec, with_derivatives=False).values
                fd[:, :, a, x] = (gp - gm) / (2 * h)
        rel = np.max(np.abs(fd - block.derivatives)) / np.max(np.abs(block.derivatives))
        worst["fd"] = max(worst["fd"], float(rel))
    elapsed = time.perf_counter() - t0
    ok = (worst["translation"] == 0.0 and worst["rotation"] <= 1e-10 and worst["permutation"] == 0.0
          and worst["sum_rule"] <= 1e-10 and worst["fd"] < 1e-5 and elapsed < 10.0)
    criterion(1, ok, "translation {translation:.1e}, rotation {rotation:.1e}, permutation "
              "{permutation:.1e}, sum rule {sum_rule:.1e}, FD rel {fd:.1e}".format(**worst)
              + f", {elapsed:.1f} s")


def test_criterion_2_descriptor_counts(criterion):
    n_standard = DescriptorSpec.standard().n_features
    typical = descriptor_count(0, 0, 5, 2, 2, 3, has_d_block=False)
    typical_d = descriptor_count(0, 0, 5, 2, 2, 3, has_d_block=True)
    chans = ("unity", "n", "m", "d", "n_bar", "m_bar", "d_bar")
    grid = DescriptorSpec.from_grid(12.0, chans, (0.0, 0.01, 0.05, 0.1, 0.5), chans, (0.01, 0.09),
                                    (-1.0, 1.0), (1.0, 2.4, 10.0))
    grid_counts = (grid.n_radial, grid.n_angular)
    ok = n_standard == 153 and typical == (25, 108) and typical_d == (35, 132) and grid_counts == (35, 132)
    criterion(2, ok, f"standard set {n_standard}; typical setting {typical} without and {typical_d} "
              f"with d-block; explicit d-block grid {grid_counts}")


def test_criterion_3_force_and_gradient_exactness(criterion):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    spec = DescriptorSpec.standard()
    confs = [random_conformation(rng, 5, numbers=(1, 6, 17), box=3.0) for _ in range(3)]
    for c in confs:
        c.numbers[:] = [6, 1, 17, 1, 6]
    blocks = [compute_block(c, spec) for c in confs]
    stats = descriptor_stats([b.values for b in blocks], [c.numbers for c in confs])
    weights = init_weights(NetworkLayout(spec.n_features, (102, 61, 44)), sorted(stats), 3, stats)
    force_rel = 0.0
    h = 1e-4
    for conf in confs:
        p = predict(conf, weights, spec)
        fd = np.empty_like(p.forces)
        for a in range(conf.n_atoms):
            for x in range(3):
                plus, minus = conf.positions.copy(), conf.positions.copy()
                plus[a, x] += h
                minus[a, x] -= h
                fd[a, x] = -(predict(conf.copy(positions=plus), weights, spec).energy
                             - predict(conf.copy(positions=minus), weights, spec).energy) / (2 * h)
        force_rel = max(force_rel, float(np.max(np.abs(fd - p.forces)) / np.max(np.abs(p.forces))))

    tiny = DescriptorSpec.from_grid(5.0, ("unity", "m"), (0.1,), ("unity",), (0.05,), (-1.0, 1.0), (1.0,))
    pair = [random_conformation(rng, 3, numbers=(1, 6), labels=True, box=2.5) for _ in range(2)]
    pair[0].numbers[:] = [1, 6, 6]
    pair[1].numbers[:] = [6, 1, 1]
    tb = [compute_block(c, tiny) for c in pair]
    tstats = descriptor_stats([b.values for b in tb], [c.numbers for c in pair])
    tw = init_weights(NetworkLayout(tiny.n_features, (3, 2)), sorted(tstats), 0, tstats)
    tw.params += 0.05 * np.random.default_rng(1).normal(size=len(tw))
    _, grad = loss_weight_gradient(pair, tw, tiny, 10.9)
    hw = 1e-6
    fdg = np.empty(len(tw))
    for k in range(len(tw)):
        wp, wm = tw.copy(), tw.copy()
        wp.params[k] += hw
        wm.params[k] -= hw
        fdg[k] = (loss(pair, wp, tiny, 10.9).total - loss(pair, wm, tiny, 10.9).total) / (2 * hw)
    grad_rel = float(np.max(np.abs(fdg - grad)) / np.max(np.abs(grad)))
    elapsed = time.perf_counter() - t0
    ok = force_rel < 1e-5 and grad_rel < 1e-5 and elapsed < 60.0
    criterion(3, ok, f"forces vs FD {force_rel:.1e} (153-102-61-44), loss gradient vs FD over "
              f"{len(tw)} weights {grad_rel:.1e}, {elapsed:.1f} s")


def test_criterion_4_optimizer_special_cases(criterion):
    w0 = np.array([0.3, -0.2, 1.0, 0.0, 0.5])
    adam = max(float(np.max(np.abs(a - b)))
               for a, b in zip(reference_adam(w0.copy(), 100), run_core(adam_preset(), w0, 100)))
    rprop = max(float(np.max(np.abs(a - b)))
                for a, b in zip(reference_rprop(w0.copy(), 100), run_core(rprop_preset(), w0, 100)))
    ok = adam <= 1e-12 and rprop <= 1e-12
    criterion(4, ok, f"max deviation over 100 steps: Adam {adam:.1e}, RPROP {rprop:.1e}")


def test_criterion_5_selection_traces(criterion):
    cfg = SelectionConfig()
    checks = {}
    p = bad_probabilities(np.array([2.0, 1.0, np.nan]), np.array([1.0, 1.0, 2.0]))
    checks["P_bad"] = bool(np.allclose(p, [2 / 7, 1 / 7, 4 / 7], rtol=0, atol=1e-15))

    state = SelectionState.fresh(2)
    trace = []
    for _ in range(cfg.n_x):
        update_selection(state, [0, 1], [100.0, 1.0], 1.0, cfg)
        trace.append(int(state.strikes[0]))
    checks["strikes"] = (trace[:-1] == [1, 2, 3, 4] and state.s_hist[0] == 0.0
                         and state.reason[0] == INCONSISTENT and state.s_hist[1] > 0)

    band = []
    for prior in (0.3, 1.0, 7.0):
        s = SelectionState.fresh(1)
        s.s_hist[0], s.l_old[0] = prior, 0.5
        update_selection(s, [0], [1.1], 1.0, cfg)
        band.append(s.s_hist[0])
    checks["reset band"] = band == [1.0, 1.0, 1.0]

    s = SelectionState.fresh(1)
    s.l_old[0] = 0.5
    for _ in range(cfg.n_f_minus2):
        update_selection(s, [0], [0.5], 1.0, cfg)
    at_bound = s.s_hist[0] == pytest.approx(cfg.s_min, rel=1e-13) and s.reason[0] == 0
    update_selection(s, [0], [0.5], 1.0, cfg)
    checks["F-- boundary"] = at_bound and s.s_hist[0] == 0.0 and s.reason[0] == REDUNDANT
    checks["F++"] = derive_factors(cfg).f_plus2 == 100.0 ** (1 / 150)
    criterion(5, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))


# --------------------------------------------------------------------------
# 6: checkpoint completeness
# --------------------------------------------------------------------------

def test_criterion_6_resume_bitwise(criterion, toy, single_thread, tmp_path):
    data = toy["data"]
    whole = TrainingRun.initialize(toy_config(11), data)
    whole.run(TrainPlan(200))
    part = TrainingRun.initialize(toy_config(11), data)
    part.run(TrainPlan(100))
    save_checkpoint(part, tmp_path / "half.lmlp")
    cont = load_checkpoint(tmp_path / "half.lmlp")
    cont.run(TrainPlan(100))
    (aw, mw), (ac, mc) = whole.to_bundle(), cont.to_bundle()
    diff = [k for k in aw if not np.array_equal(aw[k], ac[k], equal_nan=True)]
    if mw != mc:
        diff.append("metadata")
    save_checkpoint(whole, tmp_path / "whole.lmlp")
    save_checkpoint(cont, tmp_path / "cont.lmlp")
    same_file = (tmp_path / "whole.lmlp").read_bytes() == (tmp_path / "cont.lmlp").read_bytes()
    criterion(6, not diff and same_file,
              f"100+100 vs 200 epochs: {len(aw)} arrays compared, differing: {diff or 'none'}, "
              f"checkpoint files {'identical' if same_file else 'differ'}")


# --------------------------------------------------------------------------
# 7-11: toy training
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    data = generate(SYSTEM, 500, seed=1)
    validation = generate(SYSTEM, 200, seed=2)
    ref = offsets_for(SYSTEM)
    return dict(data=data, validation=validation, ref=ref,
                e_std=energy_std_per_atom(data, ref))


def _validation_rmse(weights, toy):
    cache = FeatureCache(toy["validation"], TOY_SPEC, toy["ref"])
    return rmse(cache, np.arange(len(toy["validation"])), weights)[0]


@pytest.fixture(scope="module")
def ensemble_runs(toy, single_thread):
    """Four members trained for the toy epoch budget; member 0 keeps its run for continuation."""
    out = dict(members=[], seconds=[], test_rmse=[], active=[])
    for k in range(4):
        t0 = time.perf_counter()
        run = TrainingRun.initialize(toy_config(k), toy["data"])
        run.run(TrainPlan(TOY_EPOCHS))
        out["seconds"].append(time.perf_counter() - t0)
        out["test_rmse"].append(run.floors[0])
        out["active"].append(run.selection.n_active())
        out["members"].append(member_from_run(run))
        if k == 0:
            out["run0"] = run
    return out


def test_criterion_7_toy_training(criterion, toy, ensemble_runs):
    target = 0.02 * toy["e_std"] * 1000.0
    single, seconds = ensemble_runs["test_rmse"][0], ensemble_runs["seconds"][0]
    members = ensemble_runs["members"]
    individual = [_validation_rmse(m.weights, toy) for m in members]
    ens = from_members(members, c=2.0)
    errors = [(predict_with_uncertainty(c, ens).energy - c.energy) / c.n_atoms for c in toy["validation"]]
    ens_rmse = 1000.0 * float(np.sqrt(np.mean(np.square(errors))))
    ok = single < target and seconds < 600.0 and ens_rmse < float(np.mean(individual))
    criterion(7, ok, f"single model test RMSE {single:.2f} meV/atom vs target {target:.2f} "
              f"(2% of E_std {1000 * toy['e_std']:.1f}), {seconds:.0f} s for {TOY_EPOCHS} epochs; "
              f"validation RMSE ensemble {ens_rmse:.2f} vs mean individual {np.mean(individual):.2f}")


def test_criterion_11_uncertainty_calibration(criterion, toy, ensemble_runs):
    ens = from_members(ensemble_runs["members"], c=2.0)
    report = calibration_report(ens, toy["validation"])
    low_cov, low_n = report.energy_coverage[0], report.energy_counts[0]
    ok = low_n > 0 and low_cov >= 0.95
    criterion(11, ok, f"c=2, 4 members: {100 * low_cov:.1f}% of {low_n} low-uncertainty validation "
              f"frames (dE <= {report.energy_edges[1]:g} meV/atom) covered; "
              f"high-uncertainty bucket {report.energy_counts[1]} frames")


OUTLIER_EPOCHS = 300


def _corrupt(confs, n_bad, rng):
    """Shift the energy by 2 eV/atom and add 3 eV/A force noise on ``n_bad`` frames."""
    out = list(confs)
    bad = rng.choice(len(confs), size=n_bad, replace=False)
    for i in bad:
        c = out[i]
        out[i] = c.copy(energy=c.energy + 2.0 * c.n_atoms,
                        forces=c.forces + rng.normal(scale=3.0, size=c.forces.shape))
    return out, {out[i].conf_id for i in bad}


def test_criterion_9_data_selection(criterion, toy, ensemble_runs, single_thread):
    extra = 500
    run = ensemble_runs["run0"]
    n_initial = len(run.train)
    run.run(TrainPlan(extra))
    adaptive = run.final_rmse()[0]
    fraction = run.selection.n_active() / n_initial
    control = TrainingRun.initialize(toy_config(0, selection_mode="random"), toy["data"])
    control.run(TrainPlan(TOY_EPOCHS + extra))
    random_rmse = control.final_rmse()[0]

    caught, false_hits = [], 0
    for seed in range(10):
        rng = np.random.default_rng(900 + seed)
        data, bad_ids = _corrupt(toy["data"][:200], 2, rng)
        r = TrainingRun.initialize(toy_config(seed, hidden=(25, 25)), data)
        r.run(TrainPlan(OUTLIER_EPOCHS))
        in_train = [k for k, c in enumerate(r.train) if c.conf_id in bad_ids]
        caught.append(all(r.selection.reason[k] == INCONSISTENT for k in in_train))
        false_hits += r.selection.n_excluded(INCONSISTENT) - len(in_train)
    ok = fraction < 0.6 and adaptive <= 1.1 * random_rmse and sum(caught) >= 9
    criterion(9, ok, f"active set {100 * fraction:.1f}% of {n_initial} after {TOY_EPOCHS + extra} epochs; "
              f"test RMSE adaptive {adaptive:.2f} vs random control {random_rmse:.2f} meV/atom; "
              f"outliers excluded as inconsistent in {sum(caught)}/10 seeds "
              f"({false_hits} clean frames excluded as inconsistent)")


def test_criterion_10_late_injection(criterion, toy, ensemble_runs, single_thread):
    data = toy["data"]
    half = len(data) // 2
    run = TrainingRun.initialize(toy_config(0), data[:half])
    run.run(TrainPlan(TOY_EPOCHS, injections=[Injection(TOY_EPOCHS // 2, data[half:])]))
    injected = _validation_rmse(run.weights, toy)
    baseline = _validation_rmse(ensemble_runs["members"][0].weights, toy)
    ok = injected <= 1.25 * baseline
    criterion(10, ok, f"validation RMSE with 50% injected at epoch {TOY_EPOCHS // 2}: {injected:.2f} "
              f"vs all data from the start {baseline:.2f} meV/atom (ratio {injected / baseline:.2f})")


# --------------------------------------------------------------------------
# 8: optimizer ordering
# --------------------------------------------------------------------------

BENCH_EPOCHS = 500
BENCH_HIDDEN = (25, 25)
BENCH_FIT = 0.1


def test_criterion_8_optimizer_ordering(criterion, toy, single_thread):
    data = toy["data"]
    final = {}
    for name in ("core", "adam", "rprop", "sgd"):
        values = []
        for seed in range(10):
            cfg = toy_config(seed, hidden=BENCH_HIDDEN, fit_fraction=BENCH_FIT, optimizer=preset(name))
            run = TrainingRun.initialize(cfg, data)
            try:
                run.run(TrainPlan(BENCH_EPOCHS))
                values.append(run.logs[-1].rmse_e_test)
            except NumericFailure:
                values.append(np.inf)
        final[name] = np.array(values)
    core_le_adam = int(np.sum(final["core"] <= final["adam"]))
    others = np.max([final[k] for k in ("core", "adam", "rprop")], axis=0)
    sgd_worst = int(np.sum(final["sgd"] > others))
    ok = core_le_adam >= 8 and sgd_worst >= 8
    medians = ", ".join(f"{k} {np.median(v):.1f}" for k, v in final.items())
    diverged = {k: int(np.sum(~np.isfinite(v))) for k, v in final.items() if not np.all(np.isfinite(v))}
    criterion(8, ok, f"CoRe <= Adam in {core_le_adam}/10 seeds, SGD worst in {sgd_worst}/10; "
              f"median final test RMSE {medians} meV/atom; diverged runs {diverged or 'none'}")
