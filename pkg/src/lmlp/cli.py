"""Command-line entry point ``lmlp``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
All tabular output is CSV; ``--figures`` additionally renders PNG figures
next to the CSV files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .descriptors import compute_block
from .elements import UnsupportedElementError, symbol
from .ensemble import (ManifestError, calibration_report, load_manifest,
                       predict_with_uncertainty, write_manifest)
from .optimizer import OptimizerConfigError, preset
from .potential import MissingLabelError
from .selection import AllDataExcludedError
from .storage import (DataError, load_checkpoint, load_config, max_force_filter,
                      parse_dataset, save_checkpoint, write_dataset)
from .synth import SystemSpec, generate, offsets_for
from .trainer import (EpochLog, IncompatibleDataError, Injection, NumericFailure,
                      TrainingRun, TrainPlan)

log = logging.getLogger("lmlp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OPTIMIZERS = ("core", "adam", "rprop", "sgd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_logs(path, logs) -> Path:
    return _write_csv(path, EpochLog.FIELDS, ([_fmt(v) for v in e.as_row()] for e in logs))


def _load_data(paths, require_energy=True, max_force=None):
    confs = []
    for p in paths:
        confs.extend(parse_dataset(p, require_energy=require_energy))
    if not confs:
        raise DataError(f"no frames in {', '.join(map(str, paths))}")
    if max_force is not None:
        confs, removed = max_force_filter(confs, max_force)
        if removed:
            log.info("removed %d frame(s) with |F| > %g eV/A", removed, max_force)
        if not confs:
            raise DataError("every frame exceeds the force threshold")
    return confs


def _late_data(specs, max_force):
    """``PATH@EPOCH`` arguments into injections."""
    out = []
    for spec in specs or ():
        path, sep, epoch = spec.rpartition("@")
        if not sep or not epoch.isdigit():
            raise UsageError(f"--late expects PATH@EPOCH, got {spec!r}")
        out.append(Injection(int(epoch), _load_data([path], max_force=max_force)))
    return sorted(out, key=lambda inj: inj.epoch)


def _figures(args, fn, *fargs, **kw):
    if getattr(args, "figures", False):
        from . import plotting
        path = getattr(plotting, fn)(*fargs, **kw)
        log.info("wrote %s", path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    settings = load_config(args.config)
    cfg = settings.train
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    epochs = args.epochs if args.epochs is not None else settings.epochs
    data = _load_data(args.data, max_force=settings.max_force)
    late = _late_data(args.late, settings.max_force)
    members = args.members or settings.ensemble_members
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    for k in range(members):
        member_cfg = cfg.replace(seed=cfg.seed + k)
        ckpt = out / f"member{k}.lmlp"
        plan = TrainPlan(epochs, late, settings.checkpoint_every, str(ckpt))
        run = TrainingRun.initialize(member_cfg, data)
        run.run(plan, save=lambda r, p=ckpt: save_checkpoint(r, p))
        save_checkpoint(run, ckpt)
        csv_path = _write_logs(out / f"member{k}_log.csv", run.logs)
        checkpoints.append(ckpt)
        e, f = run.floors
        print(f"member {k}: seed {member_cfg.seed}, {run.epoch} epochs, test RMSE "
              f"{e:.3f} meV/atom, {f:.2f} meV/A -> {ckpt}")
        _figures(args, "convergence", run.logs, csv_path.with_suffix(".png"), title=f"member {k}")
        _figures(args, "active_set", run.logs, out / f"member{k}_active.png")
    write_manifest(out / "ensemble.ini", checkpoints, c=settings.ensemble_c)
    print(f"ensemble manifest -> {out / 'ensemble.ini'}")
    return EXIT_OK


def cmd_resume(args) -> int:
    run = load_checkpoint(args.checkpoint)
    new = _load_data(args.data) if args.data else []
    start = len(run.logs)
    if new:
        run.inject(new)
    out = Path(args.out) if args.out else Path(args.checkpoint)
    plan = TrainPlan(args.epochs, (), args.checkpoint_every, str(out))
    run.run(plan, save=lambda r: save_checkpoint(r, out))
    save_checkpoint(run, out)
    csv_path = _write_logs(out.with_name(out.stem + "_log.csv"), run.logs)
    e, f = run.floors
    print(f"resumed {len(run.logs) - start} epochs to epoch {run.epoch}; test RMSE "
          f"{e:.3f} meV/atom, {f:.2f} meV/A -> {out}")
    _figures(args, "convergence", run.logs, csv_path.with_suffix(".png"))
    return EXIT_OK


def _predict_rows(ensemble, confs):
    frames, forces = [], []
    for k, c in enumerate(confs):
        p = predict_with_uncertainty(c, ensemble)
        frames.append((k, c.conf_id, c.n_atoms, p.energy, p.d_energy,
                       "" if c.energy is None else c.energy))
        for a in range(c.n_atoms):
            forces.append((k, a, symbol(int(c.numbers[a])), *p.forces[a], *p.d_forces[a]))
    return frames, forces


def cmd_predict(args) -> int:
    ensemble = load_manifest(args.ensemble)
    confs = _load_data([args.data], require_energy=False)
    frames, forces = _predict_rows(ensemble, confs)
    out = Path(args.out)
    _write_csv(out, ("frame", "conf_id", "n_atoms", "energy", "d_energy", "energy_ref"),
               ([_fmt(v) for v in r] for r in frames))
    fpath = Path(args.forces_out) if args.forces_out else out.with_name(out.stem + "_forces.csv")
    _write_csv(fpath, ("frame", "atom", "element", "fx", "fy", "fz", "dfx", "dfy", "dfz"),
               ([_fmt(v) for v in r] for r in forces))
    print(f"{len(frames)} frame(s) -> {out}, {fpath}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ensemble = load_manifest(args.ensemble)
    confs = _load_data([args.data])
    out = Path(args.out)
    frames, _ = _predict_rows(ensemble, confs)
    n = np.array([c.n_atoms for c in confs])
    e_err = 1000.0 * np.array([r[3] - c.energy for r, c in zip(frames, confs)]) / n
    e_unc = 1000.0 * np.array([r[4] for r in frames]) / n
    f_err = []
    for c in confs:
        p = predict_with_uncertainty(c, ensemble)
        f_err.append(1000.0 * (p.forces - c.forces).ravel())
    f_err = np.concatenate(f_err)
    rows = [("ensemble", "rmse_energy_meV_atom", repr(float(np.sqrt(np.mean(e_err ** 2))))),
            ("ensemble", "rmse_force_meV_A", repr(float(np.sqrt(np.mean(f_err ** 2)))))]
    report = calibration_report(ensemble, confs, args.energy_edges, args.force_edges)
    for kind, lo, hi, count, cov in report.rows():
        rows.append((f"{kind}[{lo:g},{hi:g}]", "count", str(count)))
        rows.append((f"{kind}[{lo:g},{hi:g}]", "coverage", repr(cov)))
    _write_csv(out, ("scope", "metric", "value"), rows)
    for r in rows:
        print(",".join(r))
    _figures(args, "uncertainty_vs_error", e_unc, e_err, out.with_name(out.stem + "_uncertainty.png"),
             threshold=args.energy_edges[1] if len(args.energy_edges) > 2 else None)
    return EXIT_OK


def scan_grid(template, ensemble, pair1, range1, pair2=None, range2=None):
    """Rigid scan: atom b (and d) moved along its bond axis; returns rows (r1, r2, E, dE)."""
    def axis(i, j):
        v = template.positions[j] - template.positions[i]
        length = np.linalg.norm(v)
        if i == j or length == 0.0:
            raise DataError(f"degenerate atom pair ({i}, {j})")
        return v / length

    n = template.n_atoms
    for i in (*pair1, *(pair2 or ())):
        if not 0 <= i < n:
            raise DataError(f"atom index {i} outside the template ({n} atoms)")
    for r in (range1, range2):
        if r is not None and (r[2] < 1 or (r[2] > 1 and r[0] == r[1])):
            raise DataError("scan range needs n >= 1 and distinct end points")
    if pair2 is not None and pair2[1] in pair1 or pair2 is not None and pair1[1] in pair2:
        raise DataError("the two scanned pairs must not share a moved atom")
    u1 = axis(*pair1)
    u2 = axis(*pair2) if pair2 is not None else None
    r1s = np.linspace(range1[0], range1[1], int(range1[2]))
    r2s = np.linspace(range2[0], range2[1], int(range2[2])) if pair2 is not None else [np.nan]
    rows = []
    for r1 in r1s:
        for r2 in r2s:
            pos = template.positions.copy()
            pos[pair1[1]] = pos[pair1[0]] + r1 * u1
            if pair2 is not None:
                pos[pair2[1]] = pos[pair2[0]] + r2 * u2
            p = predict_with_uncertainty(template.copy(positions=pos, energy=None, forces=None), ensemble)
            rows.append((float(r1), float(r2), p.energy, p.d_energy))
    return rows


def cmd_scan(args) -> int:
    ensemble = load_manifest(args.ensemble)
    frames = _load_data([args.template], require_energy=False)
    if not 0 <= args.frame < len(frames):
        raise DataError(f"template frame {args.frame} not in {args.template} ({len(frames)} frames)")
    pair2 = (args.atom_c, args.atom_d) if args.range2 else None
    if args.range2 and (args.atom_c is None or args.atom_d is None):
        raise UsageError("--range2 needs --atom-c and --atom-d")
    rows = scan_grid(frames[args.frame], ensemble, (args.atom_a, args.atom_b), args.range,
                     pair2, args.range2)
    e_min = min(r[2] for r in rows)
    out = Path(args.out)
    _write_csv(out, ("r1", "r2", "energy_rel", "d_energy", "energy"),
               ([_fmt(r[0]), _fmt(r[1]), _fmt(r[2] - e_min), _fmt(r[3]), _fmt(r[2])] for r in rows))
    print(f"{len(rows)} grid point(s) -> {out}")
    rows_arr = np.array(rows)
    _figures(args, "scan_surface", rows_arr[:, 0], rows_arr[:, 1] if pair2 else None,
             rows_arr[:, 2] - e_min, out.with_suffix(".png"),
             xlabel=f"r({args.atom_a},{args.atom_b}) / Å",
             ylabel=f"r({args.atom_c},{args.atom_d}) / Å",
             uncertainty=None if pair2 else rows_arr[:, 3])
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        system = SystemSpec.parse(args.system)
        confs = generate(system, args.n, args.seed, relax_steps=args.relax_steps,
                         noise=args.noise, topology=args.topology)
    except (ValueError, UnsupportedElementError) as exc:
        raise DataError(str(exc)) from None
    write_dataset(args.out, confs)
    print(f"{len(confs)} frame(s) -> {args.out}")
    if args.config_out:
        lines = ["[reference_energies]"]
        lines += [f"{symbol(z)} = {e!r}" for z, e in sorted(offsets_for(system).items())]
        Path(args.config_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"reference energies -> {args.config_out}")
    return EXIT_OK


def bench_optimizers(cfg, data, names, seeds, epochs):
    """Test RMSE(E) per (optimizer, seed, epoch); returns {name: array (seeds, epochs)}.

    A run that diverges keeps RMSE = inf from the failing epoch on.
    """
    curves = {}
    for name in names:
        opt = cfg.optimizer if name == "core" else preset(name)
        values = np.full((len(seeds), epochs), np.inf)
        for s, seed in enumerate(seeds):
            run = TrainingRun.initialize(cfg.replace(optimizer=opt, seed=seed, train_log_every=0), data)
            try:
                run.run(TrainPlan(epochs))
            except NumericFailure as exc:
                log.warning("%s, seed %d diverged: %s", name, seed, exc)
            logged = [e.rmse_e_test for e in run.logs]
            values[s, :len(logged)] = logged
        curves[name] = values
    return curves


def cmd_bench_opt(args) -> int:
    names = tuple(x.strip() for x in args.optimizers.split(",") if x.strip())
    unknown = [n for n in names if n not in OPTIMIZERS]
    if unknown or not names:
        raise UsageError(f"unknown optimizer tag(s) {unknown}; choose from {', '.join(OPTIMIZERS)}")
    settings = load_config(args.config)
    cfg = settings.train
    epochs = args.epochs if args.epochs is not None else settings.epochs
    data = _load_data(args.data, max_force=settings.max_force)
    base = cfg.seed if args.seed is None else args.seed
    seeds = [base + k for k in range(args.seeds)]
    curves = bench_optimizers(cfg, data, names, seeds, epochs)
    out = Path(args.out)
    _write_csv(out, ("optimizer", "seed", "final_rmse_e_test"),
               ((n, seed, _fmt(curves[n][s, -1])) for n in names for s, seed in enumerate(seeds)))
    per_epoch = out.with_name(out.stem + "_epochs.csv")
    _write_csv(per_epoch, ("epoch", *(f"{n}_seed{seed}" for n in names for seed in seeds)),
               ((ep + 1, *(_fmt(curves[n][s, ep]) for n in names for s in range(len(seeds))))
                for ep in range(epochs)))
    for n in names:
        fin = curves[n][:, -1]
        print(f"{n}: final test RMSE(E) median {np.median(fin):.3f} meV/atom "
              f"(min {fin.min():.3f}, max {fin.max():.3f})")
    epochs_axis = np.arange(1, epochs + 1)
    _figures(args, "optimizer_comparison", {n: (epochs_axis, curves[n]) for n in names},
             out.with_suffix(".png"))
    return EXIT_OK


LABEL_KEYS = ("kind", "channel", "gamma", "eta", "lam", "zeta")


def cmd_dump_desc(args) -> int:
    if args.config:
        spec = load_config(args.config).train.descriptor
    else:
        from .descriptors import DescriptorSpec
        spec = DescriptorSpec.standard()
    confs = _load_data([args.data], require_energy=False)
    frames = range(len(confs)) if args.frame is None else [args.frame]
    labels = spec.labels()
    rows = []
    for k in frames:
        if not 0 <= k < len(confs):
            raise DataError(f"frame {k} not in {args.data} ({len(confs)} frames)")
        values = compute_block(confs[k], spec, with_derivatives=False).values
        for a in range(confs[k].n_atoms):
            el = symbol(int(confs[k].numbers[a]))
            rows.extend((k, a, el, j, *(_fmt(labels[j][key]) for key in LABEL_KEYS), _fmt(values[a, j]))
                        for j in range(spec.n_features))
    _write_csv(args.out, ("frame", "atom", "element", "index", *LABEL_KEYS, "value"), rows)
    print(f"{spec.n_features} descriptors x {len(rows) // max(spec.n_features, 1)} atoms -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _range(text):
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected 'R0 R1 N'")
    try:
        return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}") from None


def _edges(text):
    try:
        vals = tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bucket edges {text!r}") from None
    if len(vals) < 2 or any(b <= a for a, b in zip(vals, vals[1:])):
        raise argparse.ArgumentTypeError("bucket edges must be increasing")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lmlp", description="Lifelong machine-learning potentials with eeACSF descriptors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (1 guarantees bitwise reproducibility)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, figures=False):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        if figures:
            sp.add_argument("--figures", action="store_true", help="also write PNG figures next to the CSVs")
        return sp

    sp = add("train", cmd_train, "train one model or an ensemble", figures=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True, nargs="+")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--members", type=int, help="override [ensemble] members")
    sp.add_argument("--late", action="append", metavar="PATH@EPOCH",
                    help="inject a dataset after the given epoch (repeatable)")

    sp = add("resume", cmd_resume, "continue training from a checkpoint", figures=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--epochs", type=int, required=True)
    sp.add_argument("--data", nargs="+", help="new data joining before the first epoch")
    sp.add_argument("--out", help="checkpoint to write (default: overwrite input)")
    sp.add_argument("--checkpoint-every", type=int, default=0)

    sp = add("predict", cmd_predict, "energies and forces with uncertainties")
    sp.add_argument("--ensemble", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--forces-out")

    sp = add("eval", cmd_eval, "RMSE and uncertainty calibration on labeled data", figures=True)
    sp.add_argument("--ensemble", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--energy-edges", type=_edges, default=(0.0, 10.0, np.inf),
                    help="energy uncertainty buckets in meV/atom")
    sp.add_argument("--force-edges", type=_edges, default=(0.0, 250.0, np.inf),
                    help="force uncertainty buckets in meV/A")

    sp = add("scan", cmd_scan, "energy along one or two interatomic distances", figures=True)
    sp.add_argument("--ensemble", required=True)
    sp.add_argument("--template", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--atom-a", type=int, required=True)
    sp.add_argument("--atom-b", type=int, required=True)
    sp.add_argument("--range", type=_range, required=True, metavar="'R0 R1 N'")
    sp.add_argument("--atom-c", type=int)
    sp.add_argument("--atom-d", type=int)
    sp.add_argument("--range2", type=_range, metavar="'R0 R1 N'")
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "generate a labeled toy dataset")
    sp.add_argument("--system", required=True, help="e.g. 'C,H,Cl:5' or 'H,C,N:3-8'")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--topology", choices=("star", "random"), default="star")
    sp.add_argument("--relax-steps", type=int, default=200)
    sp.add_argument("--noise", type=float, default=0.06)
    sp.add_argument("--config-out", help="write a [reference_energies] section for the system")

    sp = add("bench-opt", cmd_bench_opt, "compare optimizers on one task", figures=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True, nargs="+")
    sp.add_argument("--optimizers", default=",".join(OPTIMIZERS))
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)

    sp = add("dump-desc", cmd_dump_desc, "write descriptor values as CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--frame", type=int)
    sp.add_argument("--out", required=True)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:        # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("lmlp: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"lmlp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, FloatingPointError) as exc:
        print(f"lmlp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ManifestError, MissingLabelError, IncompatibleDataError,
            AllDataExcludedError, OptimizerConfigError, UnsupportedElementError,
            KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lmlp: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
