"""Dataset files, configuration files and the checkpoint container.

Datasets are extended-XYZ-like frames::

    3
    energy=-76.4 charge=0 multiplicity=1
    O   0.0  0.0  0.1   0.0  0.0 -0.3
    H   0.0  0.8 -0.5   0.0  0.1  0.15
    H   0.0 -0.8 -0.5   0.0 -0.1  0.15

Checkpoints are single files: ``b"LMLP"``, a little-endian uint32 format
version, a uint64 header length, a canonical JSON header (array table and
metadata), the raw little-endian array payload and a trailing CRC-32.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import shlex
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import elements
from .descriptors import AngularParam, DescriptorSpec, RadialParam
from .optimizer import CoreConfig, preset
from .selection import SelectionConfig
from .structure import Conformation

MAGIC = b"LMLP"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed dataset, configuration or checkpoint file."""


class CheckpointError(DataError):
    pass


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def _parse_comment(line: str) -> dict:
    info = {}
    for token in shlex.split(line):
        if "=" in token:
            key, value = token.split("=", 1)
            info[key.strip().lower()] = value.strip()
    return info


def _float(text: str, path, lineno: int) -> float:
    try:
        val = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot read number {text!r}") from None
    if not np.isfinite(val):
        raise DataError(f"{path}:{lineno}: non-finite value {text!r}")
    return val


def parse_dataset(path, require_energy: bool = True) -> list[Conformation]:
    """Read all frames; ids are ``<sha256 prefix of the file>:<frame index>``."""
    path = Path(path)
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()[:16]
    lines = raw.decode("utf-8").splitlines()
    confs = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        frame = len(confs)
        count_line = i + 1
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise DataError(f"{path}:{count_line}: frame {frame}: malformed atom count "
                            f"{lines[i].strip()!r}") from None
        if n < 1:
            raise DataError(f"{path}:{count_line}: frame {frame}: atom count must be positive")
        if i + 1 >= len(lines):
            raise DataError(f"{path}:{count_line}: frame {frame}: missing comment line")
        info = _parse_comment(lines[i + 1])
        atom_lines = lines[i + 2:i + 2 + n]
        if len(atom_lines) < n or any(not ln.strip() for ln in atom_lines):
            raise DataError(f"{path}:{count_line}: frame {frame}: expected {n} atom lines, "
                            f"found {sum(1 for ln in atom_lines if ln.strip())}")
        numbers, pos, frc = [], [], []
        for k, ln in enumerate(atom_lines):
            lineno = i + 3 + k
            cols = ln.split()
            if len(cols) not in (4, 7):
                raise DataError(f"{path}:{lineno}: frame {frame}: expected 4 or 7 columns, "
                                f"got {len(cols)}")
            try:
                numbers.append(elements.atomic_number(cols[0]))
            except elements.UnsupportedElementError as exc:
                raise DataError(f"{path}:{lineno}: frame {frame}: {exc}") from None
            pos.append([_float(c, path, lineno) for c in cols[1:4]])
            if len(cols) == 7:
                frc.append([_float(c, path, lineno) for c in cols[4:7]])
        if frc and len(frc) != n:
            raise DataError(f"{path}:{count_line}: frame {frame}: forces given for only some atoms")
        energy = None
        if "energy" in info:
            energy = _float(info.pop("energy"), path, i + 2)
        elif require_energy:
            raise DataError(f"{path}:{i + 2}: frame {frame}: missing mandatory energy=")
        confs.append(Conformation(numbers, pos, energy, frc if frc else None,
                                  conf_id=f"{digest}:{frame}", info=info))
        next_line = i + 2 + n
        if next_line < len(lines) and lines[next_line].strip() and \
                not lines[next_line].split()[0].lstrip("-").isdigit():
            raise DataError(f"{path}:{next_line + 1}: frame {frame}: atom count {n} disagrees "
                            f"with the number of atom lines")
        i = next_line
    return confs


def format_frame(conf: Conformation) -> str:
    head = []
    if conf.energy is not None:
        head.append(f"energy={conf.energy:.17g}")
    for key in sorted(conf.info):
        value = str(conf.info[key])
        head.append(f"{key}={shlex.quote(value)}")
    out = [str(conf.n_atoms), " ".join(head)]
    for k in range(conf.n_atoms):
        cols = [elements.symbol(int(conf.numbers[k]))] + [f"{x:.17g}" for x in conf.positions[k]]
        if conf.forces is not None:
            cols += [f"{x:.17g}" for x in conf.forces[k]]
        out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def write_dataset(path, confs) -> None:
    text = "".join(format_frame(c) for c in confs)
    _atomic_write(Path(path), text.encode("utf-8"))


def max_force_filter(confs, threshold: float) -> tuple[list[Conformation], int]:
    """Drop frames with any |force component| strictly above ``threshold``."""
    if threshold <= 0:
        raise ValueError("force threshold must be positive")
    kept = [c for c in confs if c.forces is None or np.max(np.abs(c.forces)) <= threshold]
    return kept, len(confs) - len(kept)


def pack_conformations(confs) -> tuple[dict, list[str]]:
    n = np.array([c.n_atoms for c in confs], dtype=np.int64)
    total = int(n.sum())
    arrays = {
        "n_atoms": n,
        "numbers": np.concatenate([c.numbers for c in confs]) if confs else np.zeros(0, np.int64),
        "positions": np.concatenate([c.positions for c in confs]) if confs else np.zeros((0, 3)),
        "energy": np.array([np.nan if c.energy is None else c.energy for c in confs], dtype=np.float64),
        "forces": np.concatenate([c.forces if c.forces is not None else np.full((c.n_atoms, 3), np.nan)
                                  for c in confs]) if confs else np.zeros((0, 3)),
    }
    assert arrays["positions"].shape == (total, 3)
    return arrays, [c.conf_id for c in confs]


def unpack_conformations(arrays: dict, ids) -> list[Conformation]:
    out = []
    start = 0
    for k, n in enumerate(arrays["n_atoms"]):
        sl = slice(start, start + int(n))
        forces = arrays["forces"][sl].copy()
        energy = float(arrays["energy"][k])
        out.append(Conformation(arrays["numbers"][sl].copy(), arrays["positions"][sl].copy(),
                                None if np.isnan(energy) else energy,
                                None if np.isnan(forces).all() else forces, conf_id=ids[k]))
        start += int(n)
    return out


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class Settings:
    """Everything a configuration file can set."""

    train: "object"
    epochs: int = 100
    checkpoint_every: int = 0
    max_force: float | None = None
    ensemble_c: float = 2.0
    ensemble_members: int = 1
    source: str = ""
    extra: dict = field(default_factory=dict)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.replace(",", " ").split())


def _typed(cls, values: dict, where: str):
    """Convert string ``values`` to the field types of dataclass ``cls``."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, text in values.items():
        if key not in types:
            raise DataError(f"{where}: unknown key {key!r}")
        t = str(types[key])
        try:
            if "int" in t and "float" not in t:
                out[key] = int(text)
            elif "float" in t:
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError:
            raise DataError(f"{where}: bad value {text!r} for {key}") from None
    return out


def descriptor_from_section(sec: dict, where: str) -> DescriptorSpec:
    kind = sec.pop("preset", "standard")
    if kind == "standard" and set(sec) <= {"cutoff"}:
        try:
            return DescriptorSpec.standard(float(sec.pop("cutoff", "12.0")))
        except ValueError as exc:
            raise DataError(f"{where}: {exc}") from None
    try:
        base = DescriptorSpec.standard() if kind == "standard" else None
        cutoff = float(sec.pop("cutoff", base.cutoff if base else 12.0))
        mode = sec.pop("mode", "eeacsf")
        elems = tuple(elements.atomic_number(s) for s in _words(sec.pop("elements", "")))
        from .descriptors import (STANDARD_ANGULAR_ETA, STANDARD_CHANNELS, STANDARD_LAMBDA,
                                  STANDARD_RADIAL_ETA, STANDARD_ZETA)
        spec = DescriptorSpec.from_grid(
            cutoff,
            _words(sec.pop("radial_channels", " ".join(STANDARD_CHANNELS))),
            _floats(sec.pop("radial_eta", " ".join(map(str, STANDARD_RADIAL_ETA)))),
            _words(sec.pop("angular_channels", " ".join(STANDARD_CHANNELS))),
            _floats(sec.pop("angular_eta", " ".join(map(str, STANDARD_ANGULAR_ETA)))),
            _floats(sec.pop("lambdas", " ".join(map(str, STANDARD_LAMBDA)))),
            _floats(sec.pop("zetas", " ".join(map(str, STANDARD_ZETA)))),
            mode=mode, elements=elems)
    except (ValueError, elements.ChannelError) as exc:
        raise DataError(f"{where}: {exc}") from None
    if sec:
        raise DataError(f"{where}: unknown key(s) {sorted(sec)}")
    return spec


def load_config(path) -> Settings:
    """Parse a key=value configuration file with sections."""
    from .trainer import TrainConfig
    path = str(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise DataError(f"{path}: {exc}") from None
    known = {"descriptors", "network", "optimizer", "selection", "trainer",
             "ensemble", "reference_energies"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise DataError(f"{path}: unknown section(s) {sorted(unknown)}")
    sec = {name: dict(parser[name]) if parser.has_section(name) else {} for name in known}

    descriptor = descriptor_from_section(sec["descriptors"], f"{path} [descriptors]")

    net = sec["network"]
    try:
        hidden = tuple(int(x) for x in _floats(net.pop("hidden", "102 61 44")))
    except ValueError:
        raise DataError(f"{path} [network]: hidden must list integers") from None
    if net:
        raise DataError(f"{path} [network]: unknown key(s) {sorted(net)}")

    opt = sec["optimizer"]
    name = opt.pop("preset", "core")
    try:
        base = preset(name)
        optimizer = base.with_changes(**_typed(CoreConfig, opt, f"{path} [optimizer]"))
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(f"{path} [optimizer]: {exc}") from None

    sel = sec["selection"]
    mode = sel.pop("mode", "adaptive")
    roots = {k: float(sel.pop(k)) for k in list(sel) if k.startswith("sqrt_t_")}
    try:
        selection = SelectionConfig.from_roots(**roots, **_typed(SelectionConfig, sel, f"{path} [selection]"))
    except DataError:
        raise
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path} [selection]: {exc}") from None

    ref = {}
    for sym, val in sec["reference_energies"].items():
        try:
            ref[elements.atomic_number(sym)] = float(val)
        except (ValueError, elements.UnsupportedElementError) as exc:
            raise DataError(f"{path} [reference_energies]: {sym}: {exc}") from None

    tr = sec["trainer"]
    where = f"{path} [trainer]"
    try:
        epochs = int(tr.pop("epochs", "100"))
        checkpoint_every = int(tr.pop("checkpoint_every", "0"))
        max_force = tr.pop("max_force", None)
        max_force = float(max_force) if max_force is not None else None
        kw = _typed(TrainConfig, tr, where)
        train = TrainConfig(descriptor=descriptor, hidden=hidden, optimizer=optimizer,
                            selection=selection, selection_mode=mode, ref_energies=ref, **kw)
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None

    ens = sec["ensemble"]
    try:
        c = float(ens.pop("c", "2.0"))
        members = int(ens.pop("members", "1"))
    except ValueError as exc:
        raise DataError(f"{path} [ensemble]: {exc}") from None
    if ens:
        raise DataError(f"{path} [ensemble]: unknown key(s) {sorted(ens)}")
    return Settings(train, epochs, checkpoint_every, max_force, c, members, path)


def spec_to_dict(spec: DescriptorSpec) -> dict:
    return {
        "cutoff": spec.cutoff,
        "mode": spec.mode,
        "elements": list(spec.elements),
        "radial": [[p.channel, p.eta] for p in spec.radial],
        "angular": [[p.channel, p.gamma, p.eta, p.lam, p.zeta] for p in spec.angular],
    }


def spec_from_dict(d: dict) -> DescriptorSpec:
    return DescriptorSpec(d["cutoff"], tuple(RadialParam(c, e) for c, e in d["radial"]),
                          tuple(AngularParam(*row) for row in d["angular"]),
                          d["mode"], tuple(d["elements"]))


def config_to_dict(cfg) -> dict:
    return {
        "descriptor": spec_to_dict(cfg.descriptor),
        "hidden": list(cfg.hidden),
        "optimizer": dataclasses.asdict(cfg.optimizer),
        "selection": dataclasses.asdict(cfg.selection),
        "selection_mode": cfg.selection_mode,
        "q": cfg.q,
        "fit_fraction": cfg.fit_fraction,
        "test_fraction": cfg.test_fraction,
        "ref_energies": {str(k): v for k, v in sorted(cfg.ref_energies.items())},
        "test_subset": cfg.test_subset,
        "train_log_every": cfg.train_log_every,
        "seed": cfg.seed,
    }


def config_from_dict(d: dict):
    from .trainer import TrainConfig
    return TrainConfig(
        descriptor=spec_from_dict(d["descriptor"]),
        hidden=tuple(d["hidden"]),
        optimizer=CoreConfig(**d["optimizer"]),
        selection=SelectionConfig(**d["selection"]),
        selection_mode=d["selection_mode"],
        q=d["q"],
        fit_fraction=d["fit_fraction"],
        test_fraction=d["test_fraction"],
        ref_energies={int(k): v for k, v in d["ref_energies"].items()},
        test_subset=d["test_subset"],
        train_log_every=d["train_log_every"],
        seed=d["seed"],
    )


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(arrays: dict, meta: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        kind = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        table.append({"name": name, "dtype": kind, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"arrays": table, "meta": meta}, sort_keys=True,
                        separators=(",", ":"), allow_nan=False).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_container(data: bytes, source: str = "checkpoint") -> tuple[dict, dict]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError(f"{source}: truncated checkpoint")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} "
                              f"(expected {FORMAT_VERSION})")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if 16 + header_len > len(body):
        raise CheckpointError(f"{source}: truncated checkpoint")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(body[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from None
    payload = body[16 + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if entry["nbytes"] != expected or hi > len(payload):
            raise CheckpointError(f"{source}: array {entry['name']!r} has inconsistent size")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return arrays, header["meta"]


def save_checkpoint(run_or_bundle, path) -> None:
    """Write a training run (or an ``(arrays, meta)`` pair) atomically."""
    bundle = run_or_bundle.to_bundle() if hasattr(run_or_bundle, "to_bundle") else run_or_bundle
    _atomic_write(Path(path), encode_container(*bundle))


def read_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return decode_container(data, str(path))


def load_checkpoint(path):
    """Restore a :class:`~lmlp.trainer.TrainingRun`."""
    from .trainer import TrainingRun
    arrays, meta = read_checkpoint(path)
    try:
        return TrainingRun.from_bundle(arrays, meta)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint content: {exc}") from None
