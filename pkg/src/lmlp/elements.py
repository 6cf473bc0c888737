"""Periodic-table element channels for element-embracing symmetry functions.

Every supported element (H through Xe) is described by its period ``n``,
its main-group number ``m`` (s- and p-block, 1 to 8) and its d-block group
number ``d`` (Sc=1 ... Zn=10), together with the complements

    n_bar = 6 - n,   m_bar = 9 - m (0 for d-block),   d_bar = 11 - d (0 for main group).
"""

from __future__ import annotations

from dataclasses import dataclass

MAX_Z = 54
MAX_PERIOD = 5
# X in n_bar = X - n
PERIOD_CEILING = MAX_PERIOD + 1

SYMBOLS = (
    "H", "He",
    "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
    "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr",
    "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe",
)

SYMBOL_TO_Z = {s: z for z, s in enumerate(SYMBOLS, start=1)}

CHANNELS = ("unity", "n", "m", "d", "n_bar", "m_bar", "d_bar")

# first atomic number of each period
_PERIOD_START = (1, 3, 11, 19, 37)


class UnsupportedElementError(ValueError):
    """Raised for atomic numbers or symbols outside H..Xe."""


class ChannelError(ValueError):
    """Raised for an unknown element-channel tag."""


@dataclass(frozen=True)
class ElementInfo:
    atomic_number: int
    symbol: str
    n: float
    m: float
    d: float
    n_bar: float
    m_bar: float
    d_bar: float

    def channel(self, name: str) -> float:
        if name == "unity":
            return 1.0
        if name not in CHANNELS:
            raise ChannelError(f"unknown element channel {name!r}")
        return getattr(self, name)


def _build(z: int) -> ElementInfo:
    period = max(p for p, start in enumerate(_PERIOD_START, start=1) if z >= start)
    pos = z - _PERIOD_START[period - 1]  # 0-based position within the period
    m = d = 0
    if period == 1:
        m = 1 if z == 1 else 8  # helium is placed in main group 8
    elif period <= 3:
        m = pos + 1
    else:
        if pos < 2:
            m = pos + 1
        elif pos < 12:
            d = pos - 1
        else:
            m = pos - 9
    m_bar = 9 - m if m > 0 else 0
    d_bar = 11 - d if d > 0 else 0
    return ElementInfo(
        atomic_number=z,
        symbol=SYMBOLS[z - 1],
        n=float(period),
        m=float(m),
        d=float(d),
        n_bar=float(PERIOD_CEILING - period),
        m_bar=float(m_bar),
        d_bar=float(d_bar),
    )


_TABLE = tuple(_build(z) for z in range(1, MAX_Z + 1))


def element_descriptors(atomic_number: int) -> ElementInfo:
    """Return the element channels of ``atomic_number`` (1 <= Z <= 54)."""
    z = int(atomic_number)
    if z != atomic_number or not 1 <= z <= MAX_Z:
        raise UnsupportedElementError(
            f"unsupported element Z={atomic_number} (supported: 1..{MAX_Z})")
    return _TABLE[z - 1]


def atomic_number(symbol: str) -> int:
    try:
        return SYMBOL_TO_Z[symbol]
    except KeyError:
        raise UnsupportedElementError(f"unsupported element symbol {symbol!r}") from None


def symbol(z: int) -> str:
    return element_descriptors(z).symbol


_CHANNEL_MAX = {c: max(info.channel(c) for info in _TABLE) for c in CHANNELS}


def channel_max(channel: str) -> float:
    """Maximum of ``channel`` over all supported elements."""
    try:
        return _CHANNEL_MAX[channel]
    except KeyError:
        raise ChannelError(f"unknown element channel {channel!r}") from None


def channel_values(channel: str, numbers) -> list[float]:
    """Channel values for a sequence of atomic numbers."""
    return [element_descriptors(z).channel(channel) for z in numbers]
