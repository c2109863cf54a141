"""Bell-state labels and Werner-state fidelity arithmetic.

A Bell state is labelled by two bits (x, z).  The fixed repo-wide mapping is

    Phi+ <-> (0, 0)    Psi+ <-> (1, 0)
    Phi- <-> (0, 1)    Psi- <-> (1, 1)

The labels form a group under bitwise XOR with Phi+ as identity, which is
what turns swap-outcome bookkeeping into a pure XOR fold: no node ever
needs to know the intermediate pair states.

Fidelities are stored as scalars under the isotropic (Werner) noise
assumption.  The Werner parameter w = (4F - 1) / 3 is the convenient
reparameterization: swaps multiply w, memory decay shrinks w
exponentially, and both commute, so swap order never matters.
"""

from __future__ import annotations

import math
from enum import IntEnum

#: Pairs with fidelity at or below this value are no longer usable.
USABLE_FIDELITY = 0.5

#: Fidelity of the maximally mixed two-qubit state (w = 0 fixed point).
MIXED_FIDELITY = 0.25


class BellIndex(IntEnum):
    """Two-bit Pauli-frame label of a Bell state: bit 0 is x, bit 1 is z."""

    PHI_PLUS = 0b00
    PSI_PLUS = 0b01
    PHI_MINUS = 0b10
    PSI_MINUS = 0b11

    @property
    def x_bit(self) -> int:
        return int(self) & 1

    @property
    def z_bit(self) -> int:
        return (int(self) >> 1) & 1

    def __xor__(self, other: "BellIndex") -> "BellIndex":  # type: ignore[override]
        return BellIndex(int(self) ^ int(other))

    __rxor__ = __xor__

    def __str__(self) -> str:
        return _BELL_NAMES[int(self)]

    @classmethod
    def from_name(cls, name: str) -> "BellIndex":
        try:
            return _BELL_BY_NAME[name.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown Bell state name: {name!r}") from None


_BELL_NAMES = {0: "phi+", 1: "psi+", 2: "phi-", 3: "psi-"}
_BELL_BY_NAME = {name: BellIndex(value) for value, name in _BELL_NAMES.items()}

BELL_STATES = tuple(BellIndex)

#: Pauli label applied to one qubit to realize a given label difference.
_PAULI_BY_DIFF = {0b00: "I", 0b01: "X", 0b10: "Z", 0b11: "XZ"}

#: Measurement bases supported for pair-end readout.
BASES = ("X", "Y", "Z")


def combine_bell(a: BellIndex, b: BellIndex, outcome: BellIndex) -> BellIndex:
    """Bell state of the long pair created by swapping pairs ``a`` and ``b``.

    ``outcome`` is the two-bit result announced by the swapping node.  The
    rule is a plain XOR of all three labels, hence associative and
    commutative in every argument.
    """
    return BellIndex(int(a) ^ int(b) ^ int(outcome))


def pauli_correction_for(current: BellIndex, target: BellIndex) -> str:
    """Single-qubit Pauli label (I/X/Z/XZ) mapping ``current`` to ``target``.

    Applying the returned operator to either qubit of a pair in state
    ``current`` leaves the pair in state ``target``.
    """
    return _PAULI_BY_DIFF[int(current) ^ int(target)]


def werner_from_fidelity(fidelity: float) -> float:
    _check_fidelity(fidelity)
    return (4.0 * fidelity - 1.0) / 3.0


def fidelity_from_werner(w: float) -> float:
    if not -1.0 / 3.0 - 1e-12 <= w <= 1.0 + 1e-12:
        raise ValueError(f"Werner parameter out of range: {w}")
    return (1.0 + 3.0 * w) / 4.0


def swap_fidelity(f1: float, f2: float) -> float:
    """Fidelity of the pair obtained by swapping two pairs of fidelity f1, f2.

    Equals F1*F2 + (1 - F1)(1 - F2)/3, i.e. the product of the Werner
    parameters.  A perfect pair (F = 1) is neutral, the maximally mixed
    pair (F = 0.25, w = 0) is absorbing.
    """
    _check_fidelity(f1)
    _check_fidelity(f2)
    return f1 * f2 + (1.0 - f1) * (1.0 - f2) / 3.0


def decay_fidelity(f0: float, dt: float, t_mem: float) -> float:
    """Fidelity after storing a pair end for ``dt`` seconds.

    Isotropic depolarization: the Werner parameter shrinks by
    exp(-dt / t_mem), so fidelity decays monotonically toward 0.25.
    """
    _check_fidelity(f0)
    if dt < 0:
        raise ValueError(f"negative storage time: {dt}")
    if t_mem <= 0:
        raise ValueError(f"memory constant must be positive: {t_mem}")
    w = werner_from_fidelity(f0) * math.exp(-dt / t_mem)
    return fidelity_from_werner(w)


def measurement_error_rate(fidelity: float) -> float:
    """Same-basis QBER of a Werner pair: 2(1 - F)/3 in any Pauli basis."""
    _check_fidelity(fidelity)
    return 2.0 * (1.0 - fidelity) / 3.0


def ideal_anticorrelation(state: BellIndex, basis: str) -> int:
    """1 if ideal same-basis outcomes on ``state`` are opposite, else 0.

    Z-basis correlation is set by the x bit, X-basis by the z bit, and
    Y-basis by the parity of both (the singlet anticorrelates everywhere).
    """
    if basis == "Z":
        return state.x_bit
    if basis == "X":
        return state.z_bit
    if basis == "Y":
        return state.x_bit ^ state.z_bit ^ 1
    raise ValueError(f"unknown basis: {basis!r}")


def _check_fidelity(value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"fidelity out of range: {value}")
