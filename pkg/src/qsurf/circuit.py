"""Lumped transmon model: resonance, energy balance, loss budget.

The cross-section solver produces participation ratios; this module
turns them into qubit-level numbers.  At LC resonance the magnetic
field energy of the distributed mode is zero in the electrostatic
picture and the junction inductor carries all of it, so the mode
energy splits exactly W_0 = 2 W_E = 2 W_Q.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError


@dataclass(frozen=True)
class LumpedQubit:
    """Junction inductance plus shunt capacitance, driven at amplitude V.

    aspect_ratio is the junction's in-plane aspect ratio; it only
    documents how the lumped current maps onto the physical junction
    footprint and does not enter any formula here.
    """

    josephson_inductance_h: float
    capacitance_f: float
    voltage_v: float = 1.0
    aspect_ratio: float = 1.0

    def __post_init__(self):
        if self.josephson_inductance_h <= 0.0:
            raise DomainError("josephson inductance must be > 0")
        if self.capacitance_f <= 0.0:
            raise DomainError("capacitance must be > 0")


@dataclass(frozen=True)
class EnergyBudget:
    """Peak-phasor energies of the lumped mode (J)."""

    w_e: float
    w_h: float
    w_q: float
    w_0: float

    def __post_init__(self):
        total = self.w_h + self.w_q
        scale = max(abs(self.w_0), abs(self.w_e), 1e-300)
        if abs(self.w_0 - 2.0 * self.w_e) > 1e-12 * scale:
            raise DomainError("energy budget violates W_0 = 2 W_E")
        if abs(self.w_0 - 2.0 * total) > 1e-12 * scale:
            raise DomainError("energy budget violates W_0 = 2 (W_H + W_Q)")


@dataclass(frozen=True)
class LossBudget:
    """Per-channel quality factors and the resulting relaxation time."""

    contributions: tuple      # (label, epr, tan_delta, q_i)
    q_total: float
    t1_seconds: float
    frequency_hz: float

    def as_json_dict(self) -> dict:
        return {
            "frequency_hz": self.frequency_hz,
            "channels": [
                {
                    "label": label,
                    "epr": epr,
                    "tan_delta": tan,
                    "Q": (None if math.isinf(q) else q),
                }
                for label, epr, tan, q in self.contributions
            ],
            "Q_total": (None if math.isinf(self.q_total) else self.q_total),
            "T1_seconds": (
                None if math.isinf(self.t1_seconds) else self.t1_seconds),
        }


def resonant_frequency(qubit: LumpedQubit) -> float:
    """f = 1 / (2 pi sqrt(L_J C))."""
    return 1.0 / (2.0 * math.pi * math.sqrt(
        qubit.josephson_inductance_h * qubit.capacitance_f))


def energy_balance(qubit: LumpedQubit) -> EnergyBudget:
    """Peak energies at resonance.

    W_E = 1/4 C V^2 in the capacitor; the junction current amplitude
    I = V sqrt(C/L_J) makes W_Q = 1/4 L_J I^2 equal to W_E, and the
    distributed magnetic energy W_H is zero in the electrostatic
    approximation, so W_0 = 2 W_E closes the balance exactly.
    """
    c, v = qubit.capacitance_f, qubit.voltage_v
    w_e = 0.25 * c * v * v
    # 1/4 L_J (V sqrt(C/L_J))^2 collapses to 1/4 C V^2; evaluating the
    # collapsed form keeps the resonance equality W_Q = W_E exact.
    w_q = w_e
    return EnergyBudget(w_e=w_e, w_h=0.0, w_q=w_q, w_0=2.0 * w_e)


def loss_budget(eprs, frequency: float) -> LossBudget:
    """Combine loss channels: 1/Q = sum epr_i tan_i, T1 = Q / (2 pi f).

    The channel sum uses exact compensated accumulation, so the result
    does not depend on the order the channels are listed in.
    """
    if frequency <= 0.0:
        raise DomainError("frequency must be > 0")
    contributions = []
    inverse_terms = []
    for label, epr, tan in eprs:
        if epr <= 0.0:
            raise DomainError(f"channel {label!r} needs epr > 0")
        if tan < 0.0:
            raise DomainError(f"channel {label!r} needs tan_delta >= 0")
        q_i = 1.0 / (epr * tan) if tan > 0.0 else math.inf
        contributions.append((str(label), float(epr), float(tan), q_i))
        inverse_terms.append(epr * tan)
    inv_q = math.fsum(inverse_terms)
    q_total = 1.0 / inv_q if inv_q > 0.0 else math.inf
    t1 = q_total / (2.0 * math.pi * frequency)
    return LossBudget(
        contributions=tuple(contributions),
        q_total=q_total,
        t1_seconds=t1,
        frequency_hz=frequency,
    )
