"""Source-side controllers and the associated right-hand sides.

All functions are pure. Voltages are in volts, powers in watts, currents in
amperes; ``C`` and ``D`` are positive weights whose ratios set the sharing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .loadmodel import ZipLoadBank, load_current
from .netmodel import ConductanceBlocks

CONTROLLERS = ("consensus", "dapi", "constant_voltage")


@dataclass(frozen=True)
class ControllerParams:
    """Controller weights plus the communication Laplacian they act over.

    ``D`` is only needed by the DAPI controller.
    """

    C: np.ndarray
    Lc: np.ndarray
    D: Optional[np.ndarray] = None

    def __post_init__(self):
        C = np.array(self.C, dtype=float).reshape(-1)
        Lc = np.array(self.Lc, dtype=float)
        if np.any(C <= 0):
            raise ValueError("controller weights C must be positive")
        if Lc.shape != (len(C), len(C)):
            raise ValueError("Lc must be n_sources x n_sources")
        C.setflags(write=False)
        Lc.setflags(write=False)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Lc", Lc)
        if self.D is not None:
            D = np.array(self.D, dtype=float).reshape(-1)
            if D.shape != C.shape or np.any(D <= 0):
                raise ValueError("DAPI weights D must be positive, one per source")
            D.setflags(write=False)
            object.__setattr__(self, "D", D)


@dataclass(frozen=True)
class GridState:
    t: float
    Vs: np.ndarray
    Vl: np.ndarray
    p: Optional[np.ndarray] = None


def source_currents(blocks: ConductanceBlocks, Vs, Vl) -> np.ndarray:
    return blocks.Yss @ Vs + blocks.Ysl @ Vl


def source_powers(blocks: ConductanceBlocks, Vs, Vl) -> np.ndarray:
    """Power injected by each source, ``Vs * (Yss Vs + Ysl Vl)``."""
    Vs = np.asarray(Vs, dtype=float)
    return Vs * source_currents(blocks, Vs, np.asarray(Vl, dtype=float))


def consensus_log_rate(params: ControllerParams, Ps) -> np.ndarray:
    """``d(ln Vs)/dt = -C⁻¹ Lc C⁻¹ Ps``.

    The simulator integrates source voltages in these coordinates; the
    weighted sum ``1ᵀ C ln Vs`` is then a linear invariant.
    """
    Cinv = 1.0 / params.C
    return -Cinv * (params.Lc @ (Cinv * Ps))


def consensus_rhs(blocks: ConductanceBlocks, params: ControllerParams, Vs, Vl) -> np.ndarray:
    """Voltage-scaled power consensus, ``C dVs/dt = -[Vs] Lc C⁻¹ Ps``."""
    Vs = np.asarray(Vs, dtype=float)
    return Vs * consensus_log_rate(params, source_powers(blocks, Vs, Vl))


def dapi_rhs(blocks: ConductanceBlocks, params: ControllerParams, Vs, Vl, p):
    """Distributed averaging integral controller.

    Returns ``(dVs/dt, dp/dt)`` for::

        C dVs/dt = -Is + p
        D dp/dt  =  Is - p - Lc (C⁻¹ [Vs] p)
    """
    if params.D is None:
        raise ValueError("DAPI controller requires integral weights D")
    Vs = np.asarray(Vs, dtype=float)
    p = np.asarray(p, dtype=float)
    Is = source_currents(blocks, Vs, np.asarray(Vl, dtype=float))
    dVs = (p - Is) / params.C
    dp = (Is - p - params.Lc @ (Vs * p / params.C)) / params.D
    return dVs, dp


def constant_voltage_rhs(blocks: ConductanceBlocks, params: ControllerParams, Vs, Vl_bar):
    """Consensus dynamics with load buses held at fixed voltages ``Vl_bar``."""
    return consensus_rhs(blocks, params, Vs, Vl_bar)


def capacitive_load_rhs(blocks: ConductanceBlocks, bank: ZipLoadBank, Cl, Vs, Vl,
                        voltage_floor: float = 0.0) -> np.ndarray:
    """Load-bus capacitor dynamics ``Cl dVl/dt = I_l(Vl) - (Yls Vs + Yll Vl)``.

    The right-hand side equals minus the load block of the Bregman gradient,
    so it vanishes exactly on the algebraic constraint manifold.
    """
    Vl = np.asarray(Vl, dtype=float)
    net = blocks.Yls @ np.asarray(Vs, dtype=float) + blocks.Yll @ Vl
    return (load_current(bank, Vl, voltage_floor) - net) / np.asarray(Cl, dtype=float)
