"""ZIP loads and the algebraic load-flow constraint.

Load current convention: a consuming load draws a *negative* injection,
``I_l(V) = I* - Y* V + P*/V`` with ``I* <= 0``, ``Y* >= 0``, ``P* <= 0``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dgesv as _dgesv

from .errors import AlgebraicSolveError, VoltageCollapseError
from .netmodel import ConductanceBlocks

_min = np.minimum.reduce

NEWTON_TOL = 1e-10
MAX_NEWTON_ITER = 50


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ZipLoadBank:
    Istar: np.ndarray
    Ystar: np.ndarray
    Pstar: np.ndarray

    def __post_init__(self):
        for name in ("Istar", "Ystar", "Pstar"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = len(self.Istar)
        if len(self.Ystar) != n or len(self.Pstar) != n:
            raise ValueError("Istar, Ystar and Pstar must have equal length")
        if np.any(self.Istar > 0):
            raise ValueError("constant-current loads must satisfy Istar <= 0")
        if np.any(self.Ystar < 0):
            raise ValueError("shunt conductances must satisfy Ystar >= 0")
        if np.any(self.Pstar > 0):
            raise ValueError("constant-power loads must satisfy Pstar <= 0")

    @classmethod
    def _unchecked(cls, Istar, Ystar, Pstar) -> "ZipLoadBank":
        # for values valid by construction, e.g. convex combinations of valid banks
        obj = object.__new__(cls)
        for name, v in (("Istar", Istar), ("Ystar", Ystar), ("Pstar", Pstar)):
            v.setflags(write=False)
            object.__setattr__(obj, name, v)
        return obj

    @classmethod
    def zeros(cls, n: int) -> "ZipLoadBank":
        z = np.zeros(n)
        return cls(z, z, z)

    @property
    def n_loads(self) -> int:
        return len(self.Istar)

    @property
    def is_zi(self) -> bool:
        return not np.any(self.Pstar)

    def without_power(self) -> "ZipLoadBank":
        return ZipLoadBank(self.Istar, self.Ystar, np.zeros(self.n_loads))

    def scaled_power(self, factor: float) -> "ZipLoadBank":
        return ZipLoadBank(self.Istar, self.Ystar, factor * self.Pstar)


def _check_positive(Vl, voltage_floor):
    Vl = np.asarray(Vl, dtype=float)
    bad = np.flatnonzero(~(Vl > voltage_floor))
    if bad.size:
        i = int(bad[0])
        raise VoltageCollapseError(
            f"load voltage {Vl[i]!r} at load {i} is at or below the floor {voltage_floor}",
            bus=i,
        )
    return Vl


def load_current(bank: ZipLoadBank, Vl, voltage_floor: float = 0.0) -> np.ndarray:
    Vl = _check_positive(Vl, voltage_floor)
    return bank.Istar - bank.Ystar * Vl + bank.Pstar / Vl


def load_current_slope(bank: ZipLoadBank, Vl, voltage_floor: float = 0.0) -> np.ndarray:
    """Diagonal of :func:`load_current_jacobian` as a vector."""
    Vl = _check_positive(Vl, voltage_floor)
    return -bank.Ystar - bank.Pstar / Vl**2


def load_current_jacobian(bank: ZipLoadBank, Vl, voltage_floor: float = 0.0) -> np.ndarray:
    return np.diag(load_current_slope(bank, Vl, voltage_floor))


def current_mismatch(blocks: ConductanceBlocks, bank: ZipLoadBank, Vs, Vl) -> np.ndarray:
    """Current balance at the loads, ``I_l(Vl) - Yll Vl - Yls Vs``."""
    return load_current(bank, Vl) - blocks.Yll @ Vl - blocks.Yls @ Vs


def zi_load_voltages(blocks: ConductanceBlocks, bank: ZipLoadBank, Vs) -> np.ndarray:
    """Closed-form load voltages ``(Yll + Y*)⁻¹ (I* - Yls Vs)``, ignoring ``Pstar``."""
    A = blocks.Yll + np.diag(bank.Ystar)
    return np.linalg.solve(A, bank.Istar - blocks.Yls @ np.asarray(Vs, dtype=float))


class LoadFlowSolver:
    """Load-flow solver for one network and load bank.

    Caches ``Yll + diag(Y*)`` so repeated solves (one per integrator stage)
    avoid rebuilding it. See :func:`solve_load_voltages` for the algorithm.
    """

    def __init__(self, blocks: ConductanceBlocks, bank: ZipLoadBank, *, tol: float = NEWTON_TOL,
                 max_iter: int = MAX_NEWTON_ITER, voltage_floor: float = 0.0):
        self.blocks = blocks
        self.tol = tol
        self.max_iter = max_iter
        self.voltage_floor = voltage_floor
        self.A = np.array(blocks.Yll + np.diag(bank.Ystar), dtype=float)
        self._n = bank.n_loads
        self._Yls = blocks.Yls
        self._set_bank(bank)

    def _set_bank(self, bank):
        self.bank = bank
        self._Istar = bank.Istar
        self._Pstar = bank.Pstar
        self._zi = bank.is_zi

    def for_bank(self, bank: ZipLoadBank) -> "LoadFlowSolver":
        """Solver for another bank of the same size on the same network."""
        new = copy.copy(self)
        new._set_bank(bank)
        if not np.array_equal(bank.Ystar, self.bank.Ystar):
            new.A = self.blocks.Yll + np.diag(bank.Ystar)
        return new

    def _line_search(self, base, V, dV, fsq):
        """Halve the Newton step until it stays above the floor and reduces the residual."""
        A, P, floor = self.A, self._Pstar, self.voltage_floor
        lam = 1.0
        while lam >= 1e-12:
            Vn = V + lam * dV
            if _min(Vn) > floor:
                Fn = base - A @ Vn + P / Vn
                fn = Fn @ Fn
                if fn < fsq:
                    return Vn, Fn, fn
            lam *= 0.5
        raise AlgebraicSolveError("load-flow line search stalled (infeasible load flow?)",
                                  residual=math.sqrt(fsq))

    def closed_form(self, Vs) -> np.ndarray:
        """ZI solution with the constant-power part ignored."""
        return _lu_solve(self.A, self._Istar - self._Yls @ Vs)

    def solve(self, Vs, guess=None) -> np.ndarray:
        n = self._n
        if n == 0:
            return np.zeros(0)
        Vs = np.asarray(Vs, dtype=float)
        floor = self.voltage_floor
        base = self._Istar - self._Yls @ Vs
        A = self.A
        if self._zi:
            return _check_positive(_lu_solve(A, base), floor)

        P = self._Pstar
        V = _lu_solve(A, base) if guess is None else np.asarray(guess, dtype=float)
        if not _min(V) > floor:
            _check_positive(V, floor)
        F = base - A @ V + P / V
        fsq = F @ F
        tol = self.tol
        # squared 2-norm thresholds; the looser one also needs the max-norm test
        tolsq = tol * tol
        loosesq = tolsq * n
        for _ in range(self.max_iter):
            if fsq < tolsq or (fsq < loosesq and np.abs(F).max() < tol):
                return V
            J = A.copy()
            J.flat[:: n + 1] += P / (V * V)
            lu, piv, dV, info = _dgesv(J, F)
            if info > 0:
                raise AlgebraicSolveError("singular load-flow Jacobian", residual=math.sqrt(fsq))
            Vn = V + dV
            if _min(Vn) > floor:
                Fn = base - A @ Vn + P / Vn
                fn = Fn @ Fn
                if fn < fsq:
                    V, F, fsq = Vn, Fn, fn
                    continue
            V, F, fsq = self._line_search(base, V, dV, fsq)
        if np.abs(F).max() < self.tol:
            return V
        raise AlgebraicSolveError(
            f"load-flow Newton did not converge in {self.max_iter} iterations", residual=math.sqrt(fsq)
        )


def _lu_solve(A, b):
    lu, piv, x, info = _dgesv(A, b)
    if info > 0:
        return None
    return x


def solve_load_voltages(
    blocks: ConductanceBlocks,
    bank: ZipLoadBank,
    Vs,
    guess=None,
    *,
    tol: float = NEWTON_TOL,
    max_iter: int = MAX_NEWTON_ITER,
    voltage_floor: float = 0.0,
) -> np.ndarray:
    """Solve the load current balance for ``Vl`` given the source voltages.

    ZI banks use the closed form ``(Yll + Y*)⁻¹ (I* - Yls Vs)``. With
    constant-power components a damped Newton iteration is run from
    ``guess`` (default: that closed form with ``P*`` dropped); the step is
    halved until the iterate stays above ``voltage_floor`` and the residual
    2-norm decreases. Converged when ``max |I_zip| < tol``.

    Raises
    ------
    AlgebraicSolveError
        No convergence within ``max_iter`` or the line search stalls.
    """
    solver = LoadFlowSolver(blocks, bank, tol=tol, max_iter=max_iter, voltage_floor=voltage_floor)
    return solver.solve(Vs, guess)
